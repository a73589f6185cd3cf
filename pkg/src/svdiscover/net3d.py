"""VoxNet-style 3D CNN embedding network with hand-written reverse mode.

Activations are channels-last numpy arrays ``(batch, x, y, z, channels)``.
Each layer's forward returns its output plus whatever the backward pass
needs; :func:`forward` records those on a :class:`Tape` and
:func:`backward` replays the tape in reverse, so gradients are exact.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ConfigurationError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# architecture and parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Architecture:
    side: int = 32
    conv1_filters: int = 32
    conv1_kernel: int = 5
    conv1_stride: int = 2
    conv2_filters: int = 32
    conv2_kernel: int = 3
    pool: int = 2
    fc_units: int = 128
    embed_dim: int = 64
    leak: float = 0.1
    # DVC head: two extra fully connected layers then a classifier; 0 classes = no head
    dvc_units: int = 128
    n_classes: int = 0

    @property
    def conv1_out(self) -> int:
        return (self.side - self.conv1_kernel) // self.conv1_stride + 1

    @property
    def conv2_out(self) -> int:
        return self.conv1_out - self.conv2_kernel + 1

    @property
    def pool_out(self) -> int:
        return self.conv2_out // self.pool

    @property
    def flat_dim(self) -> int:
        return self.pool_out ** 3 * self.conv2_filters

    def validate(self) -> None:
        if self.conv1_out < 1:
            raise ConfigurationError(f"conv1: kernel {self.conv1_kernel} does not fit a side-{self.side} grid")
        if self.conv2_out < 1:
            raise ConfigurationError(f"conv2: kernel {self.conv2_kernel} does not fit a {self.conv1_out}^3 input")
        if self.pool_out < 1:
            raise ConfigurationError(f"maxpool: window {self.pool} exceeds its {self.conv2_out}^3 input")
        if min(self.conv1_filters, self.conv2_filters, self.fc_units, self.embed_dim) < 1:
            raise ConfigurationError("layer widths must be positive")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        self.validate()
        k1, k2 = self.conv1_kernel, self.conv2_kernel
        out = {
            "conv1_w": (self.conv1_filters, 1, k1, k1, k1),
            "conv1_b": (self.conv1_filters,),
            "conv2_w": (self.conv2_filters, self.conv1_filters, k2, k2, k2),
            "conv2_b": (self.conv2_filters,),
            "fc1_w": (self.flat_dim, self.fc_units),
            "fc1_b": (self.fc_units,),
            "proj_w": (self.fc_units, self.embed_dim),
        }
        if self.n_classes:
            out.update(
                fc2_w=(self.fc_units, self.dvc_units),
                fc2_b=(self.dvc_units,),
                fc3_w=(self.dvc_units, self.dvc_units),
                fc3_b=(self.dvc_units,),
                cls_w=(self.dvc_units, self.n_classes),
                cls_b=(self.n_classes,),
            )
        return out


@dataclass
class NetworkParams:
    """Learnable tensors keyed by layer name, in manifest order."""

    arch: Architecture
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> "NetworkParams":
        return NetworkParams(self.arch, {k: np.zeros_like(v) for k, v in self.tensors.items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def equal(self, other: "NetworkParams") -> bool:
        return (
            self.arch == other.arch
            and list(self.tensors) == list(other.tensors)
            and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)
        )

    def check_shapes(self) -> None:
        want = self.arch.shapes()
        if list(want) != list(self.tensors):
            raise ConfigurationError(f"parameter names {list(self.tensors)} do not match {list(want)}")
        for name, shape in want.items():
            if self.tensors[name].shape != shape:
                raise ConfigurationError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")


Gradients = NetworkParams


def _fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 5:
        receptive = int(np.prod(shape[2:]))
        return shape[1] * receptive, shape[0] * receptive
    return shape[0], shape[1]


def init_params(arch: Architecture = Architecture(), seed: int = 0, dtype=np.float32) -> NetworkParams:
    """Glorot-uniform weights, zero biases, from a seeded generator."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.shapes().items():
        if name.endswith("_b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in, fan_out = _fans(name, shape)
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return NetworkParams(arch, tensors)


def with_dvc_head(params: NetworkParams, n_classes: int, seed: int = 0) -> NetworkParams:
    """Copy of ``params`` extended with freshly initialized DVC layers."""
    if n_classes < 2:
        raise ConfigurationError("a classification head needs at least 2 classes")
    arch = Architecture(**{**asdict(params.arch), "n_classes": n_classes})
    fresh = init_params(arch, seed, params.dtype)
    for name, value in params.items():
        if name in fresh.tensors and fresh.tensors[name].shape == value.shape:
            fresh.tensors[name] = value.copy()
    return fresh


def without_dvc_head(params: NetworkParams) -> NetworkParams:
    arch = Architecture(**{**asdict(params.arch), "n_classes": 0})
    return NetworkParams(arch, {k: params[k].copy() for k in arch.shapes()})


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _offsets(k: int):
    return [(i, j, m) for i in range(k) for j in range(k) for m in range(k)]


def _shifted(x: np.ndarray, i: int, j: int, m: int, o: int, stride: int) -> np.ndarray:
    span = stride * (o - 1) + 1
    return x[:, i:i + span:stride, j:j + span:stride, m:m + span:stride, :]


def _im2col_single_channel(x: np.ndarray, k: int, stride: int, o: int) -> np.ndarray:
    win = sliding_window_view(x[..., 0], (k, k, k), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
    return win[:, :o, :o, :o].reshape(x.shape[0] * o ** 3, k ** 3)


def conv3d_forward(x, w, bias, stride):
    """Valid 3D convolution (cross-correlation) of channels-last ``x``.

    Single-channel inputs go through a patch matrix; wider inputs accumulate
    one matrix product per kernel offset, which avoids materializing
    ``k^3 * C`` columns per output cell. Returns ``(y, cache)``.
    """
    f, c, k = w.shape[0], w.shape[1], w.shape[2]
    if x.shape[4] != c:
        raise ConfigurationError(f"conv expects {c} input channels, got {x.shape[4]}")
    b, o = x.shape[0], (x.shape[1] - k) // stride + 1
    if c == 1:
        cols = _im2col_single_channel(x, k, stride, o)
        y = cols @ w.reshape(f, k ** 3).T + bias
        return y.reshape(b, o, o, o, f), cols
    wk = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0))  # (k, k, k, C, F)
    y = np.zeros((b, o, o, o, f), dtype=x.dtype)
    for i, j, m in _offsets(k):
        y += _shifted(x, i, j, m, o, stride) @ wk[i, j, m]
    y += bias
    return y, x


def conv3d_backward(dy, cache, x_shape, w, stride, need_dx=True):
    f, c, k = w.shape[0], w.shape[1], w.shape[2]
    b, o = dy.shape[0], dy.shape[1]
    dy2 = dy.reshape(b * o ** 3, f)
    db = dy2.sum(axis=0)
    if c == 1:
        dw = (dy2.T @ cache).reshape(w.shape)
        dx = None
        if need_dx:
            dcols = (dy2 @ w.reshape(f, k ** 3)).reshape(b, o, o, o, k, k, k)
            dx = np.zeros(x_shape, dtype=dy.dtype)
            for i, j, m in _offsets(k):
                _shifted(dx, i, j, m, o, stride)[..., 0] += dcols[..., i, j, m]
        return dx, dw, db
    x = cache
    wk = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1))  # (k, k, k, F, C)
    dwk = np.empty((k, k, k, c, f), dtype=w.dtype)
    dx = np.zeros(x_shape, dtype=dy.dtype) if need_dx else None
    for i, j, m in _offsets(k):
        patch = np.ascontiguousarray(_shifted(x, i, j, m, o, stride)).reshape(-1, c)
        dwk[i, j, m] = patch.T @ dy2
        if need_dx:
            _shifted(dx, i, j, m, o, stride)[...] += dy @ wk[i, j, m]
    return dx, np.ascontiguousarray(dwk.transpose(4, 3, 0, 1, 2)), db


def leaky_forward(x, leak):
    # max(x, leak*x) is the leaky ReLU for 0 <= leak < 1
    return np.maximum(x, leak * x)


def leaky_backward(dy, x, leak):
    return np.where(x > 0, dy, leak * dy)


def maxpool_forward(x, p):
    b, s, c = x.shape[0], x.shape[1], x.shape[4]
    o = s // p
    xc = x[:, : o * p, : o * p, : o * p, :]
    win = xc.reshape(b, o, p, o, p, o, p, c).transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(b, o, o, o, c, p ** 3)
    arg = win.argmax(axis=-1)  # first maximum wins ties
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return y, arg


def maxpool_backward(dy, arg, x_shape, p):
    b, o, c = dy.shape[0], dy.shape[1], dy.shape[4]
    dwin = np.zeros((b, o, o, o, c, p ** 3), dtype=dy.dtype)
    np.put_along_axis(dwin, arg[..., None], dy[..., None], axis=-1)
    dxc = dwin.reshape(b, o, o, o, c, p, p, p).transpose(0, 1, 5, 2, 6, 3, 7, 4).reshape(b, o * p, o * p, o * p, c)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, : o * p, : o * p, : o * p, :] = dxc
    return dx


# ---------------------------------------------------------------------------
# forward / backward over a tape
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Activations cached by :func:`forward` for one batch."""

    head: str
    batch: int
    entries: dict = field(default_factory=dict)


def _as_batch(params: NetworkParams, grids) -> np.ndarray:
    x = np.asarray(grids)
    side = params.arch.side
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (side, side, side):
        raise ConfigurationError(f"input: expected grids of shape ({side}, {side}, {side}), got {x.shape[-3:]}")
    return x.astype(params.dtype, copy=False)[..., None]


def forward(params: NetworkParams, grids, head: str = "embed", keep: bool = True):
    """Run a batch of occupancy grids through the network.

    ``head`` selects the output: ``"embed"`` (projection W applied to fc1),
    ``"features"`` (DVC fc3 responses) or ``"logits"`` (DVC classifier).
    Returns ``(output, tape)``; the tape is None when ``keep`` is False.
    """
    arch = params.arch
    if head != "embed" and not arch.n_classes:
        raise ConfigurationError(f"head {head!r} needs a DVC classification head")
    if head not in ("embed", "features", "logits"):
        raise ConfigurationError(f"unknown head {head!r}")
    x = _as_batch(params, grids)
    tape = Tape(head, x.shape[0]) if keep else None
    a1, cache1 = conv3d_forward(x, params["conv1_w"], params["conv1_b"], arch.conv1_stride)
    h1 = leaky_forward(a1, arch.leak)
    a2, cache2 = conv3d_forward(h1, params["conv2_w"], params["conv2_b"], 1)
    h2 = leaky_forward(a2, arch.leak)
    pooled, arg = maxpool_forward(h2, arch.pool)
    flat = pooled.reshape(x.shape[0], -1)
    a3 = flat @ params["fc1_w"] + params["fc1_b"]
    h3 = leaky_forward(a3, arch.leak)
    if keep:
        tape.entries.update(
            cache1=cache1, x_shape=x.shape, a1=a1, cache2=cache2, h1_shape=h1.shape, a2=a2,
            arg=arg, h2_shape=h2.shape, pooled_shape=pooled.shape, flat=flat, a3=a3, h3=h3,
        )
    if head == "embed":
        return h3 @ params["proj_w"], tape
    a4 = h3 @ params["fc2_w"] + params["fc2_b"]
    h4 = leaky_forward(a4, arch.leak)
    a5 = h4 @ params["fc3_w"] + params["fc3_b"]
    h5 = leaky_forward(a5, arch.leak)
    if keep:
        tape.entries.update(a4=a4, h4=h4, a5=a5, h5=h5)
    if head == "features":
        return h5, tape
    return h5 @ params["cls_w"] + params["cls_b"], tape


def backward(params: NetworkParams, tape: Optional[Tape], upstream) -> Gradients:
    """Gradients of ``sum(output * upstream)`` w.r.t. every parameter.

    Batch contributions are summed by the matrix products in row order.
    """
    if tape is None or not tape.entries:
        raise UsageError("backward needs the tape of a matching forward(..., keep=True) call")
    arch = params.arch
    e = tape.entries
    g = np.asarray(upstream, dtype=params.dtype)
    if g.ndim == 1:
        g = g[None]
    if g.shape[0] != tape.batch:
        raise UsageError(f"upstream batch {g.shape[0]} does not match taped batch {tape.batch}")
    grads = params.zeros_like()
    t = grads.tensors
    if tape.head == "embed":
        t["proj_w"] = e["h3"].T @ g
        dh3 = g @ params["proj_w"].T
    else:
        if tape.head == "logits":
            t["cls_w"] = e["h5"].T @ g
            t["cls_b"] = g.sum(axis=0)
            dh5 = g @ params["cls_w"].T
        else:
            dh5 = g
        da5 = leaky_backward(dh5, e["a5"], arch.leak)
        t["fc3_w"] = e["h4"].T @ da5
        t["fc3_b"] = da5.sum(axis=0)
        dh4 = da5 @ params["fc3_w"].T
        da4 = leaky_backward(dh4, e["a4"], arch.leak)
        t["fc2_w"] = e["h3"].T @ da4
        t["fc2_b"] = da4.sum(axis=0)
        dh3 = da4 @ params["fc2_w"].T
    da3 = leaky_backward(dh3, e["a3"], arch.leak)
    t["fc1_w"] = e["flat"].T @ da3
    t["fc1_b"] = da3.sum(axis=0)
    dpooled = (da3 @ params["fc1_w"].T).reshape(e["pooled_shape"])
    dh2 = maxpool_backward(dpooled, e["arg"], e["h2_shape"], arch.pool)
    da2 = leaky_backward(dh2, e["a2"], arch.leak)
    dh1, t["conv2_w"], t["conv2_b"] = conv3d_backward(da2, e["cache2"], e["h1_shape"], params["conv2_w"], 1)
    da1 = leaky_backward(dh1, e["a1"], arch.leak)
    _, t["conv1_w"], t["conv1_b"] = conv3d_backward(
        da1, e["cache1"], e["x_shape"], params["conv1_w"], arch.conv1_stride, need_dx=False
    )
    for name, value in t.items():
        t[name] = np.asarray(value, dtype=params.dtype)
    return grads


def forward_embed(params: NetworkParams, grid) -> np.ndarray:
    """Embedding vector of a single occupancy grid."""
    out, _ = forward(params, grid, keep=False)
    return out[0]


def embed_batch(params: NetworkParams, grids, head: str = "embed", chunk: int = 32) -> np.ndarray:
    """Outputs for many grids, evaluated in chunks to bound memory."""
    grids = np.asarray(grids)
    if grids.shape[0] == 0:
        dim = params.arch.embed_dim if head == "embed" else params.arch.dvc_units
        return np.zeros((0, dim), dtype=params.dtype)
    parts = [forward(params, grids[i:i + chunk], head, keep=False)[0] for i in range(0, grids.shape[0], chunk)]
    return np.concatenate(parts)


def accumulate(total: Optional[Gradients], grads: Gradients) -> Gradients:
    if total is None:
        return grads
    for name in total:
        total.tensors[name] += grads.tensors[name]
    return total


def all_finite(params: NetworkParams) -> bool:
    return all(np.all(np.isfinite(v)) for v in params.tensors.values())


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def sgd_step(
    params: NetworkParams,
    grads: Gradients,
    learning_rate: float,
    momentum: float = 0.0,
    velocity: Optional[Gradients] = None,
) -> tuple[NetworkParams, Gradients]:
    """Momentum SGD: ``v <- momentum*v - lr*g``, ``theta <- theta + v``."""
    if not learning_rate > 0:
        raise ValueError(f"learning_rate must be positive, got {learning_rate}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    velocity = params.zeros_like() if velocity is None else velocity
    new_params = {}
    new_velocity = {}
    for name, theta in params.items():
        g, v = grads.tensors.get(name), velocity.tensors.get(name)
        if g is None or v is None or g.shape != theta.shape or v.shape != theta.shape:
            raise ConfigurationError(f"{name}: gradient/velocity shape does not match parameter {theta.shape}")
        v_new = (momentum * v - learning_rate * g).astype(theta.dtype)
        new_velocity[name] = v_new
        new_params[name] = theta + v_new
    return NetworkParams(params.arch, new_params), NetworkParams(params.arch, new_velocity)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"SVDCKPT\n"
FORMAT_VERSION = 1


def save_checkpoint(params: NetworkParams, path) -> None:
    """Magic, version, JSON architecture, shape manifest, then float32 LE payload."""
    header = io.StringIO()
    header.write(f"version {FORMAT_VERSION}\n")
    header.write("arch " + json.dumps(asdict(params.arch), sort_keys=True) + "\n")
    for name, value in params.items():
        header.write(f"tensor {name} " + " ".join(str(d) for d in value.shape) + "\n")
    header.write("end\n")
    payload = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in params.tensors.values())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.getvalue().encode("ascii"))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)


def load_checkpoint(path, expected: Optional[Architecture] = None) -> NetworkParams:
    """Read a checkpoint; ``expected`` enforces a matching shape manifest."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointVersionError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    lines = []
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated header")
        line = data[pos:end].decode("ascii", errors="replace")
        pos = end + 1
        if line == "end":
            break
        lines.append(line)
    if not lines or lines[0] != f"version {FORMAT_VERSION}":
        raise CheckpointVersionError(f"{path}: unsupported format version line {lines[0] if lines else ''!r}")
    try:
        arch = Architecture(**json.loads(lines[1].removeprefix("arch ")))
    except (IndexError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable architecture record") from exc
    manifest = []
    for line in lines[2:]:
        parts = line.split()
        if len(parts) < 2 or parts[0] != "tensor":
            raise CheckpointError(f"{path}: bad manifest line {line!r}")
        manifest.append((parts[1], tuple(int(d) for d in parts[2:])))
    if list(arch.shapes().items()) != manifest:
        raise CheckpointShapeError(f"{path}: shape manifest disagrees with its architecture")
    if expected is not None and expected.shapes() != arch.shapes():
        diff = [n for n in set(expected.shapes()) | set(arch.shapes()) if expected.shapes().get(n) != arch.shapes().get(n)]
        raise CheckpointShapeError(f"{path}: checkpoint shapes differ from the configured network at {sorted(diff)}")
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated before payload")
    (n_bytes,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    want = 4 * sum(int(np.prod(s)) for _, s in manifest)
    if n_bytes != want or len(data) - pos != want:
        raise CheckpointError(f"{path}: truncated payload ({len(data) - pos} of {want} bytes)")
    tensors = {}
    for name, shape in manifest:
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(shape)
        pos += 4 * count
    return NetworkParams(arch, tensors)
