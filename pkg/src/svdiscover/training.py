"""Siamese hinge-loss training (VDML) and the classification baseline (DVC)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import net3d
from .net3d import NetworkParams
from .pairs import PairSet

PLATEAU_TOL = 1e-5
PLATEAU_WINDOW = 5


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, message: str, dump_path: Optional[Path] = None):
        super().__init__(message if dump_path is None else f"{message}; last finite state saved to {dump_path}")
        self.dump_path = dump_path


@dataclass(frozen=True)
class LossConfig:
    b: float = 0.0
    m: float = 1.0

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError(f"margin m must be positive, got {self.m}")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 32

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def pair_loss(e_i, e_j, y: int, cfg: LossConfig = LossConfig()):
    """Hinge ``max(0, b - y(m - d^2))`` and its subgradients w.r.t. both embeddings."""
    e_i, e_j = np.asarray(e_i, dtype=np.float64), np.asarray(e_j, dtype=np.float64)
    if e_i.shape != e_j.shape:
        raise ValueError(f"embedding shapes differ: {e_i.shape} vs {e_j.shape}")
    diff = e_i - e_j
    d2 = float(diff @ diff)
    z = cfg.b - y * (cfg.m - d2)
    if z > 0:
        g = 2.0 * y * diff
        return z, g, -g
    return 0.0, np.zeros_like(e_i), np.zeros_like(e_j)


def pair_losses(E_i: np.ndarray, E_j: np.ndarray, y: np.ndarray, cfg: LossConfig):
    """Row-wise :func:`pair_loss`: returns (losses, d2, dL/dE_i); dL/dE_j is the negation."""
    diff = E_i - E_j
    d2 = (diff * diff).sum(axis=1)
    z = cfg.b - y * (cfg.m - d2)
    active = z > 0
    grad = np.where(active[:, None], 2.0 * y[:, None] * diff, 0.0)
    return np.where(active, z, 0.0), d2, grad


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    mean_loss: list[float] = field(default_factory=list)
    mean_pos_d2: list[float] = field(default_factory=list)
    mean_neg_d2: list[float] = field(default_factory=list)
    stop_reason: str = ""

    @property
    def epochs(self) -> int:
        return len(self.mean_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "mean_pos_d2", "mean_neg_d2"])
        for e in range(self.epochs):
            w.writerow([e + 1, repr(self.mean_loss[e]), repr(self.mean_pos_d2[e]), repr(self.mean_neg_d2[e])])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "TrainReport":
        rep = cls()
        rows = list(csv.DictReader(io.StringIO(Path(path).read_text())))
        for row in rows:
            rep.mean_loss.append(float(row["mean_loss"]))
            rep.mean_pos_d2.append(float(row["mean_pos_d2"]))
            rep.mean_neg_d2.append(float(row["mean_neg_d2"]))
        return rep


def _plateaued(history: Sequence[float]) -> bool:
    if len(history) <= PLATEAU_WINDOW:
        return False
    return history[-1 - PLATEAU_WINDOW] - history[-1] < PLATEAU_TOL


def _dump(params: NetworkParams, dump_dir) -> Optional[Path]:
    if dump_dir is None:
        return None
    path = Path(dump_dir) / "diverged.ckpt"
    net3d.save_checkpoint(params, path)
    return path


def _guard(params: NetworkParams, last_good: NetworkParams, what: str, dump_dir) -> None:
    if not net3d.all_finite(params):
        raise DivergenceError(f"non-finite {what}", _dump(last_good, dump_dir))


# ---------------------------------------------------------------------------
# VDML
# ---------------------------------------------------------------------------


class GridBank:
    """Occupancy grids addressed by ``(scale index, supervoxel id)`` keys."""

    def __init__(self, keys: Sequence, grids: np.ndarray):
        self.keys = [tuple(k) for k in keys]
        self.grids = np.asarray(grids)
        if len(self.keys) != len(self.grids):
            raise ValueError("one grid per key required")
        self.index = {k: i for i, k in enumerate(self.keys)}
        if len(self.index) != len(self.keys):
            raise ValueError("duplicate grid keys")

    def __len__(self) -> int:
        return len(self.keys)

    def rows(self, keys) -> np.ndarray:
        try:
            return np.array([self.index[tuple(k)] for k in keys], dtype=np.int64)
        except KeyError as exc:
            raise TrainingError(f"no grid rendered for supervoxel {exc.args[0]}") from None


def pair_arrays(pairs: PairSet, bank: GridBank) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row indices into ``bank`` for both pair members, plus labels."""
    allp = pairs.all_pairs()
    a = bank.rows([p.a for p in allp])
    b = bank.rows([p.b for p in allp])
    y = np.array([p.y for p in allp], dtype=np.float64)
    return a, b, y


def _vdml_batch(params, grids, ia, ib, y, cfg):
    rows, inv = np.unique(np.concatenate([ia, ib]), return_inverse=True)
    out, tape = net3d.forward(params, grids[rows])
    emb = out.astype(np.float64)
    n = len(ia)
    losses, d2, g = pair_losses(emb[inv[:n]], emb[inv[n:]], y, cfg)
    upstream = np.zeros_like(emb)
    # index-ordered accumulation: both streams share parameters, so gradients sum
    np.add.at(upstream, inv[:n], g / n)
    np.add.at(upstream, inv[n:], -g / n)
    return losses, d2, net3d.backward(params, tape, upstream)


def train_vdml(
    params: NetworkParams,
    pairs: PairSet,
    bank: GridBank,
    cfg: LossConfig = LossConfig(),
    opt: OptimizerConfig = OptimizerConfig(),
    rng_seed: int = 0,
    epochs: Optional[int] = None,
    dump_dir=None,
    log=None,
) -> tuple[NetworkParams, TrainReport]:
    """Siamese training with tied weights; one SGD step per batch of pairs.

    Epoch statistics are accumulated from the forward passes made during
    the epoch. Training stops after ``epochs`` or when the mean epoch loss
    improved by less than 1e-5 over the last 5 epochs.
    """
    epochs = opt.epochs if epochs is None else epochs
    if epochs < 1:
        raise TrainingError("epochs must be >= 1; nothing to report")
    if len(pairs) == 0:
        raise TrainingError("no training pairs")
    ia, ib, y = pair_arrays(pairs, bank)
    rng = np.random.default_rng(rng_seed)
    report = TrainReport()
    velocity = None
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        loss_sum = pos_sum = neg_sum = 0.0
        for start in range(0, len(order), opt.batch_size):
            sel = order[start:start + opt.batch_size]
            losses, d2, grads = _vdml_batch(params, bank.grids, ia[sel], ib[sel], y[sel], cfg)
            if not np.all(np.isfinite(losses)):
                raise DivergenceError("non-finite loss", _dump(params, dump_dir))
            loss_sum += losses.sum()
            pos_sum += d2[y[sel] > 0].sum()
            neg_sum += d2[y[sel] < 0].sum()
            last_good = params
            params, velocity = net3d.sgd_step(params, grads, opt.learning_rate, opt.momentum, velocity)
            _guard(params, last_good, "parameters", dump_dir)
        n_pos, n_neg = int((y > 0).sum()), int((y < 0).sum())
        report.mean_loss.append(loss_sum / len(y))
        report.mean_pos_d2.append(pos_sum / n_pos if n_pos else float("nan"))
        report.mean_neg_d2.append(neg_sum / n_neg if n_neg else float("nan"))
        if log is not None:
            log(f"epoch {epoch + 1}: loss {report.mean_loss[-1]:.6f} pos_d2 {report.mean_pos_d2[-1]:.4f} neg_d2 {report.mean_neg_d2[-1]:.4f}")
        if _plateaued(report.mean_loss):
            report.stop_reason = "plateau"
            return params, report
    report.stop_reason = "max_epochs"
    return params, report


def evaluate_pairs(params: NetworkParams, pairs: PairSet, bank: GridBank, cfg: LossConfig = LossConfig()):
    """(mean loss, mean positive d^2, mean negative d^2) under fixed parameters."""
    ia, ib, y = pair_arrays(pairs, bank)
    rows, inv = np.unique(np.concatenate([ia, ib]), return_inverse=True)
    emb = net3d.embed_batch(params, bank.grids[rows]).astype(np.float64)
    losses, d2, _ = pair_losses(emb[inv[: len(y)]], emb[inv[len(y):]], y, cfg)
    return losses.mean(), d2[y > 0].mean(), d2[y < 0].mean()


# ---------------------------------------------------------------------------
# DVC baseline
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: np.ndarray, classes: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(classes)
    loss = -log_p[np.arange(n), classes].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), classes] -= 1.0
    return float(loss), grad / n


def train_dvc(
    params: NetworkParams,
    grids: np.ndarray,
    classes: np.ndarray,
    opt: OptimizerConfig = OptimizerConfig(),
    rng_seed: int = 0,
    epochs: Optional[int] = None,
    dump_dir=None,
    log=None,
) -> tuple[NetworkParams, TrainReport]:
    """Softmax classification of supervoxel grids into ``classes`` (0..K-1).

    ``params`` must carry a classification head with K outputs. The report
    reuses the loss column; the distance columns hold training accuracy.
    """
    epochs = opt.epochs if epochs is None else epochs
    if epochs < 1:
        raise TrainingError("epochs must be >= 1; nothing to report")
    classes = np.asarray(classes, dtype=np.int64)
    k = params.arch.n_classes
    if len(np.unique(classes)) < 2:
        raise TrainingError("classification training needs at least 2 classes present")
    if not k or classes.max() >= k or classes.min() < 0:
        raise TrainingError(f"class ids must lie in [0, {k}) for this classification head")
    rng = np.random.default_rng(rng_seed)
    report = TrainReport()
    velocity = None
    for epoch in range(epochs):
        order = rng.permutation(len(classes))
        loss_sum = 0.0
        correct = 0
        for start in range(0, len(order), opt.batch_size):
            sel = order[start:start + opt.batch_size]
            logits, tape = net3d.forward(params, grids[sel], head="logits")
            logits = logits.astype(np.float64)
            loss, grad = softmax_cross_entropy(logits, classes[sel])
            if not np.isfinite(loss):
                raise DivergenceError("non-finite loss", _dump(params, dump_dir))
            loss_sum += loss * len(sel)
            correct += int((logits.argmax(axis=1) == classes[sel]).sum())
            last_good = params
            params, velocity = net3d.sgd_step(params, net3d.backward(params, tape, grad), opt.learning_rate, opt.momentum, velocity)
            _guard(params, last_good, "parameters", dump_dir)
        report.mean_loss.append(loss_sum / len(classes))
        acc = correct / len(classes)
        report.mean_pos_d2.append(acc)
        report.mean_neg_d2.append(acc)
        if log is not None:
            log(f"epoch {epoch + 1}: loss {report.mean_loss[-1]:.6f} train accuracy {acc:.4f}")
        if _plateaued(report.mean_loss):
            report.stop_reason = "plateau"
            return params, report
    report.stop_reason = "max_epochs"
    return params, report


def classify(params: NetworkParams, grids: np.ndarray) -> np.ndarray:
    return net3d.embed_batch(params, grids, head="logits").argmax(axis=1)
