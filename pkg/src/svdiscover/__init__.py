"""Novel object discovery in point clouds via supervoxel metric learning."""

__version__ = "0.1.0"
