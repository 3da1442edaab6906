"""Keyframe-fused sparse TSDF reconstruction with on-the-fly correction."""

__version__ = "0.1.0"
