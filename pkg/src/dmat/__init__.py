"""Mask-aware transformer for human de-occlusion, built on a small numpy autodiff core."""

__version__ = "0.1.0"
