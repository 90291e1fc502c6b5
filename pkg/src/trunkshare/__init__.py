"""Shared-trunk multitask network (detection + segmentation) at toy scale,
with a deployment profiler comparing it against the naive two-model setup."""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
