"""Few-shot articulated avatar SDFs on a synthetic capsule body.

Pipeline: linear blend skinning and implicit skinning networks canonicalize
depth observations; a meta-learned sine-activation field plus a residual
hypernetwork conditioned on bone transforms represent the pose-dependent
canonical shape; marching cubes and forward skinning produce animated meshes.
"""

__version__ = "0.1.0"

from .backend import USE_NUMBA, backend_name  # noqa: F401
