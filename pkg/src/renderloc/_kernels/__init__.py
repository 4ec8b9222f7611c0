"""Hot numeric kernels with two interchangeable backends.

The numba backend JIT-compiles the per-pixel rasterization and BVH
traversal loops; the numpy backend is a pure-vectorized fallback that
produces the same results. Selection happens once at import time via

    RENDERLOC_BACKEND=numba   (default when numba imports)
    RENDERLOC_BACKEND=numpy

`benchmarks/backend_bench.py` times the two against each other.
"""

import os

_requested = os.environ.get("RENDERLOC_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise RuntimeError(
        f"RENDERLOC_BACKEND must be 'numba' or 'numpy', got {_requested!r}"
    )

try:
    import numba  # noqa: F401

    _have_numba = True
except ImportError:
    _have_numba = False

if _requested == "numba" and not _have_numba:
    raise RuntimeError("RENDERLOC_BACKEND=numba but numba is not importable")

BACKEND = _requested or ("numba" if _have_numba else "numpy")

if BACKEND == "numba":
    from .raster_numba import rasterize_color, rasterize_texture
    from .ray_numba import raycast_batch, raycast_single
else:
    from .raster_numpy import rasterize_color, rasterize_texture
    from .ray_numpy import raycast_batch, raycast_single

__all__ = [
    "BACKEND",
    "rasterize_color",
    "rasterize_texture",
    "raycast_single",
    "raycast_batch",
]
