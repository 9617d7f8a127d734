"""Kernel dispatch: compiled extension when built, numpy fallback otherwise.

Set ``RALF_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from ._ext import pykernels

BACKEND = "python"
_impl = pykernels

if not os.environ.get("RALF_PURE_PYTHON"):
    try:
        from ._ext import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = pykernels

intersection_matrix = _impl.intersection_matrix
alignment = _impl.alignment
knn_scan = _impl.knn_scan
# The BLAS matmul in the numpy version beats the compiled loop about 3x.
ball_counts = pykernels.ball_counts

__all__ = ["BACKEND", "alignment", "ball_counts", "intersection_matrix", "knn_scan", "pykernels"]
