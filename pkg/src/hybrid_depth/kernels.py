"""Hot scan kernels with a compiled backend and a numpy fallback.

The compiled module is used when it was built at install time; set
``HYBRID_DEPTH_FORCE_PYTHON=1`` to force the fallback. Both backends share the
same in-place contract and agree to floating-point roundoff.
"""
from __future__ import annotations

import os

import numpy as np


def recursive_filter_rows_py(img: np.ndarray, coef: np.ndarray) -> None:
    """Numpy fallback: loops over columns, vectorized over rows and channels."""
    w = img.shape[1]
    for j in range(1, w):
        a = coef[:, j, None]
        img[:, j] += a * (img[:, j - 1] - img[:, j])
    for j in range(w - 2, -1, -1):
        a = coef[:, j + 1, None]
        img[:, j] += a * (img[:, j + 1] - img[:, j])


BACKEND = "python"
recursive_filter_rows = recursive_filter_rows_py

if os.environ.get("HYBRID_DEPTH_FORCE_PYTHON") != "1":
    try:
        from ._kernels import recursive_filter_rows  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        pass
