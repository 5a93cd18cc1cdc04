"""Mask kernels with a compiled backend and a numpy fallback.

The Cython extension is used when it was built; set ``DUALSEG_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` names the active implementation.
"""
import os

import numpy as np

from dualseg import _kernels_py

_compiled = None
if os.environ.get("DUALSEG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from dualseg import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def _impl(backend):
    if backend is None:
        backend = BACKEND
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available in this build")
        return _compiled
    if backend == "python":
        return _kernels_py
    raise ValueError(f"unknown kernel backend {backend!r}")


def available_backends():
    return ["cython", "python"] if _compiled is not None else ["python"]


def rle_counts(mask, backend=None):
    """Column-major run lengths of a 2-D binary mask, zero run first."""
    m = np.asfortranarray(np.asarray(mask) != 0, dtype=np.uint8)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {m.shape}")
    if m.size == 0:
        return np.zeros(1, dtype=np.uint32)
    return _impl(backend).rle_counts(m)


def rle_decode(counts, h, w, backend=None):
    c = np.ascontiguousarray(counts, dtype=np.uint32)
    if h * w == 0:
        return np.zeros((h, w), dtype=np.uint8, order="F")
    return _impl(backend).rle_decode(c, int(h), int(w))


def label4(mask, backend=None):
    """4-connected component labels (int32, 0 = background) and component count."""
    m = np.ascontiguousarray(np.asarray(mask) != 0, dtype=np.uint8)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {m.shape}")
    if m.size == 0:
        return np.zeros(m.shape, dtype=np.int32), 0
    labels, n = _impl(backend).label4(m)
    return labels, int(n)


def mask_iou_matrix(a, b, backend=None):
    """Pairwise IoU of two stacks of equally shaped binary masks."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"mask shapes differ: {a.shape[1:]} vs {b.shape[1:]}")
    fa = np.ascontiguousarray(a.reshape(a.shape[0], -1) != 0, dtype=np.uint8)
    fb = np.ascontiguousarray(b.reshape(b.shape[0], -1) != 0, dtype=np.uint8)
    if fa.shape[0] == 0 or fb.shape[0] == 0:
        return np.zeros((fa.shape[0], fb.shape[0]))
    return _impl(backend).mask_iou_matrix(fa, fb)
