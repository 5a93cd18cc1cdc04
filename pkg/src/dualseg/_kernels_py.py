"""Pure numpy/scipy fallbacks for the compiled mask kernels."""
import numpy as np
from scipy import ndimage

_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def rle_counts(mask):
    flat = np.asarray(mask, dtype=np.uint8).ravel(order="F") != 0
    if flat.size == 0:
        return np.zeros(1, dtype=np.uint32)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate([[0], runs])
    return runs.astype(np.uint32)


def rle_decode(counts, h, w):
    counts = np.asarray(counts, dtype=np.int64)
    n = h * w
    if counts.sum() != n:
        raise ValueError(f"RLE counts sum to {counts.sum()}, expected {n}")
    vals = np.zeros(counts.size, dtype=np.uint8)
    vals[1::2] = 1
    flat = np.repeat(vals, counts)
    return np.asfortranarray(flat.reshape((w, h)).T)


def label4(mask):
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_FOUR)
    return labels.astype(np.int32), int(n)


def mask_iou_matrix(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"mask sizes differ: {a.shape[1]} vs {b.shape[1]}")
    af = a.astype(np.float64)
    bf = b.astype(np.float64)
    inter = af @ bf.T
    union = af.sum(1)[:, None] + bf.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return out
