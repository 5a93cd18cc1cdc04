"""Depth-map ingestion: precomputed estimator outputs stored as files."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


class IngestionError(ValueError):
    pass


RAW_SUFFIXES = (".f32", ".raw")


def normalize_depth(d: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant map becomes all 0.5."""
    d = np.asarray(d, dtype=np.float64)
    lo, hi = float(d.min()), float(d.max())
    if not np.isfinite(lo) or not np.isfinite(hi):
        raise IngestionError("depth map contains non-finite values")
    if hi == lo:
        return np.full(d.shape, 0.5)
    return (d - lo) / (hi - lo)


def resize_grid(d: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Bilinear resize (half-pixel centres)."""
    hw = (size, size) if isinstance(size, int) else tuple(size)
    if d.shape == hw:
        return d
    t = torch.as_tensor(d, dtype=torch.float64)[None, None]
    return F.interpolate(t, size=hw, mode="bilinear", align_corners=False)[0, 0].numpy()


def read_depth_file(path: str | Path, shape: tuple[int, int] | None = None) -> np.ndarray:
    path = Path(path)
    try:
        if path.suffix.lower() in RAW_SUFFIXES:
            flat = np.fromfile(path, dtype="<f4")
            if shape is None:
                side = int(round(np.sqrt(flat.size)))
                if side * side != flat.size:
                    raise IngestionError(f"{path}: raw grid of {flat.size} values is not square; pass shape")
                shape = (side, side)
            if flat.size != shape[0] * shape[1]:
                raise IngestionError(f"{path}: expected {shape[0] * shape[1]} values, found {flat.size}")
            return flat.reshape(shape).astype(np.float64)
        if path.suffix.lower() == ".npy":
            return np.load(path).astype(np.float64)
        with Image.open(path) as im:
            arr = np.asarray(im)
    except IngestionError:
        raise
    except (OSError, ValueError) as exc:
        raise IngestionError(f"{path}: cannot read depth map ({exc})") from None
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr.astype(np.float64)


def load_depth(path: str | Path, target_size: int | tuple[int, int] | None = None, shape=None) -> np.ndarray:
    """Read, min-max normalise, then bilinearly resize a depth file."""
    d = normalize_depth(read_depth_file(path, shape))
    if target_size is not None:
        d = resize_grid(d, target_size)
    return d


def replicate3(d: np.ndarray) -> np.ndarray:
    """S x S -> 3 x S x S with identical channels."""
    d = np.asarray(d)
    return np.repeat(d[None], 3, axis=0)


def write_depth_png(d: np.ndarray, path: str | Path) -> None:
    q = np.round(np.clip(d, 0, 1) * 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def write_depth_raw(d: np.ndarray, path: str | Path) -> None:
    np.asarray(d, dtype="<f4").tofile(path)
