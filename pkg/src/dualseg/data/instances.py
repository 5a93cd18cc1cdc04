"""Semantic label map -> per-object instances by connected-component labeling."""
from __future__ import annotations

import numpy as np

from dualseg import kernels
from dualseg.structures import InstanceAnnotation


def semantic_to_instances(semantic_mask: np.ndarray, min_area: int = 4, image_id: int | None = None) -> list[InstanceAnnotation]:
    """Split every class into 4-connected components; drop components below ``min_area`` pixels.

    Instances are ordered by class id, then by raster position of each component's first pixel.
    """
    sem = np.asarray(semantic_mask)
    if sem.ndim != 2:
        raise ValueError(f"semantic mask must be 2-D, got shape {sem.shape}")
    if sem.size and sem.min() < 0:
        raise ValueError("semantic labels must be non-negative")
    out = []
    for cls in np.unique(sem):
        if cls == 0:
            continue
        labels, n = kernels.label4(sem == cls)
        if n == 0:
            continue
        areas = np.bincount(labels.ravel(), minlength=n + 1)
        for lab in range(1, n + 1):
            if areas[lab] < min_area:
                continue
            out.append(InstanceAnnotation(mask=labels == lab, category_id=int(cls), image_id=image_id))
    return out


def instances_to_semantic(instances: list[InstanceAnnotation], shape: tuple[int, int]) -> np.ndarray:
    sem = np.zeros(shape, dtype=np.int64)
    for inst in instances:
        sem[inst.mask] = inst.category_id
    return sem
