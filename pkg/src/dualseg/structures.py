"""Instance annotations and COCO run-length encoding."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dualseg import kernels


def mask_to_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    """Tight (x1, y1, x2, y2) box in pixel-edge coordinates; x2/y2 are exclusive."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return (0.0, 0.0, 0.0, 0.0)
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


@dataclass
class InstanceAnnotation:
    mask: np.ndarray
    box: tuple[float, float, float, float] | None = None
    category_id: int = 1
    score: float = 1.0
    image_id: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.box is None:
            self.box = mask_to_box(self.mask)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


# COCO compressed RLE strings: each count is written as 5-bit groups with a
# continuation bit, offset by 48; counts after the second are delta-coded
# against the count two positions back.


def counts_to_string(counts) -> str:
    out = []
    counts = [int(c) for c in counts]
    for i, c in enumerate(counts):
        x = c - counts[i - 2] if i > 2 else c
        more = True
        while more:
            ch = x & 0x1F
            x >>= 5
            more = (x != -1) if (ch & 0x10) else (x != 0)
            if more:
                ch |= 0x20
            out.append(chr(ch + 48))
    return "".join(out)


def string_to_counts(s: str) -> list[int]:
    counts: list[int] = []
    p = 0
    while p < len(s):
        x = 0
        k = 0
        more = True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def rle_encode(mask: np.ndarray) -> dict:
    """Binary mask -> COCO RLE dict with a compressed ``counts`` string."""
    mask = np.asarray(mask)
    h, w = mask.shape
    return {"size": [int(h), int(w)], "counts": counts_to_string(kernels.rle_counts(mask))}


def rle_decode(rle: dict) -> np.ndarray:
    """COCO RLE (compressed string or uncompressed count list) -> bool mask."""
    h, w = rle["size"]
    counts = rle["counts"]
    if isinstance(counts, bytes):
        counts = counts.decode("ascii")
    if isinstance(counts, str):
        counts = string_to_counts(counts)
    return kernels.rle_decode(np.asarray(counts, dtype=np.uint32), h, w).astype(bool)


def rle_area(rle: dict) -> int:
    counts = rle["counts"]
    if isinstance(counts, (str, bytes)):
        counts = string_to_counts(counts.decode("ascii") if isinstance(counts, bytes) else counts)
    return int(sum(counts[1::2]))
