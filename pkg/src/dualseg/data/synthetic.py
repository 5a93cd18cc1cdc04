"""Synthetic RGB-D scenes of flat-coloured shapes on distinct depth planes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dualseg.structures import InstanceAnnotation

KINDS = ("circle", "rectangle", "triangle")
CATEGORIES = [{"id": i + 1, "name": k} for i, k in enumerate(KINDS)]
MIN_VISIBLE = 20
MAX_TRIES = 200


@dataclass
class Scene:
    rgb: np.ndarray  # 3 x S x S float in [0, 1]
    depth: np.ndarray  # S x S float in [0, 1], nearer = larger
    instances: list[InstanceAnnotation]
    image_id: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.rgb.shape[-1]


def shape_mask(shape: dict, size: int) -> np.ndarray:
    """Rasterise a shape description by testing pixel centres."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cx, cy, r = shape["cx"], shape["cy"], shape["r"]
    kind = shape["kind"]
    if kind == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if kind == "rectangle":
        return (np.abs(xx - cx) <= shape["hw"]) & (np.abs(yy - cy) <= shape["hh"])
    if kind == "triangle":
        (x0, y0), (x1, y1), (x2, y2) = shape["vertices"]

        def side(ax, ay, bx, by):
            return (bx - ax) * (yy - ay) - (by - ay) * (xx - ax)

        s0, s1, s2 = side(x0, y0, x1, y1), side(x1, y1, x2, y2), side(x2, y2, x0, y0)
        return ((s0 >= 0) & (s1 >= 0) & (s2 >= 0)) | ((s0 <= 0) & (s1 <= 0) & (s2 <= 0))
    raise ValueError(f"unknown shape kind {kind!r}")


def _random_shape(rng: np.random.Generator, size: int, kind: str | None = None, center=None) -> dict:
    kind = kind or KINDS[rng.integers(len(KINDS))]
    r = float(rng.uniform(0.10, 0.22) * size)
    if center is None:
        cx, cy = (float(v) for v in rng.uniform(0.18 * size, 0.82 * size, 2))
    else:
        cx, cy = center
    shape = {"kind": kind, "cx": cx, "cy": cy, "r": r}
    if kind == "rectangle":
        shape["hw"] = float(r * rng.uniform(0.6, 1.0))
        shape["hh"] = float(r * rng.uniform(0.6, 1.0))
    elif kind == "triangle":
        t0 = float(rng.uniform(0, 2 * np.pi))
        shape["vertices"] = [
            (cx + r * np.cos(t0 + k * 2 * np.pi / 3), cy + r * np.sin(t0 + k * 2 * np.pi / 3)) for k in range(3)
        ]
    return shape


def _quantize(x: np.ndarray, levels: int) -> np.ndarray:
    return np.round(x * levels) / levels


def render(shapes: list[dict], colors: np.ndarray, z: np.ndarray, background: np.ndarray, size: int):
    """Paint shapes far-to-near. Returns rgb, depth and each shape's visible mask."""
    rgb = np.empty((3, size, size))
    rgb[:] = background[:, None, None]
    depth = np.zeros((size, size))
    owner = np.full((size, size), -1, dtype=np.int64)
    for i in np.argsort(-z, kind="stable"):
        m = shape_mask(shapes[i], size)
        rgb[:, m] = colors[i][:, None]
        depth[m] = 1.0 - z[i]
        owner[m] = i
    visible = [owner == i for i in range(len(shapes))]
    return rgb, depth, visible


def generate_scene(seed: int, n_objects: int = 3, size: int = 64, mode: str = "mixed", image_id: int = 0) -> Scene:
    """Draw a random scene.

    ``mode="depth-separable"`` places two overlapping shapes of the same kind
    and colour on different depth planes, so only depth tells them apart.
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    if mode not in ("mixed", "depth-separable"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    if mode == "depth-separable":
        n_objects = max(n_objects, 2)
    planes = np.linspace(0.1, 0.9, 9)
    for _ in range(MAX_TRIES):
        z = rng.choice(planes, size=n_objects, replace=False)
        colors = rng.uniform(0.3, 1.0, size=(n_objects, 3))
        background = rng.uniform(0.0, 0.15, size=3)
        shapes = []
        pairs = []
        if mode == "depth-separable":
            first = _random_shape(rng, size)
            ang = rng.uniform(0, 2 * np.pi)
            dist = first["r"] * rng.uniform(0.9, 1.3)
            c2 = (
                float(np.clip(first["cx"] + dist * np.cos(ang), 0.15 * size, 0.85 * size)),
                float(np.clip(first["cy"] + dist * np.sin(ang), 0.15 * size, 0.85 * size)),
            )
            second = _random_shape(rng, size, kind=first["kind"], center=c2)
            shapes += [first, second]
            colors[1] = colors[0]
            pairs.append((0, 1))
        while len(shapes) < n_objects:
            shapes.append(_random_shape(rng, size))
        colors = _quantize(colors, 255)
        background = _quantize(background, 255)
        rgb, depth, visible = render(shapes, colors, z, background, size)
        if all(v.sum() >= MIN_VISIBLE for v in visible) and _pairs_ok(shapes, visible, pairs, size):
            break
    else:
        raise RuntimeError(f"could not place {n_objects} visible shapes (seed={seed})")
    depth = _quantize(depth, 65535)
    instances = [
        InstanceAnnotation(
            mask=visible[i],
            category_id=KINDS.index(shapes[i]["kind"]) + 1,
            image_id=image_id,
            extra={"depth": float(1.0 - z[i])},
        )
        for i in range(n_objects)
    ]
    meta = {
        "seed": seed,
        "mode": mode,
        "shapes": shapes,
        "colors": colors.tolist(),
        "z": z.tolist(),
        "background": background.tolist(),
        "same_color_pairs": pairs,
    }
    return Scene(rgb=rgb.astype(np.float32), depth=depth, instances=instances, image_id=image_id, meta=meta)


def _pairs_ok(shapes, visible, pairs, size) -> bool:
    for i, j in pairs:
        overlap = shape_mask(shapes[i], size) & shape_mask(shapes[j], size)
        if not overlap.any():
            return False
        # the visible regions must touch so the pair reads as one blob in RGB
        a = visible[i]
        b = visible[j]
        touch = (a[1:] & b[:-1]).any() or (a[:-1] & b[1:]).any() or (a[:, 1:] & b[:, :-1]).any() or (a[:, :-1] & b[:, 1:]).any()
        if not touch:
            return False
    return True


def check_depth_separable(scene: Scene) -> bool:
    """Generator self-check: every recorded pair shares a colour and overlaps."""
    pairs = scene.meta.get("same_color_pairs", [])
    if not pairs:
        return False
    size = scene.size
    for i, j in pairs:
        si, sj = scene.meta["shapes"][i], scene.meta["shapes"][j]
        if scene.meta["colors"][i] != scene.meta["colors"][j]:
            return False
        if not (shape_mask(si, size) & shape_mask(sj, size)).any():
            return False
        if scene.meta["z"][i] == scene.meta["z"][j]:
            return False
    return True


def make_dataset(n: int, seed: int, mode: str = "mixed", size: int = 64, max_objects: int = 3) -> list[Scene]:
    """``n`` scenes with object counts in 1..max_objects (2.. for depth-separable)."""
    scenes = []
    ss = np.random.SeedSequence(seed)
    for i, child in enumerate(ss.spawn(n)):
        sub = int(child.generate_state(1)[0])
        lo = 2 if mode == "depth-separable" else 1
        n_obj = lo + sub % (max_objects - lo + 1) if max_objects > lo else lo
        scenes.append(generate_scene(sub, n_obj, size, mode, image_id=i + 1))
    return scenes
