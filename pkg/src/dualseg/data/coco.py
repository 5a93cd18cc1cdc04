"""COCO-format annotation ingestion and export."""
from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from dualseg.data.depth import IngestionError, load_depth, normalize_depth, resize_grid, write_depth_png
from dualseg.data.synthetic import CATEGORIES, Scene
from dualseg.structures import InstanceAnnotation, rle_decode, rle_encode

log = logging.getLogger(__name__)

DEPTH_SUFFIXES = (".png", ".f32", ".raw", ".npy")


def polygon_to_mask(polygons: list[list[float]], h: int, w: int) -> np.ndarray:
    """Even-odd fill of one or more polygons, sampled at pixel centres."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    out = np.zeros((h, w), dtype=bool)
    for poly in polygons:
        pts = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
        inside = np.zeros((h, w), dtype=bool)
        n = len(pts)
        for i in range(n):
            x0, y0 = pts[i]
            x1, y1 = pts[(i + 1) % n]
            if y0 == y1:
                continue
            crosses = (y0 > yy) != (y1 > yy)
            xint = x0 + (yy - y0) * (x1 - x0) / (y1 - y0)
            inside ^= crosses & (xx < xint)
        out |= inside
    return out


def segmentation_to_mask(seg, h: int, w: int) -> np.ndarray:
    if isinstance(seg, list):
        return polygon_to_mask(seg, h, w)
    if isinstance(seg, dict):
        if list(seg["size"]) != [h, w]:
            raise IngestionError(f"RLE size {seg['size']} does not match image size {[h, w]}")
        return rle_decode(seg)
    raise IngestionError(f"unsupported segmentation type {type(seg).__name__}")


def _resize_rgb(rgb: np.ndarray, size: int) -> np.ndarray:
    t = torch.as_tensor(rgb, dtype=torch.float64)[None]
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0].numpy().astype(np.float32)


def _resize_mask(m: np.ndarray, size: int) -> np.ndarray:
    t = torch.as_tensor(m, dtype=torch.float32)[None, None]
    return F.interpolate(t, size=(size, size), mode="nearest")[0, 0].numpy() > 0.5


class CocoDataset(Sequence):
    """Lazily decoded scenes backed by a COCO instance-annotation file."""

    def __init__(self, annotation_path, image_root=None, depth_root=None, missing_depth: str = "error", size: int | None = None):
        if missing_depth not in ("error", "placeholder"):
            raise ValueError(f"missing_depth must be 'error' or 'placeholder', got {missing_depth!r}")
        self.annotation_path = Path(annotation_path)
        try:
            data = json.loads(self.annotation_path.read_text())
        except FileNotFoundError:
            raise IngestionError(f"{annotation_path}: file not found") from None
        except json.JSONDecodeError as exc:
            raise IngestionError(f"{annotation_path}: malformed JSON ({exc})") from None
        for key in ("images", "annotations"):
            if key not in data or not isinstance(data[key], list):
                raise IngestionError(f"{annotation_path}: missing '{key}' list")
        self.image_root = Path(image_root) if image_root else self.annotation_path.parent / "rgb"
        self.depth_root = Path(depth_root) if depth_root else self.image_root.parent / "depth"
        self.missing_depth = missing_depth
        self.size = size
        self.images = sorted(data["images"], key=lambda im: im["id"])
        self.categories = data.get("categories", [])
        ids = {im["id"] for im in self.images}
        orphans = sorted({a.get("image_id") for a in data["annotations"] if a.get("image_id") not in ids}, key=str)
        if orphans:
            raise IngestionError(f"{annotation_path}: annotations reference unknown image ids {orphans}")
        self.by_image: dict[int, list[dict]] = {i: [] for i in ids}
        for a in data["annotations"]:
            self.by_image[a["image_id"]].append(a)

    def __len__(self) -> int:
        return len(self.images)

    def _depth_path(self, file_name: str) -> Path | None:
        stem = Path(file_name).stem
        for suf in DEPTH_SUFFIXES:
            p = self.depth_root / f"{stem}{suf}"
            if p.exists():
                return p
        return None

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return [self[i] for i in range(*idx.indices(len(self)))]
        info = self.images[idx]
        path = self.image_root / info["file_name"]
        try:
            with Image.open(path) as im:
                rgb = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
        except OSError as exc:
            raise IngestionError(f"{path}: cannot read image ({exc})") from None
        h, w = rgb.shape[1:]
        dpath = self._depth_path(info["file_name"])
        if dpath is not None:
            depth = load_depth(dpath, (h, w))
        elif self.missing_depth == "placeholder":
            log.warning("no depth file for %s; using constant 0.5", info["file_name"])
            depth = np.full((h, w), 0.5)
        else:
            raise IngestionError(f"no depth file for {info['file_name']} under {self.depth_root}")
        instances = []
        for a in self.by_image[info["id"]]:
            if a.get("iscrowd", 0):
                continue
            m = segmentation_to_mask(a["segmentation"], h, w)
            instances.append(InstanceAnnotation(mask=m, category_id=int(a.get("category_id", 1)), image_id=info["id"]))
        if self.size is not None and (h, w) != (self.size, self.size):
            rgb = _resize_rgb(rgb, self.size)
            depth = resize_grid(depth, self.size)
            instances = [
                InstanceAnnotation(mask=_resize_mask(i.mask, self.size), category_id=i.category_id, image_id=i.image_id)
                for i in instances
            ]
            instances = [i for i in instances if i.area > 0]
        return Scene(rgb=rgb, depth=depth, instances=instances, image_id=info["id"], meta={"file_name": info["file_name"]})


def load_coco(annotation_path, image_root=None, depth_root=None, missing_depth: str = "error", size: int | None = None) -> CocoDataset:
    return CocoDataset(annotation_path, image_root, depth_root, missing_depth, size)


def scenes_to_coco(scenes: list[Scene], file_pattern: str = "{:06d}.png", categories=None) -> dict:
    images, anns = [], []
    ann_id = 1
    for s in scenes:
        h, w = s.rgb.shape[1:]
        images.append({"id": s.image_id, "file_name": file_pattern.format(s.image_id), "height": h, "width": w})
        for inst in s.instances:
            x1, y1, x2, y2 = inst.box
            anns.append(
                {
                    "id": ann_id,
                    "image_id": s.image_id,
                    "category_id": inst.category_id,
                    "segmentation": rle_encode(inst.mask),
                    "area": inst.area,
                    "bbox": [x1, y1, x2 - x1, y2 - y1],
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    return {"images": images, "annotations": anns, "categories": categories or CATEGORIES}


def write_dataset(scenes: list[Scene], out_dir, extra: dict | None = None) -> Path:
    """Write rgb/*.png, depth/*.png (16-bit) and annotations.json."""
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    for s in scenes:
        name = f"{s.image_id:06d}.png"
        rgb8 = np.round(np.clip(s.rgb, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(rgb8).save(out / "rgb" / name)
        write_depth_png(s.depth, out / "depth" / name)
    coco = scenes_to_coco(scenes)
    if extra:
        coco["info"] = extra
    path = out / "annotations.json"
    path.write_text(json.dumps(coco, sort_keys=True))
    return path


def predictions_to_results(preds: dict[int, list[InstanceAnnotation]]) -> list[dict]:
    """COCO results records (image id, category id, RLE mask, score), image-id order."""
    out = []
    for image_id in sorted(preds):
        for p in preds[image_id]:
            out.append(
                {
                    "image_id": int(image_id),
                    "category_id": int(p.category_id),
                    "segmentation": rle_encode(p.mask),
                    "score": float(p.score),
                }
            )
    return out


def results_to_predictions(results: list[dict]) -> dict[int, list[InstanceAnnotation]]:
    preds: dict[int, list[InstanceAnnotation]] = {}
    for r in results:
        m = rle_decode(r["segmentation"])
        preds.setdefault(int(r["image_id"]), []).append(
            InstanceAnnotation(mask=m, category_id=int(r["category_id"]), score=float(r["score"]), image_id=int(r["image_id"]))
        )
    return preds


def scene_inputs(scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """Model-ready rgb (3 x S x S) and normalised single-channel depth."""
    return scene.rgb, normalize_depth(scene.depth)
