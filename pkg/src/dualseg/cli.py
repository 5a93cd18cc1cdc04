"""Command-line entry point: train, eval, predict, make-synthetic, convert-semantic.

Exit codes: 0 success, 2 user or config error, 3 runtime or numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from dualseg.checkpoint import CheckpointError, apply_state, load_checkpoint, model_state, read_header, save_checkpoint
from dualseg.config import ConfigError, RunConfig
from dualseg.data.coco import _resize_rgb, load_coco, predictions_to_results, scenes_to_coco, write_dataset
from dualseg.data.depth import IngestionError, load_depth, resize_grid
from dualseg.data.instances import semantic_to_instances
from dualseg.data.synthetic import Scene, check_depth_separable, make_dataset
from dualseg.metrics import EvaluationError
from dualseg.model import Segmenter
from dualseg.pipeline import evaluate_model, predict_scenes
from dualseg.structures import InstanceAnnotation, mask_to_box
from dualseg.training import NonFiniteLoss, fit, seed_everything

log = logging.getLogger("dualseg")

EXIT_OK, EXIT_USER, EXIT_RUNTIME = 0, 2, 3
SEED_ENV = "SPDA_SEED"
CHECKPOINT_NAME = "model.ckpt"
METRICS_NAME = "metrics.jsonl"
RESOLVED_NAME = "resolved_config.json"

USER_ERRORS = (ConfigError, IngestionError, CheckpointError, EvaluationError, OSError)

PALETTE = np.array(
    [[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240]],
    dtype=np.float64,
)


# ---------------------------------------------------------------------------
# config resolution


def parse_set(items: list[str] | None) -> list[tuple[str, str]]:
    pairs = []
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        pairs.append((key.strip(), value))
    return pairs


def env_seed(default: int) -> int:
    env = os.environ.get(SEED_ENV)
    if env is None:
        return default
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def resolve_config(base: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Config file < SPDA_SEED < --set < dedicated flags."""
    base.train.seed = env_seed(base.train.seed)
    for key, value in parse_set(getattr(args, "set", None)):
        base.set(key, value)
    for key in ("data", "output", "test_data"):
        value = getattr(args, key, None)
        if value is not None:
            base.set(key, value)
    base.validate()
    return base


def echo(config: dict) -> None:
    print("resolved config:")
    print(json.dumps(config, indent=2, sort_keys=True), flush=True)


# ---------------------------------------------------------------------------
# data


def load_scenes(spec: str | None, cfg: RunConfig, field: str = "data") -> list[Scene]:
    """``synthetic:N:SEED[:MODE]`` or a COCO dataset directory / annotation file."""
    if not spec:
        raise ConfigError(f"{field}: no dataset given (set '{field}' in the config or pass --{field.replace('_', '-')})")
    size = cfg.model.backbone.image_size
    if spec.startswith("synthetic:"):
        parts = spec.split(":")
        try:
            n, seed = int(parts[1]), int(parts[2])
        except (IndexError, ValueError):
            raise ConfigError(f"{field}: expected synthetic:N:SEED[:MODE], got {spec!r}") from None
        mode = parts[3] if len(parts) > 3 else "mixed"
        if n < 0:
            raise ConfigError(f"{field}: image count must be >= 0")
        try:
            scenes = make_dataset(n, seed, mode=mode, size=size)
        except ValueError as exc:
            raise ConfigError(f"{field}: {exc}") from None
    else:
        path = Path(spec)
        ann = path / "annotations.json" if path.is_dir() else path
        if not ann.exists():
            raise ConfigError(f"{field}: path does not exist: {ann}")
        scenes = list(load_coco(ann, depth_root=cfg.depth_root, missing_depth=cfg.missing_depth, size=size))
    if not scenes:
        raise ConfigError(f"{field}: dataset is empty ({spec})")
    return scenes


def read_rgb(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    except OSError as exc:
        raise IngestionError(f"{path}: cannot read image ({exc})") from None


def resize_mask(mask: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    if mask.shape == hw:
        return mask
    t = torch.as_tensor(mask, dtype=torch.float32)[None, None]
    return F.interpolate(t, size=hw, mode="nearest")[0, 0].numpy() > 0.5


def write_overlay(rgb: np.ndarray, anns: list[InstanceAnnotation], path: str | Path) -> None:
    img = rgb.transpose(1, 2, 0).astype(np.float64) * 255
    for i, a in enumerate(anns):
        img[a.mask] = 0.5 * img[a.mask] + 0.5 * PALETTE[i % len(PALETTE)]
    Image.fromarray(np.round(img).clip(0, 255).astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------
# model helpers


def build_model(cfg: RunConfig) -> Segmenter:
    seed_everything(cfg.train.seed)
    return Segmenter(cfg.model)


def load_model(checkpoint: str, cfg: RunConfig) -> Segmenter:
    _, state = load_checkpoint(checkpoint)
    model = Segmenter(cfg.model)
    apply_state(model, state)
    return model.eval()


def checkpoint_config(path: str) -> RunConfig:
    header = read_header(path)
    try:
        return RunConfig.from_dict(header["config"])
    except KeyError:
        raise CheckpointError(f"{path}: header has no config") from None


# ---------------------------------------------------------------------------
# commands


def cmd_train(args: argparse.Namespace) -> int:
    base = RunConfig.from_json(args.config) if args.config else RunConfig()
    cfg = resolve_config(base, args)
    echo(cfg.to_dict())
    scenes = load_scenes(cfg.data, cfg)
    eval_scenes = load_scenes(cfg.test_data, cfg, "test_data") if cfg.test_data else scenes
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_NAME).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    def eval_fn(model):
        rep = evaluate_model(model, eval_scenes, cfg.class_agnostic)
        return {"eval_mAP": rep.mAP, "eval_AP50": rep.AP50, "eval_AP75": rep.AP75}

    model = build_model(cfg)
    res = fit(model, scenes, cfg.train, out / METRICS_NAME, eval_fn if cfg.train.eval_every > 0 else None)
    save_checkpoint(out / CHECKPOINT_NAME, model_state(model), cfg.to_dict(), res.steps, cfg.train.seed)
    if res.records:
        first, last = res.records[0]["total"], res.records[-1]["total"]
        print(f"trained {res.steps} steps: loss {first:.4f} -> {last:.4f}")
    print(f"checkpoint: {out / CHECKPOINT_NAME}")
    print(f"metrics log: {out / METRICS_NAME}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    base = RunConfig.from_json(args.config) if args.config else checkpoint_config(args.checkpoint)
    cfg = resolve_config(base, args)
    if args.class_agnostic is not None:
        cfg.class_agnostic = args.class_agnostic
    echo(cfg.to_dict())
    model = load_model(args.checkpoint, cfg)
    scenes = load_scenes(cfg.data, cfg)
    report = evaluate_model(model, scenes, cfg.class_agnostic)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(report.to_json() + "\n")
    (out / "eval_table.txt").write_text(report.table() + "\n")
    print(report.table())
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    base = RunConfig.from_json(args.config) if args.config else checkpoint_config(args.checkpoint)
    cfg = resolve_config(base, args)
    resolved = cfg.to_dict()
    resolved.update(image=args.image, depth=args.depth, predictions=args.out, overlay=args.overlay)
    echo(resolved)
    model = load_model(args.checkpoint, cfg)
    rgb = read_rgb(args.image)
    h, w = rgb.shape[1:]
    size = cfg.model.backbone.image_size
    if args.depth:
        depth = load_depth(args.depth, (h, w))
    else:
        if model.fusion is not None:
            log.warning("no depth map supplied; using a constant 0.5 placeholder")
        depth = np.full((h, w), 0.5)
    scene = Scene(
        rgb=_resize_rgb(rgb, size) if (h, w) != (size, size) else rgb,
        depth=resize_grid(depth, size),
        instances=[],
        image_id=args.image_id,
    )
    preds = predict_scenes(model, [scene])
    anns = []
    for a in preds[args.image_id]:
        m = resize_mask(a.mask, (h, w))
        if m.any():
            anns.append(InstanceAnnotation(mask=m, box=mask_to_box(m), category_id=a.category_id, score=a.score, image_id=args.image_id))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(predictions_to_results({args.image_id: anns}), sort_keys=True) + "\n")
    if args.overlay:
        write_overlay(rgb, anns, args.overlay)
    print(f"{len(anns)} instances -> {out}")
    return EXIT_OK


def cmd_make_synthetic(args: argparse.Namespace) -> int:
    seed = env_seed(args.seed)
    resolved = {"n": args.n, "seed": seed, "mode": args.mode, "size": args.size, "out": args.out}
    echo(resolved)
    if args.n < 1:
        raise ConfigError(f"n: must be >= 1, got {args.n}")
    try:
        scenes = make_dataset(args.n, seed, mode=args.mode, size=args.size)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    info = {k: v for k, v in resolved.items() if k != "out"}
    info["depth_separable"] = (
        [bool(check_depth_separable(s)) for s in scenes] if args.mode == "depth-separable" else None
    )
    path = write_dataset(scenes, args.out, extra=info)
    print(f"wrote {len(scenes)} scenes -> {path}")
    return EXIT_OK


def cmd_convert_semantic(args: argparse.Namespace) -> int:
    resolved = {"input": args.input, "out": args.out, "min_area": args.min_area, "image_id": args.image_id}
    echo(resolved)
    path = Path(args.input)
    try:
        if path.suffix.lower() == ".npy":
            sem = np.load(path)
        else:
            with Image.open(path) as im:
                sem = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"{path}: cannot read semantic mask ({exc})") from None
    if sem.ndim == 3:
        sem = sem[..., 0]
    if not np.issubdtype(sem.dtype, np.integer):
        raise IngestionError(f"{path}: semantic labels must be integers, got {sem.dtype}")
    try:
        instances = semantic_to_instances(sem.astype(np.int64), min_area=args.min_area, image_id=args.image_id)
    except ValueError as exc:
        raise IngestionError(f"{path}: {exc}") from None
    h, w = sem.shape
    scene = Scene(rgb=np.zeros((3, h, w), dtype=np.float32), depth=np.zeros((h, w)), instances=instances, image_id=args.image_id)
    classes = sorted({i.category_id for i in instances})
    coco = scenes_to_coco([scene], file_pattern=args.file_name or path.name, categories=[{"id": c, "name": str(c)} for c in classes])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(coco, sort_keys=True) + "\n")
    print(f"{len(instances)} instances -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint: bool):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)

    t = sub.add_parser("train", help="train a model and write checkpoint + metrics log")
    common(t, checkpoint=False)
    t.add_argument("--data", help="dataset directory, annotation file, or synthetic:N:SEED[:MODE]")
    t.add_argument("--test-data", dest="test_data")
    t.add_argument("--output", help="run directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e, checkpoint=True)
    e.add_argument("--data")
    e.add_argument("--output")
    g = e.add_mutually_exclusive_group()
    g.add_argument("--class-agnostic", dest="class_agnostic", action="store_true", default=None)
    g.add_argument("--multi-class", dest="class_agnostic", action="store_false")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="segment one image")
    common(pr, checkpoint=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--depth")
    pr.add_argument("--image-id", type=int, default=0)
    pr.add_argument("--out", default="predictions.json")
    pr.add_argument("--overlay", help="optional PNG with masks drawn over the image")
    pr.set_defaults(func=cmd_predict)

    m = sub.add_parser("make-synthetic", help="write a synthetic RGB-D dataset")
    m.add_argument("--n", type=int, default=16)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--mode", choices=("mixed", "depth-separable"), default="mixed")
    m.add_argument("--size", type=int, default=64)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_synthetic)

    c = sub.add_parser("convert-semantic", help="semantic label map -> COCO instances")
    c.add_argument("--input", required=True, help="integer label PNG or .npy")
    c.add_argument("--out", required=True)
    c.add_argument("--min-area", type=int, default=4)
    c.add_argument("--image-id", type=int, default=0)
    c.add_argument("--file-name", help="file_name recorded in the images entry")
    c.set_defaults(func=cmd_convert_semantic)
    return p


def setup_logging(verbose: bool) -> None:
    """Route package log records to the current stderr, replacing any earlier CLI handler."""
    for h in list(log.handlers):
        if getattr(h, "_dualseg_cli", False):
            log.removeHandler(h)
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    h._dualseg_cli = True
    log.addHandler(h)
    log.setLevel(logging.INFO if verbose else logging.WARNING)
    log.propagate = False


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except NonFiniteLoss as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
