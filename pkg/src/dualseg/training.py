"""Combined loss, learning-rate schedule and the training loop."""
from __future__ import annotations

import json
import logging
import math
from decimal import Decimal
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from dualseg.config import TrainConfig
from dualseg.data.depth import normalize_depth
from dualseg.data.synthetic import Scene
from dualseg.decoder import RPNOutput, encode_boxes
from dualseg.metrics import box_iou_np
from dualseg.model import Segmenter
from dualseg.structures import InstanceAnnotation

log = logging.getLogger(__name__)

RPN_POS_IOU = 0.7
RPN_NEG_IOU = 0.3
MATCH_IOU = 0.5
SMOOTH_L1_BETA = 1.0 / 9


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, terms: dict):
        super().__init__(f"non-finite loss at step {step}: {json.dumps(terms)}")
        self.step = step
        self.terms = terms


def final_lr(cfg: TrainConfig) -> float:
    """base_lr * final_lr_ratio, rounded once from the decimal product so that
    0.0002 * 0.001 is exactly 2e-7 rather than one ulp above it."""
    return float(Decimal(repr(cfg.base_lr)) * Decimal(repr(cfg.final_lr_ratio)))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up from base/warmup to base, then cosine decay to
    final_lr_ratio * base at max_iters. Steps past max_iters clamp."""
    base = cfg.base_lr
    final = final_lr(cfg)
    w = cfg.warmup_iters
    if step < w:
        return base / w + (base - base / w) * step / w
    span = cfg.max_iters - w
    if span <= 0:
        return base
    if step >= cfg.max_iters:
        return final
    t = (step - w) / span
    return base - (base - final) * (1 - math.cos(math.pi * t)) / 2


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossTargets:
    gt_boxes: list[Tensor]  # per image, n_i x 4
    mask_targets: Tensor  # P x S x S in {0, 1}, one per decoded proposal
    class_targets: Tensor | None = None  # P, 0-based


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict[str, Tensor] = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        out = {"total": float(self.total.detach())}
        out.update({k: float(v.detach()) for k, v in self.terms.items()})
        return out


def anchor_targets(anchors: Tensor, gt_boxes: Tensor) -> tuple[Tensor, Tensor]:
    """Labels (1 pos, 0 neg, -1 ignore) and matched GT index per anchor."""
    n = anchors.shape[0]
    if gt_boxes.shape[0] == 0:
        return torch.zeros(n, dtype=torch.long), torch.zeros(n, dtype=torch.long)
    iou = torch.as_tensor(box_iou_np(anchors.detach().numpy(), gt_boxes.detach().numpy()), dtype=anchors.dtype)
    best, idx = iou.max(dim=1)
    labels = torch.full((n,), -1, dtype=torch.long)
    labels[best < RPN_NEG_IOU] = 0
    labels[best >= RPN_POS_IOU] = 1
    per_gt = iou.max(dim=0).values
    for j in range(gt_boxes.shape[0]):
        if per_gt[j] > 0:
            hit = iou[:, j] == per_gt[j]
            labels[hit] = 1
            idx[hit] = j
    return labels, idx


def rpn_loss(rpn_out: RPNOutput, gt_boxes: list[Tensor]) -> tuple[Tensor, Tensor]:
    """Objectness BCE over labelled anchors; smooth-L1 on positive anchors (0 if none)."""
    logits, targets, deltas, box_targets = [], [], [], []
    for b, gts in enumerate(gt_boxes):
        labels, idx = anchor_targets(rpn_out.anchors, gts)
        valid = labels >= 0
        logits.append(rpn_out.objectness[b][valid])
        targets.append(labels[valid].to(rpn_out.objectness.dtype))
        pos = labels == 1
        if pos.any():
            deltas.append(rpn_out.deltas[b][pos])
            box_targets.append(encode_boxes(rpn_out.anchors[pos], gts[idx[pos]].to(rpn_out.anchors.dtype)))
    cls = F.binary_cross_entropy_with_logits(torch.cat(logits), torch.cat(targets))
    if deltas:
        d, t = torch.cat(deltas), torch.cat(box_targets)
        box = F.smooth_l1_loss(d, t, beta=SMOOTH_L1_BETA, reduction="sum") / d.shape[0]
    else:
        box = rpn_out.deltas.sum() * 0.0
    return cls, box


def mask_bce(logits: Tensor | None, targets: Tensor) -> Tensor:
    """Mean per-pixel BCE per proposal, averaged over proposals."""
    if logits is None or logits.shape[0] == 0:
        return targets.new_zeros(())
    per = F.binary_cross_entropy_with_logits(logits, targets, reduction="none").flatten(1).mean(1)
    return per.mean()


def combined_loss(
    rpn_out: RPNOutput,
    coarse_logits: Tensor | None,
    refined_logits: Tensor | None,
    targets: LossTargets,
    cfg: TrainConfig,
    iou_pred: Tensor | None = None,
    class_logits: Tensor | None = None,
) -> LossBreakdown:
    """lambda1 * L_rpn + lambda2 * L_coarse + lambda3 * L_refined, plus the
    IoU-head regression and optional class terms (each with its own weight)."""
    rpn_cls, rpn_box = rpn_loss(rpn_out, targets.gt_boxes)
    l_rpn = rpn_cls + rpn_box
    l_coarse = mask_bce(coarse_logits, targets.mask_targets)
    l_refined = mask_bce(refined_logits, targets.mask_targets)
    total = cfg.lambda1 * l_rpn + cfg.lambda2 * l_coarse + cfg.lambda3 * l_refined
    terms = {"rpn": l_rpn, "rpn_cls": rpn_cls, "rpn_box": rpn_box, "coarse": l_coarse, "refined": l_refined}
    if iou_pred is not None and iou_pred.numel():
        final = refined_logits if refined_logits is not None else coarse_logits
        with torch.no_grad():
            pm = (final > 0).to(final.dtype)
            inter = (pm * targets.mask_targets).flatten(1).sum(1)
            union = (pm + targets.mask_targets).clamp(max=1).flatten(1).sum(1)
            true_iou = inter / union.clamp(min=1)
        l_iou = F.mse_loss(iou_pred, true_iou)
        terms["iou"] = l_iou
        total = total + cfg.lambda_iou * l_iou
    if class_logits is not None and targets.class_targets is not None and class_logits.shape[0]:
        l_cls = F.cross_entropy(class_logits, targets.class_targets)
        terms["cls"] = l_cls
        total = total + cfg.lambda_cls * l_cls
    return LossBreakdown(total, terms)


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    rgb: Tensor
    depth3: Tensor
    instances: list[list[InstanceAnnotation]]


def scene_tensors(scene: Scene, dtype=torch.float32) -> tuple[Tensor, Tensor]:
    rgb = torch.as_tensor(np.asarray(scene.rgb), dtype=dtype)
    d = torch.as_tensor(normalize_depth(scene.depth), dtype=dtype)
    return rgb, d[None].expand(3, -1, -1).contiguous()


def make_batch(scenes: list[Scene], dtype=torch.float32, flip: list[bool] | None = None) -> Batch:
    rgbs, depths, insts = [], [], []
    for i, s in enumerate(scenes):
        rgb, d3 = scene_tensors(s, dtype)
        anns = s.instances
        if flip is not None and flip[i]:
            rgb, d3 = rgb.flip(-1), d3.flip(-1)
            anns = [InstanceAnnotation(mask=a.mask[:, ::-1].copy(), category_id=a.category_id, image_id=a.image_id) for a in anns]
        rgbs.append(rgb)
        depths.append(d3)
        insts.append(anns)
    return Batch(torch.stack(rgbs), torch.stack(depths), insts)


def boxes_tensor(anns: list[InstanceAnnotation], dtype=torch.float32) -> Tensor:
    if not anns:
        return torch.zeros(0, 4, dtype=dtype)
    return torch.tensor([a.box for a in anns], dtype=dtype)


@dataclass
class StepOutputs:
    rpn_out: RPNOutput
    coarse_logits: Tensor | None
    refined_logits: Tensor | None
    iou_pred: Tensor | None
    class_logits: Tensor | None
    targets: LossTargets


def forward_train(model: Segmenter, batch: Batch, max_proposals: int = 8) -> StepOutputs:
    """Encode, propose, and decode the proposals matched to ground truth.

    GT boxes are always included as prompts; RPN proposals with IoU >= 0.5
    against a GT fill the remaining slots in objectness order.
    """
    dtype = batch.rgb.dtype
    enc = model.encode(batch.rgb, batch.depth3 if model.fusion is not None else None)
    rpn_out = model.rpn(enc.final_rgb)
    props = model.proposals(rpn_out)
    gt_boxes = [boxes_tensor(a, dtype) for a in batch.instances]
    coarse, refined, ious, cls, masks, cls_t = [], [], [], [], [], []
    two_pass = model.ssspm is not None
    for b, anns in enumerate(batch.instances):
        if not anns:
            continue
        gtb = gt_boxes[b]
        cand = torch.cat([gtb, props[b][0].to(dtype)])
        iou = torch.as_tensor(box_iou_np(cand.numpy(), gtb.numpy()), dtype=dtype)
        best, idx = iou.max(dim=1)
        sel = torch.nonzero(best >= MATCH_IOU).flatten()[:max_proposals]
        out = model.two_pass(enc, b, cand[sel])
        coarse.append(out.coarse.mask_logits)
        if two_pass:
            refined.append(out.refined.mask_logits)
        ious.append(out.refined.iou_pred)
        if out.refined.class_logits is not None:
            cls.append(out.refined.class_logits)
        gi = idx[sel].tolist()
        masks.append(torch.as_tensor(np.stack([anns[j].mask for j in gi]), dtype=dtype))
        cls_t.append(torch.tensor([anns[j].category_id - 1 for j in gi], dtype=torch.long))
    S = batch.rgb.shape[-1]
    cat = lambda xs: torch.cat(xs) if xs else None  # noqa: E731
    targets = LossTargets(
        gt_boxes=gt_boxes,
        mask_targets=cat(masks) if masks else torch.zeros(0, S, S, dtype=dtype),
        class_targets=cat(cls_t) if cls else None,
    )
    return StepOutputs(rpn_out, cat(coarse), cat(refined), cat(ious), cat(cls), targets)


def step_loss(model: Segmenter, batch: Batch, cfg: TrainConfig) -> LossBreakdown:
    o = forward_train(model, batch)
    return combined_loss(o.rpn_out, o.coarse_logits, o.refined_logits, o.targets, cfg, o.iou_pred, o.class_logits)


# ---------------------------------------------------------------------------
# loop


@dataclass
class FitResult:
    records: list[dict]
    steps: int


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def _fmt(v: float) -> float:
    return float(f"{v:.10g}")


def fit(
    model: Segmenter,
    dataset: list[Scene],
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    eval_fn: Callable[[Segmenter], dict] | None = None,
) -> FitResult:
    """AdamW with the warm-up + cosine schedule. Deterministic for a fixed seed.

    ``eval_fn`` runs every ``eval_every`` steps and at the end; its dict is
    merged into that step's log record.
    """
    if len(dataset) == 0:
        raise ValueError("fit: dataset is empty")
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = model.trainable_parameters()
    opt = torch.optim.AdamW(params, lr=lr_at(0, cfg), weight_decay=cfg.weight_decay) if params else None
    records: list[dict] = []
    fh = open(log_path, "w") if log_path else None
    dtype = next(model.parameters()).dtype
    order: list[int] = []
    try:
        for step in range(cfg.max_iters):
            if len(order) < cfg.batch_size:
                order.extend(rng.permutation(len(dataset)).tolist())
            idx, order = order[: cfg.batch_size], order[cfg.batch_size :]
            flips = (rng.random(len(idx)) < 0.5).tolist() if cfg.hflip else None
            batch = make_batch([dataset[i] for i in idx], dtype, flips)
            lr = lr_at(step, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            model.train()
            loss = step_loss(model, batch, cfg)
            terms = loss.as_floats()
            if not all(math.isfinite(v) for v in terms.values()):
                raise NonFiniteLoss(step, terms)
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            opt.step()
            last = step == cfg.max_iters - 1
            do_eval = eval_fn is not None and ((cfg.eval_every and (step + 1) % cfg.eval_every == 0) or last)
            if (cfg.log_every and step % cfg.log_every == 0) or last or do_eval:
                rec = {"step": step, "lr": lr}
                rec.update({k: _fmt(v) for k, v in terms.items()})
                if do_eval:
                    model.eval()
                    rec.update({k: _fmt(v) for k, v in eval_fn(model).items()})
                records.append(rec)
                if fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    fh.flush()
                log.info("step %d lr %.3g loss %.4f", step, lr, terms["total"])
    finally:
        if fh:
            fh.close()
    model.eval()
    return FitResult(records, cfg.max_iters)
