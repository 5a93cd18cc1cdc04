"""The full segmenter: dual-path encoder, RPN, and coarse -> refined decoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from dualseg.backbone import EncoderOutput, Neck, ViTPath, run_dual_paths, run_single_path
from dualseg.config import ModelConfig
from dualseg.decoder import (
    RPN,
    DecodeResult,
    MaskDecoder,
    PromptEncoder,
    RPNOutput,
    mask_nms,
    select_proposals,
)
from dualseg.fusion import C2FFM
from dualseg.prompts import SSSPM, PromptBundle
from dualseg.structures import InstanceAnnotation, mask_to_box


@dataclass
class TwoPassResult:
    coarse: DecodeResult
    refined: DecodeResult
    prompts: PromptBundle | None


class Segmenter(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        bb = cfg.backbone
        self.rgb_path = ViTPath(bb)
        if cfg.use_c2ffm:
            self.depth_path = ViTPath(bb, n_blocks=max(bb.fusion_taps))
            self.fusion = C2FFM(
                bb.embed_dim, cfg.fusion_heads, cfg.coarse_down, cfg.coarse_dilation, residual=cfg.fine_residual
            )
        else:
            self.depth_path = None
            self.fusion = None
        self.neck = Neck(bb.embed_dim, cfg.prompt_dim)
        self.rpn = RPN(cfg.prompt_dim, bb.grid, bb.image_size, cfg.anchor_sizes)
        self.prompt_encoder = PromptEncoder(cfg.prompt_dim, bb.grid, bb.image_size)
        self.mask_decoder = MaskDecoder(
            cfg.prompt_dim, bb.image_size, cfg.decoder_depth, cfg.decoder_heads, cfg.decoder_mlp_dim, cfg.num_classes
        )
        if cfg.use_ssspm:
            self.ssspm = SSSPM(
                bb.embed_dim, self.mask_decoder.dec_dim, cfg.prompt_dim, cfg.use_semantic_prompt, cfg.use_spatial_prompt
            )
        else:
            self.ssspm = None

    def encode(self, rgb: Tensor, depth3: Tensor | None) -> EncoderOutput:
        if self.fusion is None:
            return run_single_path(rgb, self.rgb_path, self.neck)
        return run_dual_paths(rgb, depth3, self.rgb_path, self.depth_path, self.neck, self.fusion)

    def two_pass(self, enc: EncoderOutput, b: int, boxes: Tensor) -> TwoPassResult:
        """Coarse pass from box prompts, then a refined pass with the self-prompt."""
        emb = enc.final_rgb[b : b + 1]
        pe = self.prompt_encoder.dense_pe().to(emb.dtype)
        sparse = self.prompt_encoder(boxes.to(emb.dtype))
        coarse = self.mask_decoder(emb, pe, sparse, self.prompt_encoder.no_mask_dense().to(emb.dtype))
        if self.ssspm is None:
            return TwoPassResult(coarse, coarse, None)
        prob = torch.sigmoid(coarse.low_res_logits)[:, None]
        bundle = self.ssspm(enc.tap_block2_rgb[b : b + 1], enc.tap_fine4_rgb[b : b + 1], coarse.f_src, prob)
        sparse2 = sparse if self.cfg.resupply_sparse else sparse[:, :0]
        refined = self.mask_decoder(emb, pe, sparse2, bundle.p_out)
        return TwoPassResult(coarse, refined, bundle)

    def proposals(self, rpn_out: RPNOutput) -> list[tuple[Tensor, Tensor]]:
        return select_proposals(rpn_out, self.cfg.backbone.image_size, self.cfg.rpn_top_k, self.cfg.rpn_nms)

    @torch.no_grad()
    def segment(self, rgb: Tensor, depth3: Tensor | None, score_thresh: float = 0.0) -> list[list[InstanceAnnotation]]:
        """Refined instance masks per image, ranked by objectness x predicted IoU."""
        enc = self.encode(rgb, depth3)
        rpn_out = self.rpn(enc.final_rgb)
        results = []
        for b, (boxes, obj) in enumerate(self.proposals(rpn_out)):
            if boxes.shape[0] == 0:
                results.append([])
                continue
            out = self.two_pass(enc, b, boxes)
            masks = torch.sigmoid(out.refined.mask_logits) > 0.5
            scores = obj.to(out.refined.iou_pred.dtype) * out.refined.iou_pred
            nonempty = masks.flatten(1).any(1)
            idx = torch.nonzero(nonempty).flatten()
            keep = idx[mask_nms(masks[idx], scores[idx], self.cfg.mask_nms)] if idx.numel() else idx
            if out.refined.class_logits is not None:
                labels = out.refined.class_logits.argmax(-1) + 1
            else:
                labels = torch.ones(len(scores), dtype=torch.long)
            anns = []
            for i in keep.tolist():
                m = masks[i].numpy().astype(bool)
                anns.append(
                    InstanceAnnotation(
                        mask=m, box=mask_to_box(m), category_id=int(labels[i]), score=float(scores[i])
                    )
                )
            results.append(anns)
        return results

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def prepare_inputs(rgb: np.ndarray | Tensor, depth: np.ndarray | Tensor | None, dtype=torch.float32):
    """Stack HxWx3 / 3xHxW rgb and HxW depth into model tensors with a batch axis."""
    rgb_t = torch.as_tensor(np.asarray(rgb), dtype=dtype)
    if rgb_t.dim() == 3 and rgb_t.shape[-1] == 3 and rgb_t.shape[0] != 3:
        rgb_t = rgb_t.permute(2, 0, 1)
    if rgb_t.dim() == 3:
        rgb_t = rgb_t[None]
    if depth is None:
        return rgb_t, None
    d = torch.as_tensor(np.asarray(depth), dtype=dtype)
    while d.dim() < 4:
        d = d[None]
    if d.shape[1] == 1:
        d = d.expand(-1, 3, -1, -1).contiguous()
    return rgb_t, d


def resize_to(x: Tensor, size: int) -> Tensor:
    if x.shape[-1] == size and x.shape[-2] == size:
        return x
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
