"""Region proposals and a SAM-style two-way mask decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torchvision.ops import box_iou, nms

from dualseg.backbone import LayerNorm2d
from dualseg.config import ConfigError

BBOX_CLIP = math.log(1000.0 / 16)


# ---------------------------------------------------------------------------
# anchors and box coding


def make_anchors(grid: int, image_size: int, sizes, dtype=torch.float32) -> Tensor:
    """Square anchors centred on each cell, ordered (row, col, size)."""
    stride = image_size / grid
    c = (torch.arange(grid, dtype=dtype) + 0.5) * stride
    cy, cx = torch.meshgrid(c, c, indexing="ij")
    s = torch.as_tensor(sizes, dtype=dtype)
    cx = cx[..., None].expand(grid, grid, len(sizes))
    cy = cy[..., None].expand(grid, grid, len(sizes))
    half = (s / 2).expand(grid, grid, len(sizes))
    boxes = torch.stack([cx - half, cy - half, cx + half, cy + half], dim=-1)
    return boxes.reshape(-1, 4)


def encode_boxes(anchors: Tensor, boxes: Tensor) -> Tensor:
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    xa = anchors[:, 0] + 0.5 * wa
    ya = anchors[:, 1] + 0.5 * ha
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    x = boxes[:, 0] + 0.5 * w
    y = boxes[:, 1] + 0.5 * h
    return torch.stack([(x - xa) / wa, (y - ya) / ha, torch.log(w / wa), torch.log(h / ha)], dim=-1)


def decode_boxes(anchors: Tensor, deltas: Tensor) -> Tensor:
    wa = anchors[..., 2] - anchors[..., 0]
    ha = anchors[..., 3] - anchors[..., 1]
    xa = anchors[..., 0] + 0.5 * wa
    ya = anchors[..., 1] + 0.5 * ha
    dx, dy = deltas[..., 0], deltas[..., 1]
    dw = deltas[..., 2].clamp(max=BBOX_CLIP)
    dh = deltas[..., 3].clamp(max=BBOX_CLIP)
    x = xa + dx * wa
    y = ya + dy * ha
    w = wa * torch.exp(dw)
    h = ha * torch.exp(dh)
    return torch.stack([x - 0.5 * w, y - 0.5 * h, x + 0.5 * w, y + 0.5 * h], dim=-1)


@dataclass
class Proposal:
    box: tuple[float, float, float, float]
    objectness: float


@dataclass
class RPNOutput:
    objectness: Tensor  # B x N logits
    deltas: Tensor  # B x N x 4
    anchors: Tensor  # N x 4


class RPN(nn.Module):
    """Single-scale anchor head on the image embedding."""

    def __init__(self, dim: int, grid: int, image_size: int, anchor_sizes=(8.0, 16.0, 32.0)):
        super().__init__()
        self.num_anchors = len(anchor_sizes)
        self.image_size = image_size
        self.conv = nn.Conv2d(dim, dim, 3, padding=1)
        self.cls = nn.Conv2d(dim, self.num_anchors, 1)
        self.reg = nn.Conv2d(dim, 4 * self.num_anchors, 1)
        self.register_buffer("anchors", make_anchors(grid, image_size, anchor_sizes), persistent=False)

    def forward(self, embedding: Tensor) -> RPNOutput:
        b = embedding.shape[0]
        x = F.relu(self.conv(embedding))
        obj = self.cls(x).permute(0, 2, 3, 1).reshape(b, -1)
        deltas = self.reg(x).permute(0, 2, 3, 1).reshape(b, -1, 4)
        return RPNOutput(obj, deltas, self.anchors.to(embedding.dtype))


def select_proposals(
    out: RPNOutput, image_size: int, top_k: int = 16, nms_thresh: float = 0.7, score_thresh: float = 0.0
) -> list[tuple[Tensor, Tensor]]:
    """Per image: (boxes K x 4, objectness K) after clipping, NMS and top-k."""
    results = []
    for b in range(out.objectness.shape[0]):
        scores = torch.sigmoid(out.objectness[b]).detach()
        boxes = decode_boxes(out.anchors, out.deltas[b].detach()).clamp(0, image_size)
        keep = ((boxes[:, 2] - boxes[:, 0]) >= 1) & ((boxes[:, 3] - boxes[:, 1]) >= 1) & (scores > score_thresh)
        boxes, scores = boxes[keep], scores[keep]
        if boxes.numel():
            order = nms(boxes.float(), scores.float(), nms_thresh)[:top_k]
            boxes, scores = boxes[order], scores[order]
        results.append((boxes, scores))
    return results


def rpn_propose(image_embedding: Tensor, rpn: RPN, top_k: int = 16, nms_thresh: float = 0.7) -> list[list[Proposal]]:
    """Proposals for each image in the batch; a zero-area embedding yields none."""
    if image_embedding.shape[-1] == 0 or image_embedding.shape[-2] == 0:
        return [[] for _ in range(image_embedding.shape[0])]
    with torch.no_grad():
        sel = select_proposals(rpn(image_embedding), rpn.image_size, top_k, nms_thresh)
    return [
        [Proposal(tuple(float(v) for v in box), float(s)) for box, s in zip(boxes, scores)] for boxes, scores in sel
    ]


# ---------------------------------------------------------------------------
# prompt encoding


class PromptEncoder(nn.Module):
    """Random-Fourier positional encoding for box corners and the dense grid."""

    def __init__(self, dim: int, grid: int, image_size: int, scale: float = 1.0):
        super().__init__()
        if dim % 2:
            raise ConfigError(f"prompt_dim must be even, got {dim}")
        self.dim = dim
        self.grid = grid
        self.image_size = image_size
        self.register_buffer("gaussian", scale * torch.randn(2, dim // 2))
        self.corner_embed = nn.Parameter(torch.randn(2, dim) * 0.02)
        self.no_mask_embed = nn.Parameter(torch.randn(dim) * 0.02)

    def encode_coords(self, coords: Tensor) -> Tensor:
        """coords in [0, 1] (..., 2) -> (..., dim)."""
        c = (2 * coords - 1) @ self.gaussian.to(coords.dtype)
        c = 2 * math.pi * c
        return torch.cat([torch.sin(c), torch.cos(c)], dim=-1)

    def dense_pe(self) -> Tensor:
        g = self.grid
        ref = self.gaussian
        c = (torch.arange(g, dtype=ref.dtype, device=ref.device) + 0.5) / g
        yy, xx = torch.meshgrid(c, c, indexing="ij")
        pe = self.encode_coords(torch.stack([xx, yy], dim=-1))
        return pe.permute(2, 0, 1)[None]

    def no_mask_dense(self) -> Tensor:
        return self.no_mask_embed[None, :, None, None].expand(1, -1, self.grid, self.grid)

    def forward(self, boxes: Tensor) -> Tensor:
        return boxes_to_sparse_prompts(boxes, self)


def boxes_to_sparse_prompts(boxes: Tensor, enc: PromptEncoder) -> Tensor:
    """K x 4 pixel boxes -> K x 2 x dim corner tokens."""
    if boxes.dim() != 2 or boxes.shape[1] != 4:
        raise ValueError(f"boxes must be K x 4, got {tuple(boxes.shape)}")
    if boxes.shape[0] and ((boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])).any():
        raise ValueError("degenerate box (x2 <= x1 or y2 <= y1) cannot be encoded")
    corners = (boxes.reshape(-1, 2, 2) + 0.5) / enc.image_size
    pe = enc.encode_coords(corners)
    return pe + enc.corner_embed.to(pe.dtype)


# ---------------------------------------------------------------------------
# two-way transformer


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, layers: int):
        super().__init__()
        dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class DecoderAttention(nn.Module):
    def __init__(self, dim: int, heads: int, downsample: int = 1):
        super().__init__()
        inner = dim // downsample
        if inner % heads:
            raise ConfigError(f"attention width {inner} not divisible by heads {heads}")
        self.heads = heads
        self.q_proj = nn.Linear(dim, inner)
        self.k_proj = nn.Linear(dim, inner, bias=False)
        self.v_proj = nn.Linear(dim, inner)
        self.out_proj = nn.Linear(inner, dim)

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        q, k, v = self.q_proj(q), self.k_proj(k), self.v_proj(v)
        b, n, c = q.shape
        m = k.shape[1]
        hd = c // self.heads
        q = q.reshape(b, n, self.heads, hd).transpose(1, 2)
        k = k.reshape(b, m, self.heads, hd).transpose(1, 2)
        v = v.reshape(b, m, self.heads, hd).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.out_proj(out)


class TwoWayBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int, skip_first_pe: bool = False):
        super().__init__()
        self.self_attn = DecoderAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.token_to_image = DecoderAttention(dim, heads, downsample=2)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_dim), nn.ReLU(), nn.Linear(mlp_dim, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.image_to_token = DecoderAttention(dim, heads, downsample=2)
        self.norm4 = nn.LayerNorm(dim)
        self.skip_first_pe = skip_first_pe

    def forward(self, queries: Tensor, keys: Tensor, query_pe: Tensor, key_pe: Tensor):
        if self.skip_first_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)

        q, k = queries + query_pe, keys + key_pe
        queries = self.norm2(queries + self.token_to_image(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))

        q, k = queries + query_pe, keys + key_pe
        keys = self.norm4(keys + self.image_to_token(k, q, queries))
        return queries, keys


class TwoWayTransformer(nn.Module):
    def __init__(self, depth: int, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.layers = nn.ModuleList(TwoWayBlock(dim, heads, mlp_dim, skip_first_pe=(i == 0)) for i in range(depth))
        self.final_attn = DecoderAttention(dim, heads, downsample=2)
        self.norm_final = nn.LayerNorm(dim)

    def forward(self, image: Tensor, image_pe: Tensor, tokens: Tensor) -> tuple[Tensor, Tensor]:
        keys = image.flatten(2).transpose(1, 2)
        key_pe = image_pe.flatten(2).transpose(1, 2)
        queries = tokens
        for layer in self.layers:
            queries, keys = layer(queries, keys, tokens, key_pe)
        q, k = queries + tokens, keys + key_pe
        queries = self.norm_final(queries + self.final_attn(q, k, keys))
        return queries, keys


# ---------------------------------------------------------------------------
# mask decoder


@dataclass
class DecodeResult:
    mask_logits: Tensor  # K x S x S
    low_res_logits: Tensor  # K x 4g x 4g
    iou_pred: Tensor  # K
    f_src: Tensor  # K x C_dec x 4g x 4g
    class_logits: Tensor | None = None


class MaskDecoder(nn.Module):
    def __init__(self, dim: int, image_size: int, depth: int = 2, heads: int = 2, mlp_dim: int = 64, num_classes: int = 0):
        super().__init__()
        self.dim = dim
        self.image_size = image_size
        self.dec_dim = dim // 4
        self.transformer = TwoWayTransformer(depth, dim, heads, mlp_dim)
        self.iou_token = nn.Parameter(torch.randn(1, dim) * 0.02)
        self.mask_token = nn.Parameter(torch.randn(1, dim) * 0.02)
        self.up1 = nn.ConvTranspose2d(dim, dim // 2, kernel_size=2, stride=2)
        self.up_norm = LayerNorm2d(dim // 2)
        self.up2 = nn.ConvTranspose2d(dim // 2, self.dec_dim, kernel_size=2, stride=2)
        self.hyper = MLP(dim, dim, self.dec_dim, 3)
        self.iou_head = MLP(dim, dim, 1, 3)
        self.class_head = MLP(dim, dim, num_classes, 2) if num_classes > 0 else None

    def upscale(self, src: Tensor) -> Tensor:
        return F.gelu(self.up2(F.gelu(self.up_norm(self.up1(src)))))

    def forward(self, image_embedding: Tensor, image_pe: Tensor, sparse: Tensor, dense: Tensor) -> DecodeResult:
        return decode(image_embedding, image_pe, sparse, dense, self)


def decode(image_embedding: Tensor, image_pe: Tensor, sparse: Tensor, dense: Tensor, dec: MaskDecoder) -> DecodeResult:
    """One decoder invocation for K prompts against a single image embedding.

    ``image_embedding`` is 1 x C x g x g, ``sparse`` K x T x C (T may be 0),
    ``dense`` broadcastable to K x C x g x g.
    """
    if image_embedding.shape[0] != 1:
        raise ValueError("decode expects one image embedding; batch over prompts instead")
    c, g = image_embedding.shape[1], image_embedding.shape[-1]
    if c != dec.dim or sparse.shape[-1] != dec.dim or dense.shape[1] != dec.dim:
        raise ConfigError(
            f"decode: prompt width mismatch (embedding {c}, sparse {sparse.shape[-1]}, "
            f"dense {dense.shape[1]}, decoder {dec.dim})"
        )
    if dense.shape[-2:] != image_embedding.shape[-2:]:
        raise ConfigError(f"decode: dense prompt grid {tuple(dense.shape[-2:])} != embedding grid {(g, g)}")
    k = sparse.shape[0]
    out_tokens = torch.cat([dec.iou_token, dec.mask_token], dim=0).to(sparse.dtype)
    tokens = torch.cat([out_tokens[None].expand(k, -1, -1), sparse], dim=1)
    src = image_embedding.expand(k, -1, -1, -1) + dense
    pos = image_pe.to(src.dtype).expand(k, -1, -1, -1)
    hs, keys = dec.transformer(src, pos, tokens)
    src_map = keys.transpose(1, 2).reshape(k, c, g, g)
    f_src = dec.upscale(src_map)
    hyper = dec.hyper(hs[:, 1])
    low = torch.einsum("kc,kchw->khw", hyper, f_src)
    logits = F.interpolate(low[:, None], size=(dec.image_size, dec.image_size), mode="bilinear", align_corners=False)[:, 0]
    iou = torch.sigmoid(dec.iou_head(hs[:, 0]))[:, 0]
    cls = dec.class_head(hs[:, 1]) if dec.class_head is not None else None
    return DecodeResult(logits, low, iou, f_src, cls)


def mask_nms(masks: Tensor, scores: Tensor, thresh: float = 0.5) -> Tensor:
    """Greedy NMS on binary masks; returns kept indices in score order."""
    if masks.shape[0] == 0:
        return torch.zeros(0, dtype=torch.long)
    order = torch.argsort(scores, descending=True, stable=True)
    flat = masks[order].reshape(len(order), -1).float()
    inter = flat @ flat.T
    area = flat.sum(1)
    union = area[:, None] + area[None, :] - inter
    iou = torch.where(union > 0, inter / union.clamp(min=1), torch.zeros_like(inter))
    keep = []
    suppressed = torch.zeros(len(order), dtype=torch.bool)
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= iou[i] > thresh
    return order[torch.as_tensor(keep, dtype=torch.long)]


def box_iou_matrix(a: Tensor, b: Tensor) -> Tensor:
    return box_iou(a, b)
