"""Miniature ViT encoder paths with LoRA adapters and the dual-path wiring."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from dualseg.config import BackboneConfig, ConfigError


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of a B x C x H x W map."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


def to_tokens(x: Tensor) -> Tensor:
    """B x C x H x W -> B x (H*W) x C."""
    return x.flatten(2).transpose(1, 2)


def to_map(x: Tensor, h: int, w: int) -> Tensor:
    """B x (H*W) x C -> B x C x H x W."""
    return x.transpose(1, 2).reshape(x.shape[0], x.shape[2], h, w)


class PatchEmbed(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        self.proj = nn.Conv2d(3, cfg.embed_dim, kernel_size=p, stride=p)
        self.pos = nn.Parameter(torch.zeros(1, cfg.embed_dim, cfg.grid, cfg.grid))
        nn.init.normal_(self.pos, std=0.02)

    def forward(self, image: Tensor) -> Tensor:
        return patch_embed(image, self.proj.weight, self.proj.bias, self.pos, self.cfg)


def patch_embed(image: Tensor, weight: Tensor, bias: Tensor | None, pos: Tensor, cfg: BackboneConfig) -> Tensor:
    if image.dim() != 4:
        raise ConfigError(f"patch_embed: expected B x 3 x S x S, got rank {image.dim()}")
    if image.shape[1] != 3:
        raise ConfigError(f"patch_embed: channel dimension must be 3, got {image.shape[1]}")
    if image.shape[2] != cfg.image_size or image.shape[3] != cfg.image_size:
        raise ConfigError(
            f"patch_embed: spatial size {tuple(image.shape[2:])} does not match image_size {cfg.image_size}"
        )
    p = cfg.patch_size
    return F.conv2d(image, weight, bias, stride=p) + pos


class LoRALinear(nn.Module):
    """Linear layer plus a rank-r update (alpha/r) * B(A x); B starts at zero."""

    def __init__(self, in_features: int, out_features: int, rank: int = 0, alpha: float = 1.0, bias: bool = True):
        super().__init__()
        self.base = nn.Linear(in_features, out_features, bias=bias)
        self.rank = rank
        self.scale = alpha / rank if rank > 0 else 0.0
        if rank > 0:
            self.lora_a = nn.Parameter(torch.empty(rank, in_features))
            self.lora_b = nn.Parameter(torch.zeros(out_features, rank))
            nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))
        else:
            self.register_parameter("lora_a", None)
            self.register_parameter("lora_b", None)

    def forward(self, x: Tensor) -> Tensor:
        out = self.base(x)
        if self.rank > 0:
            out = out + self.scale * F.linear(F.linear(x, self.lora_a), self.lora_b)
        return out


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, lora_rank: int = 0, lora_alpha: float = 1.0):
        super().__init__()
        self.heads = heads
        self.q = LoRALinear(dim, dim, lora_rank, lora_alpha)
        # no key bias: softmax is invariant to a shift shared by all keys
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = LoRALinear(dim, dim, lora_rank, lora_alpha)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor, return_probs: bool = False):
        b, n, c = x.shape
        hd = c // self.heads

        def split(t):
            return t.reshape(b, n, self.heads, hd).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        probs = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(b, n, c)
        out = self.proj(out)
        return (out, probs) if return_probs else out


class Block(nn.Module):
    """Pre-norm self-attention + MLP block over B x N x C tokens."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, lora_rank: int = 0, lora_alpha: float = 1.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, lora_rank, lora_alpha)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def transformer_block(x: Tensor, block: Block) -> Tensor:
    """Apply ``block`` to a feature map, preserving its B x C x H x W shape."""
    if x.shape[1] != block.norm1.normalized_shape[0]:
        raise ConfigError(f"transformer_block: channel count {x.shape[1]} != {block.norm1.normalized_shape[0]}")
    h, w = x.shape[-2:]
    return to_map(block(to_tokens(x)), h, w)


class ViTPath(nn.Module):
    """One encoder path: patch embedding followed by ``n_blocks`` blocks
    (``cfg.depth`` unless given)."""

    def __init__(self, cfg: BackboneConfig, n_blocks: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg)
        n = cfg.depth if n_blocks is None else n_blocks
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, cfg.lora_rank, cfg.lora_alpha) for _ in range(n)
        )
        if cfg.freeze_base:
            self.freeze_base()

    def freeze_base(self) -> None:
        for name, p in self.named_parameters():
            if "lora_" not in name:
                p.requires_grad_(False)


class Neck(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(in_dim, out_dim, kernel_size=1, bias=False)
        self.norm = LayerNorm2d(out_dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.conv(x))


@dataclass
class EncoderOutput:
    final_rgb: Tensor
    tap_block2_rgb: Tensor
    tap_fine4_rgb: Tensor


def run_dual_paths(rgb: Tensor, depth3: Tensor, rgb_path: ViTPath, depth_path: ViTPath, neck: Neck, fusion) -> EncoderOutput:
    """Run both paths with one coarse fusion after patch embedding and a fine
    fusion after each tap block.

    ``fusion`` must provide ``coarse_fuse(r, d) -> r`` and
    ``fine_fuse(index, r, d) -> (r, d)``. The depth stream stops once
    ``depth_path`` runs out of blocks; nothing reads it after the last tap.
    """
    if fusion is None:
        raise ConfigError("run_dual_paths: fusion handle is required when fusion is enabled")
    if rgb.shape != depth3.shape:
        raise ConfigError(f"run_dual_paths: rgb shape {tuple(rgb.shape)} != depth shape {tuple(depth3.shape)}")
    cfg = rgb_path.cfg
    taps = cfg.fusion_taps
    r = rgb_path.patch_embed(rgb)
    d = depth_path.patch_embed(depth3)
    r = fusion.coarse_fuse(r, d)
    tap2 = fine4 = None
    for i in range(cfg.depth):
        r = transformer_block(r, rgb_path.blocks[i])
        if i < len(depth_path.blocks):
            d = transformer_block(d, depth_path.blocks[i])
        if i + 1 == 2:
            tap2 = r
        if i + 1 in taps:
            k = taps.index(i + 1)
            r, d = fusion.fine_fuse(k, r, d)
            if k == 3:
                fine4 = r
    return EncoderOutput(final_rgb=neck(r), tap_block2_rgb=tap2, tap_fine4_rgb=fine4)


def run_single_path(rgb: Tensor, rgb_path: ViTPath, neck: Neck) -> EncoderOutput:
    """RGB-only encoder (fusion disabled); taps sit at the same block indices."""
    cfg = rgb_path.cfg
    r = rgb_path.patch_embed(rgb)
    tap2 = fine4 = None
    for i in range(cfg.depth):
        r = transformer_block(r, rgb_path.blocks[i])
        if i + 1 == 2:
            tap2 = r
        if i + 1 == cfg.fusion_taps[3]:
            fine4 = r
    return EncoderOutput(final_rgb=neck(r), tap_block2_rgb=tap2, tap_fine4_rgb=fine4)
