"""Coarse-to-fine RGB-D fusion: a depth-gated coarse block and four
cross-attention fine blocks."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from dualseg.backbone import to_map, to_tokens


class FusionError(ValueError):
    pass


def _check_pair(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise FusionError(f"{name}: rgb shape {tuple(a.shape)} != depth shape {tuple(b.shape)}")


class CoarseFusion(nn.Module):
    """Gate RGB features with a sigmoid map computed from depth features.

    attn = sigmoid(up(conv1x1(relu(dilconv(down(depth))))))
    out  = rgb + attn * rgb
    """

    def __init__(self, channels: int, down_factor: int = 2, dilation: int = 2):
        super().__init__()
        self.down_factor = down_factor
        self.dilated = nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation)
        self.proj = nn.Conv2d(channels, channels, 1)

    def gate(self, f_depth: Tensor) -> Tensor:
        h, w = f_depth.shape[-2:]
        x = F.avg_pool2d(f_depth, self.down_factor)
        x = F.relu(self.dilated(x))
        x = self.proj(x)
        x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
        return torch.sigmoid(x)

    def forward(self, f_rgb: Tensor, f_depth: Tensor) -> Tensor:
        _check_pair("coarse_fuse", f_rgb, f_depth)
        h, w = f_rgb.shape[-2:]
        if h % self.down_factor or w % self.down_factor:
            raise FusionError(f"coarse_fuse: spatial size {(h, w)} not divisible by {self.down_factor}")
        return f_rgb + self.gate(f_depth) * f_rgb


class CrossAttention(nn.Module):
    """softmax(Q K^T / sqrt(d_k)) V with queries from one stream and keys/values
    from the other. No output projection unless requested; any residual is
    added by the caller."""

    def __init__(self, dim: int, heads: int, out_proj: bool = False):
        super().__init__()
        if dim % heads:
            raise FusionError(f"channels ({dim}) not divisible by heads ({heads})")
        self.heads = heads
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.out = nn.Linear(dim, dim, bias=False) if out_proj else None

    def forward(self, s_query: Tensor, s_kv: Tensor, return_probs: bool = False):
        b, n, c = s_query.shape
        m = s_kv.shape[1]
        dk = c // self.heads
        q = self.w_q(s_query).reshape(b, n, self.heads, dk).transpose(1, 2)
        k = self.w_k(s_kv).reshape(b, m, self.heads, dk).transpose(1, 2)
        v = self.w_v(s_kv).reshape(b, m, self.heads, dk).transpose(1, 2)
        probs = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dk), dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(b, n, c)
        if self.out is not None:
            out = self.out(out)
        return (out, probs) if return_probs else out


class FineFusion(nn.Module):
    """Two cross-attentions: RGB queries over depth, depth queries over RGB.

    With ``residual`` each output is added to its query stream. Without it the
    attention output replaces the stream outright, which averages away spatial
    structure when trained from scratch.
    """

    def __init__(
        self, channels: int, heads: int, out_proj: bool = False, residual: bool = True, depth_output: bool = True
    ):
        super().__init__()
        self.residual = residual
        self.rgb_query = CrossAttention(channels, heads, out_proj)
        # the last fine block's depth output has no consumer
        self.depth_query = CrossAttention(channels, heads, out_proj) if depth_output else None

    def forward(self, f_rgb: Tensor, f_depth: Tensor) -> tuple[Tensor, Tensor]:
        _check_pair("fine_fuse", f_rgb, f_depth)
        h, w = f_rgb.shape[-2:]
        s_rgb, s_depth = to_tokens(f_rgb), to_tokens(f_depth)
        new_rgb = self.rgb_query(s_rgb, s_depth)
        if self.residual:
            new_rgb = s_rgb + new_rgb
        if self.depth_query is None:
            return to_map(new_rgb, h, w), f_depth
        new_depth = self.depth_query(s_depth, s_rgb)
        if self.residual:
            new_depth = s_depth + new_depth
        return to_map(new_rgb, h, w), to_map(new_depth, h, w)


class C2FFM(nn.Module):
    """Fusion handle consumed by :func:`dualseg.backbone.run_dual_paths`."""

    def __init__(
        self, channels: int, heads: int = 4, down_factor: int = 2, dilation: int = 2, n_fine: int = 4, residual: bool = True
    ):
        super().__init__()
        self.coarse = CoarseFusion(channels, down_factor, dilation)
        self.fine = nn.ModuleList(
            FineFusion(channels, heads, residual=residual, depth_output=i < n_fine - 1) for i in range(n_fine)
        )

    def coarse_fuse(self, f_rgb: Tensor, f_depth: Tensor) -> Tensor:
        return self.coarse(f_rgb, f_depth)

    def fine_fuse(self, index: int, f_rgb: Tensor, f_depth: Tensor) -> tuple[Tensor, Tensor]:
        return self.fine[index](f_rgb, f_depth)


class IdentityFusion:
    """Pass-through handle; reproduces the RGB-only wiring."""

    def coarse_fuse(self, f_rgb, f_depth):
        return f_rgb

    def fine_fuse(self, index, f_rgb, f_depth):
        return f_rgb, f_depth
