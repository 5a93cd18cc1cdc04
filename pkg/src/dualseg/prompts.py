"""Self-prompt construction: semantic prompt from encoder + decoder features,
spatial prompt from the coarse mask, and their channel-attention fusion."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from dualseg.backbone import LayerNorm2d


class AlignmentError(ValueError):
    pass


class FeatureAlign(nn.Module):
    """deconv -> LayerNorm -> GELU -> deconv; 4x spatial upsampling."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.up1 = nn.ConvTranspose2d(in_dim, out_dim, kernel_size=2, stride=2)
        self.norm = LayerNorm2d(out_dim)
        self.up2 = nn.ConvTranspose2d(out_dim, out_dim, kernel_size=2, stride=2)

    def forward(self, x: Tensor) -> Tensor:
        return self.up2(F.gelu(self.norm(self.up1(x))))


class SemanticAlign(nn.Module):
    def __init__(self, enc_dim: int, dec_dim: int):
        super().__init__()
        self.low = FeatureAlign(enc_dim, dec_dim)
        self.high = FeatureAlign(enc_dim, dec_dim)

    def forward(self, low: Tensor, high: Tensor) -> Tensor:
        return align_features(low, high, self)


def align_features(low: Tensor, high: Tensor, align: SemanticAlign) -> Tensor:
    """F_Sem = align_low(low) + align_high(high)."""
    a = align.low(low)
    b = align.high(high)
    if a.shape != b.shape:
        raise AlignmentError(f"aligned shapes disagree: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a + b


class PromptEnhance(nn.Module):
    """Channel-attention enhancement of (F_Src + F_Sem), then two stride-2 convs
    to the dense-prompt grid and width."""

    def __init__(self, dec_dim: int, prompt_dim: int):
        super().__init__()
        self.att_conv1 = nn.Conv2d(dec_dim, dec_dim, 3, padding=1)
        self.att_norm = LayerNorm2d(dec_dim)
        self.att_conv2 = nn.Conv2d(dec_dim, dec_dim, 1)
        self.down1 = nn.Conv2d(dec_dim, prompt_dim // 2, kernel_size=2, stride=2)
        self.down2 = nn.Conv2d(prompt_dim // 2, prompt_dim, kernel_size=2, stride=2)

    def channel_attention(self, fused: Tensor) -> Tensor:
        a = F.relu(self.att_norm(self.att_conv1(fused)))
        a = self.att_conv2(a)
        return torch.sigmoid(a.mean(dim=(2, 3), keepdim=True))

    def modulate(self, f_src: Tensor, f_sem: Tensor) -> Tensor:
        if f_src.shape[-3:] != f_sem.shape[-3:]:
            raise AlignmentError(
                f"F_Src {tuple(f_src.shape)} and F_Sem {tuple(f_sem.shape)} differ; "
                "re-run align_features at the decoder feature resolution"
            )
        fused = f_src + f_sem
        return fused * self.channel_attention(fused)

    def forward(self, f_src: Tensor, f_sem: Tensor) -> Tensor:
        x = self.modulate(f_src, f_sem)
        return self.down2(F.gelu(self.down1(x)))


class MaskEncoder(nn.Module):
    """Probability map (B x 1 x S x S) -> dense embedding at S/4."""

    def __init__(self, prompt_dim: int):
        super().__init__()
        c1, c2 = max(prompt_dim // 8, 1), max(prompt_dim // 2, 1)
        self.conv1 = nn.Conv2d(1, c1, kernel_size=2, stride=2)
        self.norm1 = LayerNorm2d(c1)
        self.conv2 = nn.Conv2d(c1, c2, kernel_size=2, stride=2)
        self.norm2 = LayerNorm2d(c2)
        self.proj = nn.Conv2d(c2, prompt_dim, kernel_size=1)

    def forward(self, prob: Tensor) -> Tensor:
        return encode_mask(prob, self)


def encode_mask(prob: Tensor, enc: MaskEncoder) -> Tensor:
    if prob.dim() != 4 or prob.shape[1] != 1:
        raise ValueError(f"encode_mask: expected B x 1 x S x S, got {tuple(prob.shape)}")
    if prob.numel() and (prob.min() < 0 or prob.max() > 1):
        raise ValueError("encode_mask: values must lie in [0, 1]; apply the logistic to logits first")
    x = F.gelu(enc.norm1(enc.conv1(prob)))
    x = F.gelu(enc.norm2(enc.conv2(x)))
    return enc.proj(x)


class PromptFusion(nn.Module):
    """P_Fused = conv(concat); attn = sigmoid(conv(relu(conv(GAP)))); P_Out = P_Fused * attn."""

    def __init__(self, prompt_dim: int, reduction: int = 4):
        super().__init__()
        hidden = max(prompt_dim // reduction, 1)
        self.fuse = nn.Conv2d(2 * prompt_dim, prompt_dim, 1)
        self.att1 = nn.Conv2d(prompt_dim, hidden, 1)
        self.att2 = nn.Conv2d(hidden, prompt_dim, 1)

    def attention(self, p_fused: Tensor) -> Tensor:
        g = p_fused.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.att2(F.relu(self.att1(g))))

    def forward(self, p_semantic: Tensor, p_spatial: Tensor) -> tuple[Tensor, Tensor]:
        if p_semantic.shape != p_spatial.shape:
            raise ValueError(
                f"fuse_prompts: semantic {tuple(p_semantic.shape)} != spatial {tuple(p_spatial.shape)}"
            )
        p_fused = self.fuse(torch.cat([p_semantic, p_spatial], dim=1))
        return p_fused * self.attention(p_fused), p_fused


def fuse_prompts(p_semantic: Tensor, p_spatial: Tensor, fusion: PromptFusion) -> Tensor:
    return fusion(p_semantic, p_spatial)[0]


@dataclass
class PromptBundle:
    p_semantic: Tensor
    p_spatial: Tensor
    p_fused: Tensor
    p_out: Tensor


class SSSPM(nn.Module):
    """Builds the dense prompt for the second decoder pass.

    A disabled branch contributes zeros and owns no parameters.
    """

    def __init__(self, enc_dim: int, dec_dim: int, prompt_dim: int, use_semantic: bool = True, use_spatial: bool = True):
        super().__init__()
        self.prompt_dim = prompt_dim
        self.align = SemanticAlign(enc_dim, dec_dim) if use_semantic else None
        self.enhance = PromptEnhance(dec_dim, prompt_dim) if use_semantic else None
        self.mask_encoder = MaskEncoder(prompt_dim) if use_spatial else None
        self.fusion = PromptFusion(prompt_dim)

    def forward(self, low: Tensor, high: Tensor, f_src: Tensor, prob: Tensor) -> PromptBundle:
        k = f_src.shape[0]
        grid = (f_src.shape[-2] // 4, f_src.shape[-1] // 4)
        zeros = f_src.new_zeros(k, self.prompt_dim, *grid)
        if self.align is not None:
            f_sem = self.align(low, high)
            p_sem = self.enhance(f_src, f_sem.expand(k, -1, -1, -1))
        else:
            p_sem = zeros
        p_spa = self.mask_encoder(prob) if self.mask_encoder is not None else zeros
        p_out, p_fused = self.fusion(p_sem, p_spa)
        return PromptBundle(p_sem, p_spa, p_fused, p_out)
