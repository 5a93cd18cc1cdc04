import numpy as np
import pytest
import torch

from dualseg.prompts import (
    SSSPM,
    AlignmentError,
    MaskEncoder,
    PromptEnhance,
    PromptFusion,
    SemanticAlign,
    align_features,
    encode_mask,
    fuse_prompts,
)

from gradcheck import max_rel_error, projector
from oracles import encode_mask_loop, fuse_prompts_loop


@pytest.fixture(autouse=True)
def _f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def _randomize(module, seed, std=0.5):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g) * std)


def _params_np(module):
    return {k: v.detach().numpy() for k, v in module.state_dict().items()}


# --------------------------------------------------------------------------- align


def test_align_zero_weights_gives_bias_sum():
    al = SemanticAlign(8, 4)
    with torch.no_grad():
        for name, p in al.named_parameters():
            if name.endswith("up2.bias"):
                p.normal_()
            else:
                p.zero_()
    out = align_features(torch.randn(1, 8, 2, 2), torch.randn(1, 8, 2, 2), al)
    expect = (al.low.up2.bias + al.high.up2.bias)[None, :, None, None].expand_as(out)
    torch.testing.assert_close(out, expect, atol=1e-14, rtol=0)


def test_align_tied_branches_double():
    al = SemanticAlign(8, 4)
    _randomize(al, 0)
    al.high.load_state_dict(al.low.state_dict())
    x = torch.randn(1, 8, 2, 2)
    torch.testing.assert_close(align_features(x, x, al), 2 * al.low(x), atol=1e-12, rtol=0)


def test_align_shape():
    al = SemanticAlign(16, 6)
    assert align_features(torch.randn(1, 16, 8, 8), torch.randn(1, 16, 8, 8), al).shape == (1, 6, 32, 32)


def test_align_shape_disagreement():
    al = SemanticAlign(4, 4)
    with pytest.raises(AlignmentError):
        align_features(torch.randn(1, 4, 2, 2), torch.randn(1, 4, 3, 3), al)


# --------------------------------------------------------------------------- enhance


def test_enhance_zero_attention_halves():
    pe = PromptEnhance(4, 8)
    with torch.no_grad():
        for m in (pe.att_conv1, pe.att_conv2):
            m.weight.zero_()
            m.bias.zero_()
    f_src = torch.randn(1, 4, 8, 8)
    torch.testing.assert_close(pe.modulate(f_src, torch.zeros_like(f_src)), 0.5 * f_src, atol=0, rtol=0)


def test_enhance_channel_constancy():
    pe = PromptEnhance(4, 8)
    _randomize(pe, 4)
    fused = torch.randn(2, 4, 8, 8)
    ratio = pe.modulate(fused, torch.zeros_like(fused)) / fused
    spread = (ratio.amax(dim=(2, 3)) - ratio.amin(dim=(2, 3))).max()
    assert spread <= 1e-6


def test_enhance_shapes_and_error():
    pe = PromptEnhance(8, 32)
    assert pe(torch.randn(1, 8, 32, 32), torch.randn(1, 8, 32, 32)).shape == (1, 32, 8, 8)
    with pytest.raises(AlignmentError, match="align_features"):
        pe(torch.randn(1, 8, 32, 32), torch.randn(1, 8, 16, 16))


# --------------------------------------------------------------------------- mask encoder


def test_encode_mask_zero():
    enc = MaskEncoder(16)
    _randomize(enc, 0)
    with torch.no_grad():
        for name, p in enc.named_parameters():
            if name.endswith("bias"):
                p.zero_()
    out = encode_mask(torch.zeros(1, 1, 16, 16), enc)
    assert (out == 0).all()


def test_encode_mask_shape():
    assert encode_mask(torch.rand(2, 1, 64, 64), MaskEncoder(32)).shape == (2, 32, 16, 16)


@pytest.mark.parametrize("seed", range(4))
def test_encode_mask_loop_oracle(seed):
    enc = MaskEncoder(16)
    _randomize(enc, seed)
    prob = torch.rand(1, 1, 8, 8, generator=torch.Generator().manual_seed(seed))
    out = encode_mask(prob, enc)
    ref = encode_mask_loop(prob[0].numpy(), _params_np(enc))
    assert np.abs(out[0].detach().numpy() - ref).max() <= 1e-10


@pytest.mark.parametrize("bad", [-0.1, 1.5])
def test_encode_mask_rejects_logits(bad):
    x = torch.full((1, 1, 8, 8), 0.5)
    x[0, 0, 0, 0] = bad
    with pytest.raises(ValueError, match="logistic"):
        encode_mask(x, MaskEncoder(16))


# --------------------------------------------------------------------------- fusion


def test_fuse_zero_attention_halves():
    pf = PromptFusion(8)
    _randomize(pf, 1)
    with torch.no_grad():
        for m in (pf.att1, pf.att2):
            m.weight.zero_()
            m.bias.zero_()
    a, b = torch.randn(1, 8, 4, 4), torch.randn(1, 8, 4, 4)
    p_out, p_fused = pf(a, b)
    assert torch.equal(p_out, 0.5 * p_fused)


@pytest.mark.parametrize("seed", range(4))
def test_fuse_loop_oracle(seed):
    pf = PromptFusion(8)
    _randomize(pf, seed)
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(1, 8, 4, 4, generator=g), torch.randn(1, 8, 4, 4, generator=g)
    ref = fuse_prompts_loop(a[0].numpy(), b[0].numpy(), _params_np(pf))
    assert np.abs(fuse_prompts(a, b, pf)[0].detach().numpy() - ref).max() <= 1e-10


def test_fuse_contraction_and_constancy():
    pf = PromptFusion(8)
    _randomize(pf, 7)
    p_out, p_fused = pf(torch.randn(2, 8, 4, 4), torch.randn(2, 8, 4, 4))
    assert (p_out.abs() <= p_fused.abs()).all()
    assert p_out.abs().max() < p_fused.abs().max()
    ratio = p_out / p_fused
    assert (ratio.amax(dim=(2, 3)) - ratio.amin(dim=(2, 3))).max() <= 1e-6


def test_fuse_shape_mismatch():
    with pytest.raises(ValueError):
        PromptFusion(8)(torch.randn(1, 8, 4, 4), torch.randn(1, 8, 2, 2))


# --------------------------------------------------------------------------- module


@pytest.mark.parametrize("sem,spa", [(True, True), (True, False), (False, True), (False, False)])
def test_ssspm_shapes_and_disabled_branches(sem, spa):
    m = SSSPM(enc_dim=8, dec_dim=4, prompt_dim=16, use_semantic=sem, use_spatial=spa)
    low, high = torch.randn(1, 8, 2, 2), torch.randn(1, 8, 2, 2)
    f_src = torch.randn(3, 4, 8, 8)
    prob = torch.rand(3, 1, 8, 8)
    b = m(low, high, f_src, prob)
    assert b.p_out.shape == b.p_fused.shape == (3, 16, 2, 2)
    if not sem:
        assert (b.p_semantic == 0).all() and m.align is None
    if not spa:
        assert (b.p_spatial == 0).all() and m.mask_encoder is None


# --------------------------------------------------------------------------- gradients


@pytest.mark.parametrize("seed", range(10))
def test_align_gradients(seed):
    al = SemanticAlign(4, 3)
    _randomize(al, seed)
    g = torch.Generator().manual_seed(seed)
    low = torch.randn(1, 4, 2, 2, generator=g, requires_grad=True)
    high = torch.randn(1, 4, 2, 2, generator=g, requires_grad=True)
    proj = projector((1, 3, 8, 8), seed)
    fn = lambda: (align_features(low, high, al) * proj).sum()  # noqa: E731
    assert max_rel_error(fn, list(al.parameters()) + [low, high], seed=seed) <= 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_enhance_gradients(seed):
    pe = PromptEnhance(4, 8)
    _randomize(pe, seed)
    g = torch.Generator().manual_seed(seed)
    f_src = torch.randn(1, 4, 8, 8, generator=g, requires_grad=True)
    f_sem = torch.randn(1, 4, 8, 8, generator=g, requires_grad=True)
    proj = projector((1, 8, 2, 2), seed)
    fn = lambda: (pe(f_src, f_sem) * proj).sum()  # noqa: E731
    assert max_rel_error(fn, list(pe.parameters()) + [f_src, f_sem], seed=seed) <= 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_encode_mask_gradients(seed):
    # width 32 (the tiny config): 4 channels after the first conv. Two-channel
    # LayerNorm is nearly a sign function and defeats finite differences.
    enc = MaskEncoder(32)
    _randomize(enc, seed)
    # keep probabilities away from the [0, 1] boundary so perturbations stay valid
    prob = (0.2 + 0.6 * torch.rand(1, 1, 8, 8, generator=torch.Generator().manual_seed(seed))).requires_grad_()
    proj = projector((1, 32, 2, 2), seed)
    fn = lambda: (encode_mask(prob, enc) * proj).sum()  # noqa: E731
    assert max_rel_error(fn, list(enc.parameters()) + [prob], seed=seed) <= 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_fuse_gradients(seed):
    pf = PromptFusion(8)
    _randomize(pf, seed)
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(1, 8, 2, 2, generator=g, requires_grad=True)
    b = torch.randn(1, 8, 2, 2, generator=g, requires_grad=True)
    proj = projector((1, 8, 2, 2), seed)
    fn = lambda: (fuse_prompts(a, b, pf) * proj).sum()  # noqa: E731
    assert max_rel_error(fn, list(pf.parameters()) + [a, b], seed=seed) <= 1e-4
