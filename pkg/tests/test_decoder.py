import math

import numpy as np
import pytest
import torch

from dualseg.config import ConfigError, TrainConfig, tiny_model_config
from dualseg.data.synthetic import make_dataset
from dualseg.decoder import (
    RPN,
    MaskDecoder,
    PromptEncoder,
    boxes_to_sparse_prompts,
    decode,
    decode_boxes,
    encode_boxes,
    make_anchors,
    mask_nms,
    rpn_propose,
    select_proposals,
)
from dualseg.model import Segmenter
from dualseg.training import make_batch, step_loss

from gradcheck import max_rel_error, projector
from oracles import decoder_reference


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


# --------------------------------------------------------------------------- rpn


def test_anchor_layout():
    a = make_anchors(2, 32, (8.0, 16.0))
    assert a.shape == (8, 4)
    # first cell centre is (8, 8); order is (row, col, size)
    assert a[0].tolist() == [4.0, 4.0, 12.0, 12.0]
    assert a[1].tolist() == [0.0, 0.0, 16.0, 16.0]
    assert a[2].tolist() == [20.0, 4.0, 28.0, 12.0]


def test_box_coding_round_trip():
    torch.manual_seed(0)
    anchors = make_anchors(4, 64, (8.0, 16.0, 32.0))
    xy = torch.rand(len(anchors), 2) * 40
    wh = torch.rand(len(anchors), 2) * 20 + 1
    boxes = torch.cat([xy, xy + wh], dim=1)
    torch.testing.assert_close(decode_boxes(anchors, encode_boxes(anchors, boxes)), boxes, atol=1e-10, rtol=0)


def test_zero_head_gives_half_objectness_and_anchor_boxes():
    rpn = RPN(8, grid=4, image_size=32)
    with torch.no_grad():
        for m in (rpn.cls, rpn.reg):
            m.weight.zero_()
            m.bias.zero_()
    out = rpn(torch.randn(1, 8, 4, 4))
    assert torch.equal(torch.sigmoid(out.objectness), torch.full_like(out.objectness, 0.5))
    torch.testing.assert_close(decode_boxes(out.anchors, out.deltas[0]), out.anchors, atol=0, rtol=0)


def test_nms_on_identical_boxes_keeps_one():
    rpn = RPN(8, grid=1, image_size=16, anchor_sizes=(8.0, 8.0, 8.0))
    with torch.no_grad():
        for m in (rpn.cls, rpn.reg):
            m.weight.zero_()
            m.bias.zero_()
    (boxes, scores), = select_proposals(rpn(torch.randn(1, 8, 1, 1)), 16)
    assert boxes.shape == (1, 4) and scores.tolist() == [0.5]


def test_proposals_respect_top_k_and_bounds():
    torch.manual_seed(1)
    rpn = RPN(8, grid=4, image_size=32)
    sel = select_proposals(rpn(torch.randn(2, 8, 4, 4)), 32, top_k=5)
    for boxes, scores in sel:
        assert len(boxes) <= 5
        assert (boxes >= 0).all() and (boxes <= 32).all()
        assert (scores > 0).all() and (scores < 1).all()
        assert torch.equal(scores, scores.sort(descending=True).values)


def test_rpn_propose_empty_grid():
    rpn = RPN(8, grid=4, image_size=32)
    assert rpn_propose(torch.zeros(2, 8, 0, 0), rpn) == [[], []]


# --------------------------------------------------------------------------- prompts


def test_sparse_prompts_shape_and_determinism():
    enc = PromptEncoder(16, grid=4, image_size=32)
    boxes = torch.tensor([[2.0, 3.0, 10.0, 12.0], [0.0, 0.0, 31.0, 31.0], [2.0, 3.0, 10.0, 12.0]])
    out = boxes_to_sparse_prompts(boxes, enc)
    assert out.shape == (3, 2, 16)
    assert torch.equal(out[0], out[2])


def test_sparse_prompt_matches_fourier_formula():
    enc = PromptEncoder(8, grid=4, image_size=32)
    box = [4.0, 6.0, 20.0, 18.0]
    out = boxes_to_sparse_prompts(torch.tensor([box]), enc)[0]
    gauss = enc.gaussian.numpy()
    for corner in range(2):
        x = (box[2 * corner] + 0.5) / 32
        y = (box[2 * corner + 1] + 0.5) / 32
        proj = [2 * math.pi * ((2 * x - 1) * gauss[0, j] + (2 * y - 1) * gauss[1, j]) for j in range(4)]
        expect = [math.sin(v) for v in proj] + [math.cos(v) for v in proj]
        expect = np.array(expect) + enc.corner_embed[corner].detach().numpy()
        np.testing.assert_allclose(out[corner].detach().numpy(), expect, atol=1e-12)


def test_translation_changes_prompt_by_phase():
    # shifting a box changes only the Fourier part; its norm per corner stays sqrt(dim/2)
    enc = PromptEncoder(16, grid=4, image_size=32)
    with torch.no_grad():
        enc.corner_embed.zero_()
    a = boxes_to_sparse_prompts(torch.tensor([[2.0, 2.0, 8.0, 8.0]]), enc)
    b = boxes_to_sparse_prompts(torch.tensor([[5.0, 7.0, 11.0, 13.0]]), enc)
    assert not torch.allclose(a, b)
    torch.testing.assert_close(a.norm(dim=-1), torch.full((1, 2), math.sqrt(8.0)), atol=1e-12, rtol=0)
    torch.testing.assert_close(b.norm(dim=-1), torch.full((1, 2), math.sqrt(8.0)), atol=1e-12, rtol=0)


@pytest.mark.parametrize("box", [[5.0, 5.0, 5.0, 9.0], [5.0, 9.0, 8.0, 3.0]])
def test_degenerate_box_rejected(box):
    with pytest.raises(ValueError, match="degenerate"):
        boxes_to_sparse_prompts(torch.tensor([box]), PromptEncoder(8, 4, 32))


def test_prompt_encoder_odd_width():
    with pytest.raises(ConfigError):
        PromptEncoder(7, 4, 32)


# --------------------------------------------------------------------------- decoder


def _decoder_inputs(dim=8, grid=4, k=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    emb = torch.randn(1, dim, grid, grid, generator=g)
    pe = torch.randn(1, dim, grid, grid, generator=g)
    sparse = torch.randn(k, 2, dim, generator=g)
    dense = torch.randn(k, dim, grid, grid, generator=g)
    return emb, pe, sparse, dense


def test_decode_shapes():
    dec = MaskDecoder(8, image_size=32, heads=1, mlp_dim=16)
    out = decode(*_decoder_inputs(), dec)
    assert out.mask_logits.shape == (3, 32, 32)
    assert out.low_res_logits.shape == (3, 16, 16)
    assert out.f_src.shape == (3, 2, 16, 16)
    assert out.iou_pred.shape == (3,)
    assert ((out.iou_pred > 0) & (out.iou_pred < 1)).all()
    assert out.class_logits is None


def test_decode_class_head():
    dec = MaskDecoder(8, image_size=32, heads=1, mlp_dim=16, num_classes=5)
    assert decode(*_decoder_inputs(), dec).class_logits.shape == (3, 5)


def test_zero_dense_equals_zero_no_mask_embed():
    enc = PromptEncoder(8, 4, 32)
    with torch.no_grad():
        enc.no_mask_embed.zero_()
    dec = MaskDecoder(8, image_size=32, heads=1, mlp_dim=16)
    emb, pe, sparse, _ = _decoder_inputs()
    a = decode(emb, pe, sparse, torch.zeros(3, 8, 4, 4), dec)
    b = decode(emb, pe, sparse, enc.no_mask_dense(), dec)
    assert torch.equal(a.mask_logits, b.mask_logits)


def test_decode_without_sparse_tokens():
    dec = MaskDecoder(8, image_size=32, heads=1, mlp_dim=16)
    emb, pe, sparse, dense = _decoder_inputs()
    assert decode(emb, pe, sparse[:, :0], dense, dec).mask_logits.shape == (3, 32, 32)


def test_decode_width_mismatch():
    dec = MaskDecoder(8, image_size=32, heads=1, mlp_dim=16)
    emb, pe, sparse, dense = _decoder_inputs()
    with pytest.raises(ConfigError, match="width"):
        decode(emb, pe, torch.randn(3, 2, 16), dense, dec)
    with pytest.raises(ConfigError, match="grid"):
        decode(emb, pe, sparse, torch.randn(3, 8, 2, 2), dec)


@pytest.mark.parametrize("seed", range(3))
def test_decoder_matches_reference_trace(seed):
    dec = MaskDecoder(8, image_size=32, depth=2, heads=1, mlp_dim=16)
    _randomize(dec, seed)
    emb, pe, sparse, dense = _decoder_inputs(seed=seed + 10)
    out = decode(emb, pe, sparse, dense, dec)
    p = {k: v.detach().numpy() for k, v in dec.state_dict().items()}
    for k in range(3):
        logits, iou = decoder_reference(
            p, emb[0].numpy(), pe[0].numpy(), sparse[k].numpy(), dense[k].numpy(), heads=1, depth=2, image_size=32
        )
        assert np.abs(out.mask_logits[k].detach().numpy() - logits).max() <= 1e-8
        assert abs(float(out.iou_pred[k].detach()) - iou) <= 1e-8


@pytest.mark.parametrize("seed", range(10))
def test_decoder_gradients(seed):
    dec = MaskDecoder(8, image_size=8, depth=1, heads=2, mlp_dim=8)
    _randomize(dec, seed, std=0.3)
    emb, pe, sparse, dense = _decoder_inputs(grid=2, k=2, seed=seed)
    for t in (emb, sparse, dense):
        t.requires_grad_()
    proj = projector((2, 8, 8), seed)

    def fn():
        out = decode(emb, pe, sparse, dense, dec)
        return (out.mask_logits * proj).sum() + 3.0 * out.iou_pred.sum()

    assert max_rel_error(fn, list(dec.parameters()) + [emb, sparse, dense], seed=seed) <= 1e-4


# --------------------------------------------------------------------------- mask nms


def test_mask_nms():
    m = torch.zeros(4, 8, 8, dtype=torch.bool)
    m[0, :4, :4] = True
    m[1, :4, :3] = True  # IoU 0.75 with 0
    m[2, 4:, 4:] = True
    scores = torch.tensor([0.5, 0.9, 0.4, 0.1])  # 3 is empty
    keep = mask_nms(m, scores, 0.5)
    assert keep.tolist() == [1, 2, 3]
    assert mask_nms(m[:0], scores[:0]).numel() == 0


# --------------------------------------------------------------------------- full model


@pytest.fixture(scope="module")
def scenes():
    return make_dataset(2, 0)


def test_segment_outputs(scenes):
    torch.manual_seed(0)
    m = Segmenter(tiny_model_config()).double().eval()
    b = make_batch(scenes, torch.float64)
    first = m.segment(b.rgb, b.depth3)
    again = m.segment(b.rgb, b.depth3)
    assert len(first) == 2
    for anns, anns2 in zip(first, again):
        assert len(anns) <= m.cfg.rpn_top_k
        assert [a.score for a in anns] == [a.score for a in anns2]
        for a in anns:
            assert a.mask.dtype == bool and a.mask.any()
            ys, xs = np.nonzero(a.mask)
            assert a.box == (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def test_every_parameter_receives_gradient(scenes):
    torch.manual_seed(0)
    m = Segmenter(tiny_model_config()).double()
    b = make_batch(scenes, torch.float64)
    step_loss(m, b, TrainConfig(max_iters=10)).total.backward()
    silent = {n for n, p in m.named_parameters() if p.grad is None or not p.grad.abs().max() > 0}
    # LoRA A factors are silent only while B is still at its zero init
    assert silent and all(n.endswith("lora_a") for n in silent)

    m.zero_grad()
    with torch.no_grad():
        for n, p in m.named_parameters():
            if n.endswith("lora_b"):
                p.normal_(std=0.01)
    step_loss(m, b, TrainConfig(max_iters=10)).total.backward()
    silent = [n for n, p in m.named_parameters() if p.grad is None or not p.grad.abs().max() > 0]
    assert silent == []
