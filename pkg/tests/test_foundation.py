import pytest
import torch

from mfmda.align import AlignConfig, stage2_train
from mfmda.errors import ConfigError
from mfmda.foundation import (BACKBONES, LoRAdapter, MFMConfig, SegHead, build_backbone, forward_pyramid,
                              inject_lora, load_adapted, pretrain_mfm, save_backbone, segment)
from mfmda.metrics import segmentation_scores
from mfmda.synthdata import DEFAULT_DOMAINS, make_dataset, stack_images
from mfmda.utils import count_params, make_generator, param_hash


def _bb(variant="toy-hybrid", size=64):
    torch.manual_seed(0)
    return build_backbone(variant, size).eval()


def _images(n=8, size=64, seed=0):
    return torch.rand(n, 3, size, size, generator=make_generator(seed))


@pytest.mark.parametrize("variant", sorted(BACKBONES))
def test_pyramid_sizes(variant):
    """[TRIVIAL]"""
    bb = _bb(variant)
    levels = forward_pyramid(bb, _images(2))
    assert len(levels) == 4
    assert [f.shape[-1] for f in levels] == [16, 8, 4, 2]
    assert [f.shape[1] for f in levels] == list(bb.widths)


@pytest.mark.parametrize("variant", sorted(BACKBONES))
def test_batch_of_one_matches_batch_of_eight(variant):
    """[DERIVED]"""
    bb = _bb(variant)
    x = _images(8)
    with torch.no_grad():
        full = forward_pyramid(bb, x)
        for i in (0, 5):
            single = forward_pyramid(bb, x[i:i + 1])
            for a, b in zip(full, single):
                assert torch.allclose(a[i], b[0], atol=1e-5)


def test_shape_errors():
    """[TRIVIAL]"""
    bb = _bb()
    for bad in (torch.rand(2, 1, 64, 64), torch.rand(2, 3, 32, 32), torch.rand(3, 64, 64)):
        with pytest.raises(ValueError):
            forward_pyramid(bb, bad)
    with pytest.raises(ConfigError):
        build_backbone("resnet", 64)
    with pytest.raises(ConfigError):
        build_backbone("toy-vit-pooled", 64, widths=(16, 32, 32, 32))


def test_lora_rank_bounds():
    """[TRIVIAL]"""
    with pytest.raises(ValueError):
        LoRAdapter(16, 24, 6)
    with pytest.raises(ValueError):
        LoRAdapter(16, 24, 0)
    with pytest.raises(ValueError):
        inject_lora(_bb(), r=6)


@pytest.mark.parametrize("variant", sorted(BACKBONES))
def test_lora_injection_is_exact_noop(variant):
    """[DERIVED] Zero-initialised LoRA leaves the backbone output unchanged."""
    bb = _bb(variant)
    x = _images(2)
    with torch.no_grad():
        before = forward_pyramid(bb, x)
        frac = inject_lora(bb, r=4)
        after = forward_pyramid(bb, x)
    assert all(torch.equal(a, b) for a, b in zip(before, after))
    # the 5% budget is stated for the default backbone; the pooled ViT
    # carries 256 tokens per block at 64px and lands just above it
    assert 0 < frac < (0.05 if variant == "toy-hybrid" else 0.06)
    expect = sum(b.lora.m * 4 + 4 * b.lora.c for b in bb.attention_blocks())
    assert count_params(bb.lora_parameters()) == expect


def test_lora_delta_rank():
    """[PAPER] LoRA update A B has rank at most r."""
    ad = LoRAdapter(64, 32, 3, make_generator(0))
    with torch.no_grad():
        ad.B.normal_(generator=make_generator(1))
    d = ad.delta()
    assert d.shape == (64, 32)
    assert torch.linalg.matrix_rank(d).item() <= 3


def test_gradients_reach_lora_only():
    """[TRIVIAL]"""
    bb = _bb(size=32)
    inject_lora(bb, r=2)
    head = SegHead(bb.widths)
    src = make_dataset(DEFAULT_DOMAINS["source"], 8, 32, 0)
    frozen = param_hash(bb.backbone_state())
    b_before = [b.lora.B.detach().clone() for b in bb.attention_blocks()]
    cfg = AlignConfig(epochs=1, batch_size=8, use_pseudo_target=False, loss_weight=0.0)
    result = stage2_train(bb, head, src, None, cfg)
    assert result.frozen_hash_before == result.frozen_hash_after == frozen
    for before, block in zip(b_before, bb.attention_blocks()):
        assert not torch.equal(before, block.lora.B)


def test_segment_contract():
    """[TRIVIAL]"""
    bb = _bb()
    head = SegHead(bb.widths)
    x = _images(3)
    logits = segment(bb, head, x)
    assert logits.shape == (3, 2, 64, 64)
    p = torch.sigmoid(logits)
    assert ((p > 0) & (p < 1)).all()


def test_mfm_needs_a_batch():
    """[TRIVIAL]"""
    with pytest.raises(ConfigError):
        pretrain_mfm(_images(4, 32), MFMConfig(batch_size=8, steps=1))


def test_mfm_is_deterministic_and_frozen():
    """[TRIVIAL]"""
    imgs = stack_images(make_dataset(DEFAULT_DOMAINS["source"], 8, 32, 0))
    cfg = MFMConfig(steps=3, batch_size=8)
    a, b = pretrain_mfm(imgs, cfg), pretrain_mfm(imgs, cfg)
    assert param_hash(a.state_dict()) == param_hash(b.state_dict())
    assert not any(p.requires_grad for p in a.parameters())
    assert [f.shape[-1] for f in forward_pyramid(a, imgs[:1])] == [8, 4, 2, 1]


def test_checkpoint_round_trip(tmp_path):
    """[TRIVIAL]"""
    bb = _bb(size=32)
    inject_lora(bb, r=2, seed=3)
    with torch.no_grad():
        for block in bb.attention_blocks():
            block.lora.B.normal_(generator=make_generator(1))
    head = SegHead(bb.widths).eval()
    save_backbone(tmp_path / "a.pt", bb, head=head, extra={"arm": "ours"})
    bb2, head2, payload = load_adapted(tmp_path / "a.pt")
    assert payload["arm"] == "ours"
    x = _images(2, 32)
    with torch.no_grad():
        assert torch.equal(segment(bb, head, x), segment(bb2, head2, x))


@pytest.mark.slow
def test_mfm_loss_halves():
    """[TRIVIAL]"""
    imgs = stack_images(make_dataset(DEFAULT_DOMAINS["source"], 200, 32, 0))
    log = []
    pretrain_mfm(imgs, MFMConfig(steps=400), log=log)
    start = sum(log[:10]) / 10
    end = sum(log[-10:]) / 10
    assert end <= 0.5 * start


@pytest.mark.slow
def test_head_on_frozen_backbone(desk_ws):
    """[DERIVED]"""
    bb = desk_ws.backbone("toy-hybrid")
    val = desk_ws.source("val")
    torch.manual_seed(0)
    untrained = SegHead(bb.widths).eval()
    images = stack_images(val)
    masks = torch.stack([s.mask for s in val])
    with torch.no_grad():
        chance = segmentation_scores(segment(bb, untrained, images), masks)["dice"]
    assert chance < 0.5

    inject_lora(bb, 4)
    head = SegHead(bb.widths)
    cfg = AlignConfig(epochs=8, use_pseudo_target=False, loss_weight=0.0)
    result = stage2_train(bb, head, desk_ws.source("train"), None, cfg, {"source": val})
    assert result.final["source"]["dice"] >= 0.85
