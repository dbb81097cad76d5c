import math

import pytest
import torch
import torch.nn.functional as F

from mfmda.encoder import (EncoderConfig, SemanticEncoder, augment, domain_center, embed, load_encoder,
                           nt_xent, pretrain_encoder, save_encoder)
from mfmda.errors import ConfigError
from mfmda.synthdata import DEFAULT_DOMAINS, make_dataset, stack_images
from mfmda.utils import make_generator, param_hash


@pytest.fixture(scope="module")
def enc():
    torch.manual_seed(0)
    return SemanticEncoder(32).freeze()


@pytest.fixture(scope="module")
def images():
    return stack_images(make_dataset(DEFAULT_DOMAINS["source"], 10, 32, 0))


def test_output_width_and_norm(enc, images):
    """[TRIVIAL]"""
    z = embed(enc, images)
    assert z.shape == (10, 128)
    assert torch.allclose(z.norm(dim=1), torch.ones(10), atol=1e-5)


def test_embed_is_deterministic(enc, images):
    """[TRIVIAL]"""
    assert torch.equal(embed(enc, images), embed(enc, images))


def test_batch_equals_row_stack(enc, images):
    """[DERIVED]"""
    rows = torch.cat([embed(enc, images[i:i + 1]) for i in range(len(images))])
    assert torch.allclose(embed(enc, images[:8]), rows[:8], atol=1e-5)


def test_embed_requires_frozen_encoder(images):
    """[TRIVIAL]"""
    with pytest.raises(ValueError):
        embed(SemanticEncoder(32), images)


def test_embed_rejects_wrong_shapes(enc):
    """[TRIVIAL]"""
    with pytest.raises(ValueError):
        embed(enc, torch.rand(2, 3, 64, 64))
    with pytest.raises(ValueError):
        embed(enc, torch.rand(2, 1, 32, 32))


def test_gradients_reach_images_not_parameters(enc, images):
    """[TRIVIAL]"""
    x = images[:2].clone().requires_grad_(True)
    embed(enc, x).sum().backward()
    assert x.grad is not None and x.grad.abs().sum() > 0
    assert all(p.grad is None for p in enc.parameters())


def test_domain_center(enc, images):
    """[DERIVED]"""
    one = domain_center(enc, images[:1])
    assert torch.allclose(one, embed(enc, images[:1])[0])
    c = domain_center(enc, images)
    dup = domain_center(enc, torch.cat([images, images]))
    assert torch.allclose(c, dup, atol=1e-6)
    brute = sum(embed(enc, images[i:i + 1])[0] for i in range(10)) / 10
    assert torch.allclose(c, brute, atol=1e-6)
    # plain mean of unit vectors is generally shorter than 1
    assert c.norm() < 1
    with pytest.raises(ValueError):
        domain_center(enc, [])
    with pytest.raises(ValueError):
        domain_center(enc, images[:0])


def test_nt_xent_matches_loop_reference():
    """[DERIVED] Contrastive loss matches an explicit loop."""
    g = make_generator(3)
    z1 = F.normalize(torch.randn(5, 8, generator=g, dtype=torch.float64), dim=1)
    z2 = F.normalize(torch.randn(5, 8, generator=g, dtype=torch.float64), dim=1)
    tau = 0.2
    z = torch.cat([z1, z2])
    n = 5
    total = 0.0
    for i in range(2 * n):
        pos = (i + n) % (2 * n)
        num = math.exp(float(z[i] @ z[pos]) / tau)
        den = sum(math.exp(float(z[i] @ z[j]) / tau) for j in range(2 * n) if j != i)
        total += -math.log(num / den)
    assert abs(nt_xent(z1, z2, tau).item() - total / (2 * n)) < 1e-10


def test_augment_keeps_shape_and_range(images):
    """[TRIVIAL]"""
    out = augment(images, make_generator(0), contrast_jitter=0.3, hue_jitter=0.05)
    assert out.shape == images.shape
    assert out.min() >= 0 and out.max() <= 1


def test_pretraining_is_seeded():
    """[TRIVIAL]"""
    ds = make_dataset(DEFAULT_DOMAINS["source"], 16, 32, 0)
    cfg = EncoderConfig(steps=3, batch_size=8)
    a = pretrain_encoder(ds, cfg)
    b = pretrain_encoder(ds, cfg)
    assert a.frozen and b.frozen
    assert param_hash(a.state_dict()) == param_hash(b.state_dict())


def test_pretraining_needs_a_full_batch():
    """[TRIVIAL]"""
    with pytest.raises(ConfigError):
        pretrain_encoder(make_dataset(DEFAULT_DOMAINS["source"], 4, 32, 0), EncoderConfig(batch_size=8))


def test_checkpoint_round_trip(tmp_path, enc, images):
    """[TRIVIAL]"""
    save_encoder(enc, tmp_path / "enc.pt", EncoderConfig())
    back = load_encoder(tmp_path / "enc.pt")
    assert back.frozen
    assert torch.equal(embed(back, images), embed(enc, images))


@pytest.mark.slow
def test_augmentation_probe_on_trained_encoder(desk_ws):
    """[DERIVED]"""
    enc = desk_ws.encoder()
    held_out = desk_ws.source("val")
    x = stack_images(held_out)
    g = make_generator(123)
    mild = augment(x, g, crop_scale=(0.9, 1.0), brightness_jitter=0.05)
    za, zm = embed(enc, x), embed(enc, mild)
    n = len(x)
    wins = 0
    for i in range(100):
        other = (i + 1 + int(torch.randint(0, n - 1, (1,), generator=g))) % n
        wins += float(za[i] @ zm[i]) > float(za[i] @ za[other])
    assert wins >= 90


@pytest.mark.slow
def test_trained_encoder_separates_domains(desk_ws):
    """[DERIVED]"""
    enc = desk_ws.encoder()
    src = domain_center(enc, stack_images(desk_ws.source("val")))
    for t in desk_ws.cfg.data.targets:
        tgt = domain_center(enc, stack_images(desk_ws.dataset(t, "val")))
        # threshold from the pilot measurement (0.46 on targetA)
        assert (tgt - src).norm() > 0.05
