import copy
import math

import pytest
import torch

from mfmda.adaptor import DirectionAdaptor
from mfmda.diffusion import DenoiserNet, NoiseSchedule, diffusion_loss
from mfmda.encoder import SemanticEncoder
from mfmda.errors import ConfigError
from mfmda.stage1 import (Stage1Config, adapt_ddpm, gate_drift, generate_target_corpus, load_stage1,
                          save_stage1)
from mfmda.synthdata import DEFAULT_DOMAINS, make_dataset
from mfmda.utils import make_generator, param_hash

SCHED = NoiseSchedule(T=20)


@pytest.fixture(scope="module")
def parts():
    torch.manual_seed(0)
    net = DenoiserNet(base=8, mults=(1, 2), patch=2)
    net.image_size = 32
    enc = SemanticEncoder(32).freeze()
    src = make_dataset(DEFAULT_DOMAINS["source"], 12, 32, 0)
    few = [s.image for s in make_dataset(DEFAULT_DOMAINS["targetA"], 4, 32, 500)]
    return net, enc, src, few


def _run(parts, **kw):
    net, enc, src, few = parts
    net = copy.deepcopy(net)
    torch.manual_seed(0)
    ad = DirectionAdaptor(128)
    cfg = Stage1Config(**{"steps": 4, "batch_size": 4, **kw})
    return adapt_ddpm(net, ad, SCHED, src, few, enc, cfg)


@pytest.mark.parametrize("kw", [{"steps": 0}, {"t0_frac": 1.0}, {"t0_frac": 0.0}, {"k_steps": 0},
                                {"loss_weights": (1, 1)}, {"loss_weights": (1, -1, 1)}])
def test_config_validation(kw):
    """[TRIVIAL]"""
    with pytest.raises(ConfigError):
        Stage1Config(**kw)


def test_log_shape_and_finiteness(parts):
    """[DERIVED] Logged total equals the weighted sum of the parts."""
    _, _, log = _run(parts)
    assert len(log) == 4
    for row in log:
        assert set(row) == {"step", "total", "diff", "dc", "style", "gate"}
        assert all(math.isfinite(row[k]) for k in ("total", "diff", "dc", "style", "gate"))
        assert 0 < row["gate"] < 1
    w = Stage1Config().loss_weights
    r = log[0]
    assert abs(r["total"] - (w[0] * r["diff"] + w[1] * r["dc"] + w[2] * r["style"])) < 1e-5


def test_adaptation_is_deterministic(parts):
    """[TRIVIAL]"""
    a, _, la = _run(parts)
    b, _, lb = _run(parts)
    assert param_hash(a.state_dict()) == param_hash(b.state_dict())
    assert la == lb


def test_encoder_stays_frozen(parts):
    """[TRIVIAL]"""
    enc = parts[1]
    before = param_hash(enc.state_dict())
    _run(parts)
    assert param_hash(enc.state_dict()) == before


def test_finetune_arm_equals_plain_diffusion_finetuning(parts):
    """[DERIVED] Zero feature weights reproduce a hand-written fine-tuning loop."""
    net0, enc, src, few = parts
    adapted, _, log = _run(parts, loss_weights=(1.0, 0.0, 0.0))
    assert all(math.isnan(r["gate"]) and r["dc"] == 0 and r["style"] == 0 for r in log)

    # manual loop with the same sampling stream
    cfg = Stage1Config(steps=4, batch_size=4)
    net = copy.deepcopy(net0)
    torch.manual_seed(0)
    ad = DirectionAdaptor(128)
    torch.manual_seed(cfg.seed)
    gen = make_generator(cfg.seed)
    tgt = torch.stack(few)
    opt = torch.optim.Adam([{"params": net.parameters(), "lr": cfg.lr_net},
                            {"params": ad.parameters(), "lr": cfg.lr_adaptor}])
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps)
    net.train()
    for step in range(cfg.steps):
        t_idx = torch.randint(0, len(tgt), (cfg.batch_size,), generator=gen)
        torch.randint(0, len(src), (cfg.batch_size,), generator=gen)
        loss = diffusion_loss(net, tgt[t_idx], SCHED, seed=cfg.seed * 1_000_003 + step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        lr_sched.step()
    for (k, a), b in zip(adapted.state_dict().items(), net.state_dict().values()):
        assert torch.allclose(a, b, atol=1e-6), k


def test_empty_target_is_rejected(parts):
    """[TRIVIAL]"""
    net, enc, src, _ = parts
    with pytest.raises(ValueError):
        adapt_ddpm(copy.deepcopy(net), DirectionAdaptor(128), SCHED, src, [], enc, Stage1Config(steps=1))


def test_gate_drift():
    """[DERIVED]"""
    log = [{"gate": g} for g in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)]
    assert gate_drift(log) == (0.1, 1.0)
    first, last = gate_drift(log, frac=0.2)
    assert math.isclose(first, 0.15) and math.isclose(last, 0.95)
    assert all(math.isnan(v) for v in gate_drift([{"gate": float("nan")}]))


def test_corpus_contract(parts):
    """[TRIVIAL]"""
    net, _, src, _ = parts
    corpus = generate_target_corpus(net, SCHED, src[:5], t0_frac=0.4, seed=3)
    assert len(corpus) == 5
    for s, c in zip(src, corpus):
        assert torch.equal(c.mask, s.mask)
        assert c.image.shape == s.image.shape
        assert c.image.min() >= 0 and c.image.max() <= 1
        assert c.provenance == {"source_seed": s.seed, "source_domain": "source", "t0": 8}
    again = generate_target_corpus(net, SCHED, src[:5], t0_frac=0.4, seed=3)
    assert all(torch.equal(a.image, b.image) for a, b in zip(corpus, again))


def test_checkpoint_round_trip(parts, tmp_path):
    """[TRIVIAL]"""
    net, ad, _ = _run(parts)
    cfg = Stage1Config(steps=4)
    save_stage1(tmp_path / "s1.pt", net, SCHED, ad, cfg, extra={"target": "targetA"})
    net2, sched2, ad2, payload = load_stage1(tmp_path / "s1.pt")
    assert payload["target"] == "targetA" and sched2.T == SCHED.T
    assert param_hash(net2.state_dict()) == param_hash(net.state_dict())
    assert param_hash(ad2.state_dict()) == param_hash(ad.state_dict())
    assert torch.equal(ad2.tgt_center, ad.tgt_center)
