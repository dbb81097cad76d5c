"""Stage 1: few-shot adaptation of the source DDPM and pseudo-target synthesis."""

import math
from dataclasses import dataclass

import torch

from .adaptor import (DirectionAdaptor, distribution_consistency_loss, fused_direction,
                      static_direction, style_loss)
from .diffusion import diffusion_loss, translate, translate_batched
from .encoder import domain_center, embed
from .errors import ConfigError, TrainingFailure
from .synthdata import FundusSample
from .utils import check_divergence, make_generator, seed_everything


@dataclass
class Stage1Config:
    steps: int = 150
    batch_size: int = 8
    lr_net: float = 1e-3
    lr_adaptor: float = 1e-3
    t0_frac: float = 0.4
    k_steps: int = 4
    loss_weights: tuple = (1.0, 0.03, 0.03)  # (diff, dc, style)
    cosine_lr: bool = True
    seed: int = 0

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if self.steps < 1:
            raise ConfigError("stage-1 steps must be >= 1")
        if not 0 < self.t0_frac < 1:
            raise ConfigError("t0_frac must lie in (0, 1)")
        if self.k_steps < 1:
            raise ConfigError("k_steps must be >= 1")
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            raise ConfigError("loss_weights must be three non-negative numbers")


def _images(items):
    return torch.stack([s.image if isinstance(s, FundusSample) else s for s in items])


def adapt_ddpm(net, ad: DirectionAdaptor, sched, source_ds, target_few, encoder, cfg: Stage1Config):
    """Fine-tune ``net`` (and ``ad``) towards the few-shot target images.

    Each step combines the noise-prediction loss on resampled target
    exemplars with the distribution-consistency and style losses computed on
    a differentiably translated source batch. Returns (net, ad, log) where
    ``log`` holds one dict per step.
    """
    if len(target_few) == 0:
        raise ValueError("stage 1 needs at least one target image")
    seed_everything(cfg.seed)
    gen = make_generator(cfg.seed)
    w_diff, w_dc, w_style = cfg.loss_weights
    use_features = w_dc > 0 or w_style > 0

    src = _images(source_ds)
    tgt = _images(target_few)
    src_center = domain_center(encoder, src)
    tgt_center = domain_center(encoder, tgt)
    static = static_direction(src_center, tgt_center)
    ad.tgt_center.copy_(tgt_center)

    opt = torch.optim.Adam([
        {"params": net.parameters(), "lr": cfg.lr_net},
        {"params": ad.parameters(), "lr": cfg.lr_adaptor},
    ])
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps) if cfg.cosine_lr else None
    net.train()
    log = []
    totals = []
    for step in range(cfg.steps):
        step_seed = cfg.seed * 1_000_003 + step
        t_idx = torch.randint(0, len(tgt), (cfg.batch_size,), generator=gen)
        s_idx = torch.randint(0, len(src), (cfg.batch_size,), generator=gen)
        l_diff = diffusion_loss(net, tgt[t_idx], sched, seed=step_seed)
        l_dc = l_diff.new_zeros(())
        l_style = l_diff.new_zeros(())
        g_val = float("nan")
        if use_features:
            sb = src[s_idx]
            out = translate(net, sched, sb, cfg.t0_frac, cfg.k_steps, seed=step_seed, differentiable=True)
            with torch.no_grad():
                src_f = embed(encoder, sb)
            gen_f = embed(encoder, out)
            delta, g = fused_direction(ad, src_f, static, return_gate=True)
            g_val = g.item()
            if w_dc > 0:
                l_dc = distribution_consistency_loss(src_f, delta, gen_f)
            if w_style > 0:
                l_style = style_loss(out, tgt, encoder)
        total = w_diff * l_diff + w_dc * l_dc + w_style * l_style
        opt.zero_grad()
        total.backward()
        opt.step()
        if lr_sched is not None:
            lr_sched.step()

        totals.append(total.item())
        log.append({"step": step, "total": totals[-1], "diff": l_diff.item(), "dc": l_dc.item(),
                    "style": l_style.item(), "gate": g_val})
        if not math.isfinite(totals[-1]) or check_divergence(totals, totals[0]):
            raise TrainingFailure("stage-1 adaptation diverged",
                                  {"step": step, "initial_loss": totals[0], "last_loss": totals[-1]})
    net.eval()
    return net, ad, log


def gate_drift(log, frac=0.1):
    """(mean gate over first frac of steps, mean over last frac)."""
    gates = [row["gate"] for row in log if not math.isnan(row["gate"])]
    if not gates:
        return float("nan"), float("nan")
    n = max(1, int(round(len(gates) * frac)))
    return sum(gates[:n]) / n, sum(gates[-n:]) / n


def generate_target_corpus(net, sched, source_ds, t0_frac=0.4, seed=0, domain="pseudo-target",
                           batch_size=128):
    """Translate every labeled source sample; masks are carried over unchanged."""
    images = translate_batched(net, sched, _images(source_ds), t0_frac, seed, batch_size)
    t0 = max(1, int(round(t0_frac * sched.T)))
    corpus = []
    for s, img in zip(source_ds, images):
        corpus.append(FundusSample(image=img, mask=s.mask.clone(), domain=domain, seed=s.seed,
                                   provenance={"source_seed": s.seed, "source_domain": s.domain,
                                               "t0": t0}))
    return corpus


def save_stage1(path, net, sched, ad: DirectionAdaptor, cfg: Stage1Config, extra=None):
    from .checkpoint import save_checkpoint
    payload = {
        "schedule": sched.config_dict(),
        "arch": net.config_dict(),
        "image_size": getattr(net, "image_size", None),
        "state_dict": net.state_dict(),
        "adaptor_dim": ad.dim,
        "adaptor": ad.state_dict(),
        "config": dict(cfg.__dict__),
    }
    if extra:
        payload.update(extra)
    save_checkpoint(path, "stage1", payload)


def load_stage1(path):
    """Returns (net, sched, adaptor, payload)."""
    from .checkpoint import load_checkpoint
    from .diffusion import DenoiserNet, NoiseSchedule
    payload = load_checkpoint(path, "stage1")
    net = DenoiserNet(**payload["arch"])
    net.load_state_dict(payload["state_dict"])
    net.image_size = payload["image_size"]
    net.eval()
    ad = DirectionAdaptor(payload["adaptor_dim"])
    ad.load_state_dict(payload["adaptor"])
    s = payload["schedule"]
    return net, NoiseSchedule(s["T"], s["beta_1"], s["beta_T"]), ad, payload
