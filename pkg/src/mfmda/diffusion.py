"""Small DDPM: forward noising, noise-prediction training, sampling and
partial-noising translation.

Timesteps are 1-based (1..T) at every public entry point. Images are in
[0, 1] at the API boundary and [-1, 1] inside the diffusion core.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, TrainingFailure
from .utils import check_divergence, make_generator, seed_everything


class NoiseSchedule:
    def __init__(self, T=200, beta_1=1e-4, beta_T=0.02, dtype=torch.float32):
        if T < 1:
            raise ConfigError("T must be >= 1")
        if not 0 < beta_1 <= beta_T < 1:
            raise ConfigError("need 0 < beta_1 <= beta_T < 1")
        self.T = T
        self.beta_1, self.beta_T = beta_1, beta_T
        self.beta = torch.linspace(beta_1, beta_T, T, dtype=torch.float64).to(dtype)
        self.alpha = 1 - self.beta
        self.alpha_bar = torch.cumprod(self.alpha.double(), 0).to(dtype)

    def to(self, dtype):
        return NoiseSchedule(self.T, self.beta_1, self.beta_T, dtype)

    def ab(self, t):
        """alpha_bar at 1-based steps ``t``; t = 0 maps to 1."""
        t = torch.as_tensor(t)
        out = torch.ones(t.shape, dtype=self.alpha_bar.dtype)
        nz = t > 0
        out[nz] = self.alpha_bar[t[nz] - 1]
        return out

    def config_dict(self):
        return {"T": self.T, "beta_1": self.beta_1, "beta_T": self.beta_T}


def _expand(v, x):
    return v.to(x.dtype).view(-1, *([1] * (x.dim() - 1)))


def _check_t(t, sched):
    t = torch.as_tensor(t)
    if t.numel() and (t.min() < 1 or t.max() > sched.T):
        raise ValueError(f"timesteps must lie in [1, {sched.T}]")
    return t


def q_sample(x0, t, eps, sched: NoiseSchedule):
    t = _check_t(t, sched)
    ab = _expand(sched.ab(t), x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


# ---------------------------------------------------------------- network

def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, tdim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class DenoiserNet(nn.Module):
    """U-shaped noise predictor with one residual block per level.

    ``patch`` > 1 folds pixels into channels (pixel unshuffle) before the
    U-Net and unfolds them at the output, which cuts compute by patch**2.
    """

    def __init__(self, base=32, mults=(1, 2, 2), patch=1):
        super().__init__()
        self.base, self.mults, self.patch = base, tuple(mults), patch
        tdim = base * 4
        self.tdim = tdim
        self.time_mlp = nn.Sequential(nn.Linear(base, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.inp = nn.Conv2d(3 * patch * patch, base, 3, padding=1)
        chans = [base * m for m in self.mults]
        self.down = nn.ModuleList()
        self.pool = nn.ModuleList()
        prev = base
        for i, c in enumerate(chans):
            self.down.append(ResBlock(prev, c, tdim))
            self.pool.append(nn.Conv2d(c, c, 3, stride=2, padding=1) if i < len(chans) - 1 else nn.Identity())
            prev = c
        self.mid = ResBlock(prev, prev, tdim)
        self.up = nn.ModuleList()
        for i, c in reversed(list(enumerate(chans))):
            self.up.append(ResBlock(prev + c, c, tdim))
            prev = c
        self.out_norm = nn.GroupNorm(8, prev)
        self.out = nn.Conv2d(prev, 3 * patch * patch, 3, padding=1)

    def forward(self, x, t):
        t = torch.as_tensor(t).reshape(-1).expand(x.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.base).to(x.dtype))
        if self.patch > 1:
            x = F.pixel_unshuffle(x, self.patch)
        h = self.inp(x)
        skips = []
        for block, pool in zip(self.down, self.pool):
            h = block(h, temb)
            skips.append(h)
            h = pool(h)
        h = self.mid(h, temb)
        for block in self.up:
            s = skips.pop()
            if h.shape[-1] != s.shape[-1]:
                h = F.interpolate(h, size=s.shape[-2:], mode="nearest")
            h = block(torch.cat([h, s], 1), temb)
        out = self.out(F.silu(self.out_norm(h)))
        if self.patch > 1:
            out = F.pixel_shuffle(out, self.patch)
        return out

    def config_dict(self):
        return {"base": self.base, "mults": list(self.mults), "patch": self.patch}


# ---------------------------------------------------------------- training

def diffusion_loss(net, batch, sched: NoiseSchedule, seed):
    """Noise-prediction MSE at uniformly drawn timesteps.

    ``seed`` fixes both the timesteps and the injected noise, so repeated
    calls with the same seed evaluate the same objective.
    """
    gen = make_generator(seed)
    x0 = batch * 2 - 1
    t = torch.randint(1, sched.T + 1, (x0.shape[0],), generator=gen)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    xt = q_sample(x0, t, eps, sched)
    return F.mse_loss(net(xt, t), eps)


@dataclass
class DDPMConfig:
    T: int = 200
    beta_1: float = 1e-4
    beta_T: float = 0.02
    base: int = 32
    mults: tuple = (1, 2, 2)
    patch: int = 1
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0


def fit_diffusion(net, images, sched, steps, batch_size, lr, seed, log=None, opt=None, cosine=True):
    """Plain noise-prediction training loop over an image tensor in [0, 1]."""
    gen = make_generator(seed)
    opt = opt or torch.optim.Adam(net.parameters(), lr=lr)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps) if cosine else None
    net.train()
    losses = []
    for step in range(steps):
        idx = torch.randint(0, len(images), (batch_size,), generator=gen)
        loss = diffusion_loss(net, images[idx], sched, seed=seed * 1_000_003 + step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if lr_sched is not None:
            lr_sched.step()
        losses.append(loss.item())
        if not math.isfinite(losses[-1]) or check_divergence(losses, losses[0]):
            raise TrainingFailure("diffusion training diverged",
                                  {"step": step, "initial_loss": losses[0], "last_loss": losses[-1]})
    net.eval()
    if log is not None:
        log.extend(losses)
    return net


def train_source_ddpm(net, dataset, sched, cfg: DDPMConfig, log=None):
    seed_everything(cfg.seed)
    images = torch.stack([s.image if hasattr(s, "image") else s for s in dataset])
    return fit_diffusion(net, images, sched, cfg.steps, cfg.batch_size, cfg.lr, cfg.seed, log)


# ---------------------------------------------------------------- sampling

def _posterior_step(net, x, t, sched, gen):
    """One ancestral step t -> t-1 using the clipped-x0 posterior mean."""
    tt = torch.full((x.shape[0],), t, dtype=torch.long)
    ab_t = sched.alpha_bar[t - 1].item()
    ab_prev = sched.alpha_bar[t - 2].item() if t > 1 else 1.0
    beta_t = sched.beta[t - 1].item()
    eps_hat = net(x, tt)
    x0_hat = ((x - math.sqrt(1 - ab_t) * eps_hat) / math.sqrt(ab_t)).clamp(-1, 1)
    c0 = math.sqrt(ab_prev) * beta_t / (1 - ab_t)
    ct = math.sqrt(1 - beta_t) * (1 - ab_prev) / (1 - ab_t)
    mean = c0 * x0_hat + ct * x
    if t == 1:
        return mean
    var = beta_t * (1 - ab_prev) / (1 - ab_t)
    z = torch.randn(x.shape, generator=gen, dtype=x.dtype)
    return mean + math.sqrt(var) * z


@torch.no_grad()
def sample(net, sched, n, seed, size=None, batch_size=256):
    """Ancestral sampling from pure noise; returns (n, 3, H, W) in [0, 1]."""
    size = size or net_image_size(net)
    gen = make_generator(seed)
    net.eval()
    out = []
    for start in range(0, n, batch_size):
        m = min(batch_size, n - start)
        x = torch.randn((m, 3, size, size), generator=gen)
        for t in range(sched.T, 0, -1):
            x = _posterior_step(net, x, t, sched, gen)
        out.append(((x + 1) / 2).clamp(0, 1))
    return torch.cat(out)


def net_image_size(net):
    size = getattr(net, "image_size", None)
    if size is None:
        raise ValueError("pass size= or set net.image_size")
    return size


def translate(net, sched, source_images, t0_frac=0.4, k_steps=4, seed=0, differentiable=False):
    """Partial-noising translation: noise to t0, then denoise back to t = 0.

    With ``differentiable=True`` the reverse pass is ``k_steps`` evenly spaced
    deterministic (eta = 0) updates with gradients flowing into ``net``;
    otherwise it is the full stochastic ancestral chain from t0.
    """
    if not 0 < t0_frac < 1:
        raise ValueError(f"t0_frac must lie in (0, 1), got {t0_frac}")
    if k_steps < 1:
        raise ValueError("k_steps must be >= 1")
    t0 = max(1, int(round(t0_frac * sched.T)))
    gen = make_generator(seed)
    x0 = source_images * 2 - 1
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    x = q_sample(x0, torch.full((x0.shape[0],), t0, dtype=torch.long), eps, sched)

    if differentiable:
        ts = torch.linspace(t0, 0, k_steps + 1).round().long().tolist()
        ts = sorted(set(ts), reverse=True)
        for t, t_next in zip(ts[:-1], ts[1:]):
            ab_t = sched.alpha_bar[t - 1]
            ab_n = sched.alpha_bar[t_next - 1] if t_next > 0 else torch.tensor(1.0)
            eps_hat = net(x, torch.full((x.shape[0],), t, dtype=torch.long))
            x0_hat = (x - (1 - ab_t).sqrt() * eps_hat) / ab_t.sqrt()
            x = ab_n.sqrt() * x0_hat + (1 - ab_n).sqrt() * eps_hat if t_next > 0 else x0_hat
        return ((x + 1) / 2).clamp(0, 1)

    with torch.no_grad():
        for t in range(t0, 0, -1):
            x = _posterior_step(net, x, t, sched, gen)
    return ((x + 1) / 2).clamp(0, 1)


def translate_batched(net, sched, images, t0_frac, seed, batch_size=128):
    """Non-differentiable translation in chunks, seeding each chunk from ``seed``."""
    out = []
    for i, start in enumerate(range(0, len(images), batch_size)):
        out.append(translate(net, sched, images[start:start + batch_size], t0_frac,
                             seed=seed * 7919 + i, differentiable=False))
    return torch.cat(out)


# ---------------------------------------------------------------- persistence

def save_ddpm(path, net, sched, cfg=None, opt=None, step=0, extra=None):
    from .checkpoint import save_checkpoint
    payload = {
        "schedule": sched.config_dict(),
        "arch": net.config_dict(),
        "image_size": getattr(net, "image_size", None),
        "config": None if cfg is None else dict(cfg.__dict__),
        "state_dict": net.state_dict(),
        "optimizer": None if opt is None else opt.state_dict(),
        "global_step": step,
    }
    if extra:
        payload.update(extra)
    save_checkpoint(path, "ddpm", payload)


def load_ddpm(path):
    from .checkpoint import load_checkpoint
    payload = load_checkpoint(path, "ddpm")
    net = DenoiserNet(**payload["arch"])
    net.load_state_dict(payload["state_dict"])
    net.image_size = payload["image_size"]
    net.eval()
    s = payload["schedule"]
    return net, NoiseSchedule(s["T"], s["beta_1"], s["beta_T"]), payload
