"""Frozen semantic image encoder used for feature-space directions and metrics.

A small conv net pretrained with an in-batch instance-contrastive objective on
the source domain, then frozen. Embeddings are L2-normalised per image.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .utils import make_generator, seed_everything


@dataclass
class EncoderConfig:
    out_dim: int = 128
    widths: tuple = (16, 32, 64, 64)
    steps: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    temperature: float = 0.2
    crop_scale: tuple = (0.7, 1.0)
    brightness_jitter: float = 0.1
    contrast_jitter: float = 0.3
    hue_jitter: float = 0.05
    seed: int = 0


class _Stage(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.norm1 = nn.GroupNorm(min(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)

    def forward(self, x):
        x = F.silu(self.norm1(self.conv1(x)))
        return F.silu(self.norm2(self.conv2(x)))


class SemanticEncoder(nn.Module):
    def __init__(self, image_size, out_dim=128, widths=(16, 32, 64, 64)):
        super().__init__()
        self.image_size = image_size
        self.out_dim = out_dim
        self.widths = tuple(widths)
        chans = (3,) + self.widths
        self.stages = nn.ModuleList(_Stage(a, b) for a, b in zip(chans[:-1], chans[1:]))
        self.proj = nn.Linear(self.widths[-1], out_dim)
        self.frozen = False

    def stage_activations(self, x):
        acts = []
        for stage in self.stages:
            x = stage(x)
            acts.append(x)
        return acts

    def forward(self, x):
        h = self.stage_activations(x)[-1].mean(dim=(2, 3))
        return F.normalize(self.proj(h), dim=1)

    def freeze(self):
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def config_dict(self):
        return {"image_size": self.image_size, "out_dim": self.out_dim, "widths": list(self.widths)}


_YIQ = torch.tensor([[0.299, 0.587, 0.114],
                     [0.596, -0.274, -0.322],
                     [0.211, -0.523, 0.312]])


def _hue_matrix(turns):
    c, s = math.cos(2 * math.pi * turns), math.sin(2 * math.pi * turns)
    rot = torch.tensor([[1.0, 0, 0], [0, c, -s], [0, s, c]])
    return torch.linalg.inv(_YIQ) @ rot @ _YIQ


def augment(images, gen, crop_scale=(0.7, 1.0), brightness_jitter=0.1,
            contrast_jitter=0.0, hue_jitter=0.0):
    """Random resized crop, horizontal flip and photometric jitter."""
    b, _, h, w = images.shape
    out = []
    for i in range(b):
        s = crop_scale[0] + (crop_scale[1] - crop_scale[0]) * torch.rand(1, generator=gen).item()
        ch, cw = max(4, int(round(h * s))), max(4, int(round(w * s)))
        y0 = int(torch.randint(0, h - ch + 1, (1,), generator=gen))
        x0 = int(torch.randint(0, w - cw + 1, (1,), generator=gen))
        crop = images[i:i + 1, :, y0:y0 + ch, x0:x0 + cw]
        crop = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)
        if torch.rand(1, generator=gen).item() < 0.5:
            crop = crop.flip(-1)
        u = torch.rand(3, generator=gen) * 2 - 1
        if hue_jitter > 0:
            crop = torch.einsum("ij,bjhw->bihw", _hue_matrix(u[0].item() * hue_jitter), crop)
        if contrast_jitter > 0:
            crop = (crop - 0.5) * (1 + u[1].item() * contrast_jitter) + 0.5
        out.append((crop + u[2].item() * brightness_jitter).clamp(0, 1))
    return torch.cat(out)


def nt_xent(z1, z2, temperature):
    z = torch.cat([z1, z2])
    n = z1.shape[0]
    sim = z @ z.t() / temperature
    sim.fill_diagonal_(float("-inf"))
    targets = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    return F.cross_entropy(sim, targets)


def pretrain_encoder(dataset, cfg: EncoderConfig, log=None) -> SemanticEncoder:
    images = torch.stack([s.image for s in dataset])
    if len(images) < cfg.batch_size:
        raise ConfigError(f"encoder pretraining needs >= {cfg.batch_size} images, got {len(images)}")
    seed_everything(cfg.seed)
    gen = make_generator(cfg.seed)
    enc = SemanticEncoder(images.shape[-1], cfg.out_dim, cfg.widths)
    opt = torch.optim.Adam(enc.parameters(), lr=cfg.lr)
    losses = []
    enc.train()
    for step in range(cfg.steps):
        idx = torch.randperm(len(images), generator=gen)[:cfg.batch_size]
        x = images[idx]
        jitter = (cfg.crop_scale, cfg.brightness_jitter, cfg.contrast_jitter, cfg.hue_jitter)
        v1 = augment(x, gen, *jitter)
        v2 = augment(x, gen, *jitter)
        loss = nt_xent(enc(v1), enc(v2), cfg.temperature)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    if log is not None:
        log.extend(losses)
    return enc.freeze()


def _check_input(encoder, images):
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
    if images.shape[-1] != encoder.image_size or images.shape[-2] != encoder.image_size:
        raise ValueError(f"encoder expects {encoder.image_size}px images, got {tuple(images.shape[-2:])}")


def embed(encoder: SemanticEncoder, images: torch.Tensor) -> torch.Tensor:
    """Unit-norm (B, D) embeddings.

    Differentiable with respect to ``images``; the encoder itself must be
    frozen, so no parameter gradients are ever produced.
    """
    if not encoder.frozen:
        raise ValueError("embed requires a frozen encoder")
    _check_input(encoder, images)
    return encoder(images)


def domain_center(encoder: SemanticEncoder, images) -> torch.Tensor:
    # plain mean of unit vectors; deliberately not re-normalised
    if isinstance(images, (list, tuple)):
        if len(images) == 0:
            raise ValueError("domain_center needs at least one image")
        images = torch.stack(list(images))
    if images.shape[0] == 0:
        raise ValueError("domain_center needs at least one image")
    with torch.no_grad():
        return embed(encoder, images).mean(dim=0)


def save_encoder(encoder, path, cfg: EncoderConfig = None):
    from .checkpoint import save_checkpoint
    save_checkpoint(path, "encoder", {
        "arch": encoder.config_dict(),
        "config": None if cfg is None else dict(cfg.__dict__),
        "seed": None if cfg is None else cfg.seed,
        "state_dict": encoder.state_dict(),
    })


def load_encoder(path):
    from .checkpoint import load_checkpoint
    payload = load_checkpoint(path, "encoder")
    a = payload["arch"]
    enc = SemanticEncoder(a["image_size"], a["out_dim"], a["widths"])
    enc.load_state_dict(payload["state_dict"])
    return enc.freeze()
