"""Toy segmentation foundation backbone with pyramid taps and token LoRA.

Two registry variants share one interface:

* ``toy-hybrid``: conv stem + 4 conv stages, each closed by a self-attention
  block over its own token grid, so the pyramid comes out natively.
* ``toy-vit-pooled``: plain ViT at stride 4 whose four block outputs are
  average-pooled to strides 4, 8, 16, 32.

Level k always has spatial size H / 2**(k+1).
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .utils import count_params, make_generator, seed_everything


class LoRAdapter(nn.Module):
    """Low-rank token offset A @ B with A (m, r) and B (r, c).

    B starts at zero so the injected offset is exactly zero until trained.
    """

    def __init__(self, m, c, r, gen=None):
        super().__init__()
        if not 1 <= r < c / 4:
            raise ValueError(f"LoRA rank must satisfy 1 <= r < c/4 (c={c}), got {r}")
        self.m, self.c, self.r = m, c, r
        a = torch.randn(m, r, generator=gen) * (1.0 / r ** 0.5) * 0.1
        self.A = nn.Parameter(a)
        self.B = nn.Parameter(torch.zeros(r, c))

    def delta(self):
        return self.A @ self.B

    def forward(self, tokens):
        return tokens + self.delta()


class AttentionBlock(nn.Module):
    def __init__(self, dim, heads=2, mlp_ratio=2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))
        self.lora = None

    def forward(self, tokens):
        h = self.norm1(tokens)
        a, _ = self.attn(h, h, h, need_weights=False)
        if self.lora is not None:
            a = self.lora(a)
        tokens = tokens + a
        return tokens + self.mlp(self.norm2(tokens))


def _groups(c):
    return next(g for g in (8, 4, 2, 1) if c % g == 0)


def _to_tokens(x):
    return x.flatten(2).transpose(1, 2)


def _to_map(tokens, h, w):
    return tokens.transpose(1, 2).reshape(tokens.shape[0], -1, h, w)


class _ConvStage(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.down = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.n1 = nn.GroupNorm(_groups(cout), cout)
        self.conv = nn.Conv2d(cout, cout, 3, padding=1)
        self.n2 = nn.GroupNorm(_groups(cout), cout)
        self.block = AttentionBlock(cout)

    def forward(self, x):
        x = F.gelu(self.n1(self.down(x)))
        x = F.gelu(self.n2(self.conv(x)))
        h, w = x.shape[-2:]
        return _to_map(self.block(_to_tokens(x)), h, w)


class FoundationBackbone(nn.Module):
    """Base class: subclasses set ``widths`` and implement ``_pyramid``."""

    variant = None

    def __init__(self, image_size, widths):
        super().__init__()
        self.image_size = image_size
        self.widths = tuple(widths)
        # frozen per-channel standardisation of each pyramid tap; identity
        # until calibrate_taps() runs on the pretraining corpus
        for k, c in enumerate(self.widths):
            self.register_buffer(f"tap_mean{k}", torch.zeros(c))
            self.register_buffer(f"tap_std{k}", torch.ones(c))

    def standardize(self, levels):
        return [(f - getattr(self, f"tap_mean{k}")[:, None, None]) / getattr(self, f"tap_std{k}")[:, None, None]
                for k, f in enumerate(levels)]

    def attention_blocks(self):
        return [m for m in self.modules() if isinstance(m, AttentionBlock)]

    def lora_parameters(self):
        return [p for b in self.attention_blocks() if b.lora is not None for p in b.lora.parameters()]

    def backbone_parameters(self):
        lora = {id(p) for p in self.lora_parameters()}
        return [p for p in self.parameters() if id(p) not in lora]

    def backbone_state(self):
        return {k: v for k, v in self.state_dict().items() if ".lora." not in k}

    def lora_state(self):
        return {k: v for k, v in self.state_dict().items() if ".lora." in k}

    def token_counts(self):
        raise NotImplementedError

    def forward(self, images):
        return forward_pyramid(self, images)

    def config_dict(self):
        return {"variant": self.variant, "image_size": self.image_size, "widths": list(self.widths)}


class HybridBackbone(FoundationBackbone):
    variant = "toy-hybrid"

    def __init__(self, image_size=64, widths=(24, 32, 48, 64)):
        super().__init__(image_size, widths)
        stem = widths[0] // 2
        self.stem = nn.Sequential(nn.Conv2d(3, stem, 3, stride=2, padding=1),
                                  nn.GroupNorm(_groups(stem), stem), nn.GELU())
        chans = (stem,) + self.widths
        self.stages = nn.ModuleList(_ConvStage(a, b) for a, b in zip(chans[:-1], chans[1:]))

    def _pyramid(self, x):
        x = self.stem(x)
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out

    def token_counts(self):
        return [(self.image_size // 2 ** (k + 2)) ** 2 for k in range(4)]


class ViTPooledBackbone(FoundationBackbone):
    variant = "toy-vit-pooled"

    def __init__(self, image_size=64, widths=(48, 48, 48, 48)):
        if len(set(widths)) != 1:
            raise ConfigError("toy-vit-pooled uses one constant width")
        super().__init__(image_size, widths)
        c = widths[0]
        self.grid = image_size // 4
        self.patch = nn.Conv2d(3, c, 4, stride=4)
        self.pos = nn.Parameter(torch.randn(1, self.grid * self.grid, c) * 0.02)
        self.blocks = nn.ModuleList(AttentionBlock(c) for _ in range(4))

    def _pyramid(self, x):
        tokens = _to_tokens(self.patch(x)) + self.pos
        out = []
        for k, block in enumerate(self.blocks):
            tokens = block(tokens)
            fmap = _to_map(tokens, self.grid, self.grid)
            out.append(F.avg_pool2d(fmap, 2 ** k) if k else fmap)
        return out

    def token_counts(self):
        return [self.grid * self.grid] * 4


BACKBONES = {"toy-hybrid": HybridBackbone, "toy-vit-pooled": ViTPooledBackbone}


def build_backbone(variant, image_size, widths=None):
    if variant not in BACKBONES:
        raise ConfigError(f"unknown backbone {variant!r}; choose from {sorted(BACKBONES)}")
    kwargs = {"image_size": image_size}
    if widths is not None:
        kwargs["widths"] = tuple(widths)
    return BACKBONES[variant](**kwargs)


def forward_pyramid(bb: FoundationBackbone, images):
    """Return the four pyramid levels, finest first."""
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W), got {tuple(images.shape)}")
    h, w = images.shape[-2:]
    if h % 32 or w % 32 or h != bb.image_size or w != bb.image_size:
        raise ValueError(f"backbone expects {bb.image_size}px inputs divisible by 32, got {h}x{w}")
    return bb.standardize(bb._pyramid(images))


@torch.no_grad()
def calibrate_taps(bb: FoundationBackbone, images, batch_size=128):
    """Set the tap standardisation to the per-channel mean/std over ``images``."""
    for k in range(4):
        getattr(bb, f"tap_mean{k}").zero_()
        getattr(bb, f"tap_std{k}").fill_(1.0)
    levels = [bb._pyramid(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    for k in range(4):
        f = torch.cat([lv[k] for lv in levels])
        getattr(bb, f"tap_mean{k}").copy_(f.mean(dim=(0, 2, 3)))
        getattr(bb, f"tap_std{k}").copy_(f.std(dim=(0, 2, 3)).clamp_min(1e-6))


# ---------------------------------------------------------------- LoRA

def inject_lora(bb: FoundationBackbone, r=4, seed=0):
    """Attach one LoRAdapter per attention block and freeze everything else.

    Returns the trainable fraction |LoRA| / |all backbone params|.
    """
    if r < 1 or r >= min(bb.widths) / 4:
        raise ValueError(f"LoRA rank {r} too large for widths {bb.widths} (need r < {min(bb.widths) / 4})")
    gen = make_generator(seed)
    for p in bb.parameters():
        p.requires_grad_(False)
    blocks = bb.attention_blocks()
    for block, m in zip(blocks, bb.token_counts()):
        c = block.norm1.normalized_shape[0]
        block.lora = LoRAdapter(m, c, r, gen)
    n_lora = count_params(bb.lora_parameters())
    frac = n_lora / count_params(bb.backbone_parameters())
    bb.trainable_fraction = frac
    return frac


# ---------------------------------------------------------------- head

class SegHead(nn.Module):
    """FPN-style decoder from the four levels to (cup, disc) logits."""

    def __init__(self, widths, dim=32, image_skip=False):
        super().__init__()
        self.image_skip = image_skip
        self.lateral = nn.ModuleList(nn.Conv2d(c, dim, 1) for c in widths)
        self.fuse = nn.Sequential(nn.Conv2d(dim, dim, 3, padding=1), nn.GroupNorm(_groups(dim), dim), nn.GELU())
        self.refine = nn.Sequential(nn.Conv2d(dim + (3 if image_skip else 0), dim, 3, padding=1), nn.GELU())
        self.out = nn.Conv2d(dim, 2, 1)

    def forward(self, pyramid, images):
        size = pyramid[0].shape[-2:]
        h = sum(F.interpolate(lat(f), size=size, mode="bilinear", align_corners=False)
                for lat, f in zip(self.lateral, pyramid))
        h = self.fuse(h)
        h = F.interpolate(h, size=images.shape[-2:], mode="bilinear", align_corners=False)
        if self.image_skip:
            h = torch.cat([h, images], 1)
        return self.out(self.refine(h))


def segment(bb, head, images, pyramid=None):
    if pyramid is None:
        pyramid = forward_pyramid(bb, images)
    return head(pyramid, images)


# ---------------------------------------------------------------- pretraining

@dataclass
class MFMConfig:
    variant: str = "toy-hybrid"
    widths: tuple = None  # None keeps the variant's own widths
    patch: int = 4
    mask_ratio: float = 0.5
    steps: int = 600
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0


class _ReconDecoder(nn.Module):
    def __init__(self, widths, patch, dim=32):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, dim, 1) for c in widths)
        self.out = nn.Conv2d(dim, 3 * 16, 3, padding=1)

    def forward(self, pyramid):
        size = pyramid[0].shape[-2:]
        h = sum(F.interpolate(lat(f), size=size, mode="bilinear", align_corners=False)
                for lat, f in zip(self.lateral, pyramid))
        return F.pixel_shuffle(self.out(F.gelu(h)), 4)


def patch_mask(batch, size, patch, ratio, gen):
    """(B, 1, H, W) float mask, 1 on masked patches."""
    g = size // patch
    n = g * g
    k = int(round(ratio * n))
    scores = torch.rand(batch, n, generator=gen)
    idx = scores.argsort(dim=1)[:, :k]
    m = torch.zeros(batch, n)
    m.scatter_(1, idx, 1.0)
    m = m.view(batch, 1, g, g)
    return F.interpolate(m, scale_factor=patch, mode="nearest")


def pretrain_mfm(images, cfg: MFMConfig, log=None):
    """Masked-patch pixel reconstruction; the decoder is discarded afterwards.

    Returns the backbone with every parameter frozen.
    """
    if isinstance(images, (list, tuple)):
        images = torch.stack([s.image if hasattr(s, "image") else s for s in images])
    if len(images) < cfg.batch_size:
        raise ConfigError(f"MFM pretraining needs >= {cfg.batch_size} images, got {len(images)}")
    seed_everything(cfg.seed)
    gen = make_generator(cfg.seed)
    size = images.shape[-1]
    bb = build_backbone(cfg.variant, size, cfg.widths)
    dec = _ReconDecoder(bb.widths, cfg.patch)
    opt = torch.optim.Adam(list(bb.parameters()) + list(dec.parameters()), lr=cfg.lr)
    losses = []
    for step in range(cfg.steps):
        idx = torch.randint(0, len(images), (cfg.batch_size,), generator=gen)
        x = images[idx]
        m = patch_mask(len(x), size, cfg.patch, cfg.mask_ratio, gen)
        recon = dec(bb._pyramid(x * (1 - m)))
        loss = (((recon - x) ** 2) * m).sum() / (m.sum() * 3)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    if log is not None:
        log.extend(losses)
    for p in bb.parameters():
        p.requires_grad_(False)
    bb.eval()
    calibrate_taps(bb, images)
    return bb


def save_backbone(path, bb, cfg=None, head=None, extra=None):
    from .checkpoint import save_checkpoint
    payload = {"arch": bb.config_dict(), "config": None if cfg is None else dict(cfg.__dict__),
               "backbone": bb.backbone_state(), "lora": bb.lora_state(),
               "lora_rank": next((b.lora.r for b in bb.attention_blocks() if b.lora is not None), None),
               "head": None if head is None else head.state_dict()}
    if extra:
        payload.update(extra)
    save_checkpoint(path, "backbone", payload)


def load_backbone(path):
    from .checkpoint import load_checkpoint
    payload = load_checkpoint(path, "backbone")
    a = payload["arch"]
    bb = build_backbone(a["variant"], a["image_size"], a["widths"])
    bb.load_state_dict(payload["backbone"], strict=True)
    for p in bb.parameters():
        p.requires_grad_(False)
    bb.eval()
    return bb, payload


def load_adapted(path):
    """Rebuild backbone + LoRA + head from a stage-2 checkpoint."""
    bb, payload = load_backbone(path)
    if payload.get("lora_rank"):
        inject_lora(bb, payload["lora_rank"], seed=0)
        bb.load_state_dict({**bb.state_dict(), **payload["lora"]}, strict=True)
        for p in bb.parameters():
            p.requires_grad_(False)
    head = None
    if payload.get("head") is not None:
        head = SegHead(bb.widths)
        head.load_state_dict(payload["head"])
        head.eval()
    return bb, head, payload
