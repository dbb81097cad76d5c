"""Pyramid hierarchical alignment losses and the stage-2 training loop."""

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigError, TrainingFailure
from .foundation import forward_pyramid, segment
from .metrics import segmentation_scores
from .utils import make_generator, param_hash, seed_everything

COS_EPS = 1e-8


@dataclass
class AlignConfig:
    levels_enabled: tuple = (1, 2, 3, 4)
    loss_weight: float = 1.0
    epochs: int = 8
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    use_pseudo_target: bool = True
    lora_rank: int = 4

    def __post_init__(self):
        self.levels_enabled = tuple(int(k) for k in self.levels_enabled)
        if any(k not in (1, 2, 3, 4) for k in self.levels_enabled):
            raise ConfigError(f"levels must be drawn from 1..4, got {self.levels_enabled}")
        if self.loss_weight < 0:
            raise ConfigError("loss_weight must be >= 0")
        if self.loss_weight > 0 and not self.levels_enabled:
            raise ConfigError("alignment enabled with no pyramid levels")
        if self.loss_weight > 0 and not self.use_pseudo_target:
            raise ConfigError("alignment needs the pseudo-target corpus")


def flatten_spatial(f):
    b, c, h, w = f.shape
    return f.reshape(b, c, h * w)


def level_similarity(f_s, f_t):
    """Mean cosine between paired C-dim columns over batch and positions."""
    if f_s.shape != f_t.shape:
        raise ValueError(f"paired features differ: {tuple(f_s.shape)} vs {tuple(f_t.shape)}")
    a, b = flatten_spatial(f_s), flatten_spatial(f_t)
    num = (a * b).sum(dim=1)
    den = a.norm(dim=1) * b.norm(dim=1)
    return (num / den.clamp_min(COS_EPS)).mean()


def alignment_loss(p_s, p_t, levels_enabled=(1, 2, 3, 4)):
    """Mean of (1 - S_k) over enabled levels; lies in [0, 2]."""
    if isinstance(levels_enabled, AlignConfig):
        levels_enabled = levels_enabled.levels_enabled
    if not levels_enabled:
        raise ConfigError("alignment loss with no enabled levels")
    if len(p_s) != len(p_t):
        raise ValueError("pyramids have different depths")
    terms = [1 - level_similarity(p_s[k - 1], p_t[k - 1]) for k in levels_enabled]
    return torch.stack(terms).mean()


def bce_loss(logits, mask):
    return F.binary_cross_entropy_with_logits(logits, mask.to(logits.dtype))


def stage2_objective(bb, head, xs, xt, mask, cfg: AlignConfig):
    """Return (total, bce, align) for one paired batch.

    ``xt`` may be None (source-only training), in which case only the
    source BCE term is used.
    """
    ps = forward_pyramid(bb, xs)
    bce = bce_loss(segment(bb, head, xs, ps), mask)
    align = xs.new_zeros(())
    if xt is not None:
        pt = forward_pyramid(bb, xt)
        bce = (bce + bce_loss(segment(bb, head, xt, pt), mask)) / 2
        if cfg.loss_weight > 0:
            align = alignment_loss(ps, pt, cfg.levels_enabled)
    return bce + cfg.loss_weight * align, bce, align


@torch.no_grad()
def evaluate(bb, head, samples, batch_size=128):
    bb.eval()
    head.eval()
    images = torch.stack([s.image for s in samples])
    masks = torch.stack([s.mask for s in samples])
    logits = torch.cat([segment(bb, head, images[i:i + batch_size])
                        for i in range(0, len(images), batch_size)])
    return segmentation_scores(logits, masks)


def check_pairing(source, pseudo):
    if len(source) != len(pseudo):
        raise ValueError(f"unpaired corpora: {len(source)} source vs {len(pseudo)} pseudo-target")
    for s, p in zip(source, pseudo):
        src_seed = p.provenance.get("source_seed")
        if src_seed is not None and int(src_seed) != s.seed:
            raise ValueError(f"pseudo-target sample from seed {src_seed} paired with source seed {s.seed}")


@dataclass
class Stage2Result:
    log: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    frozen_hash_before: str = ""
    frozen_hash_after: str = ""


def stage2_train(bb, head, labeled_source, pseudo_target, cfg: AlignConfig, val_sets=None):
    """Train LoRA + head on paired source / pseudo-target batches.

    ``val_sets`` maps split names to labeled samples; each is scored once per
    epoch. Backbone weights outside the LoRA partition stay untouched.
    """
    if cfg.use_pseudo_target:
        if pseudo_target is None:
            raise ValueError("pseudo-target corpus required when use_pseudo_target is set")
        check_pairing(labeled_source, pseudo_target)
    seed_everything(cfg.seed)
    gen = make_generator(cfg.seed)
    val_sets = val_sets or {}

    xs_all = torch.stack([s.image for s in labeled_source])
    m_all = torch.stack([s.mask for s in labeled_source])
    xt_all = torch.stack([s.image for s in pseudo_target]) if cfg.use_pseudo_target else None

    params = bb.lora_parameters() + list(head.parameters())
    for p in bb.backbone_parameters():
        p.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    result = Stage2Result(frozen_hash_before=param_hash(bb.backbone_state()))

    n = len(xs_all)
    for epoch in range(1, cfg.epochs + 1):
        bb.train()
        head.train()
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            xt = xt_all[idx] if xt_all is not None else None
            total, bce, align = stage2_objective(bb, head, xs_all[idx], xt, m_all[idx], cfg)
            opt.zero_grad()
            total.backward()
            opt.step()
            if not math.isfinite(total.item()):
                raise TrainingFailure("stage-2 loss is not finite", {"epoch": epoch})
            result.losses.append({"epoch": epoch, "total": total.item(), "bce": bce.item(),
                                  "align": align.item()})
        for split, samples in val_sets.items():
            scores = evaluate(bb, head, samples)
            result.log.append({"epoch": epoch, "split": split, **scores})
    result.final = {row["split"]: row for row in result.log if row["epoch"] == cfg.epochs}
    result.frozen_hash_after = param_hash(bb.backbone_state())
    bb.eval()
    head.eval()
    return result
