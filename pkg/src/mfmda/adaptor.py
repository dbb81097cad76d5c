"""Instance-aware direction adaptor and the stage-1 feature-space losses.

The adaptor turns a batch of source embeddings into a translation direction
in encoder space: a fixed source-to-target center difference, blended by a
learned scalar gate with a bounded batch-conditioned correction.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class DirectionAdaptor(nn.Module):
    """Bottleneck direction network plus gate.

    Shapes for feature width D (even): W1 (4D, D), W2 (D, 4D), We (D/2, D),
    Wg (1, D/2). Wg starts at zero and ``gate_bias`` at ``gate_init`` so the
    fused direction starts almost entirely static.
    """

    def __init__(self, dim, gate_init=-3.0):
        super().__init__()
        if dim % 2:
            raise ValueError(f"feature dim must be even, got {dim}")
        self.dim = dim
        self.W1 = nn.Parameter(torch.empty(4 * dim, dim))
        self.W2 = nn.Parameter(torch.empty(dim, 4 * dim))
        self.We = nn.Parameter(torch.empty(dim // 2, dim))
        self.Wg = nn.Parameter(torch.zeros(1, dim // 2))
        self.gate_bias = nn.Parameter(torch.tensor(float(gate_init)))
        # frozen few-shot target center, set once before adaptation
        self.register_buffer("tgt_center", torch.zeros(dim))
        for w in (self.W1, self.W2, self.We):
            bound = 1.0 / math.sqrt(w.shape[1])
            nn.init.uniform_(w, -bound, bound)

    def forward(self, batch_feats, static):
        return fused_direction(self, batch_feats, static)


def static_direction(src_center, tgt_center):
    # points from the source center to the target center
    if src_center.shape != tgt_center.shape:
        raise ValueError(f"center shapes differ: {tuple(src_center.shape)} vs {tuple(tgt_center.shape)}")
    return tgt_center - src_center


def dynamic_direction(ad: DirectionAdaptor, batch_feats, tgt_center):
    diff = batch_feats.mean(dim=0) - tgt_center
    return torch.tanh(ad.W2 @ F.relu(ad.W1 @ diff))


def gate(ad: DirectionAdaptor, batch_feats):
    m = batch_feats.mean(dim=0)
    return torch.sigmoid(ad.Wg @ F.relu(ad.We @ m) + ad.gate_bias).squeeze(0)


def fused_direction(ad: DirectionAdaptor, batch_feats, static, tgt_center=None, return_gate=False):
    """Convex blend g * dynamic + (1 - g) * static.

    ``tgt_center`` defaults to the center stored on the adaptor.
    """
    if static.shape != batch_feats.shape[1:]:
        raise ValueError("static direction and features disagree on D")
    if tgt_center is None:
        tgt_center = ad.tgt_center
    g = gate(ad, batch_feats)
    delta = g * dynamic_direction(ad, batch_feats, tgt_center) + (1 - g) * static
    return (delta, g) if return_gate else delta


def distribution_consistency_loss(src_feats, delta, gen_feats):
    """Batch mean of ||src_i + delta - gen_i||^2."""
    if src_feats.shape != gen_feats.shape:
        raise ValueError(f"paired features differ in shape: {tuple(src_feats.shape)} vs {tuple(gen_feats.shape)}")
    return ((src_feats + delta - gen_feats) ** 2).sum(dim=1).mean()


def _channel_stats(act):
    mean = act.mean(dim=(0, 2, 3))
    std = (act.var(dim=(0, 2, 3), unbiased=False) + 1e-8).sqrt()
    return mean, std


def style_loss(gen_images, target_images, encoder):
    """Match per-channel mean/std of every encoder stage to the exemplars."""
    gen_acts = encoder.stage_activations(gen_images)
    with torch.no_grad():
        tgt_acts = encoder.stage_activations(target_images)
    total = gen_images.new_zeros(())
    for a, b in zip(gen_acts, tgt_acts):
        mg, sg = _channel_stats(a)
        mt, st = _channel_stats(b)
        total = total + ((mg - mt) ** 2).mean() + ((sg - st) ** 2).mean()
    return total
