"""Segmentation overlap scores and feature-space generation metrics.

The Frechet distance and the intra-cluster diversity are computed in the
toy encoder's embedding space, so their absolute values are only comparable
with other numbers produced by the same encoder.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .encoder import embed

PROXY_DISCLAIMER = (
    "Generation metrics are proxies computed in a locally trained encoder's "
    "feature space; absolute values are not comparable to Inception FID or "
    "learned-perceptual LPIPS, only orderings within this run are meaningful."
)
CSV_COLUMNS = ["name", "value", "n_samples", "seed", "details"]


@dataclass
class MetricReport:
    name: str
    value: float
    n_samples: int
    seed: int = 0
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"metric {self.name} is not finite: {self.value}")
        if self.n_samples <= 0:
            raise ValueError("n_samples must be > 0")

    def row(self):
        flat = ";".join(f"{k}={self.details[k]}" for k in sorted(self.details))
        return [self.name, f"{self.value:.6f}", self.n_samples, self.seed, flat]


def write_reports(path, reports, append=False):
    exists = append and _nonempty(path)
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not exists:
            w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow(r.row())


def read_reports(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            details = dict(kv.split("=", 1) for kv in row["details"].split(";") if kv)
            out.append(MetricReport(row["name"], float(row["value"]), int(row["n_samples"]),
                                    int(row["seed"]), details))
    return out


def _nonempty(path):
    try:
        with open(path) as fh:
            return bool(fh.read(1))
    except FileNotFoundError:
        return False


# ---------------------------------------------------------------- overlap

def _binary_pair(pred, gt):
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return pred.bool(), gt.bool()


def dice(pred, gt):
    p, g = _binary_pair(pred, gt)
    denom = p.sum().item() + g.sum().item()
    if denom == 0:
        return 1.0
    return 2.0 * (p & g).sum().item() / denom


def jaccard(pred, gt):
    p, g = _binary_pair(pred, gt)
    union = (p | g).sum().item()
    if union == 0:
        return 1.0
    return (p & g).sum().item() / union


def segmentation_scores(logits, masks, threshold=0.0):
    """Per-image Dice/Jaccard for cup and disc, averaged over images."""
    pred = logits > threshold
    scores = {"dice_cup": [], "dice_disc": [], "jaccard_cup": [], "jaccard_disc": []}
    for p, g in zip(pred, masks):
        for ch, name in ((0, "cup"), (1, "disc")):
            scores[f"dice_{name}"].append(dice(p[ch], g[ch]))
            scores[f"jaccard_{name}"].append(jaccard(p[ch], g[ch]))
    out = {k: float(np.mean(v)) for k, v in scores.items()}
    out["dice"] = (out["dice_cup"] + out["dice_disc"]) / 2
    out["jaccard"] = (out["jaccard_cup"] + out["jaccard_disc"]) / 2
    return out


# ---------------------------------------------------------------- Frechet

def _sqrtm_trace(a, b):
    """Tr((A B)^{1/2}) for PSD A, B via the symmetric form A^1/2 B A^1/2."""
    w, v = np.linalg.eigh(a)
    root_a = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    m = root_a @ b @ root_a
    m = (m + m.T) / 2
    lam = np.clip(np.linalg.eigvalsh(m), 0, None)
    return float(np.sqrt(lam).sum())


def frechet_from_features(fa, fb, shrinkage=1e-6):
    """Frechet distance between Gaussian fits of two (n, D) feature sets."""
    fa = np.asarray(fa, dtype=np.float64)
    fb = np.asarray(fb, dtype=np.float64)
    if len(fa) == 0 or len(fb) == 0:
        raise ValueError("Frechet distance needs non-empty feature sets")
    d = fa.shape[1]
    mu_a, mu_b = fa.mean(0), fb.mean(0)
    cov_a = np.cov(fa, rowvar=False) if len(fa) > 1 else np.zeros((d, d))
    cov_b = np.cov(fb, rowvar=False) if len(fb) > 1 else np.zeros((d, d))
    cov_a = np.atleast_2d(cov_a) + shrinkage * np.eye(d)
    cov_b = np.atleast_2d(cov_b) + shrinkage * np.eye(d)
    # the shrinkage ridge cancels in the trace term, up to O(sqrt(shrinkage))
    val = ((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * _sqrtm_trace(cov_a, cov_b)
    return max(float(val), 0.0)


@torch.no_grad()
def embed_all(encoder, images, batch_size=256):
    if isinstance(images, (list, tuple)):
        images = torch.stack([s.image if hasattr(s, "image") else s for s in images])
    if len(images) == 0:
        raise ValueError("empty image set")
    return torch.cat([embed(encoder, images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


def frechet_feature_distance(set_a, set_b, encoder):
    return frechet_from_features(embed_all(encoder, set_a).double().numpy(),
                                 embed_all(encoder, set_b).double().numpy())


# ---------------------------------------------------------------- diversity

def _cos_matrix(a, b):
    a = a / np.linalg.norm(a, axis=1, keepdims=True).clip(1e-12)
    b = b / np.linalg.norm(b, axis=1, keepdims=True).clip(1e-12)
    return a @ b.T


def diversity_from_features(gen_feats, exemplar_feats=None, labels=None):
    """Mean over occupied clusters of mean pairwise (1 - cos) / 2.

    Members are assigned to their nearest exemplar by cosine unless
    ``labels`` supplies the assignment directly. Clusters with a single
    member carry no pairwise distance and are skipped.
    """
    g = np.asarray(gen_feats, dtype=np.float64)
    if len(g) < 2:
        raise ValueError("diversity needs at least two generated images")
    if labels is None:
        if exemplar_feats is None:
            raise ValueError("pass exemplar features or explicit labels")
        labels = _cos_matrix(g, np.asarray(exemplar_feats, dtype=np.float64)).argmax(1)
    labels = np.asarray(labels)
    per_cluster = []
    for c in np.unique(labels):
        members = g[labels == c]
        if len(members) < 2:
            continue
        cos = _cos_matrix(members, members)
        iu = np.triu_indices(len(members), k=1)
        per_cluster.append(((1 - cos[iu]) / 2).mean())
    if not per_cluster:
        return 0.0
    return float(np.clip(np.mean(per_cluster), 0.0, 1.0))


def intra_cluster_diversity(generated, exemplars, encoder):
    return diversity_from_features(embed_all(encoder, generated).double().numpy(),
                                   embed_all(encoder, exemplars).double().numpy())


def center_distance(feats_a, feats_b):
    return float((feats_a.mean(0) - feats_b.mean(0)).norm())
