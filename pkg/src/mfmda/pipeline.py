"""Stage orchestration over a run directory.

Every command reads and writes under one run directory with a fixed layout::

    datasets/     source/{train,val}, <target>/{val,pool,unlabeled}, few_shot/<target>
    checkpoints/  encoder, source DDPM, MFM backbones, stage-1 and stage-2 results
    corpora/      pseudo-target corpora, one manifest directory per target
    metrics/      MetricReport CSVs; per-step loss logs under metrics/logs/
    report/       consolidated markdown report, summary CSV and figures
"""

import copy
import csv
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np
import torch

from .adaptor import DirectionAdaptor
from .align import stage2_train
from .config import RunConfig, config_from_dict, config_to_dict, dump_config
from .diffusion import DenoiserNet, NoiseSchedule, load_ddpm, save_ddpm, train_source_ddpm
from .encoder import load_encoder, pretrain_encoder, save_encoder
from .errors import ConfigError, MissingArtifact, MissingInput, OutputExists
from .foundation import SegHead, inject_lora, load_backbone, pretrain_mfm, save_backbone
from .metrics import (MetricReport, center_distance, diversity_from_features, embed_all,
                      frechet_from_features, write_reports)
from .stage1 import adapt_ddpm, gate_drift, generate_target_corpus, save_stage1
from .synthdata import few_shot_subset, load_dataset, make_dataset, save_dataset
from .utils import param_hash, seed_everything

# offsets into the render-seed space, so no two splits share anatomy
SPLIT_SEED_OFFSETS = {"train": 0, "val": 100_000, "pool": 300_000, "unlabeled": 400_000}
TARGET_VAL_OFFSET = 200_000
ARMS = ("source-only", "lora-only", "ours")
SWEEP_AXES = ("k_shot", "levels", "backbone")
SWEEP_PRIMARY = {"k_shot": "fid_proxy", "levels": "dice", "backbone": "dice"}


class RunLayout:
    def __init__(self, root):
        self.root = root

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    @property
    def datasets(self):
        return self.path("datasets")

    @property
    def checkpoints(self):
        return self.path("checkpoints")

    @property
    def corpora(self):
        return self.path("corpora")

    @property
    def metrics(self):
        return self.path("metrics")

    @property
    def report(self):
        return self.path("report")

    def split_dir(self, domain, split):
        return self.path("datasets", domain, split)

    def few_shot_dir(self, target):
        return self.path("datasets", "few_shot", target)

    def checkpoint(self, name):
        return self.path("checkpoints", f"{name}.pt")

    def metrics_csv(self, name):
        return self.path("metrics", f"{name}.csv")

    def log_csv(self, name):
        return self.path("metrics", "logs", f"{name}.csv")

    def echo_config(self, cfg, command):
        return dump_config(cfg, self.path("configs", f"{command}.yaml"))


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def write_log(path, rows):
    """Per-step loss log; floats are written with fixed precision."""
    os.makedirs(os.path.dirname(path), exist_ok=True)
    if not rows:
        rows = []
    fields = list(rows[0]) if rows else ["step", "loss"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.8f}" if isinstance(v, float) else v) for k, v in r.items()})


def read_log(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save_reports(path, reports):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    write_reports(path, reports)


class Workspace:
    """Lazy, cached access to the datasets and checkpoints of one run."""

    def __init__(self, cfg: RunConfig, root=None):
        self.cfg = cfg
        self.layout = RunLayout(root or cfg.run_dir())
        self._cache = {}

    def _cached(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    # ------------------------------------------------------------ data

    def dataset(self, domain, split):
        def load():
            d = self.layout.split_dir(domain, split)
            if not os.path.exists(os.path.join(d, "manifest.csv")):
                raise MissingInput(f"dataset {domain}/{split} not found under {self.layout.datasets}; "
                                   "run gen-data first")
            return load_dataset(d)
        return self._cached(("data", domain, split), load)

    def source(self, split="train"):
        return self.dataset(self.cfg.data.source, split)

    def few_shot(self, target, k=None, seed=None):
        """The materialised k-shot set, or a fresh draw when k/seed are given."""
        if k is None and seed is None:
            def load():
                d = self.layout.few_shot_dir(target)
                if not os.path.exists(os.path.join(d, "manifest.csv")):
                    raise MissingInput(f"few-shot set for {target} not found; run gen-data first")
                return [s.image for s in load_dataset(d)]
            return self._cached(("few", target), load)
        k = self.cfg.data.k_shot if k is None else k
        seed = self.cfg.seed if seed is None else seed
        return few_shot_subset(self.dataset(target, "unlabeled"), k, seed)

    def check_target(self, target):
        if target not in self.cfg.data.targets:
            raise ConfigError(f"unknown target {target!r}; configured targets: {self.cfg.data.targets}")

    # ------------------------------------------------------------ models

    def encoder(self):
        return self._cached("encoder", lambda: load_encoder(self.layout.checkpoint("encoder")))

    def source_ddpm(self):
        """A fresh copy of the source-trained DDPM (callers may train it)."""
        net, sched, _ = self._cached("ddpm", lambda: load_ddpm(self.layout.checkpoint("ddpm_source")))
        return copy.deepcopy(net), sched

    def backbone(self, variant=None):
        variant = variant or self.cfg.mfm.variant
        return load_backbone(self.layout.checkpoint(f"mfm_{variant}"))[0]

    def pool_features(self, target):
        return self._cached(("poolf", target), lambda: embed_all(self.encoder(), self.dataset(target, "pool")))

    def corpus_sources(self, corpus_size=0):
        src = self.source("train")
        return src[:corpus_size] if corpus_size else src

    def translation_seed(self):
        return self.cfg.seed

    def unadapted_features(self, corpus_size=0):
        """Embeddings of the source set translated by the unadapted source DDPM."""
        def compute():
            net, sched = self.source_ddpm()
            src = self.corpus_sources(corpus_size)
            corpus = generate_target_corpus(net, sched, src, self.cfg.stage1.t0_frac,
                                            seed=self.translation_seed(), domain="unadapted")
            return embed_all(self.encoder(), corpus)
        return self._cached(("unadapted", corpus_size), compute)


# ---------------------------------------------------------------- gen-data

def gen_data(ws: Workspace, force=False, k_shot=None):
    cfg, layout = ws.cfg, ws.layout
    if os.path.isdir(layout.datasets) and os.listdir(layout.datasets):
        if not force:
            raise OutputExists(f"{layout.datasets} already exists; pass --force to regenerate")
        shutil.rmtree(layout.datasets)
    k = cfg.data.k_shot if k_shot is None else k_shot
    if not 1 <= k <= cfg.data.n_target_unlabeled:
        raise ConfigError(f"k-shot must lie in [1, {cfg.data.n_target_unlabeled}], got {k}")
    base = cfg.seed * 1_000_000
    size = cfg.image_size
    d = cfg.data
    src = d.domain_spec(d.source)
    save_dataset(make_dataset(src, d.n_source, size, base), layout.split_dir(d.source, "train"))
    save_dataset(make_dataset(src, d.n_source_val, size, base + SPLIT_SEED_OFFSETS["val"]),
                 layout.split_dir(d.source, "val"))
    for t in d.targets:
        spec = d.domain_spec(t)
        save_dataset(make_dataset(spec, d.n_target_val, size, base + TARGET_VAL_OFFSET),
                     layout.split_dir(t, "val"))
        save_dataset(make_dataset(spec, d.n_target_pool, size, base + SPLIT_SEED_OFFSETS["pool"]),
                     layout.split_dir(t, "pool"))
        unlabeled = make_dataset(spec, d.n_target_unlabeled, size, base + SPLIT_SEED_OFFSETS["unlabeled"])
        save_dataset(unlabeled, layout.split_dir(t, "unlabeled"), images_only=True)
        save_dataset(few_shot_subset(unlabeled, k, cfg.seed), layout.few_shot_dir(t))
    ws._cache.clear()
    return layout.datasets


# ---------------------------------------------------------------- pretraining

def pretrain(ws: Workspace, which, variant=None):
    """Train one upstream model and write its checkpoint and loss log.

    Returns (checkpoint path, list of per-step losses).
    """
    cfg, layout = ws.cfg, ws.layout
    src = ws.source("train")
    losses = []
    if which == "encoder":
        enc = pretrain_encoder(src, cfg.encoder, losses)
        path = layout.checkpoint("encoder")
        save_encoder(enc, path, cfg.encoder)
    elif which == "ddpm":
        dc = cfg.ddpm
        seed_everything(dc.seed)
        net = DenoiserNet(dc.base, dc.mults, dc.patch)
        net.image_size = cfg.image_size
        sched = NoiseSchedule(dc.T, dc.beta_1, dc.beta_T)
        train_source_ddpm(net, src, sched, dc, losses)
        path = layout.checkpoint("ddpm_source")
        save_ddpm(path, net, sched, dc, step=dc.steps)
    elif which == "mfm":
        mc = cfg.mfm
        if variant is not None and variant != mc.variant:
            mc = replace(mc, variant=variant, widths=None)
        bb = pretrain_mfm(src, mc, losses)
        which = f"mfm_{mc.variant}"
        path = layout.checkpoint(which)
        save_backbone(path, bb, mc)
    else:
        raise ConfigError(f"unknown pretraining target {which!r}")
    write_log(layout.log_csv(f"pretrain_{which}"), [{"step": i, "loss": v} for i, v in enumerate(losses)])
    ws._cache.pop({"encoder": "encoder", "ddpm": "ddpm"}.get(which), None)
    return path, losses


# ---------------------------------------------------------------- stage 1

def stage1_config(ws, seed=None):
    c = ws.cfg.stage1
    return c if seed is None else replace(c, seed=seed)


def run_stage1(ws: Workspace, target, *, seed=None, k_shot=None, arm="ours", corpus_size=0,
               tag="", save=True):
    """Adapt the source DDPM to ``target`` and build its pseudo-target corpus.

    ``arm`` is "ours" (configured loss weights) or "finetune" (diffusion term
    only, static direction never used). Returns (corpus, reports, log).
    """
    ws.check_target(target)
    if arm not in ("ours", "finetune"):
        raise ConfigError(f"unknown stage-1 arm {arm!r}")
    cfg = stage1_config(ws, seed)
    if arm == "finetune":
        cfg = replace(cfg, loss_weights=(cfg.loss_weights[0], 0.0, 0.0))
    enc = ws.encoder()
    enc_hash = param_hash(enc.state_dict())
    net, sched = ws.source_ddpm()
    src = ws.source("train")
    if k_shot is None and seed is None:
        few = ws.few_shot(target)
    else:
        few = ws.few_shot(target, k_shot, cfg.seed)
    seed_everything(cfg.seed)  # adaptor init draws from the global stream
    ad = DirectionAdaptor(enc.out_dim)
    net, ad, log = adapt_ddpm(net, ad, sched, src, few, enc, cfg)
    if param_hash(enc.state_dict()) != enc_hash:
        raise RuntimeError("encoder parameters changed during stage 1")

    corpus_src = ws.corpus_sources(corpus_size)
    corpus = generate_target_corpus(net, sched, corpus_src, cfg.t0_frac, seed=ws.translation_seed(),
                                    domain=f"pseudo-{target}")
    feats = embed_all(enc, corpus)
    pool = ws.pool_features(target)
    base = ws.unadapted_features(corpus_size)
    raw = embed_all(enc, corpus_src)
    few_f = embed_all(enc, torch.stack(few))
    g_first, g_last = gate_drift(log)

    def f64(x):
        return x.double().numpy()
    n = len(corpus)
    details = {"target": target, "arm": arm, "k_shot": len(few)}
    values = {
        "fid_proxy": frechet_from_features(f64(feats), f64(pool)),
        "fid_proxy_unadapted": frechet_from_features(f64(base), f64(pool)),
        "fid_proxy_source": frechet_from_features(f64(raw), f64(pool)),
        "center_distance": center_distance(feats, pool),
        "center_distance_unadapted": center_distance(base, pool),
        "diversity": diversity_from_features(f64(feats), f64(few_f)),
        "diversity_unadapted": diversity_from_features(f64(base), f64(few_f)),
        "final_diff_loss": log[-1]["diff"],
    }
    values["center_reduction"] = 1 - values["center_distance"] / values["center_distance_unadapted"]
    if g_first == g_first:  # nan for the finetune arm
        values["gate_first"] = g_first
        values["gate_last"] = g_last
        values["gate_drift_flag"] = float(g_last < g_first)
    reports = [MetricReport(k, float(v), n, cfg.seed, dict(details)) for k, v in values.items()]

    if save:
        name = f"stage1_{target}{tag}"
        save_stage1(ws.layout.checkpoint(name), net, sched, ad, cfg,
                    extra={"target": target, "arm": arm, "k_shot": len(few), "encoder_hash": enc_hash})
        save_dataset(corpus, os.path.join(ws.layout.corpora, f"{target}{tag}"))
        _save_reports(ws.layout.metrics_csv(name), reports)
        write_log(ws.layout.log_csv(name), log)
        ws._cache.pop(("corpus", f"{target}{tag}"), None)
    return corpus, reports, log


def load_corpus(ws: Workspace, target, tag=""):
    def load():
        d = os.path.join(ws.layout.corpora, f"{target}{tag}")
        if not os.path.exists(os.path.join(d, "manifest.csv")):
            raise MissingArtifact(f"pseudo-target corpus for {target} not found; run adapt-stage1 first")
        return load_dataset(d)
    return ws._cached(("corpus", f"{target}{tag}"), load)


# ---------------------------------------------------------------- stage 2

def stage2_config(ws, arm, levels=None, seed=None):
    if arm not in ARMS:
        raise ConfigError(f"unknown stage-2 arm {arm!r}; choose from {list(ARMS)}")
    c = ws.cfg.stage2
    kw = {}
    if seed is not None:
        kw["seed"] = seed
    if levels is not None:
        kw["levels_enabled"] = tuple(levels)
    if arm == "source-only":
        kw.update(use_pseudo_target=False, loss_weight=0.0)
    elif arm == "lora-only":
        kw.update(use_pseudo_target=True, loss_weight=0.0)
    else:
        if c.loss_weight <= 0:
            raise ConfigError("the 'ours' arm needs stage2.loss_weight > 0")
        kw.update(use_pseudo_target=True)
    return replace(c, **kw)


def run_stage2(ws: Workspace, target, arm="ours", *, levels=None, seed=None, variant=None,
               corpus=None, tag="", save=True):
    """Train LoRA + head for one arm; returns (Stage2Result, per-epoch reports)."""
    ws.check_target(target)
    cfg = stage2_config(ws, arm, levels, seed)
    variant = variant or ws.cfg.mfm.variant
    src = ws.source("train")
    pseudo = None
    if cfg.use_pseudo_target:
        pseudo = corpus if corpus is not None else load_corpus(ws, target)
        src = src[:len(pseudo)]
    val_sets = {"source": ws.source("val"), target: ws.dataset(target, "val")}
    bb = ws.backbone(variant)
    inject_lora(bb, cfg.lora_rank, seed=cfg.seed)
    seed_everything(cfg.seed)
    head = SegHead(bb.widths)
    result = stage2_train(bb, head, src, pseudo, cfg, val_sets)
    if result.frozen_hash_before != result.frozen_hash_after:
        raise RuntimeError("frozen backbone partition changed during stage 2")

    levels_str = "-".join(str(k) for k in cfg.levels_enabled)
    reports = []
    for row in result.log:
        details = {"target": target, "arm": arm, "backbone": variant, "levels": levels_str,
                   "epoch": row["epoch"], "split": row["split"]}
        details.update({k: _fmt(v) for k, v in row.items() if k not in ("epoch", "split", "dice")})
        reports.append(MetricReport("dice", row["dice"], len(val_sets[row["split"]]), cfg.seed, details))
    if save:
        name = f"stage2_{target}_{arm}{tag}"
        save_backbone(ws.layout.checkpoint(name), bb, cfg, head,
                      extra={"frozen_hash": result.frozen_hash_after, "arm": arm, "target": target})
        _save_reports(ws.layout.metrics_csv(name), reports)
        write_log(ws.layout.log_csv(name), result.losses)
    return result, reports


def final_dice(result, split):
    return result.final[split]["dice"]


# ---------------------------------------------------------------- sweeps

def sweep_grid(cfg: RunConfig, axis):
    if axis == "k_shot":
        return [str(k) for k in cfg.sweep.k_shots]
    if axis == "levels":
        return list(cfg.sweep.level_arms)
    if axis == "backbone":
        return [f"{b}/{arm}" for b in cfg.sweep.backbones for arm in ("lora-only", "ours")]
    raise ConfigError(f"unknown sweep axis {axis!r}; choose from {list(SWEEP_AXES)}")


def run_cell(ws: Workspace, axis, target, cell, seed):
    """One grid cell; returns a flat dict of metric values."""
    if axis == "k_shot":
        k = int(cell)
        corpus, reports, _ = run_stage1(ws, target, seed=seed, k_shot=k,
                                        corpus_size=ws.cfg.sweep.corpus_size, save=False)
        out = {r.name: r.value for r in reports if r.name in ("fid_proxy", "diversity", "center_distance")}
        result, _ = run_stage2(ws, target, "ours", seed=seed, corpus=corpus, save=False)
    elif axis == "levels":
        result, _ = run_stage2(ws, target, "ours", levels=ws.cfg.sweep.level_arms[cell], seed=seed,
                               save=False)
        out = {}
    elif axis == "backbone":
        variant, arm = cell.split("/")
        result, _ = run_stage2(ws, target, arm, seed=seed, variant=variant, save=False)
        out = {}
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    out["dice"] = final_dice(result, target)
    out["jaccard"] = result.final[target]["jaccard"]
    out["dice_source"] = final_dice(result, "source")
    return out


def _cell_worker(cfg_dict, root, axis, target, cell, seed):
    torch.set_num_threads(1)
    ws = Workspace(config_from_dict(cfg_dict), root)
    return run_cell(ws, axis, target, cell, seed)


def _cell_name(target, cell, seed):
    return f"{target}_{cell.replace('/', '_')}_s{seed}"


def aggregate(axis, cells, results):
    """MetricReports: one row per (cell, seed) then one summary row per cell."""
    primary = SWEEP_PRIMARY[axis]
    rows, summary = [], []
    groups = {}
    for (target, cell, seed), vals in zip(cells, results):
        details = {"axis": axis, "target": target, "cell": cell, "kind": "run"}
        details.update({k: _fmt(float(v)) for k, v in vals.items()})
        rows.append(MetricReport(f"{axis}:{primary}", float(vals[primary]), 1, seed, details))
        groups.setdefault((target, cell), []).append(vals)
    for (target, cell), runs in groups.items():
        details = {"axis": axis, "target": target, "cell": cell, "kind": "summary"}
        for key in runs[0]:
            v = np.array([r[key] for r in runs], dtype=np.float64)
            details[f"{key}_mean"] = _fmt(float(v.mean()))
            details[f"{key}_std"] = _fmt(float(v.std(ddof=1)) if len(v) > 1 else 0.0)
        mean = float(np.mean([r[primary] for r in runs]))
        summary.append(MetricReport(f"{axis}:{primary}", mean, len(runs), -1, details))
    return rows + summary


def ensure_backbones(ws: Workspace, variants):
    for v in variants:
        if not os.path.exists(ws.layout.checkpoint(f"mfm_{v}")):
            pretrain(ws, "mfm", variant=v)


def run_sweep(ws: Workspace, axis, jobs=1):
    """Run the grid for ``axis`` and write metrics/sweep_<axis>.csv.

    Cells run serially unless ``jobs`` > 1, in which case independent cells
    go to worker processes; each cell also writes its own CSV under
    metrics/sweep_<axis>/.
    """
    grid = sweep_grid(ws.cfg, axis)
    targets = ws.cfg.sweep_targets()
    if axis == "backbone":
        ensure_backbones(ws, ws.cfg.sweep.backbones)
    if axis in ("levels", "backbone"):
        for t in targets:
            load_corpus(ws, t)
    cells = [(t, c, s) for t in targets for c in grid for s in ws.cfg.sweep.seeds]
    if jobs > 1:
        import multiprocessing as mp
        cfg_dict = config_to_dict(ws.cfg)
        with ProcessPoolExecutor(jobs, mp_context=mp.get_context("spawn")) as ex:
            futures = [ex.submit(_cell_worker, cfg_dict, ws.layout.root, axis, *c) for c in cells]
            results = [f.result() for f in futures]
    else:
        results = [run_cell(ws, axis, *c) for c in cells]
    cell_dir = ws.layout.path("metrics", f"sweep_{axis}")
    for c, vals in zip(cells, results):
        _save_reports(os.path.join(cell_dir, f"{_cell_name(*c)}.csv"), aggregate(axis, [c], [vals])[:1])
    path = ws.layout.metrics_csv(f"sweep_{axis}")
    _save_reports(path, aggregate(axis, cells, results))
    from .plotting import plot_sweep
    from .metrics import read_reports
    plot_sweep(axis, read_reports(path), ws.layout.path("report", f"sweep_{axis}.png"))
    return path
