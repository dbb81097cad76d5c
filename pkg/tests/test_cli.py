import csv
import os

import pytest
import yaml

from conftest import TINY
from mfmda.cli import main
from mfmda.metrics import PROXY_DISCLAIMER, read_reports


def _write_cfg(path, root, **extra):
    path.write_text(yaml.safe_dump({**TINY, "output_dir": str(root), **extra}))
    return str(path)


def _run(argv, capsys=None):
    code = main(argv)
    out = capsys.readouterr().out if capsys is not None else ""
    return code, out


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Tiny end-to-end run driven entirely through the CLI."""
    base = tmp_path_factory.mktemp("cli")
    root = base / "run"
    cfg = _write_cfg(base / "tiny.yaml", root)
    steps = [["gen-data", cfg], ["pretrain", cfg, "encoder"], ["pretrain", cfg, "ddpm"],
             ["pretrain", cfg, "mfm"], ["adapt-stage1", cfg, "--target", "targetA"],
             ["adapt-stage2", cfg, "--target", "targetA"],
             ["adapt-stage2", cfg, "--target", "targetA", "--ablation-levels", "L1"],
             ["sweep", cfg, "levels"], ["report", cfg]]
    for argv in steps:
        assert main(argv) == 0, argv
    return cfg, root


def test_gen_data_layout(run):
    """[TRIVIAL]"""
    _, root = run
    ds = root / "datasets"
    assert {"source", "targetA", "targetB"} <= set(os.listdir(ds))
    for d in ("source/train", "source/val", "targetA/val", "targetA/pool", "targetA/unlabeled", "few_shot/targetA"):
        assert (ds / d / "manifest.csv").exists()
    assert (root / "configs" / "gen-data.yaml").exists()


def test_gen_data_refuses_to_overwrite(run, capsys):
    """[TRIVIAL]"""
    cfg, _ = run
    code, _ = _run(["gen-data", cfg])
    assert code == 2
    assert "--force" in capsys.readouterr().err


def test_k_shot_flag(tmp_path):
    """[TRIVIAL]"""
    cfg = _write_cfg(tmp_path / "c.yaml", tmp_path / "r", data={**TINY["data"], "n_target_unlabeled": 12})
    assert main(["gen-data", cfg, "--k-shot", "10"]) == 0
    few = tmp_path / "r" / "datasets" / "few_shot" / "targetA"
    assert len([f for f in os.listdir(few) if f.endswith(".png")]) == 10


def test_missing_inputs_and_artifacts(tmp_path, capsys):
    """[TRIVIAL]"""
    cfg = _write_cfg(tmp_path / "c.yaml", tmp_path / "empty")
    assert main(["pretrain", cfg, "encoder"]) == 3
    assert main(["report", cfg]) == 3
    assert main(["gen-data", str(tmp_path / "nope.yaml")]) == 3
    bad = tmp_path / "bad.yaml"
    bad.write_text("stage1: {bogus: 1}\n")
    assert main(["gen-data", str(bad)]) == 2
    with pytest.raises(SystemExit) as info:
        main(["sweep", cfg, "colour"])
    assert info.value.code == 2


def test_missing_upstream_artifact(run, tmp_path):
    """[TRIVIAL]"""
    cfg, root = run
    other = _write_cfg(tmp_path / "c.yaml", root)
    # stage 2 for a target whose corpus was never built
    assert main(["adapt-stage2", other, "--target", "targetB", "--arm", "ours"]) == 4
    fresh = _write_cfg(tmp_path / "f.yaml", tmp_path / "fresh")
    assert main(["gen-data", fresh]) == 0
    assert main(["adapt-stage1", fresh]) == 4


def test_unknown_target(run):
    """[TRIVIAL]"""
    cfg, _ = run
    assert main(["adapt-stage1", cfg, "--target", "targetZ"]) == 2


def test_ddpm_pretrain_is_deterministic(run, tmp_path, capsys):
    """[TRIVIAL]"""
    lines = []
    for name in ("a", "b"):
        cfg = _write_cfg(tmp_path / f"{name}.yaml", tmp_path / name)
        assert main(["gen-data", cfg]) == 0
        capsys.readouterr()
        assert main(["pretrain", cfg, "ddpm"]) == 0
        lines.append(capsys.readouterr().out.splitlines()[0])
    assert lines[0] == lines[1]
    assert "final loss" in lines[0]


def test_checkpoints_and_logs(run):
    """[TRIVIAL]"""
    _, root = run
    ck = root / "checkpoints"
    for name in ("encoder", "ddpm_source", "mfm_toy-hybrid", "stage1_targetA", "stage2_targetA_ours",
                 "stage2_targetA_lora-only", "stage2_targetA_source-only", "stage2_targetA_ours_L1"):
        assert (ck / f"{name}.pt").exists(), name
    logs = root / "metrics" / "logs"
    with open(logs / "pretrain_mfm_toy-hybrid.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == TINY["mfm"]["steps"]


def test_corpus_manifest_has_provenance(run):
    """[TRIVIAL]"""
    _, root = run
    with open(root / "corpora" / "targetA" / "manifest.csv") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    assert {"source_seed", "source_domain", "t0"} <= set(reader.fieldnames)
    assert len(rows) == TINY["data"]["n_source"]


def test_stage1_metrics(run):
    """[TRIVIAL]"""
    _, root = run
    names = {r.name for r in read_reports(root / "metrics" / "stage1_targetA.csv")}
    assert {"fid_proxy", "fid_proxy_unadapted", "center_reduction", "diversity", "gate_first"} <= names


def test_stage2_rows_per_epoch_and_split(run):
    """[TRIVIAL]"""
    _, root = run
    rows = read_reports(root / "metrics" / "stage2_targetA_ours.csv")
    epochs = TINY["stage2"]["epochs"]
    assert len(rows) == epochs * 2
    assert {(r.details["epoch"], r.details["split"]) for r in rows} == \
        {(str(e), s) for e in range(1, epochs + 1) for s in ("source", "targetA")}
    l1 = read_reports(root / "metrics" / "stage2_targetA_ours_L1.csv")
    assert {r.details["levels"] for r in l1} == {"1"}
    assert {r.details["levels"] for r in rows} == {"1-2-3-4"}


def test_sweep_csv_counts(run):
    """[TRIVIAL]"""
    _, root = run
    rows = read_reports(root / "metrics" / "sweep_levels.csv")
    arms, seeds = TINY["sweep"]["level_arms"], TINY["sweep"]["seeds"]
    runs = [r for r in rows if r.details["kind"] == "run"]
    summary = [r for r in rows if r.details["kind"] == "summary"]
    assert len(runs) == len(arms) * len(seeds)
    assert len(summary) == len(arms)
    assert len(rows) == len(arms) * len(seeds) + len(arms)
    for s in summary:
        assert s.n_samples == len(seeds)
        assert "dice_mean" in s.details and "dice_std" in s.details
    assert (root / "report" / "sweep_levels.png").stat().st_size > 0


def test_report_contents(run):
    """[TRIVIAL]"""
    _, root = run
    text = (root / "report" / "report.md").read_text()
    assert PROXY_DISCLAIMER in text
    assert "Baseline vs ours" in text
    assert (root / "report" / "summary.csv").exists()
    pngs = [f for f in os.listdir(root / "report") if f.endswith(".png")]
    assert len(pngs) >= 2


def test_report_regeneration_is_stable(run):
    """[TRIVIAL]"""
    cfg, root = run
    before = (root / "report" / "report.md").read_text().splitlines()
    summary = (root / "report" / "summary.csv").read_bytes()
    assert main(["report", str(root)]) == 0
    after = (root / "report" / "report.md").read_text().splitlines()
    strip = [line for line in before if not line.startswith("Generated:")]
    assert strip == [line for line in after if not line.startswith("Generated:")]
    assert (root / "report" / "summary.csv").read_bytes() == summary


def test_seed_override_is_echoed(run, tmp_path):
    """[TRIVIAL]"""
    cfg, _ = run
    assert main(["show-config", cfg, "--seed", "9"]) == 0
    fresh = _write_cfg(tmp_path / "c.yaml", tmp_path / "r")
    assert main(["gen-data", fresh, "--seed", "5"]) == 0
    echo = yaml.safe_load((tmp_path / "r" / "configs" / "gen-data.yaml").read_text())
    assert echo["seed"] == 5 and echo["stage1"]["seed"] == 5 and echo["ddpm"]["seed"] == 5


def test_show_config_presets(capsys):
    """[TRIVIAL]"""
    assert main(["show-config", "--preset", "desk"]) == 0
    doc = yaml.safe_load(capsys.readouterr().out)
    assert doc["image_size"] == 32 and doc["preset"] == "desk"
