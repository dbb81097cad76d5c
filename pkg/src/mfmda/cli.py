"""Command-line entry point: ``mfmda <command> CONFIG [options]``.

Exit codes: 0 success, 2 usage or configuration error (including a refusal
to overwrite), 3 missing input data, 4 missing upstream artifact,
5 training failure.
"""

import argparse
import logging
import os
import sys

from . import __version__
from .config import OUTPUT_ROOT_ENV, PRESETS, config_from_dict, dump_config, load_config
from .errors import ConfigError, MissingArtifact, MissingInput, OutputExists, TrainingFailure

log = logging.getLogger("mfmda")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_UPSTREAM, EXIT_TRAINING = 0, 2, 3, 4, 5
LEVEL_ARMS = {"L1": (1,), "L2": (2,), "L3": (3,), "L4": (4,), "L-All": (1, 2, 3, 4)}


def _workspace(args, command):
    from .pipeline import Workspace
    cfg = load_config(args.config, seed=args.seed)
    ws = Workspace(cfg, args.out)
    ws.layout.echo_config(cfg, command)
    log.info("run directory: %s", ws.layout.root)
    return ws


def _targets(ws, target):
    if target:
        ws.check_target(target)
        return [target]
    return list(ws.cfg.data.targets)


def cmd_gen_data(args):
    from .pipeline import gen_data
    ws = _workspace(args, "gen-data")
    out = gen_data(ws, force=args.force, k_shot=args.k_shot)
    print(f"datasets written to {out}")


def cmd_pretrain(args):
    from .pipeline import pretrain
    ws = _workspace(args, f"pretrain-{args.which}")
    path, losses = pretrain(ws, args.which, variant=args.variant)
    print(f"{args.which}: {len(losses)} steps, first loss {losses[0]:.6f}, final loss {losses[-1]:.6f}")
    print(f"checkpoint: {path}")


def cmd_adapt_stage1(args):
    from .pipeline import run_stage1
    ws = _workspace(args, "adapt-stage1")
    for target in _targets(ws, args.target):
        corpus, reports, _ = run_stage1(ws, target, arm=args.arm)
        vals = {r.name: r.value for r in reports}
        print(f"{target}: corpus of {len(corpus)} images; Frechet proxy {vals['fid_proxy']:.4f} "
              f"(unadapted {vals['fid_proxy_unadapted']:.4f}), center reduction {vals['center_reduction']:.1%}, "
              f"diversity {vals['diversity']:.4f}")
        if vals.get("gate_drift_flag"):
            print(f"{target}: flag: gate decreased during adaptation "
                  f"({vals['gate_first']:.4f} -> {vals['gate_last']:.4f})")


def cmd_adapt_stage2(args):
    from .pipeline import ARMS, final_dice, run_stage2
    ws = _workspace(args, "adapt-stage2")
    levels, tag = None, ""
    if args.ablation_levels:
        levels, tag = LEVEL_ARMS[args.ablation_levels], f"_{args.ablation_levels}"
    arms = list(ARMS) if args.arm == "all" else [args.arm]
    if levels is not None:
        arms = ["ours"]
    for target in _targets(ws, args.target):
        for arm in arms:
            result, _ = run_stage2(ws, target, arm, levels=levels, tag=tag)
            print(f"{target} {arm}{tag}: Dice target {final_dice(result, target):.4f}, "
                  f"source {final_dice(result, 'source'):.4f}")


def cmd_sweep(args):
    from .pipeline import run_sweep
    ws = _workspace(args, f"sweep-{args.axis}")
    path = run_sweep(ws, args.axis, jobs=args.jobs)
    print(f"sweep CSV: {path}")


def cmd_report(args):
    from .report import build_report
    if os.path.isdir(args.config):
        root = args.config
    else:
        cfg = load_config(args.config, seed=args.seed)
        root = args.out or cfg.run_dir()
        dump_config(cfg, os.path.join(root, "configs", "report.yaml"))
    if not os.path.isdir(root):
        raise MissingInput(f"run directory {root} does not exist")
    print(f"report: {build_report(root)}")


def cmd_show_config(args):
    if args.config:
        cfg = load_config(args.config, seed=args.seed)
    else:
        cfg = config_from_dict({"preset": args.preset}, seed=args.seed)
    sys.stdout.write(dump_config(cfg))


def build_parser():
    p = argparse.ArgumentParser(prog="mfmda", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, config_required=True):
        sp = sub.add_parser(name, help=help_text)
        if config_required:
            sp.add_argument("config", help="YAML run config (report also accepts a run directory)")
        sp.add_argument("--seed", type=int, default=None, help="override every module seed")
        sp.add_argument("--out", default=None,
                        help=f"run directory (default: output_dir, else ${OUTPUT_ROOT_ENV}/run_name)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "render source/target datasets and the few-shot set")
    sp.add_argument("--force", action="store_true", help="overwrite existing datasets")
    sp.add_argument("--k-shot", type=int, default=None, help="few-shot set size (default data.k_shot)")

    sp = add("pretrain", cmd_pretrain, "train the encoder, source DDPM or MFM backbone")
    sp.add_argument("which", choices=["encoder", "ddpm", "mfm"])
    sp.add_argument("--variant", default=None, help="backbone registry key for mfm")

    sp = add("adapt-stage1", cmd_adapt_stage1, "adapt the DDPM and write the pseudo-target corpus")
    sp.add_argument("--target", default=None, help="one target domain (default: all)")
    sp.add_argument("--arm", choices=["ours", "finetune"], default="ours")

    sp = add("adapt-stage2", cmd_adapt_stage2, "LoRA + alignment training of the segmentation model")
    sp.add_argument("--target", default=None, help="one target domain (default: all)")
    sp.add_argument("--arm", choices=["source-only", "lora-only", "ours", "all"], default="all")
    sp.add_argument("--ablation-levels", choices=sorted(LEVEL_ARMS), default=None,
                    help="run the 'ours' arm with only these pyramid levels aligned")

    sp = add("sweep", cmd_sweep, "run a grid over one axis and aggregate over seeds")
    sp.add_argument("axis", choices=["k_shot", "levels", "backbone"])
    sp.add_argument("--jobs", type=int, default=1, help="worker processes for independent cells")

    add("report", cmd_report, "consolidate metric CSVs into report/")

    sp = add("show-config", cmd_show_config, "print the resolved config", config_required=False)
    sp.add_argument("config", nargs="?", default=None)
    sp.add_argument("--preset", choices=sorted(PRESETS), default="default")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, OutputExists) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifact as exc:
        print(f"error: missing upstream artifact: {exc}", file=sys.stderr)
        return EXIT_UPSTREAM
    except (MissingInput, FileNotFoundError) as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingFailure as exc:
        print(f"error: training failed: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_TRAINING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
