"""Command-line entry point: generate, train, track, eval, ablate.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

import torch

from . import config as cfgmod
from .config import ConfigError, GlobalConfig, check_paths, load_config, section_keys
from .data_model import load_dataset
from .fusion import ABLATION_ROWS, ROWS_BY_NAME, FusionConfig
from .network import ModelConfig, TrackerNet

log = logging.getLogger("mftrack")

# config sections (or single keys) each command reads
CONSUMES = {
    "generate": ["global.seed", "paths.out", "paths.rgb_input", "paths.exclude_list", "synth", "toy"],
    "train": ["global.seed", "paths.data", "paths.out", "paths.checkpoint", "backbone", "model",
              "fusion", "train"],
    "track": ["global.seed", "paths.test_data", "paths.checkpoint", "paths.results", "tracker",
              "eval.protocol", "eval.runs", "eval.threshold", "eval.gap"],
    "eval": ["paths.test_data", "paths.results", "paths.out", "eval"],
    "ablate": ["global.seed", "paths.data", "paths.test_data", "paths.out", "backbone", "model",
               "train", "tracker", "eval", "ablate"],
}

# command-line flag -> config key
FLAG_KEYS = {
    "seed": "global.seed", "data": "paths.data", "test_data": "paths.test_data",
    "out": "paths.out", "checkpoint": "paths.checkpoint", "results": "paths.results",
    "rgb_input": "paths.rgb_input", "sequences": "toy.sequences", "frames": "toy.frames",
    "steps": "train.steps", "runs": "eval.runs", "protocol": "eval.protocol",
    "level": "fusion.level", "rows": "ablate.rows",
}


class UsageError(Exception):
    pass


def consumed_keys(command: str) -> list[str]:
    keys = []
    for item in CONSUMES[command]:
        if "." in item:
            keys.append(item)
        else:
            keys += [f"{item}.{k}" for k, _ in section_keys(item)]
    return keys


def _help_epilog(command: str) -> str:
    lines = ["config keys consumed (section.key = default):"]
    for key in consumed_keys(command):
        sec, k = key.split(".", 1)
        lines.append(f"  {key} = {dict(section_keys(sec))[k]!r}")
    lines.append(f"config file: --config PATH or ${cfgmod.ENV_VAR}; flags override file values")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mftrack", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, epilog=_help_epilog(name),
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--jobs", type=int, default=1, help="parallel jobs (default 1, deterministic)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    g = add("generate", "write a toy dataset or a paired RGB-T dataset")
    mode = g.add_mutually_exclusive_group()
    mode.add_argument("--toy", action="store_true", help="synthetic toy sequences (default)")
    mode.add_argument("--paired", action="store_true", help="add pseudo-thermal frames to RGB data")
    g.add_argument("--in", dest="rgb_input")
    g.add_argument("--out")
    g.add_argument("--sequences", type=int)
    g.add_argument("--frames", type=int)

    t = add("train", "train a tracker network")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--steps", type=int)
    t.add_argument("--level")
    t.add_argument("--resume", help="training checkpoint to resume from")

    k = add("track", "run a trained tracker over test sequences")
    k.add_argument("--checkpoint")
    k.add_argument("--data", dest="test_data")
    k.add_argument("--results")
    k.add_argument("--runs", type=int)
    k.add_argument("--protocol", choices=("ope", "vot"))

    e = add("eval", "score result files")
    e.add_argument("--results")
    e.add_argument("--data", dest="test_data")
    e.add_argument("--out")
    e.add_argument("--runs", type=int)
    e.add_argument("--protocol", choices=("ope", "vot"))

    a = add("ablate", "train, track and score every fusion configuration row")
    a.add_argument("--data")
    a.add_argument("--test-data", dest="test_data")
    a.add_argument("--out")
    a.add_argument("--rows", help="comma separated row names (default: all)")
    a.add_argument("--steps", type=int)
    a.add_argument("--runs", type=int)
    return p


def _overrides(args) -> list[str]:
    out = list(args.set)
    for attr, key in FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            out.append(f"{key}={v}")
    return out


def _model_config(cfg: GlobalConfig) -> ModelConfig:
    return ModelConfig(backbone=cfg.build("backbone"), seed=cfg.seed, **cfg.section("model"))


def _train_config(cfg: GlobalConfig, **extra):
    return cfg.build("train", seed=cfg.seed, **extra)


# ------------------------------------------------------------- commands

def cmd_generate(args, cfg: GlobalConfig) -> int:
    from .synth_data import build_paired_dataset, read_exclusion_list, write_toy_dataset

    out = Path(cfg.get("paths", "out"))
    if args.paired:
        errors = check_paths(cfg, ["rgb_input"])
        if cfg.get("paths", "exclude_list"):
            errors += check_paths(cfg, ["exclude_list"])
        if errors:
            raise ConfigError(errors)
        excl = read_exclusion_list(cfg.get("paths", "exclude_list")) \
            if cfg.get("paths", "exclude_list") else set()
        n = build_paired_dataset(cfg.get("paths", "rgb_input"), out, cfg.build("synth"), excl,
                                 jobs=args.jobs)
        log.info("wrote %d paired sequences to %s", n, out)
        return 0
    toy = cfg.section("toy")
    paths = write_toy_dataset(out, toy["sequences"], cfg.seed, toy["prefix"],
                              num_frames=toy["frames"], image_size=(toy["height"], toy["width"]),
                              corruption_fraction=toy["corruption_fraction"])
    log.info("wrote %d toy sequences to %s", len(paths), out)
    return 0


def cmd_train(args, cfg: GlobalConfig) -> int:
    from .trainer import train

    errors = check_paths(cfg, ["data"])
    if args.resume and not Path(args.resume).with_suffix(".npz").exists():
        errors.append(f"--resume: {args.resume} does not exist")
    if errors:
        raise ConfigError(errors)
    dataset = load_dataset(cfg.get("paths", "data"))
    out = Path(cfg.get("paths", "out"))
    result = train(dataset, _train_config(cfg), cfg.build("fusion"), _model_config(cfg),
                   out_dir=out, resume=args.resume,
                   log=lambda s, l: log.info("step %d %s", s, l) if s % 50 == 0 else None)
    log.info("final checkpoint %s", result.checkpoint)
    return 0


def _load_net(path) -> TrackerNet:
    from .trainer import load_model

    net = load_model(path)
    net.eval()
    return net


def cmd_track(args, cfg: GlobalConfig) -> int:
    from .evaluation import run_trackers, track_ope_sequence, track_vot_sequence, write_run_results
    from .tracker import Tracker

    errors = check_paths(cfg, ["test_data", "checkpoint"])
    if not cfg.get("paths", "results"):
        errors.append("paths.results is not set")
    if errors:
        raise ConfigError(errors)
    net = _load_net(cfg.get("paths", "checkpoint"))
    sequences = load_dataset(cfg.get("paths", "test_data"))
    ev = cfg.section("eval")
    tcfg = cfg.build("tracker")
    if ev["protocol"] == "vot":
        fn = lambda tr, s: track_vot_sequence(tr, s, ev["threshold"], ev["gap"])
    else:
        fn = track_ope_sequence
    runs = run_trackers(lambda seed: Tracker(net, tcfg, seed), sequences, ev["runs"], cfg.seed,
                        fn, args.jobs)
    write_run_results(cfg.get("paths", "results"), runs)
    log.info("wrote %d runs to %s", len(runs), cfg.get("paths", "results"))
    return 0


def evaluate_results(runs, sequences, ev: dict) -> tuple[dict, object]:
    from .evaluation import attribute_breakdown, ope_metrics, report_dict, vot_metrics

    if ev["protocol"] == "vot":
        vot = vot_metrics(runs, sequences, ev["threshold"], ev["gap"], ev["burn_in"])
        return report_dict(vot=vot), None
    ope = ope_metrics(runs, sequences)
    return report_dict(ope=ope, per_attribute=attribute_breakdown(ope.per_sequence, sequences)), ope


def cmd_eval(args, cfg: GlobalConfig) -> int:
    from .evaluation import read_run_results, write_report

    errors = check_paths(cfg, ["test_data", "results"])
    if errors:
        raise ConfigError(errors)
    sequences = load_dataset(cfg.get("paths", "test_data"))
    ev = cfg.section("eval")
    runs = read_run_results(cfg.get("paths", "results"), sequences)[:ev["runs"]]
    report, ope = evaluate_results(runs, sequences, ev)
    path = write_report(cfg.get("paths", "out"), report, ope)
    log.info("report written to %s", path)
    return 0


ABLATION_COLUMNS = ("row", "group", "level", "iou_input", "predictor_input", "tir_lr_multiplier",
                    "finetune", "eao", "accuracy", "robustness", "errors")


def cmd_ablate(args, cfg: GlobalConfig) -> int:
    from .evaluation import run_vot_protocol
    from .tracker import Tracker
    from .trainer import train, transfer_pretrained

    errors = check_paths(cfg, ["data", "test_data"])
    if errors:
        raise ConfigError(errors)
    ab = cfg.section("ablate")
    names = [r.strip() for r in ab["rows"].split(",") if r.strip()] or [r.name for r in ABLATION_ROWS]
    train_set = load_dataset(cfg.get("paths", "data"))
    test_set = load_dataset(cfg.get("paths", "test_data"))
    out = Path(cfg.get("paths", "out"))
    mc, ev, tcfg = _model_config(cfg), cfg.section("eval"), cfg.build("tracker")
    tc = _train_config(cfg)
    pre_steps = ab["pretrain_steps"] or tc.steps
    ft_steps = ab["finetune_steps"] or tc.steps

    pretrained = {}
    for m in ("rgb", "tir"):
        log.info("pre-training single_%s for %d steps", m, pre_steps)
        res = train(train_set, _train_config(cfg, steps=pre_steps), FusionConfig(f"single_{m}"), mc,
                    out_dir=out / "pretrain" / m)
        pretrained[m] = res.net

    rows_out, status = [], 0
    for name in names:
        rec = dict.fromkeys(ABLATION_COLUMNS, "")
        rec["row"] = name
        row = ROWS_BY_NAME.get(name)
        if row is None:
            rec["errors"] = f"unknown row {name!r}"
            rows_out.append(rec)
            status = max(status, 1)
            continue
        f = row.fusion
        rec.update(group=row.group, level=f.level, iou_input=f.iou_input,
                   predictor_input=f.predictor_input, tir_lr_multiplier=f.tir_lr_multiplier,
                   finetune="+".join(sorted(row.finetune)) or "none")
        try:
            net = TrackerNet(f, mc)
            loaded = transfer_pretrained(net, pretrained)
            if row.finetune and ft_steps > 0:
                net = train(train_set, _train_config(cfg, steps=ft_steps), f, mc,
                            out_dir=out / "rows" / name.replace("/", "_"), net=net,
                            finetune=row.finetune, pretrained=loaded).net
            net.eval()
            report, _ = run_vot_protocol(lambda s: Tracker(net, tcfg, s), test_set, ev["runs"],
                                         cfg.seed, ev["threshold"], ev["gap"], ev["burn_in"],
                                         jobs=args.jobs)
            rec.update(eao=repr(report.eao), accuracy=repr(report.accuracy),
                       robustness=repr(report.robustness))
        except Exception as exc:  # a failed row is recorded and the grid continues
            log.debug("row %s failed", name, exc_info=True)
            rec["errors"] = f"{type(exc).__name__}: {exc}"
            status = 2
        rows_out.append(rec)
        log.info("row %s: %s", name, {k: rec[k] for k in ("eao", "accuracy", "robustness", "errors")})

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ABLATION_COLUMNS)
        w.writeheader()
        w.writerows(rows_out)
    return status


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "track": cmd_track, "eval": cmd_eval,
            "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    torch.set_num_threads(max(1, args.jobs))
    try:
        cfg = load_config(args.config, _overrides(args))
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as exc:
        if args.verbose:
            traceback.print_exc()
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
