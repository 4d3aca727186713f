"""Command line entry point.

Every failure prints one JSON line ``{"error": kind, "message": ...}`` to
stderr (plus ``"field"`` for config errors) and exits nonzero. Successful
runs print one JSON summary line to stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .bench import emit_report, repeat_summary, run_benchmark, sweep_policies
from .config import ConfigError, RunConfig, build_split, load_config, parse_config
from .errors import CheckpointError, DynaggError
from .estimators import Estimators, gradient_check, load_checkpoint, save_checkpoint, train, train_mapping
from .synthetic import save_clips

EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CHECK_FAILED = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class UsageError(Exception):
    pass


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dynagg", description="Dynamic temporal feature aggregation benchmarks")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="YAML run configuration")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=_u64, help="global seed (overrides seed)")

    p = sub.add_parser("generate", help="generate and save the train and eval clips")
    common(p)

    p = sub.add_parser("train", help="train the estimators and adapter, then the learnable mapping")
    common(p)

    for name, text in (("bench", "run the configured policies"), ("sweep", "sweep mapping functions and sampling strategies")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--policy", action="append", help="only run this policy (repeatable)")
        p.add_argument("--format", action="append", choices=("csv", "plot"), help="report format (repeatable)")
        p.add_argument("--oracle", action="store_true", help="use ground-truth labels instead of estimators")
        p.add_argument("--checkpoint", help="checkpoint path (overrides checkpoint)")
        p.add_argument("--workers", type=int, help="parallel clip workers")
        if name == "sweep":
            p.add_argument("--k", type=int, default=30, help="neighborhood size")

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    common(p, config_required=False)
    p.add_argument("--seeds", type=int, default=5, help="number of random initialisations")
    p.add_argument("--tol", type=float, default=1e-4, help="maximum relative error")
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    update = {}
    if args.out is not None:
        update["output_dir"] = args.out
    if args.seed is not None:
        update["seed"] = args.seed
    if getattr(args, "format", None):
        update["formats"] = list(dict.fromkeys(args.format))
    if getattr(args, "oracle", False):
        update["oracle"] = True
    if getattr(args, "checkpoint", None):
        update["checkpoint"] = args.checkpoint
    if getattr(args, "workers", None) is not None:
        update["workers"] = args.workers
    if update:
        cfg = parse_config({**cfg.model_dump(), **update})
    return cfg


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    written = {}
    for split in ("train", "eval"):
        if cfg.split(split):
            clips = build_split(cfg, split)
            written[split] = str(save_clips(out / f"clips_{split}.npz", clips))
    _emit({"command": "generate", "written": written})
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    clips = build_split(cfg, "train")
    tcfg = cfg.train.build(cfg.seed)
    result = train(clips, tcfg)
    est = result.estimators
    if cfg.train.mapping_steps > 0:
        est.mapping = train_mapping(
            est,
            clips,
            k=tcfg.k,
            steps=cfg.train.mapping_steps,
            lr=cfg.train.mapping_lr,
            budget_weight=cfg.train.mapping_budget_weight,
            seed=cfg.seed,
        )
    out = Path(cfg.output_dir)
    ckpt = save_checkpoint(out / "checkpoint.npz", est, {"seed": cfg.seed, "steps": tcfg.steps})
    hist_path = out / "train_history.csv"
    with open(hist_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(result.history[0]), lineterminator="\n")
        writer.writeheader()
        for rec in result.history:
            writer.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in rec.items()})
    last = result.history[-1]
    _emit({"command": "train", "checkpoint": str(ckpt), "history": str(hist_path), "final_loss": last["total"]})
    return 0


def _estimators(cfg: RunConfig) -> Estimators | None:
    """The configured checkpoint, else ``<output_dir>/checkpoint.npz`` when present."""
    if cfg.checkpoint is not None:
        return load_checkpoint(cfg.checkpoint)
    fallback = Path(cfg.output_dir) / "checkpoint.npz"
    return load_checkpoint(fallback) if fallback.is_file() else None


def _select(policies, names):
    if not names:
        return policies
    known = {p.name: p for p in policies}
    missing = [n for n in names if n not in known]
    if missing:
        raise ConfigError("--policy", f"unknown policy {missing}; known: {sorted(known)}")
    return [known[n] for n in dict.fromkeys(names)]


def _run_reports(cfg: RunConfig, policies, est, stem: str, notes: dict | None = None) -> list[str]:
    reports = []
    for r in range(cfg.repeats):
        seed = cfg.seed + r
        clips = build_split(cfg, "eval", seed)
        report = run_benchmark(clips, policies, est, cfg.oracle, seed, cfg.workers, cfg.timing)
        report.notes.update(notes or {})
        reports.append(report)
    out = Path(cfg.output_dir)
    written = [str(p) for p in emit_report(reports[0], out, cfg.formats, stem)]
    if cfg.repeats > 1:
        path = out / f"{stem}_repeats.csv"
        path.write_text(repeat_summary(reports))
        written.append(str(path))
    return written


def cmd_bench(args) -> int:
    cfg = _config(args)
    est = _estimators(cfg)
    learned = est.mapping if est is not None else None
    policies = [p.build(learned) for p in cfg.policies]
    policies = _select(policies, args.policy)
    written = _run_reports(cfg, policies, est, "report")
    _emit({"command": "bench", "oracle": cfg.oracle, "written": written})
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    est = _estimators(cfg)
    mapping = est.mapping if est is not None else None
    notes = {"sigma_learnable": "extension: mapping fitted to distillation error plus a frame-budget penalty"}
    if mapping is None:
        if not cfg.oracle:
            raise CheckpointError("the sweep needs a checkpoint (or --oracle)")
        clips = build_split(cfg, "train")
        base = Estimators.init(clips[0].features.shape[1], len(clips[0].thresholds) + 1, cfg.seed)
        mapping = train_mapping(
            base,
            clips,
            k=args.k,
            steps=cfg.train.mapping_steps,
            lr=cfg.train.mapping_lr,
            budget_weight=cfg.train.mapping_budget_weight,
            seed=cfg.seed,
        )
        notes["mapping_source"] = "fitted on the train split with an identity adapter"
    policies = _select(sweep_policies(args.k, mapping, cfg.seed), args.policy)
    written = _run_reports(cfg, policies, est, "sweep", notes)
    _emit({"command": "sweep", "oracle": cfg.oracle, "written": written})
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.config is not None:
        cfg = load_config(args.config)
        seed = cfg.seed if args.seed is None else seed
    worst = {}
    for i in range(args.seeds):
        errs = gradient_check(seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
        for name, err in errs.items():
            worst[name] = max(worst.get(name, 0.0), err)
    ok = all(err < args.tol for err in worst.values())
    payload = {"command": "gradcheck", "seeds": args.seeds, "tol": args.tol, "passed": ok, "max_rel_error": worst}
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _emit(payload)
    if not ok:
        bad = sorted(n for n, e in worst.items() if e >= args.tol)
        print(json.dumps({"error": "gradcheck", "message": f"relative error above {args.tol} for {bad}"}), file=sys.stderr)
        return EXIT_CHECK_FAILED
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def _fail(kind: str, message: str, code: int, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as err:
        return _fail("usage", str(err), EXIT_USAGE)
    except ConfigError as err:
        return _fail("config", str(err), EXIT_USAGE, field=err.path)
    except DynaggError as err:
        return _fail(err.kind, str(err), EXIT_ERROR)
    except OSError as err:
        return _fail("io", str(err), EXIT_ERROR)


if __name__ == "__main__":
    sys.exit(main())
