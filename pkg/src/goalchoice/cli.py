"""Command-line entry point: ``goalchoice <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric abort. ``GOALCHOICE_LOG`` sets the log level (default WARNING).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from .errors import (
    ConfigError, ContractError, DataError, GoalChoiceError, IdentifiabilityWarning, IoError, NumericError,
)

log = logging.getLogger("goalchoice")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(GoalChoiceError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--workers", type=int, default=1, help="worker threads for per-instance work")
    p.add_argument("--grid", choices=("fixed", "dynamic"))
    p.add_argument("--dcm", choices=("1", "2", "off"))
    p.add_argument("--method", choices=("I", "II", "III", "IV"))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--out", help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="goalchoice", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic scenes as a track CSV")
    _common(p)
    p.add_argument("--scenario", action="append", help="scenario name (repeatable; default straight)")
    p.add_argument("--n", type=int, default=1, help="number of scenes")
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--background", type=int, default=1, help="background cars per scene")
    p.add_argument("--instances", help="also write prediction instances (JSONL) here")

    p = sub.add_parser("ingest", help="track CSV -> prediction instances (JSONL)")
    _common(p)
    p.add_argument("input")
    p.add_argument("--t-obs", type=int, default=10)
    p.add_argument("--t-f", type=int, default=30)
    p.add_argument("--stride", type=int)

    p = sub.add_parser("calibrate-dcm", help="fit DCM coefficients by maximum likelihood")
    _common(p)
    p.add_argument("data", help="instances JSONL")
    p.add_argument("--features", help="also write the feature table (CSV)")

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("data", help="training instances JSONL")
    p.add_argument("--val", help="validation instances JSONL")

    p = sub.add_parser("predict", help="write per-instance mode sets (CSV)")
    _common(p)
    p.add_argument("model", help="model directory")
    p.add_argument("data", help="instances JSONL")

    p = sub.add_parser("eval", help="minADE/minFDE/Col-II of a model or a predictions CSV")
    _common(p)
    p.add_argument("data", help="instances JSONL with ground truth")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", help="model directory")
    src.add_argument("--pred", help="predictions CSV")
    p.add_argument("--top-k", type=int, default=6)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--all-modes", action="store_true", help="Col-II counts a collision of any top-k mode")

    p = sub.add_parser("explain", help="score decomposition reports (CSV + SVG)")
    _common(p)
    p.add_argument("model", help="model directory")
    p.add_argument("data", help="instances JSONL")
    return parser


# ------------------------------------------------------------------ helpers


def _overrides(args) -> dict[str, str]:
    from .config import parse_overrides

    values = parse_overrides(args.set)
    for flag in ("grid", "dcm", "method", "seed"):
        v = getattr(args, flag, None)
        if v is not None:
            values[flag] = str(v)
    return values


def _need_out(args, default: Optional[str] = None) -> Path:
    if args.out is None and default is None:
        raise UsageError(f"{args.command}: --out is required")
    return Path(args.out or default)


def _check_inputs(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise IoError(f"no such file or directory: {p}")


def _chunks(items: Sequence, n: int) -> list[Sequence]:
    size = max(1, -(-len(items) // n))
    return [items[i : i + size] for i in range(0, len(items), size)]


def _parallel(fn, items: Sequence, workers: int) -> list:
    """Apply ``fn`` to contiguous chunks; results come back in input order."""
    if workers < 1:
        raise UsageError("--workers must be at least 1")
    if workers == 1 or len(items) < 2:
        return list(fn(items))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return [r for part in pool.map(fn, _chunks(items, workers)) for r in part]


# -------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    from .ingest import build_instances, save_instances, write_tracks
    from .synth import SynthConfig, synth_generate

    out = _need_out(args)
    cfg = SynthConfig(scenarios=tuple(args.scenario or ("straight",)), n=args.n, n_frames=args.frames,
                      n_background=args.background)
    scenes = synth_generate(cfg, seed=args.seed or 0)
    write_tracks(scenes, out)
    if args.instances:
        save_instances(build_instances(scenes, cfg.t_obs, cfg.t_f), args.instances)
    print(f"wrote {len(scenes)} scenes to {out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    from .config import load_config
    from .ingest import build_instances, parse_tracks, save_instances

    _check_inputs(args.input, args.config)
    out = _need_out(args)
    space = load_config(args.config, _overrides(args)).model.space
    scenes = parse_tracks(args.input, args.t_obs, args.t_f)
    instances = build_instances(scenes, args.t_obs, args.t_f, args.stride, space)
    save_instances(instances, out)
    print(f"wrote {len(instances)} instances from {len(scenes)} target tracks to {out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .config import load_config
    from .dcm import compute_features, fit_mle, write_beta, write_features_csv
    from .grid import build_grid, label_goal
    from .ingest import load_instances

    _check_inputs(args.data, args.config)
    cfg = load_config(args.config, _overrides(args)).model
    variant = cfg.dcm
    if variant is None:
        raise UsageError("calibrate-dcm needs a DCM variant (--dcm 1 or 2 with method III or IV)")
    instances = load_instances(args.data)

    def features(part):
        rows = []
        for inst in part:
            if inst.ground_truth_future is None:
                raise ContractError(f"instance {inst.instance_id} has no ground truth to label")
            grid = build_grid(inst.target_obs()[-1], inst.scene.horizon, cfg.grid, cfg.grid_mode)
            rows.append((compute_features(grid, inst, variant, "train", cfg.features),
                         label_goal(grid, inst.ground_truth_future[-1])))
        return rows

    dataset = _parallel(features, instances, args.workers)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", IdentifiabilityWarning)
        fit = fit_mle(dataset, variant)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    print(f"{'coefficient':<14}{'estimate':>12}")
    for name in variant.coefficients:
        print(f"{name:<14}{getattr(fit.beta, name):>12.6f}")
    print(f"log-likelihood {fit.loglik:.6f}  iterations {fit.n_iter}  converged {fit.converged}  n {len(dataset)}")
    if args.out:
        write_beta(fit.beta, args.out, variant)
    if args.features:
        write_features_csv([(inst.instance_id, f) for inst, (f, _) in zip(instances, dataset)], args.features)
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import load_config
    from .ingest import load_instances
    from .train import train

    _check_inputs(args.data, args.val, args.config)
    out = _need_out(args)
    cfg = load_config(args.config, _overrides(args))
    train_set = load_instances(args.data)
    val_set = load_instances(args.val) if args.val else None
    out.mkdir(parents=True, exist_ok=True)
    result = train(train_set, cfg, val_set, metrics_log=out / "metrics.csv",
                   on_epoch=lambda r: log.info("epoch %d loss %.4f", r.epoch, r.l_cls + r.l_reg + r.l_score))
    result.model.save(out, cfg)
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"epoch {last.epoch}: l_cls {last.l_cls:.4f} l_reg {last.l_reg:.4f} l_score {last.l_score:.4f} "
              f"minADE_6 {last.min_ade:.4f} minFDE_6 {last.min_fde:.4f} Col-II {last.col_ii:.2f}%")
    print(f"model written to {out}")
    return EXIT_OK


def _load_model(args):
    from .train import Model

    _check_inputs(args.model)
    return Model.load(args.model)


def _predict(model, instances, workers):
    return _parallel(lambda part: model.predict(part), instances, workers)


def cmd_predict(args) -> int:
    from .ingest import load_instances
    from .train import write_predictions

    _check_inputs(args.data)
    out = _need_out(args)
    model = _load_model(args)
    preds = _predict(model, load_instances(args.data), args.workers)
    write_predictions(preds, out)
    print(f"wrote {len(preds)} predictions to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .ingest import load_instances
    from .metrics import evaluate
    from .train import read_predictions

    _check_inputs(args.data, args.pred)
    instances = load_instances(args.data)
    if args.pred:
        table = read_predictions(args.pred)
        missing = [i.instance_id for i in instances if i.instance_id not in table]
        if missing:
            raise ContractError(f"predictions lack {len(missing)} instance(s), e.g. {missing[0]}")
        modes = [table[i.instance_id] for i in instances]
    else:
        modes = [p.modes for p in _predict(_load_model(args), instances, args.workers)]
    report = evaluate(instances, modes, top_k=args.top_k, radius=args.radius, all_modes_collision=args.all_modes)
    print(report.summary())
    if args.out:
        report.write_csv(args.out)
    return EXIT_OK


def cmd_explain(args) -> int:
    from .explain import explain_predictions
    from .ingest import load_instances

    _check_inputs(args.data)
    out = _need_out(args)
    model = _load_model(args)
    decs = explain_predictions(model, load_instances(args.data), out)
    print(f"wrote {len(decs)} reports to {out}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "calibrate-dcm": cmd_calibrate,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "explain": cmd_explain,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("GOALCHOICE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ContractError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
