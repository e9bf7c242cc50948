"""Command line entry point.

Exit codes: 0 ok, 1 data error, 2 config error, 3 training diverged,
4 gradient check failed.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .datamodel import DataError, load_manifest, make_cross_validation_folds, make_rolling_folds, save_manifest
from .evalkit import run_folds
from .fusion import Ablation, M2P2Model, ModelConfig, collate, persuasion_loss, total_loss
from .heterogeneity import ModalityWeights
from .synthgen import SynthConfig, generate
from .tensorcore import DiffGraph, grad_check
from .trainer import DivergenceError, TrainConfig, grid_search, sensitivity_sweep

EXIT_OK, EXIT_DATA, EXIT_CONFIG, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3, 4

RUN_KEYS = {"data", "scheme", "n_folds", "out"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class ConfigError(ValueError):
    pass


def _read_json(path) -> dict:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return obj


def threads() -> int:
    raw = os.environ.get("ADAFUSE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ADAFUSE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("ADAFUSE_THREADS must be >= 1")
    return n


def load_run_config(path, overrides: dict):
    """Split a run config into (TrainConfig, run settings); flags win over the file."""
    obj = _read_json(path) if path else {}
    unknown = set(obj) - RUN_KEYS - TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    obj.update({k: v for k, v in overrides.items() if v is not None})
    run = {k: obj.pop(k) for k in list(obj) if k in RUN_KEYS}
    try:
        cfg = TrainConfig(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if run.get("scheme", "auto") not in ("auto", "rolling", "cv"):
        raise ConfigError("scheme must be 'rolling', 'cv' or 'auto'")
    return cfg, run


def make_plan(manifest, run: dict):
    scheme = run.get("scheme", "auto")
    if scheme == "auto":
        scheme = "rolling" if manifest.task == "IPP" else "cv"
    k = len(manifest.episodes)
    if scheme == "rolling":
        return make_rolling_folds(manifest, int(run.get("n_folds") or max(1, min(10, k - 3))))
    return make_cross_validation_folds(manifest, int(run.get("n_folds") or min(10, k)))


def _load_data(path):
    if not path:
        raise DataError("no dataset given (--data or \"data\" in the config)")
    if not Path(path).exists():
        raise DataError(f"data file not found: {path}")
    return load_manifest(path)


def _write_table(path, rows):
    if not rows:
        return
    header = list(rows[0])
    out = sys.stdout if path in (None, "-") else open(path, "w", encoding="utf-8", newline="")
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in header])
    finally:
        if out is not sys.stdout:
            out.close()


# -- commands --------------------------------------------------------------------

def cmd_generate(args):
    obj = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        obj["seed"] = args.seed
    try:
        cfg = SynthConfig.from_dict(obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    manifest = generate(cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, args.out)
    print(f"wrote {len(manifest.clips)} clips in {len(manifest.episodes)} episodes to {args.out}")
    return EXIT_OK


def _train_overrides(args):
    return {"data": args.data, "out": getattr(args, "out", None), "seed": args.seed,
            "epochs": args.epochs, "ablation": args.ablation, "scheme": args.scheme,
            "n_folds": args.n_folds}


def cmd_train(args):
    cfg, run = load_run_config(args.config, _train_overrides(args))
    manifest = _load_data(run.get("data"))
    plan = make_plan(manifest, run)
    out = run.get("out")
    if not out:
        raise ConfigError("no output directory (--out or \"out\" in the config)")
    report = run_folds(manifest, plan, cfg, out_dir=out, workers=min(threads(), len(plan)))
    for f in report.folds:
        print(f"fold {f.fold_id} test={','.join(f.test_episodes)} metric={f.metric:.6f} "
              f"w=({', '.join(f'{w:.3f}' for w in f.weights)})")
    print(f"mean {'mse' if report.task == 'IPP' else 'accuracy'}: {report.mean:.6f}")
    return EXIT_OK


def cmd_gradcheck(args):
    cfg, _ = load_run_config(args.config, {"seed": args.seed, "ablation": args.ablation})
    synth = SynthConfig(n_episodes=1, clips_per_episode=4, seed=cfg.seed, task=cfg.task)
    manifest = generate(synth)
    model = M2P2Model(ModelConfig(manifest.dims, cfg.task, Ablation.parse(cfg.ablation),
                                  cfg.dropout, cfg.positional), np.random.default_rng(cfg.seed))
    batch = collate(list(manifest.clips), cfg.task)
    weights = ModalityWeights()
    ablation = model.ablation

    def fn(inputs, ctx):
        out = model(batch, weights, ctx)
        l_pers = persuasion_loss(out.pred, batch.y, cfg.task)
        l_align = out.alignment.loss if out.alignment is not None else None
        return {"loss": total_loss(l_pers, l_align, cfg.gamma,
                                   ablation.no_alignment or l_align is None)}

    hook = None
    if args.corrupt_gradient:
        def hook(grads):
            return {k: g * 1.1 for k, g in grads.items()}

    # always eval mode: dropout off, batch-norm on running statistics
    graph = DiffGraph(fn, model.parameters(), mode="eval")
    report = grad_check(graph, {}, "loss", eps=args.eps, tol=args.tol, grad_hook=hook)
    print(f"max_rel_err={report.max_rel_err:.3e} tol={report.tol:g} checked={report.n_checked} "
          f"refined={report.n_refined} worst={report.worst_param}{list(report.worst_index or ())}")
    if not report.passed:
        print(f"gradient check FAILED at {report.worst_param}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_sweep(args):
    cfg, run = load_run_config(args.config, {"data": args.data, "seed": args.seed,
                                             "epochs": args.epochs, "scheme": args.scheme,
                                             "n_folds": args.n_folds})
    grid = _read_json(args.grid)
    if not grid or any(not isinstance(v, list) for v in grid.values()):
        raise ConfigError("grid must map parameter names to non-empty lists")
    manifest = _load_data(run.get("data"))
    try:
        result = grid_search(cfg, grid, manifest, make_plan(manifest, run))
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise ConfigError(str(exc)) from None
    _write_table(args.out, result.table)
    best = {k: getattr(result.best, k) for k in ("lr", "gamma", "alpha", "beta")}
    print(f"best: {json.dumps(best)}", file=sys.stderr)
    return EXIT_OK


def cmd_sensitivity(args):
    cfg, run = load_run_config(args.config, {"data": args.data, "seed": args.seed,
                                             "epochs": args.epochs, "scheme": args.scheme,
                                             "n_folds": args.n_folds})
    manifest = _load_data(run.get("data"))
    params = tuple(args.params.split(","))
    bad = set(params) - {"alpha", "beta", "gamma"}
    if bad or not params:
        raise ConfigError(f"sensitivity parameters must be among alpha, beta, gamma; got {sorted(bad)}")
    rows = sensitivity_sweep(cfg, manifest, make_plan(manifest, run), params, args.delta)
    _write_table(args.out, [asdict(r) for r in rows])
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adafuse", description="Adaptive multimodal fusion: "
                                "synthetic data, training, evaluation and checks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset (JSONL manifest)")
    g.add_argument("--config", help="JSON file with generator settings")
    g.add_argument("--out", required=True, help="output .jsonl path")
    g.add_argument("--seed", type=int, help="override the generator seed")
    g.set_defaults(func=cmd_generate)

    def fold_flags(sp):
        sp.add_argument("--data", help="dataset manifest (.jsonl); overrides \"data\"")
        sp.add_argument("--config", help="JSON run config (training keys plus data, scheme, n_folds, out)")
        sp.add_argument("--seed", type=int, help="root seed")
        sp.add_argument("--epochs", type=int, help="master epochs N")
        sp.add_argument("--scheme", choices=("auto", "rolling", "cv"),
                        help="fold scheme; auto = rolling for IPP, cv for DOP")
        sp.add_argument("--n-folds", dest="n_folds", type=int, help="number of folds")

    t = sub.add_parser("train", help="train and evaluate every fold, write reports and checkpoints")
    fold_flags(t)
    t.add_argument("--out", help="run directory")
    t.add_argument("--ablation", help="full | no_alignment | no_da_loss | equal_weights | unimodal:A|V|L")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full model (eval mode)")
    c.add_argument("--config", help="JSON run config")
    c.add_argument("--seed", type=int, help="seed for the random batch and weights")
    c.add_argument("--ablation", help="model variant to check")
    c.add_argument("--eps", type=float, default=1e-3, help="finite-difference step (default 1e-3)")
    c.add_argument("--tol", type=float, default=1e-4, help="relative error tolerance (default 1e-4)")
    c.add_argument("--corrupt-gradient", action="store_true",
                   help="debug: scale analytic gradients by 1.1 before comparing")
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sweep", help="grid search over lr, gamma, alpha, beta")
    fold_flags(s)
    s.add_argument("--grid", required=True, help="JSON object: parameter -> list of values")
    s.add_argument("--out", help="CSV output (default stdout)")
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("sensitivity", help="+-delta perturbation of alpha, beta, gamma")
    fold_flags(e)
    e.add_argument("--params", default="alpha,beta,gamma", help="comma separated (default all three)")
    e.add_argument("--delta", type=float, default=0.05, help="relative perturbation (default 0.05)")
    e.add_argument("--out", help="CSV output (default stdout)")
    e.set_defaults(func=cmd_sensitivity)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
