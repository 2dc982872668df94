"""``moesteer`` command line: fixture -> collect -> train-surrogate -> optimize -> apply/sweep/analyze.

Every subcommand takes ``--config <json>`` whose keys are that subcommand's
option names (dashes or underscores); explicit flags override config values.
Each artifact is written atomically and accompanied by ``<artifact>.manifest.json``.

Exit codes: 0 ok, 1 other error, 2 missing input or bad arguments,
3 malformed input file, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    ALPHA_GRID,
    LAMBDA_GRID,
    TAU_GRID,
    behavior_success,
    delta_csv,
    frequency_delta,
    run_sweep,
    selection_frequency,
    utility_eval,
)
from .container import atomic_write_text
from .errors import FormatError, InputError, MoeSteerError
from .moe import ToyMoEModel, behavior_labeler, circuit_from_model, utility_prompts
from .pipeline import BehaviorData, FixtureSettings, make_fixture, steering_task
from .steering import (
    SteeringMask,
    build_injection_payload,
    compute_layer_sigma,
    optimize_mask,
    prune_mask,
)
from .surrogate import SurrogateConfig, SurrogateParams, train_surrogate
from .traces import collect_traces, load_traces, save_traces

log = logging.getLogger("moesteer")

EXIT_OK, EXIT_ERROR, EXIT_INPUT, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3, 4
PROMPTS_VERSION = 1


class MissingInput(MoeSteerError):
    pass


# -- helpers ------------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _input(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise MissingInput(f"input file not found: {p}")
    return p


def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _json_default(obj):
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _dump(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True, default=_json_default) + "\n"


def write_manifest(out: Path, args: argparse.Namespace, inputs: dict, extra: dict | None = None) -> None:
    """Provenance next to ``out``; only ``created`` varies between identical reruns."""
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "verbose")}
    blob = _dump(config)
    doc = {
        "artifact": out.name,
        "command": args.command,
        "config": config,
        "config_sha256": hashlib.sha256(blob.encode()).hexdigest(),
        "seed": args.seed,
        "inputs": {name: {"path": str(p), "sha256": _sha256(Path(p))} for name, p in inputs.items()},
        "output_sha256": _sha256(out),
        "versions": {"moesteer": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    if extra:
        doc["results"] = extra
    atomic_write_text(out.with_name(out.name + ".manifest.json"), _dump(doc))


def save_prompts(path: Path, prompts, seed: int) -> None:
    doc = {"version": PROMPTS_VERSION, "seed": seed, "prompts": [[int(t) for t in p] for p in prompts]}
    atomic_write_text(path, json.dumps(doc) + "\n")


def load_prompts(path) -> list[np.ndarray]:
    try:
        doc = json.loads(_input(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"prompt file is not valid JSON: {exc}", offset=exc.pos) from None
    except UnicodeDecodeError as exc:
        raise FormatError("prompt file is not UTF-8 text", offset=exc.start) from None
    if not isinstance(doc, dict) or doc.get("version") != PROMPTS_VERSION or "prompts" not in doc:
        raise FormatError("prompt file lacks version/prompts")
    try:
        return [np.asarray(p, dtype=np.int64) for p in doc["prompts"]]
    except (TypeError, ValueError) as exc:
        raise FormatError(f"malformed prompts: {exc}") from None


def _behavior(model: ToyMoEModel, prompts) -> BehaviorData:
    circuit = circuit_from_model(model)
    return BehaviorData(prompts, collect_traces(model, prompts, behavior_labeler(circuit)), circuit)


def _load_model(path) -> ToyMoEModel:
    return ToyMoEModel.load(_input(path))


# -- subcommands -----------------------------------------------------------------------


def cmd_fixture(args) -> dict:
    settings = FixtureSettings(
        num_layers=args.layers, experts_per_layer=args.experts, top_k=args.top_k,
        margin=args.margin, noise=args.noise, utility_coupling=args.utility_coupling, lean=args.lean,
    )
    model = make_fixture(settings, args.seed)
    out = Path(args.out)
    model.save(out)
    write_manifest(out, args, {})
    return {"model": str(out)}


def cmd_collect(args) -> dict:
    model = _load_model(args.model)
    from .pipeline import behavior_data

    data = behavior_data(model, args.n_per_flag, args.seed)
    out = Path(args.out)
    save_traces(data.dataset, out, creator=f"moesteer {__version__}")
    prompts_path = Path(args.prompts_out) if args.prompts_out else out.with_name(out.name + ".prompts.json")
    save_prompts(prompts_path, data.prompts, args.seed)
    counts = {str(k): v for k, v in data.dataset.class_counts.items()}
    results = {"traces": len(data.dataset), "skipped": data.dataset.skipped, "class_counts": counts}
    write_manifest(out, args, {"model": args.model}, results)
    write_manifest(prompts_path, args, {"model": args.model})
    return results


def cmd_train_surrogate(args) -> dict:
    dataset = load_traces(_input(args.traces))
    config = SurrogateConfig(embed_dim=args.embed_dim, hidden_dim=args.hidden_dim, epochs=args.epochs,
                             lr=args.lr, batch_size=args.batch_size, seed=args.seed)
    params = train_surrogate(dataset, config)
    out = Path(args.out)
    params.save(out)
    results = {"val_accuracy": params.history.val_accuracy[-1], "train_loss": params.history.train_loss[-1]}
    write_manifest(out, args, {"traces": args.traces}, results)
    return results


def cmd_optimize(args) -> dict:
    surrogate = SurrogateParams.load(_input(args.surrogate))
    dataset = load_traces(_input(args.traces))
    stats = compute_layer_sigma(dataset, dataset_id=Path(args.traces).name)
    flip = dataset.with_label(1 - args.target)
    flip = flip.subset(range(min(args.flip_cap, len(flip))))
    S = optimize_mask(surrogate, flip, args.target, lam=args.lam, steps=args.steps, lr=args.lr,
                      seed=args.seed, stats=stats)
    mask = prune_mask(S, args.tau, args.lam, stats)
    mask.alpha_recommended = args.alpha
    out = Path(args.out)
    mask.save(out)
    results = {"final_loss": S.final_loss, "nnz": mask.nnz}
    write_manifest(out, args, {"surrogate": args.surrogate, "traces": args.traces}, results)
    return results


def _alpha(args, mask: SteeringMask) -> float:
    if args.alpha is not None:
        return args.alpha
    return mask.alpha_recommended if mask.alpha_recommended is not None else 1.0


def cmd_apply(args) -> dict:
    model = _load_model(args.model)
    mask = SteeringMask.load(_input(args.mask))
    data = _behavior(model, load_prompts(args.prompts))
    task = steering_task(model, data, target_label=args.target, n_utility=args.n_utility, seed=args.seed)
    alpha = _alpha(args, mask)
    payload = build_injection_payload(mask, alpha)
    base = behavior_success(model, task.flip_prompts, task.target_token)
    steered = behavior_success(model, task.flip_prompts, task.target_token, payload)
    util = utility_eval(model, task.utility_task, payload)
    report = {
        "alpha": alpha,
        "flip_set_size": len(task.flip_prompts),
        "baseline_success": base.success,
        "steered_success": steered.success,
        "baseline_degeneracy": base.mean_degeneracy,
        "steered_degeneracy": steered.mean_degeneracy,
        "degenerate": steered.degenerate,
        "utility_before": util.before,
        "utility_after": util.after,
        "utility_decline": util.decline,
        "nnz": mask.nnz,
    }
    out = Path(args.out)
    atomic_write_text(out, _dump(report))
    write_manifest(out, args, {"model": args.model, "mask": args.mask, "prompts": args.prompts})
    return report


def cmd_sweep(args) -> dict:
    model = _load_model(args.model)
    surrogate = SurrogateParams.load(_input(args.surrogate))
    data = _behavior(model, load_prompts(args.prompts))
    task = steering_task(model, data, target_label=args.target, flip_cap=args.flip_cap,
                         n_utility=args.n_utility, seed=args.seed)
    result = run_sweep(
        task, surrogate, lambdas=_floats(args.lambdas), alphas=_floats(args.alphas),
        taus=_floats(args.taus), tau_fixed=args.tau_fixed, steps=args.steps, seed=args.seed,
        probe_factor=args.probe_factor or None, jobs=args.jobs,
    )
    out = Path(args.out)
    atomic_write_text(out, result.to_csv())
    summary = {"baseline": result.baseline, "best_lambda": result.best_lambda,
               "best_alpha": result.best_alpha,
               "failed_cells": sum(c.failed for c in result.cells)}
    write_manifest(out, args, {"model": args.model, "surrogate": args.surrogate, "prompts": args.prompts},
                   summary)
    return summary


def cmd_analyze(args) -> dict:
    model = _load_model(args.model)
    mask = SteeringMask.load(_input(args.mask))
    prompts = load_prompts(args.prompts)
    alpha = _alpha(args, mask)
    payload = build_injection_payload(mask, alpha)
    before = selection_frequency(model, prompts)
    after = selection_frequency(model, prompts, payload)
    delta = frequency_delta(before, after)
    out = Path(args.out)
    atomic_write_text(out, delta_csv(delta))
    circuit = circuit_from_model(model)
    task = utility_prompts(circuit, args.n_utility, np.random.default_rng([args.seed, 2]))
    util = utility_eval(model, task, payload)
    report_path = Path(args.report) if args.report else out.with_name(out.name + ".utility.json")
    report = {"alpha": alpha, "utility_before": util.before, "utility_after": util.after,
              "utility_decline": util.decline, "tokens": before.token_count,
              "top_k": before.top_k}
    atomic_write_text(report_path, _dump(report))
    inputs = {"model": args.model, "mask": args.mask, "prompts": args.prompts}
    write_manifest(out, args, inputs)
    write_manifest(report_path, args, inputs)
    return report


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moesteer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"moesteer {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file of option values")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        return p

    f = FixtureSettings()
    p = command("fixture", cmd_fixture, "build a planted-circuit model checkpoint")
    p.add_argument("--out")
    p.add_argument("--layers", type=int, default=f.num_layers)
    p.add_argument("--experts", type=int, default=f.experts_per_layer)
    p.add_argument("--top-k", type=int, default=f.top_k)
    p.add_argument("--margin", type=float, default=f.margin)
    p.add_argument("--noise", type=float, default=f.noise)
    p.add_argument("--utility-coupling", type=float, default=f.utility_coupling)
    p.add_argument("--lean", type=float, default=f.lean)

    p = command("collect", cmd_collect, "collect labeled routing traces from a planted model")
    p.add_argument("--model")
    p.add_argument("--out")
    p.add_argument("--prompts-out")
    p.add_argument("--n-per-flag", type=int, default=250)

    s = SurrogateConfig()
    p = command("train-surrogate", cmd_train_surrogate, "train the behavior surrogate on traces")
    p.add_argument("--traces")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, default=s.epochs)
    p.add_argument("--lr", type=float, default=s.lr)
    p.add_argument("--batch-size", type=int, default=s.batch_size)
    p.add_argument("--embed-dim", type=int, default=s.embed_dim)
    p.add_argument("--hidden-dim", type=int, default=s.hidden_dim)

    p = command("optimize", cmd_optimize, "optimize and prune a steering mask")
    p.add_argument("--surrogate")
    p.add_argument("--traces")
    p.add_argument("--out")
    p.add_argument("--target", type=int, default=1, choices=(0, 1))
    p.add_argument("--lam", type=float, default=1e-4)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=None, help="recommended amplitude stored in the mask")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--flip-cap", type=int, default=128)

    p = command("apply", cmd_apply, "score a mask on the flip set and the utility task")
    p.add_argument("--model")
    p.add_argument("--mask")
    p.add_argument("--prompts")
    p.add_argument("--out")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--target", type=int, default=1, choices=(0, 1))
    p.add_argument("--n-utility", type=int, default=200)

    p = command("sweep", cmd_sweep, "lambda x alpha grid, then a tau sweep")
    p.add_argument("--model")
    p.add_argument("--surrogate")
    p.add_argument("--prompts")
    p.add_argument("--out")
    p.add_argument("--target", type=int, default=1, choices=(0, 1))
    p.add_argument("--lambdas", default=",".join(map(str, LAMBDA_GRID)))
    p.add_argument("--alphas", default=",".join(map(str, ALPHA_GRID)))
    p.add_argument("--taus", default=",".join(map(str, TAU_GRID)))
    p.add_argument("--tau-fixed", type=float, default=0.1)
    p.add_argument("--probe-factor", type=float, default=5.0)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--flip-cap", type=int, default=128)
    p.add_argument("--n-utility", type=int, default=200)

    p = command("analyze", cmd_analyze, "selection-frequency delta CSV and utility report")
    p.add_argument("--model")
    p.add_argument("--mask")
    p.add_argument("--prompts")
    p.add_argument("--out")
    p.add_argument("--report")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--n-utility", type=int, default=200)
    return parser


REQUIRED = {
    "fixture": ("out",),
    "collect": ("model", "out"),
    "train-surrogate": ("traces", "out"),
    "optimize": ("surrogate", "traces", "out"),
    "apply": ("model", "mask", "prompts", "out"),
    "sweep": ("model", "surrogate", "prompts", "out"),
    "analyze": ("model", "mask", "prompts", "out"),
}


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(_input(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"config is not valid JSON: {exc}", offset=exc.pos) from None
        except UnicodeDecodeError as exc:
            raise FormatError("config is not UTF-8 text", offset=exc.start) from None
        if not isinstance(cfg, dict):
            raise FormatError("config must be a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        sub = parser._subparsers._group_actions[0].choices[args.command]
        allowed = {a.dest for a in sub._actions} - {"help", "config", "func"}
        unknown = sorted(set(cfg) - allowed)
        if unknown:
            raise InputError(f"unknown config keys for {args.command}: {unknown}")
        # flags given on the command line win over config values
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k) is None]
    if missing:
        raise InputError(f"{args.command}: missing required option(s): "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    except (MissingInput, InputError) as exc:
        print(f"moesteer: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FormatError as exc:
        print(f"moesteer: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except MissingInput as exc:
        print(f"moesteer: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FormatError as exc:
        print(f"moesteer: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except FloatingPointError as exc:
        print(f"moesteer: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MoeSteerError as exc:
        print(f"moesteer: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps(result, sort_keys=True, default=_json_default))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
