"""Command-line entry point: ``pcmcnet <command> [flags]``.

Every command writes a ``manifest.json`` (or ``<out>.manifest.json`` for
single-file outputs) with the fully resolved settings, the seed, and sha256
digests of its inputs and outputs. Passing a manifest back with ``--config``
reruns the command with the same settings; explicit flags still win.

Exit codes: 0 success, 2 validation or schema error, 3 numeric failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import datagen as dg
from . import metrics
from .baselines import fit_mnl
from .checkpoints import RANKERS, checkpoint_schema, model_from_checkpoint
from .core import SingularSystemError
from .data import (CATEGORICAL, FeatureSchema, SchemaError, item_schema, read_schema, read_sessions,
                   write_schema, write_sessions)
from .gradcheck import run_all
from .mle import aggregate_counts, fit_mle
from .net import ArchitectureConfig, airline_preset, load_checkpoint, save_checkpoint, synthetic_preset
from .train import TrainingError, random_search, train, write_leaderboard, write_training_log

log = logging.getLogger("pcmcnet")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

# flag dest -> ArchitectureConfig field
ARCH_FLAGS = {
    "epochs": "max_epochs", "lr": "learning_rate", "batch": "batch_size", "hidden": "hidden_layers",
    "nodes": "nodes_per_layer", "activation": "activation", "epsilon": "epsilon", "dropout": "dropout",
    "patience": "patience", "min_delta": "min_delta", "encoding": "categorical_encoding",
}

PRESETS = {"synthetic": synthetic_preset, "airline": airline_preset}

DEFAULTS = {
    "datagen": {"kind": None, "n": None, "seed": 0, "out": None, "alpha": 0.75, "items": 4, "max_set_size": None,
                "test_fraction": None, "beta": 0.1, "gamma": 20.0, "singleton_prob": None, "planted_scale": 30.0},
    "train": {"model": "pcmcnet", "data": None, "schema": None, "out": None, "seed": 0, "preset": "synthetic",
              "restarts": 20, "iterations": 500, "smoothing": 0.1, **{k: None for k in ARCH_FLAGS}},
    "eval": {"checkpoint": None, "model": None, "data": None, "schema": None, "out": None, "seed": 0,
             "rankers": False, "context_kl": False, "n_mc": 10000, "threads": 1, "beta": 0.1, "gamma": 20.0},
    "heatmap": {"checkpoint": None, "model": None, "oracle": False, "grid": 64, "out": None, "seed": 0,
                "beta": 0.1, "gamma": 20.0, "threads": 1},
    "gradcheck": {"trials": 100, "seed": 0, "out": None},
    "search": {"data": None, "schema": None, "out": None, "seed": 0, "budget": 25, "preset": "synthetic",
               **{k: None for k in ARCH_FLAGS}},
}

DATAGEN_N = {"rps": 50000, "random-pcmc": 100000, "context": 20000, "airline": 33951}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ helpers

def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(settings: dict) -> str:
    return hashlib.sha256(json.dumps(settings, sort_keys=True).encode()).hexdigest()


def _digests(paths) -> dict:
    return {str(p): sha256_file(p) for p in paths if p is not None and Path(p).is_file()}


def write_manifest(path: Path, command: str, settings: dict, inputs, outputs, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": settings.get("seed"),
        "settings": settings,
        "config_hash": config_hash(settings),
        "inputs": _digests(inputs),
        "outputs": _digests(outputs),
        **(extra or {}),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    settings = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if "settings" in cfg:  # a manifest from an earlier run
            if cfg.get("command") != command:
                raise CliError(f"manifest is for {cfg.get('command')!r}, not {command!r}", EXIT_INVALID)
            cfg = cfg["settings"]
        unknown = set(cfg) - set(settings)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}", EXIT_INVALID)
        settings.update(cfg)
    for key in settings:
        value = getattr(args, key, None)
        if value is not None and value is not False:
            settings[key] = value
    return settings


def _need(settings: dict, *keys):
    missing = [k for k in keys if settings.get(k) is None]
    if missing:
        raise CliError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing),
                       EXIT_INVALID)


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"no such file: {p}", EXIT_IO)
    return p


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {p}: {exc}", EXIT_IO) from exc
    return p


def architecture(settings: dict) -> ArchitectureConfig:
    overrides = {field: settings[flag] for flag, field in ARCH_FLAGS.items() if settings.get(flag) is not None}
    if settings.get("patience") == -1:
        overrides["patience"] = None
    overrides["seed"] = settings["seed"]
    if settings["preset"] not in PRESETS:
        raise CliError(f"unknown preset {settings['preset']!r}", EXIT_INVALID)
    return PRESETS[settings["preset"]](**overrides)


def _load_data(settings: dict) -> tuple[FeatureSchema, list]:
    _need(settings, "data", "schema")
    schema = read_schema(_existing(settings["schema"]))
    return schema, read_sessions(_existing(settings["data"]), schema)


def _item_count(schema: FeatureSchema) -> int:
    fields = schema.alternative_fields
    if schema.individual_fields or len(fields) != 1 or fields[0].kind != CATEGORICAL:
        raise CliError("pcmc-mle needs an index schema: one categorical alternative field, no individual fields",
                       EXIT_INVALID)
    return fields[0].cardinality


# ------------------------------------------------------------------ commands

def cmd_datagen(settings: dict) -> int:
    _need(settings, "kind", "out")
    kind = settings["kind"]
    n = settings["n"] or DATAGEN_N.get(kind)
    seed = settings["seed"]
    out = _out_dir(settings["out"])
    extra = {}
    if kind == "rps":
        sessions = dg.rps_sessions(settings["alpha"], n, seed)
        schema = item_schema(3)
        extra["Q"] = dg.rps_model(settings["alpha"]).tolist()
    elif kind == "random-pcmc":
        Q = dg.random_pcmc(settings["items"], seed)
        truth = dg.PCMCGroundTruth(Q)
        gen = dg.subset_generator(settings["items"], max_size=settings["max_set_size"])
        sessions = dg.sample_sessions(truth, gen, n, seed)
        schema = truth.schema()
        extra["Q"] = Q.tolist()
    elif kind == "context":
        oracle = dg.ContextOracle(settings["beta"], settings["gamma"])
        sessions = dg.sample_sessions(oracle, dg.context_generator, n, seed)
        schema = dg.context_schema()
    elif kind == "airline":
        sessions, truth = dg.airline_synthetic(n_sessions=n, max_set_size=settings["max_set_size"] or 50,
                                               seed=seed, singleton_prob=settings["singleton_prob"],
                                               planted_scale=settings["planted_scale"])
        schema = dg.airline_schema()
        save_checkpoint(out / "truth.json", truth.model.to_checkpoint())
    else:
        raise CliError(f"unknown dataset kind {kind!r}", EXIT_INVALID)

    frac = settings["test_fraction"]
    if frac is None:
        frac = 0.2 if kind == "airline" else 0.0
    if not 0.0 <= frac < 1.0:
        raise CliError("--test-fraction must be in [0, 1)", EXIT_INVALID)
    n_test = math.ceil(frac * len(sessions))
    outputs = [out / "schema.json", out / "train.jsonl"]
    write_schema(outputs[0], schema)
    write_sessions(outputs[1], sessions[:len(sessions) - n_test])
    if n_test:
        outputs.append(out / "test.jsonl")
        write_sessions(outputs[-1], sessions[len(sessions) - n_test:])
    if "Q" in extra:
        outputs.append(out / "truth.json")
        outputs[-1].write_text(json.dumps({"Q": extra.pop("Q")}) + "\n", encoding="utf-8")
    elif kind == "airline":
        outputs.append(out / "truth.json")
    write_manifest(out / "manifest.json", "datagen", {**settings, "n": n, "test_fraction": frac}, [], outputs,
                   {"n_train": len(sessions) - n_test, "n_test": n_test})
    print(f"wrote {len(sessions) - n_test} training and {n_test} test sessions to {out}")
    return EXIT_OK


def cmd_train(settings: dict) -> int:
    _need(settings, "out")
    schema, sessions = _load_data(settings)
    out = _out_dir(settings["out"])
    kind = settings["model"]
    started = time.perf_counter()
    summary: dict = {}
    if kind == "pcmcnet":
        config = architecture(settings)
        result = train(sessions, schema, config)
        ckpt = result.model.to_checkpoint()
        write_training_log(out / "log.csv", result.log)
        summary = {"best_epoch": result.best_epoch, "best_val_nll": result.best_val_nll,
                   "final_train_nll": result.log[-1]["train_nll"] if result.log else None,
                   "floored": result.floored, "resolved_config": config.to_dict()}
    elif kind == "mnl":
        model = fit_mnl(sessions, schema)
        ckpt = model.to_checkpoint()
        write_trace(out / "log.csv", "log_likelihood", model.trace)
        summary = {"iterations": model.iterations, "converged": model.converged,
                   "final_mean_log_likelihood": model.trace[-1]}
    elif kind == "pcmc-mle":
        n_items = _item_count(schema)
        fit = fit_mle(aggregate_counts(sessions, n_items), n_items, settings["smoothing"], settings["restarts"],
                      settings["iterations"], seed=settings["seed"])
        ckpt = fit.to_checkpoint()
        write_trace(out / "log.csv", "log_likelihood", fit.trace)
        summary = {"restart": fit.restart, "objective": fit.objective}
    else:
        raise CliError(f"cannot train model kind {kind!r}", EXIT_INVALID)
    save_checkpoint(out / "checkpoint.json", ckpt)
    summary["seconds"] = time.perf_counter() - started
    write_manifest(out / "manifest.json", "train", settings, [settings["data"], settings["schema"]],
                   [out / "checkpoint.json", out / "log.csv"], {"summary": summary})
    print(f"trained {kind}; checkpoint at {out / 'checkpoint.json'}")
    return EXIT_OK


def write_trace(path: Path, column: str, values) -> None:
    lines = [f"iteration,{column}"] + [f"{k},{v!r}" for k, v in enumerate(values)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_model(settings: dict):
    if settings.get("checkpoint") is not None:
        ckpt = load_checkpoint(_existing(settings["checkpoint"]))
        return model_from_checkpoint(ckpt), checkpoint_schema(ckpt)
    if settings.get("model") in RANKERS:
        return RANKERS[settings["model"]](), None
    raise CliError("give --checkpoint, or --model uniform|cheapest|shortest", EXIT_INVALID)


def _report(model, sessions, settings) -> metrics.EvalReport:
    report = metrics.evaluate(model, sessions, settings["seed"])
    if settings["context_kl"]:
        oracle = dg.ContextOracle(settings["beta"], settings["gamma"])
        report.extra["expected_kl"] = metrics.expected_kl(oracle, model, settings["n_mc"], settings["seed"])
    return report


def cmd_eval(settings: dict) -> int:
    _need(settings, "out")
    schema, sessions = _load_data(settings)
    model, trained_on = _load_model(settings)
    if trained_on is not None and trained_on.to_dict() != schema.to_dict():
        raise CliError("checkpoint schema does not match the data schema", EXIT_INVALID)
    report = _report(model, sessions, settings)
    report.config_hash = config_hash(settings)
    if settings["rankers"]:
        names = {f.name for f in schema.alternative_fields}
        for name, make in RANKERS.items():
            ranker = make()
            if getattr(ranker, "field_name", None) in (None, *names):
                report.extra[name] = _report(ranker, sessions, {**settings, "context_kl": False}).to_dict()
    out = Path(settings["out"])
    _out_dir(out.parent)
    report.write(out)
    write_manifest(out.with_name(out.stem + ".manifest.json"), "eval", settings,
                   [settings["data"], settings["schema"], settings.get("checkpoint")], [out])
    shown = "n/a" if report.nll is None else f"{report.nll:.4f}"
    print(f"{report.model_kind}: NLL {shown}  TOP-1 {report.top1:.4f}  TOP-5 {report.top5:.4f}")
    return EXIT_OK


def cmd_heatmap(settings: dict) -> int:
    _need(settings, "out")
    if settings["oracle"]:
        model = dg.ContextOracle(settings["beta"], settings["gamma"])
    else:
        model, _ = _load_model(settings)
    H = metrics.heatmap(model, settings["grid"])
    constant = metrics.is_constant(H)
    if constant:
        log.warning("constant field detected: the model's preference between a and b ignores c")
    prefix = Path(settings["out"])
    _out_dir(prefix.parent)
    outputs = metrics.write_heatmap(prefix, H)
    write_manifest(prefix.with_name(prefix.name + ".manifest.json"), "heatmap", settings,
                   [settings.get("checkpoint")], outputs,
                   {"range": float(np.ptp(H)), "constant": constant})
    print(f"preference range {np.ptp(H):.4g}; wrote {outputs[0]} and {outputs[1]}")
    return EXIT_OK


def cmd_gradcheck(settings: dict) -> int:
    rows = run_all(settings["trials"], settings["seed"])
    width = max(len(r.name) for r in rows)
    lines = [f"{'check':<{width}}  {'trials':>6}  {'max rel err':>11}  result"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.trials:>6}  {r.max_rel_error:>11.3e}  {'pass' if r.passed else 'FAIL'}")
    print("\n".join(lines))
    if settings["out"]:
        out = Path(settings["out"])
        _out_dir(out.parent)
        out.write_text("name,trials,max_rel_error,tolerance,passed\n" + "".join(
            f"{r.name},{r.trials},{r.max_rel_error!r},{r.tolerance!r},{r.passed}\n" for r in rows), encoding="utf-8")
        write_manifest(out.with_name(out.stem + ".manifest.json"), "gradcheck", settings, [], [out])
    # the command-level contract is a single 1e-4 threshold
    return EXIT_OK if all(r.max_rel_error < 1e-4 for r in rows) else EXIT_NUMERIC


def cmd_search(settings: dict) -> int:
    _need(settings, "out")
    schema, sessions = _load_data(settings)
    out = _out_dir(settings["out"])
    best, board = random_search(sessions, schema, architecture(settings), settings["budget"], settings["seed"])
    write_leaderboard(out / "leaderboard.csv", board)
    write_manifest(out / "manifest.json", "search", settings, [settings["data"], settings["schema"]],
                   [out / "leaderboard.csv"], {"best_config": best.to_dict()})
    print(f"best validation NLL {board[0].val_nll:.4f} over {len(board)} configurations")
    return EXIT_OK


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "eval": cmd_eval, "heatmap": cmd_heatmap,
            "gradcheck": cmd_gradcheck, "search": cmd_search}


# ------------------------------------------------------------------ parser

def _arch_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), help="base architecture (default synthetic)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--hidden", type=int, help="number of hidden layers")
    p.add_argument("--nodes", type=int, help="nodes per hidden layer")
    p.add_argument("--activation", choices=["relu", "sigmoid", "tanh", "leaky_relu"])
    p.add_argument("--epsilon", type=float, help="minimum rate added after the clamp")
    p.add_argument("--dropout", type=float)
    p.add_argument("--patience", type=int, help="early-stopping patience in epochs; -1 disables")
    p.add_argument("--min-delta", type=float)
    p.add_argument("--encoding", choices=["embedding", "onehot"], help="categorical representation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcmcnet", description="Pairwise choice Markov chain models.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON settings file or a manifest from an earlier run")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")

    p = sub.add_parser("datagen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--kind", choices=["rps", "random-pcmc", "context", "airline"])
    p.add_argument("--n", type=int, help="number of sessions")
    p.add_argument("--alpha", type=float, help="rps: favored pairwise probability")
    p.add_argument("--items", type=int, help="random-pcmc: universe size")
    p.add_argument("--max-set-size", type=int)
    p.add_argument("--test-fraction", type=float, help="fraction held out as test.jsonl")
    p.add_argument("--beta", type=float, help="context oracle: utility sensitivity")
    p.add_argument("--gamma", type=float, help="context oracle: dominance rate")
    p.add_argument("--singleton-prob", type=float)
    p.add_argument("--planted-scale", type=float, help="airline: output-weight scale of the planted network")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="sessions JSONL")
    data.add_argument("--schema", help="schema JSON")

    p = sub.add_parser("train", parents=[common, data], help="fit a model")
    p.add_argument("--model", choices=["pcmcnet", "mnl", "pcmc-mle"])
    p.add_argument("--restarts", type=int, help="pcmc-mle: random restarts")
    p.add_argument("--iterations", type=int, help="pcmc-mle: iterations per restart")
    p.add_argument("--smoothing", type=float, help="pcmc-mle: pseudo-count per observed set")
    _arch_flags(p)

    p = sub.add_parser("eval", parents=[common, data], help="evaluate a checkpoint or built-in ranker")
    p.add_argument("--checkpoint")
    p.add_argument("--model", choices=sorted(RANKERS))
    p.add_argument("--rankers", action="store_true", help="also evaluate the built-in rankers")
    p.add_argument("--context-kl", action="store_true", help="add expected KL to the context oracle")
    p.add_argument("--n-mc", type=int, help="Monte Carlo points for --context-kl")
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--threads", type=int, help="evaluation parallelism cap")

    p = sub.add_parser("heatmap", parents=[common], help="preference heatmap over the third alternative")
    p.add_argument("--checkpoint")
    p.add_argument("--model", choices=sorted(RANKERS))
    p.add_argument("--oracle", action="store_true", help="draw the context oracle itself")
    p.add_argument("--grid", type=int, help="grid resolution per axis")
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--threads", type=int)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--trials", type=int)

    p = sub.add_parser("search", parents=[common, data], help="random hyperparameter search")
    p.add_argument("--budget", type=int)
    _arch_flags(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(args.command, args)
        return COMMANDS[args.command](settings)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (SchemaError, ValueError, KeyError, TypeError, IndexError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SingularSystemError, TrainingError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
