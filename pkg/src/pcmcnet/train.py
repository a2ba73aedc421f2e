"""Training loop (Adam, mini-batches of sessions, early stopping) and random search."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .core import SingularSystemError
from .data import FeatureSchema, Session
from .net import ArchitectureConfig, Encoder, PCMCNet

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_nll", "val_nll", "seconds")

# hyperparameter ranges searched over
SEARCH_SPACE = {
    "learning_rate": [10.0 ** -i for i in range(1, 7)],
    "batch_size": [2 ** i for i in range(0, 5)],
    "hidden_layers": [1, 2, 3],
    "nodes_per_layer": [2 ** i for i in range(5, 10)],
    "activation": ["relu", "sigmoid", "tanh", "leaky_relu"],
}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: PCMCNet
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_nll: float = float("nan")
    floored: int = 0

    def write_log(self, path: str | Path) -> None:
        write_training_log(path, self.log)


def write_training_log(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in LOG_COLUMNS})


def split_validation(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle of ``range(n)``; the last ``fraction`` becomes validation."""
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    n_val = int(round(fraction * n))
    if fraction > 0 and n_val == 0 and n > 1:
        n_val = 1
    return np.sort(perm[:n - n_val]), np.sort(perm[n - n_val:])


def _dropout_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, step]))


def encoded_nll(model: PCMCNet, enc, idx: np.ndarray | None = None) -> float:
    idx = np.arange(len(enc)) if idx is None else np.asarray(idx)
    if len(idx) == 0:
        return float("nan")
    total = 0.0
    for c in range(0, len(idx), 512):
        batch = idx[c:c + 512]
        loss, _ = model.batch_loss(ad.Tape(record=False), enc, batch)
        if loss is not None:
            total += float(loss.value) * len(batch)
    return total / len(idx)


def train(sessions: Sequence[Session], schema: FeatureSchema, config: ArchitectureConfig,
          validation: Sequence[Session] | None = None, model: PCMCNet | None = None,
          verbose: bool = False) -> TrainResult:
    """Fit a PCMC-Net by minimizing mean -log pi[chosen] with Adam.

    Without an explicit ``validation`` set, ``config.validation_fraction`` of the
    sessions (after a seeded shuffle) is held out. Early stopping triggers when the
    validation NLL has not improved by more than ``config.min_delta`` on the best
    value so far for ``config.patience`` epochs (``patience=None`` disables it).
    The returned model carries the best-validation weights.
    """
    sessions = list(sessions)
    if not sessions:
        raise TrainingError("empty training set")
    if validation is None:
        tr_idx, va_idx = split_validation(len(sessions), config.validation_fraction, config.seed)
        train_s = [sessions[i] for i in tr_idx]
        val_s = [sessions[i] for i in va_idx]
    else:
        train_s, val_s = sessions, list(validation)

    if model is None:
        model = PCMCNet(schema, config, Encoder.fit(schema, train_s, config.standardize))
    enc_tr = model.encoder.encode(train_s)
    enc_va = model.encoder.encode(val_s) if val_s else None
    trainable = np.flatnonzero(enc_tr.sizes > 1)
    if trainable.size == 0:
        raise TrainingError("no training session has more than one alternative")

    state = ad.AdamState(lr=config.learning_rate)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    result = TrainResult(model)
    best_val = float("inf")
    best_params = {k: v.copy() for k, v in model.params.items()}
    wait = 0
    step = 0
    bs = config.batch_size
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(trainable)
        total, count = 0.0, 0
        for b in range(0, len(order), bs):
            batch = order[b:b + bs]
            tape = ad.Tape()
            try:
                loss, nf = model.batch_loss(tape, enc_tr, batch, train=True,
                                            rng=_dropout_rng(config.seed, step))
            except SingularSystemError as exc:
                log.warning("epoch %d step %d: skipping singular batch (%s)", epoch, step, exc)
                step += 1
                continue
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            result.floored += nf
            grads = tape.backward(loss)
            model.params, state = ad.adam_step(model.params, grads, state)
            total += value * len(batch)
            count += len(batch)
            step += 1
        if count == 0:
            raise TrainingError(f"every batch of epoch {epoch} was singular")
        train_nll = total / count
        val_nll = encoded_nll(model, enc_va) if enc_va is not None and len(enc_va) else train_nll
        result.log.append({"epoch": epoch, "train_nll": train_nll, "val_nll": val_nll,
                           "seconds": time.perf_counter() - t0})
        if verbose:
            log.info("epoch %3d  train %.4f  val %.4f", epoch, train_nll, val_nll)
        improved = val_nll < best_val - config.min_delta
        if val_nll < best_val:
            best_val = val_nll
            best_params = {k: v.copy() for k, v in model.params.items()}
            result.best_epoch = epoch
        wait = 0 if improved else wait + 1
        if config.patience is not None and wait >= config.patience:
            break
    model.params = best_params
    result.best_val_nll = best_val

    if config.refit and validation is None and val_s:
        # retrain from scratch on train + validation for the selected number of epochs
        cfg = dataclasses.replace(config, max_epochs=max(result.best_epoch, 1), patience=None,
                                  refit=False, validation_fraction=0.0)
        refit = train(train_s + val_s, schema, cfg, validation=[], verbose=verbose)
        refit.best_val_nll = best_val
        refit.best_epoch = result.best_epoch
        refit.log = result.log + refit.log
        return refit
    return result


@dataclass
class SearchEntry:
    rank: int
    config: dict
    val_nll: float
    best_epoch: int


def sample_config(rng: np.random.Generator, base: ArchitectureConfig, space=SEARCH_SPACE) -> ArchitectureConfig:
    picks = {name: values[int(rng.integers(len(values)))] for name, values in space.items()}
    return dataclasses.replace(base, **picks)


def random_search(sessions: Sequence[Session], schema: FeatureSchema, base: ArchitectureConfig,
                  budget: int = 25, seed: int = 0, space=SEARCH_SPACE) -> tuple[ArchitectureConfig, list[SearchEntry]]:
    """Seeded random search over ``space``; returns the best config and the leaderboard."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    sessions = list(sessions)
    tr_idx, va_idx = split_validation(len(sessions), base.validation_fraction, base.seed)
    train_s = [sessions[i] for i in tr_idx]
    val_s = [sessions[i] for i in va_idx]
    rng = np.random.default_rng([seed, 2])
    entries = []
    for _ in range(budget):
        cfg = sample_config(rng, base, space)
        res = train(train_s, schema, cfg, validation=val_s)
        entries.append((res.best_val_nll, cfg, res.best_epoch))
    # stable sort keeps sampling order on ties
    order = sorted(range(budget), key=lambda k: (not np.isfinite(entries[k][0]), entries[k][0]))
    board = [SearchEntry(r + 1, entries[k][1].to_dict(), entries[k][0], entries[k][2]) for r, k in enumerate(order)]
    return entries[order[0]][1], board


def write_leaderboard(path: str | Path, board: list[SearchEntry]) -> None:
    keys = list(SEARCH_SPACE)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", *keys, "val_nll", "best_epoch"])
        for e in board:
            w.writerow([e.rank, *[e.config[k] for k in keys], repr(e.val_nll), e.best_epoch])
