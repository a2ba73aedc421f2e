"""Rebuild any saved model from its checkpoint dictionary."""

from __future__ import annotations

from pathlib import Path

from .baselines import MNL, UniformModel, cheapest, shortest
from .data import FeatureSchema, SchemaError
from .mle import MLEResult
from .net import PCMCNet, load_checkpoint

RANKERS = {"uniform": UniformModel, "cheapest": cheapest, "shortest": shortest}


def model_from_checkpoint(ckpt: dict):
    kind = ckpt.get("kind")
    if kind == "pcmc-net":
        return PCMCNet.from_checkpoint(ckpt)
    if kind == "mnl":
        return MNL.from_checkpoint(ckpt)
    if kind == "pcmc-mle":
        return MLEResult.from_checkpoint(ckpt)
    if kind in RANKERS:
        return RANKERS[kind]()
    raise SchemaError(f"unknown checkpoint kind {kind!r}")


def load_model(path: str | Path):
    return model_from_checkpoint(load_checkpoint(path))


def checkpoint_schema(ckpt: dict) -> FeatureSchema | None:
    """The schema a checkpoint was trained on, or None for schema-free rankers."""
    return FeatureSchema.from_dict(ckpt["schema"]) if "schema" in ckpt else None
