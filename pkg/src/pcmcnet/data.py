"""Feature schemas, choice sessions and their on-disk formats.

A dataset is a list of :class:`Session` objects. On disk it is JSON lines,
one session per line::

    {"individual": {...}, "alternatives": [{...}, ...], "choice": 0}

and a companion schema JSON file describes every field.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

NUMERIC = "numeric"
CATEGORICAL = "categorical"

DEFAULT_MAX_SET_SIZE = 50


class SchemaError(ValueError):
    """Raised when a schema is malformed or a session does not conform to it."""


@dataclass(frozen=True)
class Field:
    name: str
    kind: str
    cardinality: int | None = None
    low: float | None = None
    high: float | None = None
    levels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise SchemaError(f"field {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            if self.cardinality is None or self.cardinality < 1:
                raise SchemaError(f"field {self.name!r}: categorical cardinality must be >= 1")
            if self.levels is not None and len(self.levels) != self.cardinality:
                raise SchemaError(f"field {self.name!r}: {len(self.levels)} levels for cardinality {self.cardinality}")
        if self.low is not None and self.high is not None and self.low > self.high:
            raise SchemaError(f"field {self.name!r}: empty range [{self.low}, {self.high}]")

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind}
        if self.kind == CATEGORICAL:
            out["cardinality"] = self.cardinality
            if self.levels is not None:
                out["levels"] = list(self.levels)
        else:
            if self.low is not None:
                out["low"] = self.low
            if self.high is not None:
                out["high"] = self.high
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Field":
        levels = d.get("levels")
        return cls(
            name=d["name"],
            kind=d["kind"],
            cardinality=d.get("cardinality"),
            low=d.get("low"),
            high=d.get("high"),
            levels=tuple(levels) if levels is not None else None,
        )


def numeric(name: str, low: float | None = None, high: float | None = None) -> Field:
    return Field(name, NUMERIC, low=low, high=high)


def categorical(name: str, cardinality: int, levels: Iterable[str] | None = None) -> Field:
    return Field(name, CATEGORICAL, cardinality=cardinality,
                 levels=tuple(levels) if levels is not None else None)


@dataclass(frozen=True)
class FeatureSchema:
    """Declares the individual's fields and each alternative's fields."""

    individual_fields: tuple[Field, ...] = ()
    alternative_fields: tuple[Field, ...] = ()

    def __post_init__(self):
        for label, fields in (("individual", self.individual_fields),
                              ("alternative", self.alternative_fields)):
            names = [f.name for f in fields]
            if len(set(names)) != len(names):
                raise SchemaError(f"duplicate {label} field names: {names}")

    def to_dict(self) -> dict:
        return {
            "individual": [f.to_dict() for f in self.individual_fields],
            "alternative": [f.to_dict() for f in self.alternative_fields],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(
            tuple(Field.from_dict(f) for f in d.get("individual", [])),
            tuple(Field.from_dict(f) for f in d.get("alternative", [])),
        )

    def alternative_field(self, name: str) -> Field:
        for f in self.alternative_fields:
            if f.name == name:
                return f
        raise SchemaError(f"no alternative field named {name!r}")

    def validate(self, session: "Session", max_set_size: int | None = None) -> None:
        _check_record(session.individual, self.individual_fields, "individual")
        for k, alt in enumerate(session.alternatives):
            _check_record(alt, self.alternative_fields, f"alternative {k}")
        if max_set_size is not None and len(session.alternatives) > max_set_size:
            raise SchemaError(f"choice set of size {len(session.alternatives)} exceeds {max_set_size}")


def _check_record(record: dict, fields: tuple[Field, ...], where: str) -> None:
    for f in fields:
        if f.name not in record:
            raise SchemaError(f"{where}: missing field {f.name!r}")
        v = record[f.name]
        if f.kind == NUMERIC:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise SchemaError(f"{where}: field {f.name!r} must be a finite number, got {v!r}")
        elif not isinstance(v, str):
            raise SchemaError(f"{where}: field {f.name!r} must be a string, got {v!r}")


@dataclass
class Session:
    """One observed choice: who chose, among what, and which one."""

    individual: dict
    alternatives: list[dict]
    choice: int
    extra: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.alternatives:
            raise SchemaError("a session needs at least one alternative")
        if not 0 <= self.choice < len(self.alternatives):
            raise SchemaError(f"choice {self.choice} out of range for {len(self.alternatives)} alternatives")

    @property
    def size(self) -> int:
        return len(self.alternatives)

    def to_dict(self) -> dict:
        return {"individual": self.individual, "alternatives": self.alternatives, "choice": self.choice}

    @classmethod
    def from_dict(cls, d: dict) -> "Session":
        return cls(dict(d.get("individual", {})), [dict(a) for a in d["alternatives"]], int(d["choice"]))


def dumps_session(session: Session) -> str:
    # sorted keys and repr-exact floats keep output byte-reproducible
    return json.dumps(session.to_dict(), sort_keys=True, separators=(",", ":"))


def write_sessions(path: str | Path, sessions: Iterable[Session]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sessions:
            fh.write(dumps_session(s))
            fh.write("\n")


def read_sessions(path: str | Path, schema: FeatureSchema | None = None) -> list[Session]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                s = Session.from_dict(json.loads(line))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise SchemaError(f"{path}:{lineno}: malformed session ({exc})") from exc
            if schema is not None:
                schema.validate(s)
            out.append(s)
    return out


def write_schema(path: str | Path, schema: FeatureSchema) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_schema(path: str | Path) -> FeatureSchema:
    return FeatureSchema.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def item_schema(n_items: int) -> FeatureSchema:
    """Schema for index-based universes: each alternative is just an item label."""
    return FeatureSchema((), (categorical("item", n_items, [str(i) for i in range(n_items)]),))


def item_session(items: Iterable[int], choice: int) -> Session:
    return Session({}, [{"item": str(i)} for i in items], choice)


def session_items(session: Session) -> tuple[int, ...]:
    return tuple(int(a["item"]) for a in session.alternatives)
