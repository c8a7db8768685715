"""Nested-design measurement data: ingestion, validation and effects coding.

A campaign is a list of observations indexed by day, position (inside a
day), image (inside a position) and replicate (inside an image), each
carrying the levels of the fixed factors under which it was recorded.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DegenerateFactorError,
    DesignError,
    NestingError,
    ParseError,
    SchemaError,
)

RANDOM_LEVELS = ("day", "position", "image")
INDEX_COLUMNS = ("day", "position", "image", "replicate")


@dataclass(frozen=True)
class Observation:
    value: float
    day: str
    position: str
    image: str
    replicate: str = "1"
    factors: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        value = float(self.value)
        if not math.isfinite(value):
            raise DesignError(f"non-finite observation value {self.value!r}")
        object.__setattr__(self, "value", value)
        for name in INDEX_COLUMNS:
            label = str(getattr(self, name))
            if not label:
                raise DesignError(f"empty {name} label")
            object.__setattr__(self, name, label)
        factors = {str(k): str(v) for k, v in dict(self.factors).items()}
        if any(not v for v in factors.values()):
            raise DesignError("empty factor level label")
        object.__setattr__(self, "factors", factors)


@dataclass(frozen=True, eq=False)
class NestedDataset:
    """Observations of one sample under a nested day/position/image design.

    With ``local_labels`` (the default) a position label is only meaningful
    inside its day and an image label inside its position, so position "1"
    of day "1" and position "1" of day "2" are different groups. With
    ``local_labels=False`` labels are global identifiers and a label that
    shows up under two parents is a nesting violation.
    """

    sample_id: str
    observations: tuple[Observation, ...]
    local_labels: bool = True

    def __post_init__(self):
        obs = tuple(self.observations)
        object.__setattr__(self, "observations", obs)
        if obs:
            names = set(obs[0].factors)
            for row, o in enumerate(obs):
                if set(o.factors) != names:
                    raise DesignError(
                        f"observation {row} has factors {sorted(o.factors)}, "
                        f"expected {sorted(names)}"
                    )

    def __eq__(self, other):
        if not isinstance(other, NestedDataset):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.local_labels == other.local_labels
            and self.observations == other.observations
        )

    def __len__(self):
        return len(self.observations)

    @cached_property
    def factor_names(self) -> tuple[str, ...]:
        if not self.observations:
            return ()
        return tuple(self.observations[0].factors)

    @cached_property
    def factor_catalog(self) -> dict[str, tuple[str, ...]]:
        """Factor name -> sorted tuple of observed levels."""
        return {
            name: tuple(sorted({o.factors[name] for o in self.observations}))
            for name in self.factor_names
        }

    @cached_property
    def values(self) -> np.ndarray:
        v = np.array([o.value for o in self.observations], dtype=float)
        v.setflags(write=False)
        return v

    def group_keys(self, level: str) -> list:
        if level not in RANDOM_LEVELS:
            raise ValueError(f"unknown random level {level!r}")
        if not self.local_labels:
            return [getattr(o, level) for o in self.observations]
        depth = RANDOM_LEVELS.index(level) + 1
        return [tuple(getattr(o, lv) for lv in RANDOM_LEVELS[:depth]) for o in self.observations]

    def group_index(self, level: str) -> np.ndarray:
        """Integer group id per observation, numbered by first appearance."""
        ids: dict = {}
        idx = np.array([ids.setdefault(k, len(ids)) for k in self.group_keys(level)], dtype=np.intp)
        return idx

    def replace_values(self, values: Sequence[float]) -> "NestedDataset":
        if len(values) != len(self.observations):
            raise ValueError("length mismatch")
        obs = tuple(
            Observation(float(v), o.day, o.position, o.image, o.replicate, o.factors)
            for v, o in zip(values, self.observations)
        )
        return NestedDataset(self.sample_id, obs, self.local_labels)

    def subset(self, mask: Iterable[bool]) -> "NestedDataset":
        obs = tuple(o for o, keep in zip(self.observations, mask) if keep)
        return NestedDataset(self.sample_id, obs, self.local_labels)


@dataclass(frozen=True)
class DesignSummary:
    I: int
    J: tuple[int, ...]
    K: tuple[int, ...]
    n_ijk: tuple[int, ...]
    balanced: bool
    factor_levels: dict[str, int]

    @property
    def n(self) -> int:
        return int(sum(self.n_ijk))

    def dims(self) -> tuple[int, int, int, int]:
        """(I, J, K, n_ijk) of a balanced design."""
        from .errors import UnbalancedDesignError

        if not self.balanced:
            raise UnbalancedDesignError("design is unbalanced; no single (I, J, K, n_ijk)")
        return self.I, self.J[0], self.K[0], self.n_ijk[0]


def validate_design(d: NestedDataset) -> DesignSummary:
    if not d.observations:
        raise DesignError("empty dataset")
    if not d.local_labels:
        _check_global_nesting(d)

    days: dict = {}
    for o, (dk, pk, ik) in zip(
        d.observations, zip(*(d.group_keys(lv) for lv in RANDOM_LEVELS))
    ):
        positions = days.setdefault(dk, {})
        images = positions.setdefault(pk, {})
        images[ik] = images.get(ik, 0) + 1

    J = tuple(len(p) for p in days.values())
    K = tuple(len(imgs) for p in days.values() for imgs in p.values())
    n_ijk = tuple(c for p in days.values() for imgs in p.values() for c in imgs.values())
    balanced = len(set(J)) == 1 and len(set(K)) == 1 and len(set(n_ijk)) == 1
    levels = {name: len(lv) for name, lv in d.factor_catalog.items()}
    return DesignSummary(len(days), J, K, n_ijk, balanced, levels)


def _check_global_nesting(d: NestedDataset) -> None:
    pos_parent: dict[str, str] = {}
    img_parent: dict[str, tuple[str, str]] = {}
    for o in d.observations:
        prev = pos_parent.setdefault(o.position, o.day)
        if prev != o.day:
            raise NestingError(
                f"position {o.position!r} appears under days {prev!r} and {o.day!r}"
            )
        prev_img = img_parent.setdefault(o.image, (o.day, o.position))
        if prev_img != (o.day, o.position):
            raise NestingError(
                f"image {o.image!r} appears under (day, position) {prev_img!r} "
                f"and {(o.day, o.position)!r}"
            )


# ---------------------------------------------------------------------------
# model structure and effects coding


@dataclass(frozen=True)
class ModelSpec:
    """Which random levels and fixed terms enter the mixed model.

    The residual variance is always part of the model.
    """

    random: tuple[str, ...] = RANDOM_LEVELS
    fixed: tuple[str, ...] = ()
    interactions: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        random = tuple(lv for lv in RANDOM_LEVELS if lv in set(self.random))
        unknown = set(self.random) - set(RANDOM_LEVELS)
        if unknown:
            raise ValueError(f"unknown random levels {sorted(unknown)}")
        object.__setattr__(self, "random", random)
        object.__setattr__(self, "fixed", tuple(self.fixed))
        inter = []
        for pair in self.interactions:
            a, b = pair
            if a not in self.fixed or b not in self.fixed:
                raise ValueError(f"interaction {a}*{b} refers to an undeclared factor")
            if a == b:
                raise ValueError(f"interaction of {a} with itself")
            inter.append((a, b))
        object.__setattr__(self, "interactions", tuple(inter))

    @property
    def terms(self) -> tuple[str, ...]:
        return self.fixed + tuple(f"{a}:{b}" for a, b in self.interactions)

    def to_dict(self) -> dict:
        return {
            "random": list(self.random),
            "fixed": list(self.fixed),
            "interactions": [list(p) for p in self.interactions],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelSpec":
        return cls(
            random=tuple(data.get("random", RANDOM_LEVELS)),
            fixed=tuple(data.get("fixed", ())),
            interactions=tuple(tuple(p) for p in data.get("interactions", ())),
        )


def effects_contrast(levels: Sequence[str], level: str) -> np.ndarray:
    """Sum-to-zero contrast row; the last level is the reference."""
    L = len(levels)
    row = np.zeros(L - 1)
    pos = levels.index(level)
    if pos == L - 1:
        row[:] = -1.0
    else:
        row[pos] = 1.0
    return row


@dataclass(frozen=True)
class EffectsCoding:
    """Maps fixed-factor level assignments to effects-coded covariate rows."""

    levels: dict[str, tuple[str, ...]]
    interactions: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        for name, lv in self.levels.items():
            if len(lv) < 2:
                raise DegenerateFactorError(
                    f"factor {name!r} has a single level {tuple(lv)!r}; no contrast exists"
                )

    @property
    def factors(self) -> tuple[str, ...]:
        return tuple(self.levels)

    @cached_property
    def term_slices(self) -> dict[str, slice]:
        out: dict[str, slice] = {}
        start = 1
        for name, lv in self.levels.items():
            out[name] = slice(start, start + len(lv) - 1)
            start += len(lv) - 1
        for a, b in self.interactions:
            width = (len(self.levels[a]) - 1) * (len(self.levels[b]) - 1)
            out[f"{a}:{b}"] = slice(start, start + width)
            start += width
        return out

    @cached_property
    def columns(self) -> tuple[str, ...]:
        cols = ["intercept"]
        for name, lv in self.levels.items():
            cols += [f"{name}[{level}]" for level in lv[:-1]]
        for a, b in self.interactions:
            cols += [
                f"{a}[{la}]:{b}[{lb}]"
                for la in self.levels[a][:-1]
                for lb in self.levels[b][:-1]
            ]
        return tuple(cols)

    def row(self, assignment: Mapping[str, str]) -> np.ndarray:
        """Covariate row (intercept first). Factors missing from ``assignment``
        are averaged out, i.e. contribute zero columns."""
        parts = [np.ones(1)]
        main = {}
        for name, lv in self.levels.items():
            if name in assignment:
                main[name] = effects_contrast(list(lv), assignment[name])
            else:
                main[name] = np.zeros(len(lv) - 1)
            parts.append(main[name])
        for a, b in self.interactions:
            parts.append(np.outer(main[a], main[b]).ravel())
        return np.concatenate(parts)

    def matrix(self, assignments: Sequence[Mapping[str, str]]) -> np.ndarray:
        # cache rows per distinct combination; campaigns repeat few of them
        cache: dict = {}
        rows = []
        for a in assignments:
            key = tuple(a.get(f) for f in self.levels)
            if key not in cache:
                cache[key] = self.row(a)
            rows.append(cache[key])
        return np.array(rows).reshape(len(rows), len(self.columns))

    def level_effects(self, coefs: np.ndarray, factor: str) -> np.ndarray:
        """Per-level effects of a main factor from its contrast coefficients.

        ``coefs`` may carry leading batch axes; the last axis indexes the
        factor's L-1 contrast columns. Returns L effects summing to zero.
        """
        coefs = np.asarray(coefs)
        return np.concatenate([coefs, -coefs.sum(axis=-1, keepdims=True)], axis=-1)

    def to_dict(self) -> dict:
        return {
            "levels": {k: list(v) for k, v in self.levels.items()},
            "interactions": [list(p) for p in self.interactions],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "EffectsCoding":
        return cls(
            {k: tuple(v) for k, v in data["levels"].items()},
            tuple(tuple(p) for p in data.get("interactions", ())),
        )


@dataclass(frozen=True, eq=False)
class DesignMatrices:
    y: np.ndarray
    X: np.ndarray
    coding: EffectsCoding
    groups: dict[str, np.ndarray]

    @property
    def columns(self) -> tuple[str, ...]:
        return self.coding.columns

    @property
    def n_groups(self) -> dict[str, int]:
        return {lv: int(g.max()) + 1 for lv, g in self.groups.items()}


def encode_effects(d: NestedDataset, spec: ModelSpec) -> DesignMatrices:
    catalog = d.factor_catalog
    missing = [f for f in spec.fixed if f not in catalog]
    if missing:
        raise DesignError(f"factors {missing} not present in dataset {d.sample_id!r}")
    coding = EffectsCoding({f: catalog[f] for f in spec.fixed}, spec.interactions)
    X = coding.matrix([o.factors for o in d.observations])
    groups = {lv: d.group_index(lv) for lv in spec.random}
    return DesignMatrices(np.array(d.values), X, coding, groups)


# ---------------------------------------------------------------------------
# CSV input / output


@dataclass(frozen=True)
class Schema:
    """Column mapping for CSV ingestion.

    ``factors=None`` takes every unmapped column as a fixed factor.
    """

    value: str = "value"
    day: str = "day"
    position: str = "position"
    image: str = "image"
    replicate: str = "replicate"
    factors: tuple[str, ...] | None = None
    local_labels: bool = True
    sample_id: str | None = None

    @classmethod
    def from_dict(cls, data: Mapping) -> "Schema":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise SchemaError(f"unknown schema keys {sorted(extra)}")
        data = dict(data)
        if data.get("factors") is not None:
            data["factors"] = tuple(data["factors"])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "Schema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def parse_dataset(path, schema: Schema | None = None) -> NestedDataset:
    schema = schema or Schema()
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        mapped = [schema.value, schema.day, schema.position, schema.image, schema.replicate]
        for col in mapped:
            if col not in header:
                raise SchemaError(f"column {col!r} missing from {path.name}")
        if schema.factors is None:
            factors = tuple(c for c in header if c not in mapped)
        else:
            factors = schema.factors
            for col in factors:
                if col not in header:
                    raise SchemaError(f"factor column {col!r} missing from {path.name}")
        obs = []
        for row_no, row in enumerate(reader, start=2):
            raw = row[schema.value]
            try:
                value = float(raw)
            except (TypeError, ValueError):
                raise ParseError(f"row {row_no}: non-numeric value {raw!r}") from None
            try:
                obs.append(
                    Observation(
                        value,
                        row[schema.day],
                        row[schema.position],
                        row[schema.image],
                        row[schema.replicate],
                        {f: row[f] for f in factors},
                    )
                )
            except DesignError as exc:
                raise ParseError(f"row {row_no}: {exc}") from None
    sample_id = schema.sample_id or path.stem
    return NestedDataset(sample_id, tuple(obs), schema.local_labels)


def write_dataset(d: NestedDataset, path) -> None:
    """Write the canonical CSV (values in shortest round-trip repr)."""
    factors = d.factor_names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", *INDEX_COLUMNS, *factors])
        for o in d.observations:
            w.writerow([repr(o.value), o.day, o.position, o.image, o.replicate,
                        *(o.factors[f] for f in factors)])
