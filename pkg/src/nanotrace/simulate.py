"""Synthetic nested-design campaigns with known ground truth."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Mapping, Sequence

import numpy as np

from .design import NestedDataset, Observation
from .mixed import VarianceComponents

ASSIGNMENTS = ("cyclic", "per_observation")


@dataclass(frozen=True)
class GroundTruth:
    """Generative parameters of a balanced campaign.

    ``factors`` maps factor name -> {level label: effect in nm}; the effects
    of one factor must sum to zero (effects coding). ``interactions`` maps
    "a:b" -> {(level_a, level_b): effect} with zero row and column sums.
    """

    intercept: float
    components: VarianceComponents
    dims: tuple[int, int, int, int]
    factors: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    interactions: Mapping[str, Mapping[tuple[str, str], float]] = field(default_factory=dict)
    assignment: str = "cyclic"

    def __post_init__(self):
        dims = tuple(int(x) for x in self.dims)
        if len(dims) != 4 or min(dims) < 1:
            raise ValueError(f"design dims must be four positive integers, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        if self.assignment not in ASSIGNMENTS:
            raise ValueError(f"assignment must be one of {ASSIGNMENTS}")
        for name, eff in self.factors.items():
            if len(eff) < 2:
                raise ValueError(f"factor {name!r} needs at least two levels")
            if abs(sum(eff.values())) > 1e-9 * max(1.0, max(abs(v) for v in eff.values())):
                raise ValueError(f"effects of factor {name!r} do not sum to zero")
        for term, table in self.interactions.items():
            a, b = term.split(":")
            for la in self.factors[a]:
                if abs(sum(table.get((la, lb), 0.0) for lb in self.factors[b])) > 1e-9:
                    raise ValueError(f"interaction {term!r} rows must sum to zero")
            for lb in self.factors[b]:
                if abs(sum(table.get((la, lb), 0.0) for la in self.factors[a])) > 1e-9:
                    raise ValueError(f"interaction {term!r} columns must sum to zero")

    @property
    def n(self) -> int:
        return math.prod(self.dims)

    def combinations(self) -> list[dict]:
        names = list(self.factors)
        return [dict(zip(names, combo)) for combo in product(*(list(self.factors[f]) for f in names))]

    def cell_mean(self, assignment: Mapping[str, str]) -> float:
        mean = self.intercept + sum(self.factors[f][assignment[f]] for f in self.factors)
        for term, table in self.interactions.items():
            a, b = term.split(":")
            mean += table.get((assignment[a], assignment[b]), 0.0)
        return mean

    def to_dict(self) -> dict:
        return {
            "intercept": self.intercept,
            "components_nm2": self.components.to_dict(),
            "dims": {"I": self.dims[0], "J": self.dims[1], "K": self.dims[2], "n_ijk": self.dims[3]},
            "factors": {f: dict(e) for f, e in self.factors.items()},
            "interactions": {
                t: [[la, lb, v] for (la, lb), v in table.items()]
                for t, table in self.interactions.items()
            },
            "assignment": self.assignment,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "GroundTruth":
        dims = data["dims"]
        if isinstance(dims, Mapping):
            dims = (dims["I"], dims["J"], dims["K"], dims["n_ijk"])
        comps = data.get("components_nm2", {})
        return cls(
            intercept=float(data.get("intercept", 0.0)),
            components=VarianceComponents(**{k: comps.get(k, 0.0)
                                             for k in ("u2_day", "u2_pos", "u2_im", "u2_res")}),
            dims=tuple(dims),
            factors={f: {str(k): float(v) for k, v in e.items()}
                     for f, e in data.get("factors", {}).items()},
            interactions={t: {(str(la), str(lb)): float(v) for la, lb, v in rows}
                          for t, rows in data.get("interactions", {}).items()},
            assignment=data.get("assignment", "cyclic"),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "GroundTruth":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def generate_dataset(t: GroundTruth, seed, sample_id: str = "synthetic") -> NestedDataset:
    """Draw one campaign. Level combinations cycle over images (or over
    observations with ``assignment="per_observation"``) in mixed-radix order,
    so every combination is used equally often when the count divides."""
    I, J, K, m = t.dims
    vc = t.components
    rng = np.random.default_rng(seed)
    day = rng.normal(0.0, math.sqrt(vc.u2_day), size=I)
    pos = rng.normal(0.0, math.sqrt(vc.u2_pos), size=(I, J))
    img = rng.normal(0.0, math.sqrt(vc.u2_im), size=(I, J, K))
    res = rng.normal(0.0, math.sqrt(vc.u2_res), size=(I, J, K, m))

    combos = t.combinations()
    cells = [t.cell_mean(c) for c in combos]
    obs = []
    counter = 0
    for i in range(I):
        for j in range(J):
            for k in range(K):
                base = day[i] + pos[i, j] + img[i, j, k]
                for r in range(m):
                    c = counter if t.assignment == "per_observation" else (i * J + j) * K + k
                    ci = c % len(combos)
                    obs.append(Observation(
                        float(cells[ci] + base + res[i, j, k, r]),
                        str(i + 1), str(j + 1), str(k + 1), str(r + 1), combos[ci],
                    ))
                    counter += 1
    return NestedDataset(sample_id, tuple(obs))


def gold_like_truth(dims=(10, 5, 3, 30), intercept: float = 23.4, factors=None) -> GroundTruth:
    """Ground truth with the nanoparticle campaign's variance components."""
    return GroundTruth(
        intercept=intercept,
        components=VarianceComponents(0.16, 0.88, 0.0, 7.61),
        dims=dims,
        factors=factors or {},
    )


# ---------------------------------------------------------------------------
# recovery


@dataclass(frozen=True)
class RecoveryRow:
    parameter: str
    truth: float
    estimate: float
    deviation: float
    tolerance: float
    ok: bool
    interval: tuple | None = None

    @property
    def covered(self) -> bool | None:
        if self.interval is None:
            return None
        return self.interval[0] <= self.truth <= self.interval[1]


def recovery_report(t: GroundTruth, fit, tolerances: Mapping[str, float] | None = None,
                    level: float = 0.95, interval: str = "central") -> list[RecoveryRow]:
    """Compare a REML fit or posterior draws against the generating truth.

    Variance components are compared on the nm^2 scale (posterior mean of
    sigma^2 for draws). Credible intervals are taken on the sampled SD and
    squared; ``interval`` is "central" or "hpd" (bounded at zero). Unknown names in
    ``tolerances`` raise KeyError.
    """
    from .pdf import EmpiricalPdf
    from .posterior import PosteriorDraws

    truth = {"intercept": t.intercept, **t.components.to_dict()}
    if isinstance(fit, PosteriorDraws):
        est, intervals = {}, {}
        est["intercept"] = float(fit["intercept"].mean())
        intervals["intercept"] = EmpiricalPdf(fit["intercept"]).interval(level, interval)
        for col, name in (("sigma_day", "u2_day"), ("sigma_pos", "u2_pos"),
                          ("sigma_im", "u2_im"), ("sigma_res", "u2_res")):
            if col not in fit.names:
                continue
            est[name] = float(np.mean(fit[col] ** 2))
            lo, hi = EmpiricalPdf(fit[col]).interval(level, interval, lower=0.0)
            intervals[name] = (lo * lo, hi * hi)
    else:
        est = {"intercept": fit.intercept, **fit.components.to_dict()}
        intervals = {}
    tolerances = dict(tolerances or {})
    unknown = set(tolerances) - set(truth)
    if unknown:
        raise KeyError(f"unknown parameter names {sorted(unknown)}")
    rows = []
    for name, tv in truth.items():
        if name not in est:
            continue
        dev = est[name] - tv
        tol = tolerances.get(name, math.inf)
        rows.append(RecoveryRow(name, tv, est[name], dev, tol, abs(dev) <= tol, intervals.get(name)))
    return rows
