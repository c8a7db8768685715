"""Linear opinion pooling over fixed-factor level combinations.

Every combination of retained factor levels gives an opinion (a posterior
PDF) about the mean of the measured quantity. With equal reliability the
pooled PDF is their equal-weight mixture.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from itertools import product
from typing import Mapping, Sequence

import numpy as np

from .design import ModelSpec, NestedDataset
from .pdf import EmpiricalPdf
from .posterior import PosteriorDraws, _cell_mean, total_variance

POOL_SIZE = 100_000


def level_combinations(spec: ModelSpec, d: NestedDataset | None = None,
                       levels: Mapping[str, Sequence[str]] | None = None) -> list[dict]:
    """Full grid of levels of the retained fixed factors.

    Levels come from ``levels`` or from the dataset's factor catalog. Grid
    cells never observed in ``d`` are kept, with a warning.
    """
    if levels is None:
        levels = d.factor_catalog if d is not None else {}
    names = list(spec.fixed)
    combos = [dict(zip(names, c)) for c in product(*(list(levels[f]) for f in names))]
    if d is not None and names:
        seen = {tuple(o.factors[f] for f in names) for o in d.observations}
        empty = [c for c in combos if tuple(c[f] for f in names) not in seen]
        if empty:
            warnings.warn(f"{len(empty)} of {len(combos)} level combinations have no "
                          "observations; their opinions rest on the additive model only",
                          RuntimeWarning, stacklevel=2)
    return combos


@dataclass(frozen=True, eq=False)
class OpinionSet:
    combinations: tuple
    pdfs: tuple
    weights: np.ndarray

    def __post_init__(self):
        if not self.pdfs:
            raise ValueError("an opinion set needs at least one opinion")
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.pdfs),) or np.any(w < 0):
            raise ValueError("weights must be one non-negative number per opinion")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"opinion weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "weights", w)

    def mixture_moments(self) -> tuple[float, float]:
        """Exact mean and variance of the weighted mixture."""
        means = np.array([p.mean for p in self.pdfs])
        var = np.array([p.var for p in self.pdfs])
        mean = float(self.weights @ means)
        return mean, float(self.weights @ (var + means**2) - mean**2)


def opinions(p: PosteriorDraws, combinations: Sequence[Mapping[str, str]],
             weights: Sequence[float] | None = None) -> OpinionSet:
    """Cell-mean posterior PDF for every combination (same draws for all)."""
    combos = tuple(dict(c) for c in combinations)
    pdfs = tuple(EmpiricalPdf(_cell_mean(p, c), source=_label(c)) for c in combos)
    if weights is None:
        weights = np.full(len(combos), 1.0 / len(combos))
    return OpinionSet(combos, pdfs, np.asarray(weights, dtype=float))


def _label(combo: Mapping[str, str]) -> str:
    return ",".join(f"{k}={v}" for k, v in combo.items()) or "intercept"


def _allocate(weights: np.ndarray, size: int) -> np.ndarray:
    raw = weights * size
    counts = np.floor(raw).astype(int)
    short = size - counts.sum()
    if short:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def pool_opinions(o: OpinionSet, size: int = POOL_SIZE) -> EmpiricalPdf:
    """Equal- (or fixed-) weight mixture, resampled deterministically to ``size``.

    Each opinion contributes a weight-proportional number of samples picked
    at evenly spaced positions of its own sample, so no random numbers are
    consumed.
    """
    if len(o.pdfs) == 1:
        return o.pdfs[0]
    parts = []
    for pdf, c in zip(o.pdfs, _allocate(o.weights, size)):
        if c:
            idx = ((np.arange(c) + 0.5) * (len(pdf) / c)).astype(int)
            parts.append(pdf.samples[idx])
    return EmpiricalPdf(np.concatenate(parts), source="pooled mean")


def predictive_pdf(p: PosteriorDraws, o: OpinionSet, seed=0, size: int = POOL_SIZE) -> EmpiricalPdf:
    """PDF of one future observation (a single particle's measured value).

    Output sample i uses posterior draw i mod S, a combination picked by
    weight, and fresh day/position/image/residual deviates with that draw's
    standard deviations.
    """
    rng = np.random.default_rng(seed)
    cells = np.vstack([pdf.samples for pdf in o.pdfs])  # (C, S)
    S = cells.shape[1]
    draw = np.arange(size) % S
    combo = rng.choice(len(o.pdfs), size=size, p=o.weights)
    sd = np.sqrt(total_variance(p))
    values = cells[combo, draw] + sd[draw] * rng.standard_normal(size)
    return EmpiricalPdf(values, source="predictive single observation")


def variance_identity(mean_pdf: EmpiricalPdf, predictive: EmpiricalPdf,
                      p: PosteriorDraws) -> tuple[float, float]:
    """(SD[h]^2, SD[mu]^2 + E[sum of variance components]); equal by total variance."""
    return predictive.var, mean_pdf.var + float(np.mean(total_variance(p)))
