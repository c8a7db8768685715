"""Quadratic calibration curve by Monte Carlo regression, and propagation.

Each replicate draws every calibration point's measured and certified value,
fits certified = alpha + beta * measured + gamma * measured^2 by ordinary
least squares and keeps (alpha, beta, gamma, s^2). A measured-quantity PDF is
carried through the curve draw by draw, with a model error epsilon drawn
from normal(0, s^2) of the paired replicate.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy import stats

from .errors import InsufficientDataError, SingularDesignError
from .pdf import EmpiricalPdf, Normal

MIN_POINTS = 4
MIN_DRAWS = 10_000
CHUNK = 1 << 14
EXTRAPOLATION_LIMIT = 0.01
MONOTONICITY_LIMIT = 0.01

Measured = Union[EmpiricalPdf, Normal]


@dataclass(frozen=True)
class CalibrationPoint:
    measured: Measured
    certified: Normal
    name: str = ""

    def __post_init__(self):
        if isinstance(self.measured, Normal) and not self.measured.sd > 0:
            raise ValueError(f"point {self.name!r}: measured SD must be > 0")
        if not self.certified.sd > 0:
            raise ValueError(f"point {self.name!r}: certified SD must be > 0")

    @property
    def measured_mean(self) -> float:
        return float(self.measured.mean)

    def to_dict(self) -> dict:
        if isinstance(self.measured, Normal):
            measured = {"kind": "normal", **self.measured.to_dict()}
        else:
            measured = {"kind": "samples", "source": self.measured.source,
                        **self.measured.summary()}
        return {"name": self.name, "measured": measured, "certified": self.certified.to_dict()}


def ols_quadratic(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float, float]:
    """Least-squares (alpha, beta, gamma) and s^2 = RSS / (n - 3)."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-d sequences of equal length")
    if x.size < MIN_POINTS:
        raise InsufficientDataError(
            f"quadratic regression with a residual variance needs >= {MIN_POINTS} points, got {x.size}")
    coef, s2, ok = _batched_ols(x[None, :], y[None, :])
    if not ok[0]:
        raise SingularDesignError("fewer than three distinct measured values")
    return float(coef[0, 0]), float(coef[0, 1]), float(coef[0, 2]), float(s2[0])


def _batched_ols(x: np.ndarray, y: np.ndarray):
    """OLS of y on (1, x, x^2) for every row; x, y are (N, r)."""
    r = x.shape[1]
    # centre and scale x per row so the normal geometry stays well conditioned
    c = x.mean(axis=1, keepdims=True)
    s = x.std(axis=1, keepdims=True)
    ok = s[:, 0] > 0
    s = np.where(s > 0, s, 1.0)
    t = (x - c) / s
    T = np.stack([np.ones_like(t), t, t * t], axis=-1)
    Q, R = np.linalg.qr(T)
    diag = np.abs(np.diagonal(R, axis1=1, axis2=2))
    ok &= diag.min(axis=1) > 1e-10 * diag.max(axis=1)
    R = np.where(ok[:, None, None], R, np.eye(3))
    qty = np.einsum("nri,nr->ni", Q, y)
    b = np.linalg.solve(R, qty[..., None])[..., 0]
    fitted = np.einsum("nri,ni->nr", T, b)
    s2 = ((y - fitted) ** 2).sum(axis=1) / (r - 3)
    c, s = c[:, 0], s[:, 0]
    a0, b1, g2 = b[:, 0], b[:, 1], b[:, 2]
    alpha = a0 - b1 * c / s + g2 * c * c / (s * s)
    beta = b1 / s - 2 * g2 * c / (s * s)
    gamma = g2 / (s * s)
    return np.column_stack([alpha, beta, gamma]), s2, ok


@dataclass(frozen=True, eq=False)
class CalibrationCurve:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    s2: np.ndarray
    low: float
    high: float
    seed: int | None = None
    rejected: int = 0
    points: tuple = ()

    def __post_init__(self):
        arrays = [np.asarray(getattr(self, k), dtype=float).ravel()
                  for k in ("alpha", "beta", "gamma", "s2")]
        if len({a.size for a in arrays}) != 1 or arrays[0].size == 0:
            raise ValueError("curve draws must be non-empty and of equal length")
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("non-finite curve draws")
        for k, a in zip(("alpha", "beta", "gamma", "s2"), arrays):
            a.setflags(write=False)
            object.__setattr__(self, k, a)

    @property
    def N(self) -> int:
        return self.alpha.size

    def evaluate(self, x: np.ndarray, index: np.ndarray, eps: np.ndarray | None = None) -> np.ndarray:
        out = self.alpha[index] + self.beta[index] * x + self.gamma[index] * x * x
        return out if eps is None else out + eps

    def metadata(self) -> dict:
        return {
            "N": self.N,
            "seed": self.seed,
            "range_nm": [self.low, self.high],
            "rejected_replicates": self.rejected,
            "points": [p.to_dict() for p in self.points],
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["alpha", "beta", "gamma", "s2"])
            for row in zip(self.alpha, self.beta, self.gamma, self.s2):
                w.writerow([repr(float(v)) for v in row])

    def save(self, directory) -> None:
        from pathlib import Path

        directory = Path(directory)
        self.to_csv(directory / "curve_draws.csv")
        with open(directory / "curve.json", "w", encoding="utf-8") as fh:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, directory) -> "CalibrationCurve":
        from pathlib import Path

        directory = Path(directory)
        with open(directory / "curve.json", encoding="utf-8") as fh:
            meta = json.load(fh)
        data = np.loadtxt(directory / "curve_draws.csv", delimiter=",", skiprows=1, ndmin=2)
        low, high = meta["range_nm"]
        return cls(data[:, 0], data[:, 1], data[:, 2], data[:, 3], low, high,
                   meta.get("seed"), meta.get("rejected_replicates", 0))


def build_curve(points: Sequence[CalibrationPoint], N: int = 100_000, seed: int = 0) -> CalibrationCurve:
    """Monte Carlo regression over ``N`` joint draws of the calibration points.

    Replicates are generated in fixed-size chunks whose generators are
    spawned from ``seed``; replicates with a singular design are redrawn and
    counted in ``rejected``.
    """
    points = tuple(points)
    if len(points) < MIN_POINTS:
        raise InsufficientDataError(f"need at least {MIN_POINTS} calibration points, got {len(points)}")
    if N < MIN_DRAWS:
        raise ValueError(f"N must be at least {MIN_DRAWS}, got {N}")
    n_chunks = -(-N // CHUNK)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    coefs, s2s, rejected = [], [], 0
    for c in range(n_chunks):
        rng = np.random.default_rng(children[c])
        size = min(CHUNK, N - c * CHUNK)
        x, y = _draw_points(points, rng, size)
        coef, s2, ok = _batched_ols(x, y)
        while not ok.all():
            bad = np.flatnonzero(~ok)
            rejected += bad.size
            x2, y2 = _draw_points(points, rng, bad.size)
            coef[bad], s2[bad], ok[bad] = _batched_ols(x2, y2)
        coefs.append(coef)
        s2s.append(s2)
    coef = np.vstack(coefs)
    means = [p.measured_mean for p in points]
    return CalibrationCurve(coef[:, 0], coef[:, 1], coef[:, 2], np.concatenate(s2s),
                            min(means), max(means), seed, rejected, points)


def _draw_points(points, rng, size):
    x = np.empty((size, len(points)))
    y = np.empty((size, len(points)))
    for r, p in enumerate(points):
        x[:, r] = p.measured.sample(rng, size)
        y[:, r] = p.certified.sample(rng, size)
    return x, y


@dataclass(frozen=True, eq=False)
class PropagationTrace:
    """Per-output-sample record: curve draw index, input value, model error."""

    curve_index: np.ndarray
    inputs: np.ndarray
    eps: np.ndarray


def propagate(curve: CalibrationCurve, q_m: Measured, seed=0, return_trace: bool = False):
    """PDF of the certified quantity for a measured-quantity PDF.

    The output has ``curve.N`` samples. The measured samples are resampled
    to N (with replacement when fewer, without when more) and paired with
    a random permutation of the curve draws.
    """
    for msg in range_check(curve, q_m):
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    rng = np.random.default_rng(seed)
    N = curve.N
    if isinstance(q_m, Normal):
        x = q_m.sample(rng, N)
    else:
        S = len(q_m)
        if S >= N:
            x = q_m.samples[rng.permutation(S)[:N]]
        else:
            x = q_m.sample(rng, N)
    idx = rng.permutation(N)
    eps = np.sqrt(curve.s2[idx]) * rng.standard_normal(N)
    out = EmpiricalPdf(curve.evaluate(x, idx, eps), source="certified")
    if return_trace:
        return out, PropagationTrace(idx, x, eps)
    return out


def _eps_draws(curve: CalibrationCurve) -> np.ndarray:
    seed = curve.seed if curve.seed is not None else 0
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xE5,)))
    return np.sqrt(curve.s2) * rng.standard_normal(curve.N)


def curve_summary(curve: CalibrationCurve) -> dict:
    """Expected value and SD of every curve parameter, including epsilon."""
    out = {}
    for name in ("alpha", "beta", "gamma"):
        a = getattr(curve, name)
        out[name] = {"mean": float(a.mean()), "sd": float(a.std())}
    eps = _eps_draws(curve)
    out["epsilon"] = {
        "mean": float(eps.mean()),
        "sd": float(eps.std()),
        "sd_from_s2": float(math.sqrt(curve.s2.mean())),
    }
    return out


def range_check(curve: CalibrationCurve, q_m: Measured) -> list[str]:
    """Extrapolation and monotonicity warnings for using ``curve`` on ``q_m``."""
    msgs = []
    lo, hi = curve.low, curve.high
    if isinstance(q_m, Normal):
        if q_m.sd > 0:
            below = float(stats.norm.cdf(lo, q_m.mean, q_m.sd))
            above = float(stats.norm.sf(hi, q_m.mean, q_m.sd))
        else:
            below, above = float(q_m.mean < lo), float(q_m.mean > hi)
    else:
        below = float(np.mean(q_m.samples < lo))
        above = float(np.mean(q_m.samples > hi))
    if below > EXTRAPOLATION_LIMIT:
        msgs.append(f"extrapolation: {below:.1%} of the measured PDF lies below the "
                    f"smallest calibration point ({lo:g} nm)")
    if above > EXTRAPOLATION_LIMIT:
        msgs.append(f"extrapolation: {above:.1%} of the measured PDF lies above the "
                    f"largest calibration point ({hi:g} nm)")
    slope_lo = curve.beta + 2 * curve.gamma * lo
    slope_hi = curve.beta + 2 * curve.gamma * hi
    flips = float(np.mean(np.sign(slope_lo) != np.sign(slope_hi)))
    if flips > MONOTONICITY_LIMIT:
        msgs.append(f"non-monotone curve: slope changes sign inside [{lo:g}, {hi:g}] nm "
                    f"in {flips:.1%} of the draws")
    return msgs
