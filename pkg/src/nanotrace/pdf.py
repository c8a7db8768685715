"""Sample-based probability distributions."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True, eq=False)
class EmpiricalPdf:
    """Equally weighted Monte Carlo sample of a scalar quantity (nm or nm^2).

    Moments are those of the sample itself (population formulas), so a
    two-atom sample at 10 and 20 has SD exactly 5.
    """

    samples: np.ndarray
    source: str = ""

    def __post_init__(self):
        s = np.array(self.samples, dtype=float).ravel()
        if s.size == 0:
            raise ValueError("empirical PDF needs at least one sample")
        if not np.all(np.isfinite(s)):
            raise ValueError("empirical PDF samples must be finite")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size

    @property
    def mean(self) -> float:
        return float(np.mean(self.samples))

    @property
    def sd(self) -> float:
        return float(np.std(self.samples))

    @property
    def var(self) -> float:
        return float(np.var(self.samples))

    def quantile(self, q):
        return np.quantile(self.samples, q)

    def interval(self, level: float = 0.95, kind: str = "central",
                 lower: float | None = None) -> tuple[float, float]:
        """Credible interval: equal-tailed ("central") or highest-density ("hpd").

        Without ``lower`` the HPD is the shortest interval holding ``level``
        of the samples. With a support bound ``lower`` the density is
        estimated by a KDE reflected at the bound and the region is every
        point whose density is above the ``1 - level`` density quantile, so a
        posterior piling up against the bound gets an interval that starts
        at the bound. The region is reported as its enclosing interval.
        """
        if kind == "central":
            tail = (1.0 - level) / 2
            lo, hi = self.quantile([tail, 1.0 - tail])
            return float(lo), float(hi)
        if kind != "hpd":
            raise ValueError(f"unknown interval kind {kind!r}")
        s = np.sort(self.samples)
        if lower is not None:
            if s[0] < lower:
                raise ValueError(f"samples fall below the support bound {lower}")
            if s[-1] > s[0]:
                kde = stats.gaussian_kde(np.concatenate([s, 2 * lower - s]))
                dens = kde(s)
                cut = np.quantile(dens, 1.0 - level)
                inside = s[dens >= cut]
                lo = lower if kde(np.array([lower]))[0] >= cut else float(inside[0])
                return float(lo), float(inside[-1])
        m = max(int(math.ceil(level * s.size)), 1)
        widths = s[m - 1:] - s[: s.size - m + 1]
        i = int(np.argmin(widths))
        return float(s[i]), float(s[i + m - 1])

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Resample with replacement."""
        return self.samples[rng.integers(0, self.samples.size, size=size)]

    def summary(self) -> dict:
        q = self.quantile([0.025, 0.5, 0.975])
        return {
            "mean": self.mean,
            "sd": self.sd,
            "q025": float(q[0]),
            "q500": float(q[1]),
            "q975": float(q[2]),
            "n": int(self.samples.size),
        }

    def histogram(self, bins: int = 60):
        counts, edges = np.histogram(self.samples, bins=bins)
        return counts, edges

    def to_csv(self, path, column: str = "value") -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(column + "\n")
            for v in self.samples:
                fh.write(repr(float(v)) + "\n")

    @classmethod
    def from_csv(cls, path, column: str | None = None, source: str = "") -> "EmpiricalPdf":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            col = column or reader.fieldnames[0]
            values = [float(row[col]) for row in reader]
        return cls(np.array(values), source or str(path))


@dataclass(frozen=True)
class Normal:
    """Normal distribution given by mean and standard deviation."""

    mean: float
    sd: float

    def __post_init__(self):
        if not self.sd >= 0:
            raise ValueError(f"standard deviation must be non-negative, got {self.sd}")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.normal(self.mean, self.sd, size=size)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd}
