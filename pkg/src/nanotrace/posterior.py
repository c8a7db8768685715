"""Bayesian fit of the nested mixed model.

The sampler integrates the random effects and the fixed-effect
coefficients out analytically (both are conditionally Gaussian), updates
each standard deviation by univariate slice sampling on that marginal
posterior, and then draws the coefficients exactly from their Gaussian
conditional. Draws therefore target the joint posterior of
(intercept, coefficients, sigma_day, sigma_pos, sigma_im, sigma_res).
"""
from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sps
from scipy import linalg

from .design import (
    DesignMatrices,
    EffectsCoding,
    ModelSpec,
    NestedDataset,
    encode_effects,
    validate_design,
)
from .diagnostics import Diagnostics, diagnostics
from .errors import DiagnosticsError
from .pdf import EmpiricalPdf, Normal

SIGMA_NAMES = {"day": "sigma_day", "position": "sigma_pos", "image": "sigma_im"}
# residual variance floor (nm^2); keeps the posterior proper for exactly constant data
NUGGET = 1e-10


@dataclass(frozen=True)
class PriorSpec:
    """Normal priors on location parameters, half-normal on standard deviations.

    ``fixed`` holds per-column normal priors keyed by coefficient column
    name; other columns get normal(0, ``fixed_sd``). ``sigma`` maps
    sigma_day / sigma_pos / sigma_im / sigma_res to half-normal scales.
    """

    intercept: Normal
    fixed_sd: float
    sigma: Mapping[str, float]
    fixed: Mapping[str, Normal] = field(default_factory=dict)

    def __post_init__(self):
        scales = [self.intercept.sd, self.fixed_sd, *self.sigma.values(),
                  *(n.sd for n in self.fixed.values())]
        if not all(s > 0 and math.isfinite(s) for s in scales):
            raise ValueError("all prior scales must be positive and finite")
        missing = {"sigma_res"} - set(self.sigma)
        if missing:
            raise ValueError("prior must give a scale for sigma_res")

    @classmethod
    def default(cls, d: NestedDataset) -> "PriorSpec":
        """Weakly informative, scale-aware defaults."""
        y = d.values
        sd = float(y.std(ddof=1)) if y.size > 1 else 0.0
        if not sd > 0:
            sd = 1.0
        return cls(
            intercept=Normal(float(y.mean()), 10 * sd),
            fixed_sd=5 * sd,
            sigma={name: 2 * sd for name in (*SIGMA_NAMES.values(), "sigma_res")},
        )

    def fixed_prior(self, columns: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        mean = np.array([self.fixed[c].mean if c in self.fixed else 0.0 for c in columns])
        sd = np.array([self.fixed[c].sd if c in self.fixed else self.fixed_sd for c in columns])
        return mean, sd

    def to_dict(self) -> dict:
        return {
            "intercept": self.intercept.to_dict(),
            "fixed_sd": self.fixed_sd,
            "fixed": {k: v.to_dict() for k, v in self.fixed.items()},
            "sigma_half_normal_scale": dict(self.sigma),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "PriorSpec":
        return cls(
            intercept=Normal(**data["intercept"]),
            fixed_sd=float(data["fixed_sd"]),
            sigma={k: float(v) for k, v in data["sigma_half_normal_scale"].items()},
            fixed={k: Normal(**v) for k, v in data.get("fixed", {}).items()},
        )


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup: int = 1000
    draws: int = 1000
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.chains < 1 or self.draws < 1 or self.warmup < 0:
            raise ValueError(f"invalid sampler configuration {self}")

    def to_dict(self) -> dict:
        return {"chains": self.chains, "warmup": self.warmup, "draws": self.draws,
                "seed": self.seed}


@dataclass(frozen=True, eq=False)
class PosteriorDraws:
    names: tuple[str, ...]
    values: np.ndarray  # (S, P)
    chain: np.ndarray  # (S,)
    config: SamplerConfig | None = None
    coding: EffectsCoding | None = None
    spec: ModelSpec | None = None
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] != len(self.names) or values.shape[0] < 1:
            raise ValueError("values must be (S >= 1, len(names))")
        if not np.all(np.isfinite(values)):
            raise ValueError("non-finite posterior draws")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "chain", np.asarray(self.chain, dtype=int))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def __len__(self):
        return self.values.shape[0]

    @property
    def n_chains(self) -> int:
        return int(np.unique(self.chain).size)

    @property
    def sigma_names(self) -> tuple[str, ...]:
        return tuple(n for n in self.names if n.startswith("sigma_"))

    @property
    def coef_names(self) -> tuple[str, ...]:
        return tuple(n for n in self.names if not n.startswith("sigma_"))

    def by_chain(self, name: str) -> np.ndarray:
        col = self[name]
        return np.stack([col[self.chain == c] for c in np.unique(self.chain)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["chain", "draw", *self.names])
            draw_no = np.zeros(self.chain.max() + 1, dtype=int)
            for c, row in zip(self.chain, self.values):
                w.writerow([int(c), int(draw_no[c]), *(repr(float(v)) for v in row)])
                draw_no[c] += 1

    @classmethod
    def from_csv(cls, path, coding: EffectsCoding | None = None,
                 spec: ModelSpec | None = None) -> "PosteriorDraws":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [r for r in reader]
        data = np.array(rows, dtype=float).reshape(len(rows), len(header))
        return cls(tuple(header[2:]), data[:, 2:], data[:, 0].astype(int),
                   coding=coding, spec=spec)


# ---------------------------------------------------------------------------
# marginal likelihood of the standard deviations


class _NestedMarginal:
    """log p(y | sigma) with random effects and coefficients integrated out.

    The precision system of the nested random effects is eliminated level
    by level (images, then positions, then days); each elimination only
    fills in entries between a group and its own ancestors, so the cost is
    linear in the number of groups.
    """

    def __init__(self, dm: DesignMatrices, levels: Sequence[str], prior_mean, prior_sd):
        order = [lv for lv in ("image", "position", "day") if lv in levels]
        self.order = order
        X = dm.X
        self.n, self.p = X.shape
        self.m0 = np.asarray(prior_mean, dtype=float)
        self.s0 = np.asarray(prior_sd, dtype=float)
        yt = dm.y - X @ self.m0
        self.yy = float(yt @ yt)
        Xs = X * self.s0
        self.XX = Xs.T @ Xs
        self.bx = Xs.T @ yt
        self.q = 0
        self.counts, self.sx, self.sy, self.agg = [], [], [], {}
        first = {}
        for k, lv in enumerate(order):
            g = dm.groups[lv]
            G = int(g.max()) + 1
            self.q += G
            self.counts.append(np.bincount(g, minlength=G).astype(float))
            ind = sps.csr_matrix((np.ones(self.n), (g, np.arange(self.n))), shape=(G, self.n))
            self.sx.append(np.asarray(ind @ Xs))
            self.sy.append(np.asarray(ind @ yt).ravel())
            rep = np.zeros(G, dtype=np.intp)
            rep[g] = np.arange(self.n)
            first[k] = rep  # one observation per group, to look up ancestors
        for k in range(len(order)):
            for k2 in range(k + 1, len(order)):
                anc = dm.groups[order[k2]][first[k]]
                G2 = self.counts[k2].size
                self.agg[k, k2] = sps.csr_matrix(
                    (np.ones(anc.size), (anc, np.arange(anc.size))), shape=(G2, anc.size))
        self.k = len(order)

    def _eliminate(self, t: np.ndarray, r: float):
        k = self.k
        diag = [t[i] ** 2 * self.counts[i] + r for i in range(k)]
        coup = {(i, j): t[i] * t[j] * self.counts[i] for i in range(k) for j in range(i + 1, k)}
        cx = [t[i] * self.sx[i] for i in range(k)]
        rhs = [t[i] * self.sy[i] for i in range(k)]
        XX = self.XX + r * np.eye(self.p)
        bx = self.bx.copy()
        logdet = quad = 0.0
        for i in range(k):
            piv = diag[i]
            logdet += float(np.log(piv).sum())
            quad += float((rhs[i] ** 2 / piv).sum())
            for j in range(i + 1, k):
                A = self.agg[i, j]
                w = coup[i, j] / piv
                diag[j] = diag[j] - A @ (w * coup[i, j])
                rhs[j] = rhs[j] - A @ (w * rhs[i])
                cx[j] = cx[j] - A @ (w[:, None] * cx[i])
                for l in range(j + 1, k):
                    coup[j, l] = coup[j, l] - A @ (w * coup[i, l])
            scaled = cx[i] / piv[:, None]
            XX -= cx[i].T @ scaled
            bx -= scaled.T @ rhs[i]
        return logdet, quad, XX, bx

    def loglik(self, sigmas: np.ndarray) -> float:
        """``sigmas`` = (random-level SDs in self.order..., residual SD)."""
        t = np.asarray(sigmas[:-1], dtype=float)
        r = sigmas[-1] ** 2 + NUGGET
        logdet, quad, S, bx = self._eliminate(t, r)
        L = linalg.cholesky(S, lower=True, check_finite=False)
        logdet += 2 * float(np.log(np.diag(L)).sum())
        z = linalg.solve_triangular(L, bx, lower=True, check_finite=False)
        quad += float(z @ z)
        dim = self.q + self.p
        return -0.5 * (self.n * math.log(2 * math.pi) + (self.n - dim) * math.log(r)
                       + logdet + (self.yy - quad) / r)

    def draw_coef(self, sigmas: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        t = np.asarray(sigmas[:-1], dtype=float)
        r = sigmas[-1] ** 2 + NUGGET
        _, _, S, bx = self._eliminate(t, r)
        L = linalg.cholesky(S, lower=True, check_finite=False)
        mean = linalg.cho_solve((L, True), bx, check_finite=False)
        noise = linalg.solve_triangular(L.T, rng.standard_normal(self.p), lower=False,
                                        check_finite=False)
        z = mean + math.sqrt(r) * noise
        return self.m0 + self.s0 * z


class _BalancedMarginal:
    """Closed form for balanced designs without fixed factors.

    The covariance of a balanced nested design has four eigenvalues
    (residual, image, position, day strata) plus the grand-mean direction,
    so the likelihood only needs the nested ANOVA sums of squares.
    """

    def __init__(self, d: NestedDataset, levels: Sequence[str], prior_mean, prior_sd):
        from .mixed import anova_table

        tab = anova_table(d)
        self.I, self.J, self.K, self.m = tab.dims
        self.N = self.I * self.J * self.K * self.m
        self.ss, self.df = tab.ss, tab.df
        self.ybar = float(d.values.mean())
        self.m0 = float(np.ravel(prior_mean)[0])
        self.s0 = float(np.ravel(prior_sd)[0])
        self.order = [lv for lv in ("image", "position", "day") if lv in levels]

    def _eigen(self, sigmas):
        t = dict(zip(self.order, sigmas[:-1]))
        lam_res = sigmas[-1] ** 2 + NUGGET
        lam_im = lam_res + self.m * t.get("image", 0.0) ** 2
        lam_pos = lam_im + self.K * self.m * t.get("position", 0.0) ** 2
        lam_day = lam_pos + self.J * self.K * self.m * t.get("day", 0.0) ** 2
        return {"res": lam_res, "image": lam_im, "position": lam_pos, "day": lam_day}

    def loglik(self, sigmas) -> float:
        lam = self._eigen(sigmas)
        total = self.N * math.log(2 * math.pi)
        for s in ("res", "image", "position", "day"):
            if self.df[s]:
                total += self.df[s] * math.log(lam[s]) + self.ss[s] / lam[s]
        v = lam["day"] + self.N * self.s0**2
        total += math.log(v) + self.N * (self.ybar - self.m0) ** 2 / v
        return -0.5 * total

    def draw_coef(self, sigmas, rng) -> np.ndarray:
        lam_day = self._eigen(sigmas)["day"]
        prec = 1 / self.s0**2 + self.N / lam_day
        mean = (self.m0 / self.s0**2 + self.N * self.ybar / lam_day) / prec
        return np.array([mean + rng.standard_normal() / math.sqrt(prec)])


# ---------------------------------------------------------------------------
# sampler


def _slice_step(logp: Callable[[float], float], x0: float, lp0: float, w: float,
                rng: np.random.Generator, max_steps: int = 50) -> tuple[float, float]:
    """One univariate slice-sampling update on [0, inf) with stepping out."""
    logy = lp0 - rng.exponential()
    u = rng.uniform()
    lo = x0 - w * u
    hi = lo + w
    steps = int(rng.integers(0, max_steps))
    left_steps, right_steps = steps, max_steps - 1 - steps
    while lo > 0 and left_steps > 0 and logp(lo) > logy:
        lo -= w
        left_steps -= 1
    while right_steps > 0 and logp(hi) > logy:
        hi += w
        right_steps -= 1
    lo = max(lo, 0.0)
    while True:
        x1 = rng.uniform(lo, hi)
        lp1 = logp(x1)
        if lp1 > logy:
            return x1, lp1
        if x1 < x0:
            lo = x1
        else:
            hi = x1
        if hi - lo < 1e-300:
            return x0, lp0


def _run_chain(engine, prior_scales: np.ndarray, init: np.ndarray, width: np.ndarray,
               warmup: int, draws: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    sig = init.copy()
    inv2s2 = 0.5 / prior_scales**2

    def logpost(s):
        return engine.loglik(s) - float(np.sum(s**2 * inv2s2))

    lp = logpost(sig)
    k = sig.size
    w = width.copy()
    hist = np.empty((warmup, k))
    out_sig = np.empty((draws, k))
    out_coef = []
    adapt_at = {a for a in (50, 100, 200, 400, 800, 1600, 3200) if a < warmup} | {warmup}
    for it in range(warmup + draws):
        for c in range(k):
            def lp_c(x, c=c):
                if x < 0:
                    return -math.inf
                s = sig.copy()
                s[c] = x
                return logpost(s)
            sig[c], lp = _slice_step(lp_c, sig[c], lp, w[c], rng)
        if it < warmup:
            hist[it] = sig
            if it + 1 in adapt_at:
                recent = hist[(it + 1) // 2: it + 1]
                sd = recent.std(axis=0)
                w = np.maximum(3.0 * sd, 1e-6 * np.maximum(recent.mean(axis=0), 1e-6))
        else:
            out_sig[it - warmup] = sig
            out_coef.append(engine.draw_coef(sig, rng))
    return np.array(out_coef), out_sig


def sample_posterior(d: NestedDataset, spec: ModelSpec | None = None,
                     prior: PriorSpec | None = None,
                     config: SamplerConfig | None = None) -> PosteriorDraws:
    spec = spec or ModelSpec()
    config = config or SamplerConfig()
    summary = validate_design(d)
    prior = prior or PriorSpec.default(d)
    dm = encode_effects(d, spec)
    columns = dm.coding.columns
    fmean, fsd = prior.fixed_prior(columns[1:])
    m0 = np.concatenate([[prior.intercept.mean], fmean])
    s0 = np.concatenate([[prior.intercept.sd], fsd])

    if summary.balanced and not spec.fixed:
        engine = _BalancedMarginal(d, spec.random, m0, s0)
    else:
        engine = _NestedMarginal(dm, spec.random, m0, s0)
    sig_names = [SIGMA_NAMES[lv] for lv in engine.order] + ["sigma_res"]
    missing = [s for s in sig_names if s not in prior.sigma]
    if missing:
        raise ValueError(f"prior lacks half-normal scales for {missing}")
    scales = np.array([prior.sigma[s] for s in sig_names])

    y_sd = float(d.values.std()) or 1.0
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)

    def chain(c):
        rng = np.random.default_rng(seeds[c])
        init = np.empty(len(sig_names))
        init[:-1] = y_sd * rng.uniform(0.05, 0.5, size=len(sig_names) - 1)
        init[-1] = y_sd * rng.uniform(0.5, 1.5)
        width = np.full(len(sig_names), 0.5 * y_sd)
        return _run_chain(engine, scales, init, width, config.warmup, config.draws, rng)

    if config.threads > 1 and config.chains > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(chain, range(config.chains)))
    else:
        results = [chain(c) for c in range(config.chains)]

    # report SDs in spec order (day, position, image, res)
    spec_sig = [SIGMA_NAMES[lv] for lv in spec.random] + ["sigma_res"]
    perm = [sig_names.index(s) for s in spec_sig]
    names = tuple(columns) + tuple(spec_sig)
    values = np.vstack([np.hstack([coef, sig[:, perm]]) for coef, sig in results])
    chain_ids = np.repeat(np.arange(config.chains), config.draws)
    draws = PosteriorDraws(names, values, chain_ids, config, dm.coding, spec)
    notes = []
    if config.chains >= 2:
        diag = diagnostics(draws)
        if not diag.passed:
            notes.append(diag.message())
    else:
        notes.append("single chain: convergence diagnostics unavailable")
    for note in notes:
        warnings.warn(note, RuntimeWarning, stacklevel=2)
    object.__setattr__(draws, "warnings", tuple(notes))
    return draws


def posterior_to_prior(p: PosteriorDraws, inflation: float = 1.0,
                       check: bool = True) -> PriorSpec:
    """Moment-matched prior for the next campaign from converged draws."""
    if inflation < 1:
        raise ValueError("inflation must be >= 1")
    if check:
        diag = diagnostics(p)
        if not diag.passed:
            raise DiagnosticsError("refusing to turn unconverged draws into a prior: "
                                   + diag.message())
    fixed = {}
    for name in p.coef_names[1:]:
        col = p[name]
        fixed[name] = Normal(float(col.mean()), inflation * float(col.std(ddof=1)))
    icpt = p["intercept"]
    sigma = {name: inflation * float(p[name].mean()) * math.sqrt(math.pi / 2)
             for name in p.sigma_names}
    fixed_sd = max(n.sd for n in fixed.values()) if fixed else inflation * float(icpt.std(ddof=1))
    return PriorSpec(
        intercept=Normal(float(icpt.mean()), inflation * float(icpt.std(ddof=1))),
        fixed_sd=fixed_sd,
        sigma=sigma,
        fixed=fixed,
    )


# ---------------------------------------------------------------------------
# functionals


def _cell_mean(p: PosteriorDraws, combination: Mapping[str, str] | None = None) -> np.ndarray:
    if p.coding is None:
        if combination:
            raise ValueError("draws carry no effects coding; only the intercept is available")
        return p["intercept"].copy()
    row = p.coding.row(combination or {})
    coefs = np.column_stack([p[c] for c in p.coding.columns])
    return coefs @ row


def total_variance(p: PosteriorDraws) -> np.ndarray:
    """Draw-wise sum of all variance components."""
    return sum(p[name] ** 2 for name in p.sigma_names)


def _predictive(p: PosteriorDraws, combination=None, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return _cell_mean(p, combination) + np.sqrt(total_variance(p)) * rng.standard_normal(len(p))


FUNCTIONALS: dict[str, Callable[..., np.ndarray]] = {
    "intercept": lambda p: p["intercept"].copy(),
    "cell_mean": _cell_mean,
    "predictive": _predictive,
    "variance_day": lambda p: p["sigma_day"] ** 2,
    "variance_pos": lambda p: p["sigma_pos"] ** 2,
    "variance_im": lambda p: p["sigma_im"] ** 2,
    "variance_res": lambda p: p["sigma_res"] ** 2,
}


def pdf_of(p: PosteriorDraws, functional: str, **kwargs) -> EmpiricalPdf:
    try:
        fn = FUNCTIONALS[functional]
    except KeyError:
        raise KeyError(f"unknown functional {functional!r}; known: {sorted(FUNCTIONALS)}") from None
    return EmpiricalPdf(fn(p, **kwargs), source=functional)


def level_effect_uncertainty(p: PosteriorDraws, term: str) -> float:
    """SD of the equal-weight mixture of per-level effect posteriors."""
    sl = p.coding.term_slices[term]
    cols = p.coding.columns[sl]
    coefs = np.column_stack([p[c] for c in cols])
    if ":" in term:
        from .mixed import _effect_transform

        effects = coefs @ _effect_transform(p.coding, term).T
    else:
        effects = p.coding.level_effects(coefs, term)
    return float(effects.ravel().std())


def posterior_summary(p: PosteriorDraws) -> dict:
    out = {"intercept": EmpiricalPdf(p["intercept"]).summary()}
    for name in p.sigma_names:
        u2 = p[name] ** 2
        out["u2_" + name.removeprefix("sigma_")] = {
            "mean": float(u2.mean()), "sd": float(u2.std()),
            "q025": float(np.quantile(u2, 0.025)), "q975": float(np.quantile(u2, 0.975)),
        }
    if p.coding is not None:
        out["u_main"] = {t: level_effect_uncertainty(p, t) for t in p.coding.term_slices}
    return out
