"""Frequentist fit of the nested linear mixed model.

    y = mu + day_i + pos_ij + img_ijk + sum_m delta_m x_m + e_ijkl

REML is maximised over the relative standard deviations
theta_k = sigma_k / sigma_res with the residual variance profiled out.
The restricted deviance is an even function of every theta_k, so the
search is unconstrained and a component sitting on the zero boundary is
reached exactly (theta_k = 0 is a stationary point).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sps
from scipy import linalg, stats

from .design import (
    DesignMatrices,
    DesignSummary,
    EffectsCoding,
    ModelSpec,
    NestedDataset,
    RANDOM_LEVELS,
    encode_effects,
    validate_design,
)
from .errors import AliasingError, ConvergenceError, DesignError, UnbalancedDesignError

LEVEL_FIELDS = {"day": "u2_day", "position": "u2_pos", "image": "u2_im"}

MAX_ITER = 500
TOL_LOGLIK = 1e-10
TOL_GRAD = 1e-6
BOUNDARY = 1e-12


@dataclass(frozen=True)
class VarianceComponents:
    """Variance components in nm^2."""

    u2_day: float = 0.0
    u2_pos: float = 0.0
    u2_im: float = 0.0
    u2_res: float = 0.0
    truncated: frozenset = frozenset()

    def __post_init__(self):
        for name in ("u2_day", "u2_pos", "u2_im", "u2_res"):
            v = float(getattr(self, name))
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "truncated", frozenset(self.truncated))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.u2_day, self.u2_pos, self.u2_im, self.u2_res

    @property
    def total(self) -> float:
        return sum(self.as_tuple())

    def to_dict(self) -> dict:
        return {"u2_day": self.u2_day, "u2_pos": self.u2_pos,
                "u2_im": self.u2_im, "u2_res": self.u2_res}


@dataclass(frozen=True, eq=False)
class FixedEffectEstimate:
    term: str
    coefficients: np.ndarray
    cov: np.ndarray
    u_main: float
    transform: np.ndarray  # contrast coefficients -> per-level (or per-cell) effects

    @property
    def level_effects(self) -> np.ndarray:
        return self.transform @ self.coefficients

    def to_dict(self) -> dict:
        return {
            "term": self.term,
            "coefficients": [float(c) for c in self.coefficients],
            "cov": [[float(c) for c in row] for row in self.cov],
            "level_effects": [float(e) for e in self.level_effects],
            "u_main": self.u_main,
        }


@dataclass(frozen=True, eq=False)
class RemlFit:
    intercept: float
    intercept_se: float
    components: VarianceComponents
    boundary: dict
    effects: list
    coef: np.ndarray
    cov: np.ndarray
    coding: EffectsCoding
    spec: ModelSpec
    loglik: float
    converged: bool
    iterations: int
    n: int

    @property
    def columns(self) -> tuple[str, ...]:
        return self.coding.columns

    def effect(self, term: str) -> FixedEffectEstimate:
        for e in self.effects:
            if e.term == term:
                return e
        raise KeyError(term)

    def to_dict(self) -> dict:
        return {
            "intercept": self.intercept,
            "intercept_se": self.intercept_se,
            "components_nm2": self.components.to_dict(),
            "boundary": dict(self.boundary),
            "fixed_effects": [e.to_dict() for e in self.effects],
            "columns": list(self.columns),
            "coding": self.coding.to_dict(),
            "model": self.spec.to_dict(),
            "restricted_loglik": self.loglik,
            "converged": self.converged,
            "iterations": self.iterations,
            "n": self.n,
        }


def _effect_transform(coding: EffectsCoding, term: str) -> np.ndarray:
    def t(name):
        L = len(coding.levels[name])
        return np.vstack([np.eye(L - 1), -np.ones((1, L - 1))])

    if ":" in term:
        a, b = term.split(":")
        return np.kron(t(a), t(b))
    return t(term)


def main_effect_uncertainty(effects: np.ndarray, effects_cov: np.ndarray) -> float:
    """SD of the equal-weight mixture of per-level effect distributions."""
    effects = np.asarray(effects, dtype=float)
    var = np.diag(effects_cov)
    mean = effects.mean()
    return float(math.sqrt(max(np.mean(effects**2 + var) - mean**2, 0.0)))


# ---------------------------------------------------------------------------
# REML


class _RemlProblem:
    """Cross-product matrices of a design and the profiled restricted deviance."""

    def __init__(self, dm: DesignMatrices, levels: Sequence[str]):
        self.levels = tuple(levels)
        y = dm.y
        self.center = float(y.mean())
        self.scale = float(y.std())
        ys = (y - self.center) / (self.scale if self.scale > 0 else 1.0)
        X = dm.X
        n, p = X.shape
        blocks, level_of_col = [], []
        for k, lv in enumerate(self.levels):
            g = dm.groups[lv]
            G = int(g.max()) + 1
            blocks.append(sps.csr_matrix((np.ones(n), (np.arange(n), g)), shape=(n, G)))
            level_of_col += [k] * G
        Z = sps.hstack(blocks).tocsr() if blocks else sps.csr_matrix((n, 0))
        self.level_of_col = np.array(level_of_col, dtype=np.intp)
        self.q = Z.shape[1]
        self.n, self.p = n, p
        self.ZtZ = (Z.T @ Z).toarray()
        self.ZtX = np.asarray(Z.T @ X)
        self.XtX = X.T @ X
        self.Zty = np.asarray(Z.T @ ys).ravel()
        self.Xty = X.T @ ys
        self.yty = float(ys @ ys)

    def _system(self, theta):
        lam = np.abs(np.asarray(theta, dtype=float))[self.level_of_col]
        q, p = self.q, self.p
        M = np.empty((q + p, q + p))
        M[:q, :q] = lam[:, None] * self.ZtZ * lam[None, :]
        M[:q, :q][np.diag_indices(q)] += 1.0
        M[:q, q:] = lam[:, None] * self.ZtX
        M[q:, :q] = M[:q, q:].T
        M[q:, q:] = self.XtX
        rhs = np.concatenate([lam * self.Zty, self.Xty])
        cf = linalg.cho_factor(M, lower=True, check_finite=False)
        sol = linalg.cho_solve(cf, rhs, check_finite=False)
        rss = self.yty - rhs @ sol
        return lam, cf, sol, rhs, rss

    def deviance(self, theta) -> float:
        _, cf, _, _, rss = self._system(theta)
        logdiag = np.log(np.diag(cf[0]))
        return float(2 * logdiag.sum() + (self.n - self.p) * math.log(rss))

    def gradient(self, theta) -> np.ndarray:
        """d deviance / d theta."""
        theta = np.asarray(theta, dtype=float)
        lam, cf, sol, rhs, rss = self._system(theta)
        q = self.q
        WtZ = np.vstack([lam[:, None] * self.ZtZ, self.ZtX.T])
        MinvWtZ = linalg.cho_solve(cf, WtZ, check_finite=False)
        diag_ZPZ = np.diag(self.ZtZ) - np.einsum("ij,ij->j", WtZ, MinvWtZ)
        ZPy = self.Zty - WtZ.T @ sol
        k = len(self.levels)
        tr = np.bincount(self.level_of_col, weights=diag_ZPZ, minlength=k)
        quad = np.bincount(self.level_of_col, weights=ZPy**2, minlength=k)
        g_gamma = tr - (self.n - self.p) * quad / rss
        return 2.0 * theta * g_gamma

    def hessian(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        k = theta.size
        H = np.empty((k, k))
        for i in range(k):
            h = 1e-5 * max(1.0, abs(theta[i]))
            e = np.zeros(k)
            e[i] = h
            H[:, i] = (self.gradient(theta + e) - self.gradient(theta - e)) / (2 * h)
        return (H + H.T) / 2

    def loglik(self, theta) -> float:
        """Restricted log-likelihood on the original response scale."""
        np_ = self.n - self.p
        dev = self.deviance(theta)
        # rescaling y by s shifts log|.| terms by (n - p) log s^2
        return -0.5 * (dev + np_ * (1 + math.log(2 * math.pi / np_))
                       + np_ * math.log(self.scale**2))


def _newton(problem: _RemlProblem, theta0: np.ndarray, max_iter: int):
    theta = np.array(theta0, dtype=float)
    dev = problem.deviance(theta)
    g = problem.gradient(theta)
    for it in range(1, max_iter + 1):
        H = problem.hessian(theta)
        w, V = np.linalg.eigh(H)
        w = np.maximum(np.abs(w), 1e-8 * max(1.0, np.abs(w).max()))
        step = -V @ ((V.T @ g) / w)
        cand, cdev = _try(problem, theta + step)
        cg = None
        if cdev > dev + 1e-4 * (g @ step):
            # near the optimum the decrease drowns in rounding: keep the full
            # step if the deviance is flat to rounding and the gradient shrinks
            if abs(cdev - dev) <= 1e-12 * max(1.0, abs(dev)):
                cg = problem.gradient(cand)
                if np.linalg.norm(cg) >= np.linalg.norm(g):
                    cg = None
            t = 0.5
            while cg is None and t >= 1e-10:
                cand, cdev = _try(problem, theta + t * step)
                if cdev < dev and cdev <= dev + 1e-4 * t * (g @ step):
                    cg = problem.gradient(cand)
                t /= 2
            if cg is None:
                return theta, it, bool(np.linalg.norm(g) / 2 < TOL_GRAD)
        else:
            cg = problem.gradient(cand)
        change = abs(cdev - dev) / 2
        theta, dev, g = cand, cdev, cg
        if change < TOL_LOGLIK and float(np.linalg.norm(g)) / 2 < TOL_GRAD:
            return theta, it, True
    return theta, max_iter, False


def _try(problem: _RemlProblem, theta: np.ndarray) -> tuple[np.ndarray, float]:
    try:
        return theta, problem.deviance(theta)
    except linalg.LinAlgError:
        return theta, math.inf


def _check_identifiable(dm: DesignMatrices, spec: ModelSpec) -> None:
    counts = [dm.n_groups[lv] for lv in spec.random] + [len(dm.y)]
    names = list(spec.random) + ["residual"]
    if spec.random and counts[0] < 2:
        raise DesignError(f"random level {names[0]!r} has a single group; "
                          "its variance is confounded with the intercept")
    for a in range(len(counts) - 1):
        if counts[a] == counts[a + 1]:
            raise DesignError(
                f"random level {names[a]!r} is confounded with {names[a + 1]!r} "
                "(every group contains exactly one sub-group); drop it from the model"
            )


def _check_aliasing(dm: DesignMatrices) -> None:
    X = dm.X
    _, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag.max() * max(X.shape) * np.finfo(float).eps * 10 if diag.size else 0
    rank = int((diag > tol).sum())
    if rank < X.shape[1]:
        aliased = [dm.columns[i] for i in sorted(piv[rank:])]
        raise AliasingError(f"aliased fixed-effect columns: {aliased}", aliased)


def fit_reml(d: NestedDataset, spec: ModelSpec | None = None, *, max_iter: int = MAX_ITER) -> RemlFit:
    spec = spec or ModelSpec()
    validate_design(d)
    dm = encode_effects(d, spec)
    _check_aliasing(dm)
    n, p = dm.X.shape
    if n <= p:
        raise DesignError("not enough observations for the fixed-effects design")
    scale = float(dm.y.std())
    if scale <= 1e-14 * max(1.0, abs(float(dm.y.mean()))):
        return _constant_fit(dm, spec)
    _check_identifiable(dm, spec)

    problem = _RemlProblem(dm, spec.random)
    k = len(spec.random)
    theta, iters, ok = np.full(k, 0.5), 0, True
    if k:
        for attempt in range(4):
            theta, it, ok = _newton(problem, theta, max_iter - iters)
            iters += it
            theta = np.abs(theta)
            theta[theta**2 < BOUNDARY] = 0.0
            if not ok:
                break
            # a coordinate pinned at zero must be a minimum, not a saddle
            g = problem.gradient(np.where(theta == 0, 1e-4, theta))
            saddle = (theta == 0) & (g < 0)
            if not saddle.any():
                break
            theta[saddle] = 0.5
        if not ok:
            raise ConvergenceError(
                f"REML did not converge in {max_iter} iterations",
                state=_assemble(problem, dm, spec, theta, iters, False),
            )
    return _assemble(problem, dm, spec, theta, iters, True)


def _assemble(problem, dm, spec, theta, iters, converged) -> RemlFit:
    lam, cf, sol, _, rss = problem._system(theta)
    q, p, n = problem.q, problem.p, problem.n
    s2_std = rss / (n - p)
    s2 = s2_std * problem.scale**2
    comps = {"u2_res": s2}
    boundary = {}
    for k, lv in enumerate(spec.random):
        comps[LEVEL_FIELDS[lv]] = float(theta[k] ** 2 * s2)
        boundary[lv] = bool(theta[k] == 0)
    vc = VarianceComponents(**comps)
    beta = sol[q:] * problem.scale
    beta[0] += problem.center
    minv = linalg.cho_solve(cf, np.vstack([np.zeros((q, p)), np.eye(p)]), check_finite=False)[q:]
    cov = s2 * (minv + minv.T) / 2
    effects = _effects(dm.coding, beta, cov)
    return RemlFit(
        intercept=float(beta[0]),
        intercept_se=float(math.sqrt(cov[0, 0])),
        components=vc,
        boundary=boundary,
        effects=effects,
        coef=beta,
        cov=cov,
        coding=dm.coding,
        spec=spec,
        loglik=problem.loglik(theta),
        converged=converged,
        iterations=iters,
        n=n,
    )


def _effects(coding: EffectsCoding, beta, cov) -> list:
    out = []
    for term, sl in coding.term_slices.items():
        T = _effect_transform(coding, term)
        out.append(FixedEffectEstimate(
            term, beta[sl].copy(), cov[sl, sl].copy(),
            main_effect_uncertainty(T @ beta[sl], T @ cov[sl, sl] @ T.T), T))
    return out


def _constant_fit(dm: DesignMatrices, spec: ModelSpec) -> RemlFit:
    beta, *_ = np.linalg.lstsq(dm.X, dm.y, rcond=None)
    p = dm.X.shape[1]
    cov = np.zeros((p, p))
    return RemlFit(
        intercept=float(beta[0]),
        intercept_se=0.0,
        components=VarianceComponents(),
        boundary={lv: True for lv in spec.random},
        effects=_effects(dm.coding, beta, cov),
        coef=beta,
        cov=cov,
        coding=dm.coding,
        spec=spec,
        loglik=math.inf,
        converged=True,
        iterations=0,
        n=len(dm.y),
    )


# ---------------------------------------------------------------------------
# balanced nested ANOVA


@dataclass(frozen=True)
class AnovaTable:
    ss: dict
    df: dict
    dims: tuple

    @property
    def ms(self) -> dict:
        return {k: self.ss[k] / self.df[k] for k in self.ss}


def anova_table(d: NestedDataset) -> AnovaTable:
    summary = validate_design(d)
    if not summary.balanced:
        raise UnbalancedDesignError("nested ANOVA needs a balanced design")
    I, J, K, m = summary.dims()
    y = d.values
    day, pos, img = (d.group_index(lv) for lv in RANDOM_LEVELS)

    def means(g, values, size):
        return np.bincount(g, weights=values) / np.bincount(g, minlength=size)

    m_img = means(img, y, I * J * K)
    img_pos = np.zeros(I * J * K, dtype=np.intp)
    img_pos[img] = pos
    pos_day = np.zeros(I * J, dtype=np.intp)
    pos_day[pos] = day
    m_pos = np.bincount(img_pos, weights=m_img) / K
    m_day = np.bincount(pos_day, weights=m_pos) / J
    grand = m_day.mean()
    ss = {
        "res": float(np.sum((y - m_img[img]) ** 2)),
        "image": float(m * np.sum((m_img - m_pos[img_pos]) ** 2)),
        "position": float(K * m * np.sum((m_pos - m_day[pos_day]) ** 2)),
        "day": float(J * K * m * np.sum((m_day - grand) ** 2)),
    }
    df = {"res": I * J * K * (m - 1), "image": I * J * (K - 1),
          "position": I * (J - 1), "day": I - 1}
    return AnovaTable(ss, df, (I, J, K, m))


def anova_moments(d: NestedDataset) -> VarianceComponents:
    """Method-of-moments components from nested mean squares, truncated at 0."""
    tab = anova_table(d)
    I, J, K, m = tab.dims
    if min(tab.df.values()) < 1:
        raise DesignError(f"every level needs at least one degree of freedom, got {tab.df}")
    ms = tab.ms
    raw = {
        "u2_res": ms["res"],
        "u2_im": (ms["image"] - ms["res"]) / m,
        "u2_pos": (ms["position"] - ms["image"]) / (K * m),
        "u2_day": (ms["day"] - ms["position"]) / (J * K * m),
    }
    truncated = {k for k, v in raw.items() if v < 0}
    return VarianceComponents(**{k: max(v, 0.0) for k, v in raw.items()}, truncated=truncated)


# ---------------------------------------------------------------------------
# significance screening


@dataclass(frozen=True)
class TermTest:
    term: str
    df: int
    chi2: float
    p_value: float
    significant: bool
    keep: bool

    def to_dict(self) -> dict:
        return {"term": self.term, "df": self.df, "chi2": self.chi2,
                "p_value": self.p_value, "significant": self.significant, "keep": self.keep}


@dataclass(frozen=True)
class SignificanceReport:
    tests: tuple
    alpha: float

    def __getitem__(self, term) -> TermTest:
        for t in self.tests:
            if t.term == term:
                return t
        raise KeyError(term)

    @property
    def kept(self) -> tuple[str, ...]:
        return tuple(t.term for t in self.tests if t.keep)

    def reduced(self, spec: ModelSpec) -> ModelSpec:
        kept = set(self.kept)
        return ModelSpec(
            random=spec.random,
            fixed=tuple(f for f in spec.fixed if f in kept),
            interactions=tuple(p for p in spec.interactions if f"{p[0]}:{p[1]}" in kept),
        )

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "method": "wald-chi2",
                "tests": [t.to_dict() for t in self.tests]}


def wald_test(coef, cov) -> tuple[float, float]:
    coef = np.atleast_1d(coef)
    chi2 = float(coef @ np.linalg.solve(np.atleast_2d(cov), coef))
    return chi2, float(stats.chi2.sf(chi2, coef.size))


def test_fixed_effects(fit: RemlFit, d: NestedDataset | None = None,
                       spec: ModelSpec | None = None, alpha: float = 0.05) -> SignificanceReport:
    """Wald chi-square screening of every fixed term at level ``alpha``.

    Interactions are decided first; a main effect contained in a kept
    interaction is kept regardless of its own p-value.
    """
    spec = spec or fit.spec
    results = {}
    kept_inter = set()
    for a, b in spec.interactions:
        term = f"{a}:{b}"
        est = fit.effect(term)
        chi2, p = wald_test(est.coefficients, est.cov)
        sig = p < alpha
        if sig:
            kept_inter |= {a, b}
        results[term] = TermTest(term, est.coefficients.size, chi2, p, sig, sig)
    for f in spec.fixed:
        est = fit.effect(f)
        chi2, p = wald_test(est.coefficients, est.cov)
        sig = p < alpha
        results[f] = TermTest(f, est.coefficients.size, chi2, p, sig, sig or f in kept_inter)
    tests = tuple(results[t] for t in spec.terms)
    return SignificanceReport(tests, alpha)


# pytest would otherwise try to collect the public name above
test_fixed_effects.__test__ = False


def mean_standard_uncertainty(vc: VarianceComponents, ds: DesignSummary,
                              fixed_u: Sequence[float] = ()) -> float:
    """Closed-form standard uncertainty of the measured mean, balanced designs only."""
    if not ds.balanced:
        raise UnbalancedDesignError(
            "closed-form SD of the mean requires a balanced design; "
            "use the posterior-based SD instead"
        )
    I, J, K, _ = ds.dims()
    var = (vc.u2_day / I + vc.u2_pos / (I * J) + vc.u2_im / (I * J * K)
           + vc.u2_res / ds.n + sum(u * u for u in fixed_u))
    return math.sqrt(var)
