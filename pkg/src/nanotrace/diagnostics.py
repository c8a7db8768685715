"""Convergence diagnostics: split R-hat and effective sample size."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DiagnosticsError

RHAT_MAX = 1.01
ESS_MIN = 400


def _split(chains: np.ndarray) -> np.ndarray:
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2:
        raise ValueError("chains must be (n_chains, n_draws)")
    half = chains.shape[1] // 2
    if half < 2:
        raise DiagnosticsError("need at least 4 draws per chain")
    return np.concatenate([chains[:, :half], chains[:, -half:]], axis=0)


def split_rhat(chains: np.ndarray) -> float:
    """Potential scale reduction on chains split in halves (BDA3 11.4)."""
    s = _split(chains)
    m, n = s.shape
    W = s.var(axis=1, ddof=1).mean()
    B = n * s.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * W + B / n
    if W <= 0:
        return 1.0 if var_plus <= 0 else np.inf
    return float(np.sqrt(var_plus / W))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.size
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x - x.mean(), size)
    return np.fft.irfft(f * np.conj(f), size)[:n] / n


def ess(chains: np.ndarray) -> float:
    """Multi-chain effective sample size with Geyer's initial monotone sequence."""
    s = _split(chains)
    m, n = s.shape
    acov = np.array([_autocov(c) for c in s])
    W = acov[:, 0].mean() * n / (n - 1)
    B = n * s.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * W + B / n
    if var_plus <= 0:
        return float(m * n)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    tau = -1.0
    prev = np.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        pair = min(pair, prev)
        tau += 2 * pair
        prev = pair
        t += 2
    return float(m * n / max(tau, 1.0 / np.log10(m * n)))


@dataclass(frozen=True)
class Diagnostics:
    rhat: dict
    ess: dict

    @property
    def passed(self) -> bool:
        return max(self.rhat.values()) < RHAT_MAX and min(self.ess.values()) > ESS_MIN

    def message(self) -> str:
        worst_r = max(self.rhat, key=self.rhat.get)
        worst_e = min(self.ess, key=self.ess.get)
        return (f"diagnostics {'passed' if self.passed else 'FAILED'}: "
                f"max R-hat {self.rhat[worst_r]:.4f} ({worst_r}), "
                f"min ESS {self.ess[worst_e]:.0f} ({worst_e})")

    def to_dict(self) -> dict:
        return {"passed": self.passed, "rhat_max": RHAT_MAX, "ess_min": ESS_MIN,
                "rhat": dict(self.rhat), "ess": dict(self.ess)}


def diagnostics(p) -> Diagnostics:
    if p.n_chains < 2:
        raise DiagnosticsError("diagnostics need at least two chains")
    rhat, eff = {}, {}
    for name in p.names:
        chains = p.by_chain(name)
        rhat[name] = split_rhat(chains)
        eff[name] = ess(chains)
    return Diagnostics(rhat, eff)
