"""Acceptance criteria; each test prints one PASS/FAIL line.

Seeds are fixed up front. Run alone with ``pytest tests/test_acceptance.py -s``.
"""
import json
import math
import time
import warnings

import numpy as np
import pytest

from nanotrace.calibration import CalibrationPoint, build_curve, curve_summary, propagate
from nanotrace.cli import main
from nanotrace.design import ModelSpec
from nanotrace.diagnostics import diagnostics
from nanotrace.mixed import VarianceComponents, anova_moments, fit_reml, test_fixed_effects
from nanotrace.pdf import Normal
from nanotrace.pooling import level_combinations, opinions, pool_opinions, predictive_pdf, variance_identity
from nanotrace.posterior import SamplerConfig, sample_posterior
from nanotrace.simulate import GroundTruth, generate_dataset, gold_like_truth, recovery_report

from conftest import report

MEASURED = [(15.91, 0.13), (42.15, 0.01), (99.06, 0.43), (177.04, 0.70)]
CERTIFIED = [(15.60, 0.50), (42.30, 0.60), (99.00, 0.60), (177.40, 0.65)]
CURVE_SEED = 2024


@pytest.fixture(scope="module")
def grid_curve():
    pts = [CalibrationPoint(Normal(*m), Normal(*c), f"P{i + 1}") for i, (m, c) in enumerate(zip(MEASURED, CERTIFIED))]
    t0 = time.perf_counter()
    curve = build_curve(pts, 100_000, seed=CURVE_SEED)
    return curve, time.perf_counter() - t0


def test_calibration_curve_reproduction(grid_curve):
    curve, seconds = grid_curve
    s = curve_summary(curve)
    checks = {
        "E[beta]": (s["beta"]["mean"], abs(s["beta"]["mean"] - 1.0025) <= 0.01),
        "SD[beta]": (s["beta"]["sd"], abs(s["beta"]["sd"] / 0.0252 - 1) <= 0.30),
        "E[alpha]": (s["alpha"]["mean"], abs(s["alpha"]["mean"] + 0.206) <= 0.20),
        "SD[alpha]": (s["alpha"]["sd"], abs(s["alpha"]["sd"] / 0.772 - 1) <= 0.30),
        "SD[eps]": (s["epsilon"]["sd"], abs(s["epsilon"]["sd"] - 0.692) <= 0.15),
        "runtime_s": (seconds, seconds < 60),
    }
    ok = all(v[1] for v in checks.values())
    report("calibration-curve reproduction", ok,
           ", ".join(f"{k}={v[0]:.4g}" for k, v in checks.items()))
    assert ok, checks


def test_propagation_reproduction(grid_curve):
    curve, _ = grid_curve
    mu_c = propagate(curve, Normal(23.40, 1.19), seed=1)
    h_c = propagate(curve, Normal(23.39, 3.18), seed=2)
    ok = (abs(mu_c.mean - 23.25) <= 0.10 and abs(mu_c.sd - 1.44) <= 0.10
          and abs(h_c.mean - 23.24) <= 0.10 and abs(h_c.sd - 3.28) <= 0.15)
    report("propagation reproduction", ok,
           f"mu_c E={mu_c.mean:.3f} SD={mu_c.sd:.3f}; h_c E={h_c.mean:.3f} SD={h_c.sd:.3f}")
    assert ok


def test_variance_identity():
    t = gold_like_truth(dims=(10, 5, 3, 10), factors={"probe": {"A": 0.6, "B": 0.0, "C": -0.6}})
    d = generate_dataset(t, 7)
    spec = ModelSpec(fixed=("probe",))
    p = sample_posterior(d, spec, config=SamplerConfig(seed=7))
    o = opinions(p, level_combinations(spec, d))
    mu_m = pool_opinions(o)
    h_m = predictive_pdf(p, o, seed=8)
    lhs, rhs = variance_identity(mu_m, h_m, p)
    rel = abs(lhs / rhs - 1)
    ok = rel <= 0.05 and diagnostics(p).passed
    report("variance identity", ok,
           f"SD[h]^2={lhs:.4f}, SD[mu]^2+E[sum sigma^2]={rhs:.4f}, rel diff {rel:.2%}")
    assert ok


def test_oracle_equivalence():
    rng = np.random.default_rng(50)
    checked, attempts, worst = 0, 0, 0.0
    while checked < 50:
        attempts += 1
        dims = tuple(int(x) for x in (rng.integers(2, 9), rng.integers(2, 6), rng.integers(2, 5), rng.integers(2, 9)))
        comps = VarianceComponents(*(rng.uniform(0.05, 3.0, 4) * [1, 1, 1, 2]))
        d = generate_dataset(GroundTruth(float(rng.normal(20, 5)), comps, dims), int(rng.integers(2**32)))
        mom = anova_moments(d)
        if mom.truncated:
            continue
        fit = fit_reml(d)
        a, b = np.array(fit.components.as_tuple()), np.array(mom.as_tuple())
        worst = max(worst, float(np.max(np.abs(a - b) / b)))
        checked += 1
    ok = worst <= 1e-6
    report("oracle equivalence", ok,
           f"{checked} designs ({attempts - checked} skipped for negative moments), max rel diff {worst:.2e}")
    assert ok


@pytest.mark.slow
def test_recovery_and_coverage():
    t = gold_like_truth()
    reps = 100
    seeds = np.random.SeedSequence(5725).spawn(reps)
    names = ["intercept", "u2_day", "u2_pos", "u2_im", "u2_res"]
    hpd = dict.fromkeys(names, 0)
    central = dict.fromkeys(names, 0)
    reml = {k: [] for k in names[1:]}
    diag_fail = 0
    for r in range(reps):
        d = generate_dataset(t, seeds[r])
        fit = fit_reml(d)
        for k in reml:
            reml[k].append(getattr(fit.components, k))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            p = sample_posterior(d, config=SamplerConfig(seed=r))
        diag_fail += bool(p.warnings)
        for row in recovery_report(t, p, interval="hpd"):
            hpd[row.parameter] += row.covered
        for row in recovery_report(t, p, interval="central"):
            central[row.parameter] += row.covered
    truth = t.components.to_dict()
    bias = {k: float(np.mean(v)) / truth[k] - 1 for k, v in reml.items() if truth[k] > 0.1}
    mcse = {k: float(np.std(v, ddof=1) / math.sqrt(reps)) for k, v in reml.items()}
    within3 = {k: abs(np.mean(v) - truth[k]) <= 3 * mcse[k] for k, v in reml.items()}
    cov_ok = all(89 <= hpd[k] <= 99 for k in names)
    bias_ok = all(abs(b) < 0.10 for b in bias.values())
    report("recovery & coverage (95% HPD coverage per parameter)", cov_ok,
           ", ".join(f"{k} {hpd[k]}/100" for k in names)
           + " | central: " + ", ".join(f"{k} {central[k]}" for k in names)
           + f" | runs with diagnostic warnings: {diag_fail}")
    report("recovery & coverage (REML bias < 10% for components > 0.1 nm^2)", bias_ok,
           ", ".join(f"{k} {b:+.1%}" for k, b in bias.items())
           + " | within 3 MCSE: " + ", ".join(f"{k} {v}" for k, v in within3.items()))
    assert cov_ok and bias_ok, (hpd, bias)


@pytest.mark.slow
def test_significance_calibration():
    zero = {"probe": {"A": 0.0, "B": 0.0, "C": 0.0}, "speed": {"f": 0.0, "s": 0.0}}
    t = GroundTruth(23.4, VarianceComponents(0.16, 0.88, 0.0, 7.61), (6, 4, 3, 10), factors=zero)
    spec = ModelSpec(fixed=("probe", "speed"), interactions=(("probe", "speed"),))
    reps = 1000
    seeds = np.random.SeedSequence(505).spawn(reps)
    flagged = dict.fromkeys(spec.terms, 0)
    for r in range(reps):
        d = generate_dataset(t, seeds[r])
        rep = test_fixed_effects(fit_reml(d, spec), d, spec)
        for term in spec.terms:
            flagged[term] += rep[term].significant
    ok = all(30 <= v <= 70 for v in flagged.values())
    report("significance calibration", ok,
           ", ".join(f"{k} {v / reps:.1%}" for k, v in flagged.items()) + f" over {reps} replications")
    assert ok


def _artifacts(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "run.log"}


@pytest.mark.slow
def test_determinism(tmp_path):
    points = {"points": [{"measured": {"mean": m, "sd": s}, "certified": {"mean": cm, "sd": cs}}
                         for (m, s), (cm, cs) in zip(MEASURED, CERTIFIED)]}
    (tmp_path / "points.json").write_text(json.dumps(points))
    truth = gold_like_truth(dims=(5, 3, 2, 8), factors={"probe": {"A": 1.5, "B": -1.5}})
    truth.save(tmp_path / "truth.json")
    (tmp_path / "model.json").write_text(json.dumps({"fixed": ["probe"]}))
    results = {}
    for run in ("a", "b"):
        o = tmp_path / run
        codes = [
            main(["simulate", "--truth", str(tmp_path / "truth.json"), "--seed", "11", "--out", str(o / "sim")]),
            main(["calibrate", "--config", str(tmp_path / "points.json"), "--seed", "12", "--out", str(o / "cal")]),
            main(["propagate", "--curve", str(o / "cal"), "--mean", "23.4", "--sd", "1.19", "--seed", "13",
                  "--out", str(o / "prop")]),
            main(["fit", "--data", str(o / "sim" / "dataset.csv"), "--model", str(tmp_path / "model.json"),
                  "--seed", "14", "--out", str(o / "fit")]),
            main(["report", "--fit", str(o / "fit"), "--curve", str(o / "cal"), "--seed", "15",
                  "--out", str(o / "report")]),
        ]
        results[run] = (codes, {c: _artifacts(o / c) for c in ("sim", "cal", "prop", "fit", "report")})
    codes_a, art_a = results["a"]
    codes_b, art_b = results["b"]
    same = {c: art_a[c] == art_b[c] for c in art_a}
    ok = codes_a == codes_b == [0] * 5 and all(same.values())
    report("determinism", ok, ", ".join(f"{c} {'identical' if v else 'DIFFERS'}" for c, v in same.items())
           + f" | exit codes {codes_a}")
    assert ok
