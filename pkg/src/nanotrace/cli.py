"""Command-line front end: fit, calibrate, propagate, simulate, report.

Exit codes: 0 success, 2 data/model error, 3 diagnostics failure
(artifacts still written), 64 usage error.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    MIN_DRAWS,
    CalibrationCurve,
    CalibrationPoint,
    build_curve,
    curve_summary,
    propagate,
    range_check,
)
from .design import EffectsCoding, ModelSpec, Schema, parse_dataset, validate_design, write_dataset
from .diagnostics import diagnostics
from .errors import DiagnosticsError, NanotraceError
from .mixed import VarianceComponents, fit_reml, mean_standard_uncertainty, test_fixed_effects
from .pdf import EmpiricalPdf, Normal
from .pooling import level_combinations, opinions, pool_opinions, predictive_pdf
from .posterior import (
    PosteriorDraws,
    PriorSpec,
    SamplerConfig,
    posterior_summary,
    posterior_to_prior,
    sample_posterior,
)
from .simulate import GroundTruth, generate_dataset

EXIT_OK, EXIT_DATA, EXIT_DIAG, EXIT_USAGE = 0, 2, 3, 64

log = logging.getLogger("nanotrace")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"{text!r} is not a positive integer")
    return value


def _seed(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


# ---------------------------------------------------------------------------
# helpers


def _write_json(path: Path, data) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


PATH_KEYS = {"data", "schema", "model", "prior", "prior_from", "curve", "fit", "samples", "truth", "points"}


def _digest(path: Path) -> str:
    """Content hash of an input file or artifact directory (run.log excluded)."""
    h = hashlib.sha256()
    files = sorted(p for p in path.iterdir() if p.is_file() and p.name != "run.log") if path.is_dir() else [path]
    for f in files:
        h.update(f.name.encode() if path.is_dir() else b"")
        h.update(f.read_bytes())
    return h.hexdigest()


def _config_hash(cfg: dict) -> str:
    """Hash of the effective configuration; inputs enter by content, not by path."""
    keep = {}
    for k, v in cfg.items():
        if k in {"out", "config", "command", "func"} or k.startswith("_"):
            continue
        if k in PATH_KEYS and isinstance(v, str):
            p = _resolve(cfg, v)
            v = {"sha256": _digest(p)} if p.exists() else v
        keep[k] = v
    blob = json.dumps(keep, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _provenance(cfg: dict) -> dict:
    if "_provenance" not in cfg:
        cfg["_provenance"] = {"software": f"nanotrace {__version__}", "seed": cfg.get("seed"),
                              "config_sha256": _config_hash(cfg)}
    return dict(cfg["_provenance"])


def _merge_config(args, defaults: dict) -> dict:
    """Command line wins over the --config file, which wins over defaults."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        try:
            file_cfg = _read_json(args.config)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        base = Path(args.config).parent
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        file_cfg["_base"] = str(base)
        cfg.update(file_cfg)
    for k, v in vars(args).items():
        if v is not None and k not in {"func"}:
            cfg[k] = v
    cfg.setdefault("_base", ".")
    return cfg


def _resolve(cfg: dict, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() or "_base" not in cfg else Path(cfg["_base"]) / p


def _out_dir(cfg: dict) -> Path:
    if not cfg.get("out"):
        raise UsageError("--out is required")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _start_log(out: Path, command: str) -> logging.Handler:
    handler = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    log.info("nanotrace %s %s started %s", __version__, command,
             _dt.datetime.now(_dt.timezone.utc).isoformat())
    return handler


def _histogram(pdf: EmpiricalPdf, out: Path, stem: str, bins: int, label: str) -> None:
    counts, edges = pdf.histogram(bins)
    with open(out / f"{stem}.csv", "w", encoding="utf-8") as fh:
        fh.write("left,right,count\n")
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            fh.write(f"{float(lo)!r},{float(hi)!r},{int(c)}\n")
    (out / f"{stem}.svg").write_text(_svg(counts, edges, label), encoding="utf-8")


def _svg(counts, edges, label: str, width=480, height=300) -> str:
    pad = 40
    top = max(int(counts.max()), 1)
    bw = (width - 2 * pad) / len(counts)
    bars = []
    for i, c in enumerate(counts):
        h = (height - 2 * pad) * c / top
        bars.append(f'<rect x="{pad + i * bw:.2f}" y="{height - pad - h:.2f}" '
                    f'width="{bw:.2f}" height="{h:.2f}" fill="#4477aa"/>')
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="13">{label}</text>\n'
        + "\n".join(bars)
        + f'\n<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>\n'
        f'<text x="{pad}" y="{height - pad + 16}" font-size="11">{edges[0]:.2f}</text>\n'
        f'<text x="{width - pad}" y="{height - pad + 16}" text-anchor="end" font-size="11">'
        f'{edges[-1]:.2f} nm</text>\n</svg>\n'
    )


def _load_model(cfg) -> ModelSpec:
    model = cfg.get("model")
    if model is None:
        return ModelSpec()
    if isinstance(model, dict):
        return ModelSpec.from_dict(model)
    return ModelSpec.from_dict(_read_json(_resolve(cfg, model)))


def _load_schema(cfg) -> Schema:
    schema = cfg.get("schema")
    if schema is None:
        return Schema()
    if isinstance(schema, dict):
        return Schema.from_dict(schema)
    return Schema.load(_resolve(cfg, schema))


def _measured_from(spec: dict, cfg: dict):
    if "samples" in spec:
        return EmpiricalPdf.from_csv(_resolve(cfg, spec["samples"]), spec.get("column"))
    return Normal(float(spec["mean"]), float(spec["sd"]))


# ---------------------------------------------------------------------------
# commands


def cmd_fit(cfg: dict) -> int:
    out = _out_dir(cfg)
    _start_log(out, "fit")
    if not cfg.get("data"):
        raise UsageError("fit needs --data")
    d = parse_dataset(_resolve(cfg, cfg["data"]), _load_schema(cfg))
    spec = _load_model(cfg)
    summary = validate_design(d)
    log.info("dataset %s: n=%d, I=%d, balanced=%s", d.sample_id, summary.n, summary.I, summary.balanced)

    full = fit_reml(d, spec)
    report = test_fixed_effects(full, d, spec, alpha=cfg["alpha"])
    reduced_spec = report.reduced(spec)
    reduced = fit_reml(d, reduced_spec) if reduced_spec != spec else full

    if cfg.get("prior_from"):
        src = Path(_resolve(cfg, cfg["prior_from"]))
        prev = _read_json(src / "fit.json")
        prev_draws = PosteriorDraws.from_csv(src / "draws.csv")
        prior = posterior_to_prior(prev_draws, cfg["inflation"])
        log.info("prior chained from %s (fit %s)", src, prev["provenance"]["config_sha256"])
    elif cfg.get("prior"):
        prior = PriorSpec.from_dict(_read_json(_resolve(cfg, cfg["prior"])))
    else:
        prior = PriorSpec.default(d)

    sampler = SamplerConfig(cfg["chains"], cfg["warmup"], cfg["draws"], cfg["seed"], cfg["threads"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        draws = sample_posterior(d, reduced_spec, prior, sampler)
    draws.to_csv(out / "draws.csv")
    diag = diagnostics(draws) if sampler.chains >= 2 else None

    fit_doc = {
        "provenance": _provenance(cfg),
        "sample_id": d.sample_id,
        "design": {"I": summary.I, "J": list(summary.J), "K": list(summary.K),
                   "n_ijk": list(summary.n_ijk), "n": summary.n, "balanced": summary.balanced,
                   "factor_levels": summary.factor_levels},
        "factor_catalog": {k: list(v) for k, v in d.factor_catalog.items()},
        "model_full": spec.to_dict(),
        "model_reduced": reduced_spec.to_dict(),
        "reml_full": full.to_dict(),
        "reml_reduced": reduced.to_dict(),
        "prior": prior.to_dict(),
        "sampler": sampler.to_dict(),
        "coding": draws.coding.to_dict(),
        "posterior": posterior_summary(draws),
    }
    if summary.balanced:
        u_fixed = [e.u_main for e in reduced.effects if ":" not in e.term]
        fit_doc["closed_form_sd_mean_nm"] = mean_standard_uncertainty(
            reduced.components, summary, u_fixed)
    _write_json(out / "fit.json", fit_doc)
    _write_json(out / "significance.json", {"provenance": _provenance(cfg), **report.to_dict()})
    _write_json(out / "diagnostics.json", {
        "provenance": _provenance(cfg),
        **(diag.to_dict() if diag else {"passed": False, "note": "single chain"}),
    })
    if diag is not None and diag.passed:
        _write_json(out / "prior_next.json", posterior_to_prior(draws, cfg["inflation"]).to_dict())
    if diag is None or not diag.passed:
        msg = diag.message() if diag else "single chain: diagnostics unavailable"
        log.warning(msg)
        print(msg, file=sys.stderr)
        return EXIT_DIAG
    return EXIT_OK


def cmd_calibrate(cfg: dict) -> int:
    out = _out_dir(cfg)
    _start_log(out, "calibrate")
    N = cfg["N"]
    if not isinstance(N, int) or N < MIN_DRAWS:
        raise UsageError(f"N must be an integer >= {MIN_DRAWS}, got {N!r}")
    raw = cfg.get("points")
    if raw is None:
        raise UsageError("calibrate needs calibration points (config key 'points')")
    if isinstance(raw, str):
        raw = _read_json(_resolve(cfg, raw))["points"]
    points = [CalibrationPoint(_measured_from(p["measured"], cfg),
                               Normal(float(p["certified"]["mean"]), float(p["certified"]["sd"])),
                               p.get("name", f"P{i + 1}"))
              for i, p in enumerate(raw)]
    curve = build_curve(points, N, cfg["seed"])
    curve.to_csv(out / "curve_draws.csv")
    _write_json(out / "curve.json", {"provenance": _provenance(cfg), **curve.metadata()})
    _write_json(out / "summary.json", {"provenance": _provenance(cfg), **curve_summary(curve)})
    log.info("curve built: N=%d, rejected=%d", curve.N, curve.rejected)
    return EXIT_OK


def _load_measured(cfg) -> object:
    if cfg.get("samples"):
        return EmpiricalPdf.from_csv(_resolve(cfg, cfg["samples"]), cfg.get("column"))
    if cfg.get("mean") is None or cfg.get("sd") is None:
        raise UsageError("give --samples or both --mean and --sd")
    return Normal(float(cfg["mean"]), float(cfg["sd"]))


def cmd_propagate(cfg: dict) -> int:
    out = _out_dir(cfg)
    _start_log(out, "propagate")
    if not cfg.get("curve"):
        raise UsageError("propagate needs --curve")
    curve = CalibrationCurve.load(_resolve(cfg, cfg["curve"]))
    q_m = _load_measured(cfg)
    msgs = range_check(curve, q_m)
    for m in msgs:
        print(f"warning: {m}", file=sys.stderr)
        log.warning(m)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        q_c = propagate(curve, q_m, cfg["seed"])
    q_c.to_csv(out / "certified_samples.csv")
    measured = (q_m.summary() if isinstance(q_m, EmpiricalPdf)
                else {"kind": "normal", **q_m.to_dict()})
    _write_json(out / "summary.json", {
        "provenance": _provenance(cfg),
        "measured": measured,
        "certified": q_c.summary(),
        "warnings": msgs,
    })
    _histogram(q_c, out, "histogram", cfg["bins"], cfg.get("label") or "certified quantity")
    return EXIT_OK


def cmd_simulate(cfg: dict) -> int:
    out = _out_dir(cfg)
    _start_log(out, "simulate")
    if cfg.get("truth"):
        truth = GroundTruth.load(_resolve(cfg, cfg["truth"]))
    else:
        dims = cfg.get("dims")
        if dims is None:
            raise UsageError("simulate needs --truth or --dims I J K n")
        try:
            truth = GroundTruth(float(cfg["intercept"]),
                                VarianceComponents(*cfg["components"]), tuple(dims))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if min(truth.dims) < 1:
        raise UsageError("design dims must be positive")
    d = generate_dataset(truth, cfg["seed"], sample_id=cfg.get("sample_id") or "synthetic")
    write_dataset(d, out / "dataset.csv")
    _write_json(out / "truth.json", {"provenance": _provenance(cfg), **truth.to_dict()})
    return EXIT_OK


def cmd_report(cfg: dict) -> int:
    out = _out_dir(cfg)
    _start_log(out, "report")
    if not cfg.get("fit") or not cfg.get("curve"):
        raise UsageError("report needs --fit and --curve")
    fit_dir = Path(_resolve(cfg, cfg["fit"]))
    fit = _read_json(fit_dir / "fit.json")
    coding = EffectsCoding.from_dict(fit["coding"])
    spec = ModelSpec.from_dict(fit["model_reduced"])
    draws = PosteriorDraws.from_csv(fit_dir / "draws.csv", coding, spec)
    curve = CalibrationCurve.load(_resolve(cfg, cfg["curve"]))

    combos = level_combinations(spec, levels=coding.levels)
    op = opinions(draws, combos)
    size = cfg["size"]
    seeds = np.random.SeedSequence(cfg["seed"]).generate_state(3)
    mu_m = pool_opinions(op, size)
    h_m = predictive_pdf(draws, op, seed=int(seeds[0]), size=size)
    results = {"mu_m": mu_m, "h_m": h_m}
    warn = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for name, src, s in (("mu_c", mu_m, seeds[1]), ("h_c", h_m, seeds[2])):
            warn[name] = range_check(curve, src)
            results[name] = propagate(curve, src, seed=int(s))
    for name, pdf in results.items():
        pdf.to_csv(out / f"{name}_samples.csv")
        _histogram(pdf, out, f"{name}_histogram", cfg["bins"], name)
    table = {name: pdf.summary() for name, pdf in results.items()}
    _write_json(out / "report.json", {
        "provenance": _provenance(cfg),
        "sample_id": fit.get("sample_id"),
        "combinations": len(combos),
        "summaries": table,
        "warnings": warn,
    })
    lines = ["| quantity | E [nm] | SD [nm] | 2.5% | 97.5% |", "|---|---|---|---|---|"]
    for name, s in table.items():
        lines.append(f"| {name} | {s['mean']:.2f} | {s['sd']:.2f} | {s['q025']:.2f} | {s['q975']:.2f} |")
    (out / "report.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--config", help="JSON file with option values (command line wins)")
    p.add_argument("--seed", type=_seed)
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=_positive_int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nanotrace", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"nanotrace {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("fit", help="REML screening + posterior sampling of a campaign")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--schema", help="JSON column mapping")
    p.add_argument("--model", help="JSON model structure")
    p.add_argument("--prior", help="JSON prior specification")
    p.add_argument("--prior-from", help="earlier fit output directory to chain from")
    p.add_argument("--inflation", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--chains", type=_positive_int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--draws", type=_positive_int)
    p.set_defaults(func=cmd_fit, _defaults=dict(seed=0, threads=1, alpha=0.05, inflation=1.0,
                                                chains=4, warmup=1000, draws=1000))

    p = sub.add_parser("calibrate", help="Monte Carlo quadratic calibration curve")
    _common(p)
    p.add_argument("--points", help="JSON file with a 'points' list")
    p.add_argument("--N", type=_positive_int, help="number of regression replicates")
    p.set_defaults(func=cmd_calibrate, _defaults=dict(seed=0, threads=1, N=100_000))

    p = sub.add_parser("propagate", help="carry a measured PDF through a curve")
    _common(p)
    p.add_argument("--curve", help="calibrate output directory")
    p.add_argument("--samples", help="CSV of measured-quantity samples")
    p.add_argument("--column")
    p.add_argument("--mean", type=float)
    p.add_argument("--sd", type=float)
    p.add_argument("--bins", type=_positive_int)
    p.add_argument("--label")
    p.set_defaults(func=cmd_propagate, _defaults=dict(seed=0, threads=1, bins=60))

    p = sub.add_parser("simulate", help="synthetic campaign with known truth")
    _common(p)
    p.add_argument("--truth", help="JSON ground truth")
    p.add_argument("--dims", type=_positive_int, nargs=4, metavar=("I", "J", "K", "N_IJK"))
    p.add_argument("--components", type=float, nargs=4,
                   metavar=("DAY", "POS", "IM", "RES"), help="variances in nm^2")
    p.add_argument("--intercept", type=float)
    p.add_argument("--sample-id")
    p.set_defaults(func=cmd_simulate, _defaults=dict(seed=0, threads=1, intercept=0.0,
                                                     components=[0.16, 0.88, 0.0, 7.61]))

    p = sub.add_parser("report", help="pooled measured and certified PDFs")
    _common(p)
    p.add_argument("--fit", help="fit output directory")
    p.add_argument("--curve", help="calibrate output directory")
    p.add_argument("--size", type=_positive_int)
    p.add_argument("--bins", type=_positive_int)
    p.set_defaults(func=cmd_report, _defaults=dict(seed=0, threads=1, size=100_000, bins=60))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    func = args.func
    defaults = args._defaults
    del args._defaults
    handler = None
    try:
        cfg = _merge_config(args, defaults)
        cfg.pop("func", None)
        code = func(cfg)
    except UsageError as exc:
        print(f"nanotrace: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DiagnosticsError as exc:
        print(f"nanotrace: {exc}", file=sys.stderr)
        return EXIT_DIAG
    except (NanotraceError, ValueError, KeyError, OSError) as exc:
        print(f"nanotrace: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        for h in list(log.handlers):
            h.close()
            log.removeHandler(h)
    return code


if __name__ == "__main__":
    sys.exit(main())
