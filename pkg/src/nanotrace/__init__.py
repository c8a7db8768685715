"""Traceable nanoparticle size measurement: nested mixed models, Bayesian
posteriors, opinion pooling and Monte Carlo calibration."""

__version__ = "0.1.0"

from .calibration import (
    CalibrationCurve,
    CalibrationPoint,
    build_curve,
    curve_summary,
    ols_quadratic,
    propagate,
    range_check,
)
from .design import (
    EffectsCoding,
    ModelSpec,
    NestedDataset,
    Observation,
    Schema,
    encode_effects,
    parse_dataset,
    validate_design,
    write_dataset,
)
from .diagnostics import diagnostics, ess, split_rhat
from .errors import (
    NanotraceError,
    SchemaError,
    ParseError,
    DesignError,
    NestingError,
    UnbalancedDesignError,
    DegenerateFactorError,
    AliasingError,
    ConvergenceError,
    DiagnosticsError,
    InsufficientDataError,
    SingularDesignError,
)
from .mixed import (
    VarianceComponents,
    anova_moments,
    fit_reml,
    mean_standard_uncertainty,
    test_fixed_effects,
)
from .pdf import EmpiricalPdf, Normal
from .pooling import level_combinations, opinions, pool_opinions, predictive_pdf
from .posterior import (
    PosteriorDraws,
    PriorSpec,
    SamplerConfig,
    pdf_of,
    posterior_to_prior,
    sample_posterior,
)
from .simulate import GroundTruth, generate_dataset, recovery_report
