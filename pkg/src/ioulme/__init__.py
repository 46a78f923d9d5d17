"""Gaussian mixed-effects models with integrated Ornstein-Uhlenbeck noise.

Exact maximum-likelihood estimation for longitudinal data whose
within-subject serial correlation follows an integrated OU process (or a
fractional Brownian motion variant), with analytic score and information,
studentized standard errors, simulation studies, and asymptotic
diagnostics.
"""

__version__ = "0.1.0"

from .covariance import (
    CovParams,
    GParam,
    KernelKind,
    KernelSpec,
    assemble_q,
    assemble_q_d2v,
    assemble_q_dv,
    g_matrix,
    g_matrix_dgamma,
)
from .data import DataRules, Dataset, SchemaConfig, Subject, ingest_csv, read_csv, validate, write_csv
from .fitting import (
    FitConfig,
    FitResult,
    InformationError,
    Optimizer,
    PositivityTransform,
    fit,
    profile_surface,
    studentize,
    studentized_se,
)
from .kernels import (
    fbm_kernel,
    fbm_kernel_dhurst,
    fbm_kernel_dtau,
    iou_kernel,
    iou_kernel_dalpha,
    iou_kernel_dtau,
)
from .likelihood import (
    CholeskyFailure,
    LikelihoodWorkspace,
    ParamVector,
    fisher_blocks,
    log_likelihood,
    normalized_score,
    observed_information,
    pack,
    score,
)
from .simulate import (
    DesignConfig,
    DesignKind,
    McConfig,
    McReport,
    generate_design,
    mcse,
    run_mc_study,
    simulate_responses,
)

__all__ = [
    "__version__",
    "CovParams",
    "GParam",
    "KernelKind",
    "KernelSpec",
    "assemble_q",
    "assemble_q_dv",
    "assemble_q_d2v",
    "g_matrix",
    "g_matrix_dgamma",
    "DataRules",
    "Dataset",
    "SchemaConfig",
    "Subject",
    "ingest_csv",
    "read_csv",
    "validate",
    "write_csv",
    "FitConfig",
    "FitResult",
    "InformationError",
    "Optimizer",
    "PositivityTransform",
    "fit",
    "profile_surface",
    "studentize",
    "studentized_se",
    "fbm_kernel",
    "fbm_kernel_dhurst",
    "fbm_kernel_dtau",
    "iou_kernel",
    "iou_kernel_dalpha",
    "iou_kernel_dtau",
    "CholeskyFailure",
    "LikelihoodWorkspace",
    "ParamVector",
    "fisher_blocks",
    "log_likelihood",
    "normalized_score",
    "observed_information",
    "pack",
    "score",
    "DesignConfig",
    "DesignKind",
    "McConfig",
    "McReport",
    "generate_design",
    "mcse",
    "run_mc_study",
    "simulate_responses",
]
