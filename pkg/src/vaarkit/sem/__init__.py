"""Maximum-likelihood SEM for the fixed privacy / prosocial / data-sharing model."""

from .data import GroupDataset, InsufficientData, SampleMoments, moments, parse_datasets, read_datasets, write_datasets
from .estimation import (
    ConvergenceError,
    IdentificationError,
    MgFit,
    SemFit,
    check_identified,
    fit_multigroup,
    fit_single_group,
)
from .inference import PathEstimate, SeError, attach_scaling, fit_indices, robust_se, srmr, standardize
from .invariance import Ladder, LadderRow, NestingError, ScaledDiff, invariance_sequence, scaled_chisq_diff
from .model import (
    LEVELS,
    SemSpec,
    default_spec,
    independence_spec,
    mean_only_spec,
    ols_spec,
    saturated_spec,
)

__all__ = [
    "GroupDataset", "InsufficientData", "SampleMoments", "moments", "parse_datasets", "read_datasets",
    "write_datasets", "ConvergenceError", "IdentificationError", "MgFit", "SemFit", "check_identified",
    "fit_multigroup", "fit_single_group", "PathEstimate", "SeError", "attach_scaling", "fit_indices",
    "robust_se", "srmr", "standardize", "Ladder", "LadderRow", "NestingError", "ScaledDiff",
    "invariance_sequence", "scaled_chisq_diff", "LEVELS", "SemSpec", "default_spec", "independence_spec",
    "mean_only_spec", "ols_spec", "saturated_spec",
]
