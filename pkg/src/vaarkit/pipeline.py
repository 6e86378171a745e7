"""Per-group evaluation: fit, robust inference, standardized paths, VAAR."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .sem import (
    ConvergenceError,
    GroupDataset,
    IdentificationError,
    InsufficientData,
    PathEstimate,
    SeError,
    SemFit,
    SemSpec,
    attach_scaling,
    default_spec,
    fit_indices,
    fit_single_group,
    independence_spec,
    invariance_sequence,
    robust_se,
    standardize,
)
from .sem.invariance import Ladder
from .sem.report import group_report, path_dict
from .vaar import FOCAL_PATHS, HUMAN_TEMPLATE, VaarResult, vaar


@dataclass
class GroupEvaluation:
    group: str
    n: int
    converged: bool
    paths: list[PathEstimate] = field(default_factory=list)
    indices: dict = field(default_factory=dict)
    fit: SemFit | None = None
    error: str = ""

    @property
    def evaluable(self) -> bool:
        return self.converged and any(p.estimable for p in self.paths)

    def vaar(self, template: Mapping[str, int] = HUMAN_TEMPLATE) -> VaarResult:
        res = vaar(self.paths, template, self.group, fit_ok=self.converged)
        if self.error and res.status != "ok":
            res.reason = self.error
        return res

    def to_dict(self) -> dict:
        if self.fit is not None:
            d = group_report(self.fit, self.paths, self.indices)
        else:
            d = {"group": self.group, "n": self.n, "converged": False, "paths": [path_dict(p) for p in self.paths]}
        d["converged"] = self.converged
        d["evaluable"] = self.evaluable
        d["error"] = self.error
        return d


def _na_paths(note: str) -> list[PathEstimate]:
    return [PathEstimate(p, float("nan"), None, None, False, note=note) for p in FOCAL_PATHS]


def evaluate_group(dataset: GroupDataset, spec: SemSpec | None = None) -> GroupEvaluation:
    """Fit one group and derive its focal-path estimates.

    Identification and convergence failures are captured as a non-converged
    evaluation with every path non-estimable, never raised.
    """
    spec = spec or default_spec()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = fit_single_group(dataset, spec, strict=False)
    except (IdentificationError, InsufficientData) as exc:
        return GroupEvaluation(dataset.label, dataset.n, False, _na_paths(str(exc)), error=str(exc))
    if not fit.converged:
        return GroupEvaluation(dataset.label, dataset.n, False, _na_paths(fit.message), fit=fit, error=fit.message)
    try:
        robust_se(fit)
    except SeError as exc:
        return GroupEvaluation(dataset.label, dataset.n, False, _na_paths(str(exc)), fit=fit, error=str(exc))
    attach_scaling(fit)
    paths = standardize(fit)
    indices = {}
    try:
        base = fit_single_group(dataset, independence_spec(spec.observed), strict=False, check=False)
        indices = fit_indices(fit, base)
    except (ConvergenceError, IdentificationError):
        pass
    return GroupEvaluation(dataset.label, dataset.n, True, paths, indices, fit)


def ladder_for(evaluations: Sequence[GroupEvaluation], datasets: Sequence[GroupDataset],
               spec: SemSpec | None = None) -> Ladder | None:
    """Invariance ladder over the groups whose own fit converged (None if fewer than two)."""
    ok = {e.group for e in evaluations if e.converged}
    kept = [d for d in datasets if d.label in ok]
    if len(kept) < 2:
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return invariance_sequence(kept, spec)
