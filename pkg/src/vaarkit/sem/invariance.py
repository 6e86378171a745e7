"""Scaled chi-square difference tests and the invariance ladder."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import chi2

from .data import GroupDataset
from .estimation import ConvergenceError, IdentificationError, MgFit, SemFit, fit_multigroup
from .inference import attach_scaling
from .model import LEVELS, SemSpec, default_spec


class NestingError(ValueError):
    pass


@dataclass(frozen=True)
class ScaledDiff:
    delta_T: float | None  # scaled; None when c_d is not positive or a c is missing
    delta_df: int
    p: float | None
    c_d: float | None
    raw_delta_T: float
    note: str = ""


def _check_nested(restricted, free) -> None:
    if restricted.problem is None or free.problem is None:
        raise NestingError("fits must carry their estimation problem")
    if restricted.problem.spec.observed != free.problem.spec.observed:
        raise NestingError("fits use different observed variables")
    r_groups = [d.label for d in restricted.problem.datasets]
    f_groups = [d.label for d in free.problem.datasets]
    if r_groups != f_groups:
        raise NestingError("fits were estimated on different groups")
    for a, b in zip(restricted.problem.datasets, free.problem.datasets):
        if a.rows is not b.rows and not np.array_equal(a.rows, b.rows):
            raise NestingError(f"group {a.label!r} differs between the two fits")
    if isinstance(restricted, MgFit) and isinstance(free, MgFit):
        if restricted.problem.spec != free.problem.spec:
            raise NestingError("multi-group fits use different model specifications")
        if LEVELS.index(restricted.level) <= LEVELS.index(free.level):
            raise NestingError(f"{restricted.level!r} is not more restrictive than {free.level!r}")
    elif isinstance(restricted, SemFit) and isinstance(free, SemFit):
        r_free = {e.label for e in restricted.spec.entries if e.free}
        f_free = {e.label for e in free.spec.entries if e.free}
        # a saturated model nests every model on the same variables
        if free.spec.df != 0 and not r_free <= f_free:
            raise NestingError("restricted specification frees parameters the free one fixes")
    else:
        raise NestingError("cannot compare a single-group fit with a multi-group fit")
    if restricted.df <= free.df:
        raise NestingError(f"restricted df ({restricted.df}) must exceed free df ({free.df})")


def scaled_chisq_diff(fit_restricted: SemFit | MgFit, fit_free: SemFit | MgFit) -> ScaledDiff:
    """Scaled difference of two nested ML chi-squares.

    ``c_d = (df0 c0 - df1 c1) / (df0 - df1)`` and ``dT = (T0 - T1) / c_d``.
    Scaling factors are computed on demand when absent.
    """
    _check_nested(fit_restricted, fit_free)
    df0, df1 = fit_restricted.df, fit_free.df
    T0, T1 = fit_restricted.T, fit_free.T
    ddf = df0 - df1
    c0 = fit_restricted.c if fit_restricted.c is not None else attach_scaling(fit_restricted)
    if df1 == 0:
        c1 = 1.0 if fit_free.c is None else fit_free.c  # a saturated free model contributes df1*c1 = 0
    else:
        c1 = fit_free.c if fit_free.c is not None else attach_scaling(fit_free)
    raw = T0 - T1
    if c0 is None or c1 is None:
        return ScaledDiff(None, ddf, None, None, raw, "scaling factor unavailable (rank-deficient score covariance)")
    c_d = (df0 * c0 - df1 * c1) / ddf
    if not c_d > 0:
        return ScaledDiff(None, ddf, None, c_d, raw, f"negative scaled difference correction (c_d={c_d:.4g})")
    dT = raw / c_d
    return ScaledDiff(dT, ddf, float(chi2.sf(max(dT, 0.0), ddf)), c_d, raw)


@dataclass
class LadderRow:
    level: str
    status: str  # "ok" or "failed"
    df: int | None = None
    T: float | None = None
    c: float | None = None
    delta_T: float | None = None
    delta_df: int | None = None
    p: float | None = None
    note: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Ladder:
    rows: list[LadderRow]
    status: str  # "complete" or "truncated at <level>"
    fits: dict[str, MgFit] = field(default_factory=dict)
    dropped: list = field(default_factory=list)

    def to_dicts(self) -> list[dict]:
        return [r.to_dict() for r in self.rows]


def invariance_sequence(datasets: Sequence[GroupDataset], spec: SemSpec | None = None,
                        configural: MgFit | None = None) -> Ladder:
    """Fit configural, metric, scalar and structural levels in turn, testing
    each against the previous one. A failed level truncates the ladder."""
    spec = spec or default_spec()
    if len(datasets) < 2:
        raise ValueError("the invariance ladder needs at least two groups")
    base = configural or fit_multigroup(datasets, spec, "configural")
    if not base.converged:
        raise ConvergenceError("configural fit did not converge")
    if len(base.groups) < 2:
        raise ValueError("fewer than two groups survived the configural fit")
    kept = [d for d in datasets if d.label in set(base.group_labels)]
    attach_scaling(base)
    rows = [LadderRow("configural", "ok", base.df, base.T, base.c)]
    fits = {"configural": base}
    prev = base
    status = "complete"
    for level in LEVELS[1:]:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fit = fit_multigroup(kept, spec, level, start=prev)
        except (ConvergenceError, IdentificationError) as exc:
            rows.append(LadderRow(level, "failed", note=str(exc)))
            status = f"truncated at {level}"
            break
        attach_scaling(fit)
        d = scaled_chisq_diff(fit, prev)
        rows.append(LadderRow(level, "ok", fit.df, fit.T, fit.c, d.delta_T, d.delta_df, d.p, d.note))
        fits[level] = fit
        prev = fit
    return Ladder(rows, status, fits, list(base.dropped))
