"""Robust (sandwich) standard errors, scaled test statistics, standardized
solutions and global fit indices."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import GroupDataset
from .estimation import MgFit, Problem, SemFit


class SeError(RuntimeError):
    """The information matrix is singular; standard errors are unavailable."""


@dataclass
class Sandwich:
    vcov: np.ndarray  # robust, over global parameters
    naive: np.ndarray  # inverse observed information
    A: np.ndarray
    B: np.ndarray


def sandwich(problem: Problem, theta) -> Sandwich:
    """``A^-1 B A^-1 / N`` with A the average negative Hessian of the casewise
    log-likelihood and B the average outer product of casewise scores."""
    A = 0.5 * problem.numeric_hessian(theta)
    scores = problem.casewise_scores(theta)
    B = scores.T @ scores / problem.N
    eig = np.linalg.eigvalsh(A)
    if eig[0] <= 0 or eig[0] / eig[-1] < 1e-12:
        raise SeError("average negative Hessian is singular or indefinite")
    Ainv = np.linalg.inv(A)
    Ainv = 0.5 * (Ainv + Ainv.T)
    V = Ainv @ B @ Ainv / problem.N
    return Sandwich(0.5 * (V + V.T), Ainv / problem.N, A, B)


def robust_se(fit: SemFit | MgFit, dataset: GroupDataset | None = None) -> dict[str, float]:
    """Attach robust parameter covariances to ``fit`` and return SEs by label.

    For a multi-group fit the labels are the global parameter labels and each
    group view receives the block of its own entries.
    """
    if not fit.converged:
        raise SeError("fit did not converge")
    problem = fit.problem
    if problem is None:
        if dataset is None or not isinstance(fit, SemFit):
            raise ValueError("dataset is required for a detached fit")
        problem = Problem(fit.spec, [dataset])
    if isinstance(fit, MgFit):
        theta = fit.theta
        groups = fit.groups
    else:
        if problem.G != 1:
            raise ValueError("group views of a multi-group fit take their SEs from robust_se(mgfit)")
        theta = problem.start([fit.values])
        groups = [fit]
    sw = sandwich(problem, theta)
    se = np.sqrt(np.clip(np.diag(sw.vcov), 0.0, None))
    for g, gf in enumerate(groups):
        fe = problem.free_entries[g]
        idx = problem.index[g][fe]
        gf.vcov = sw.vcov[np.ix_(idx, idx)]
        gf.naive_vcov = sw.naive[np.ix_(idx, idx)]
        gf.ses = {problem.spec.entries[k].label: float(se[i]) for k, i in zip(fe, idx)}
    if isinstance(fit, MgFit):
        fit.vcov = sw.vcov
    return dict(zip(problem.labels, map(float, se)))


def scaling_factor(problem: Problem, theta) -> float | None:
    """Scaling correction ``c = tr(U Gamma) / df`` for the ML chi-square.

    Written as ``[tr(Am^-1 Bm) - tr((J'AmJ)^-1 J'BmJ)] / df`` with ``Am`` the
    expected moment information, ``Bm`` the casewise moment-score outer
    product and ``J`` the model Jacobian. ``None`` when df is 0 or Bm is
    rank deficient.
    """
    df = problem.df
    if df <= 0:
        return None
    total_sat = 0.0
    JAJ = np.zeros((problem.q, problem.q))
    JBJ = np.zeros((problem.q, problem.q))
    for g in range(problem.G):
        sigma, _ = problem.layout.implied(problem.values(theta, g))
        Am = problem.moment_weight(sigma)
        m = problem.moment_scores(theta, g)
        Bm = m.T @ m / problem.n[g]
        eig = np.linalg.eigvalsh(Bm)
        if eig[0] <= 1e-12 * eig[-1]:
            return None
        total_sat += np.trace(np.linalg.solve(Am, Bm))
        J = problem.jacobian(theta, g)
        JAJ += problem.w[g] * J.T @ Am @ J
        JBJ += problem.w[g] * J.T @ Bm @ J
    c = (total_sat - np.trace(np.linalg.solve(JAJ, JBJ))) / df
    return float(c) if c > 0 else None


def attach_scaling(fit: SemFit | MgFit) -> float | None:
    if fit.problem is None:
        return None
    theta = fit.theta if isinstance(fit, MgFit) else fit.problem.start([fit.values])
    fit.c = scaling_factor(fit.problem, theta)
    return fit.c


# ---------------------------------------------------------------------------
# standardized solution


@dataclass(frozen=True)
class PathEstimate:
    path: str
    beta: float  # standardized coefficient
    se: float | None
    z: float | None
    estimable: bool
    raw: float = float("nan")
    note: str = ""


def _std_value(fit: SemFit, values, outcome: int, factor: int, entry: int) -> float:
    lay = fit.problem.layout if fit.problem is not None else None
    if lay is None:
        from .model import Layout

        lay = Layout(fit.spec)
    lam, phi, _, _, _ = lay.matrices(values)
    sigma, _ = lay.implied(values)
    var_f, var_y = phi[factor, factor], sigma[outcome, outcome]
    if not (var_f > 0 and var_y > 0):
        return float("nan")
    return values[entry] * math.sqrt(var_f) / math.sqrt(var_y)


def _delta_se(fit: SemFit, fn) -> float:
    fe = fit.free_entries
    base = fit.values
    grad = np.zeros(len(fe))
    for i, k in enumerate(fe):
        h = 1e-6 * max(1.0, abs(base[k]))
        vp, vm = base.copy(), base.copy()
        vp[k] += h
        vm[k] -= h
        grad[i] = (fn(vp) - fn(vm)) / (2 * h)
    var = grad @ fit.vcov @ grad
    return math.sqrt(var) if var > 0 else float("nan")


def standardize(fit: SemFit, which: str = "focal") -> list[PathEstimate]:
    """Standardized (all-variables) coefficients with delta-method SEs.

    ``which`` selects the focal regressions or the measurement ``"loadings"``.
    Requires :func:`robust_se` to have been applied to the fit.
    """
    targets = fit.spec.focal if which == "focal" else {
        label: (ind, fac, label) for label, (ind, fac) in fit.spec.loadings.items()
    }
    out = []
    for path, (outcome, factor, label) in targets.items():
        entry = fit.spec.entry_index(label)
        raw = float(fit.values[entry])
        if not fit.converged:
            out.append(PathEstimate(path, float("nan"), None, None, False, raw, "fit not converged"))
            continue
        if fit.vcov is None:
            raise SeError("robust_se must be computed before standardizing")

        def fn(v, outcome=outcome, factor=factor, entry=entry):
            return _std_value(fit, v, outcome, factor, entry)

        beta = float(fn(fit.values))
        if not math.isfinite(beta):
            out.append(PathEstimate(path, beta, None, None, False, raw, "zero or negative implied variance"))
            continue
        se = _delta_se(fit, fn)
        if not (math.isfinite(se) and se > 0):
            out.append(PathEstimate(path, beta, None, None, False, raw, "standard error unavailable"))
            continue
        out.append(PathEstimate(path, beta, se, beta / se, True, raw))
    return out


# ---------------------------------------------------------------------------
# fit indices


def srmr(fit: SemFit) -> float:
    """Root mean square of standardized covariance and mean residuals."""
    sample = fit.problem.sample[_group_pos(fit)]
    S, xbar = sample.S, sample.mean
    sd = np.sqrt(np.diag(S))
    a, b = np.tril_indices(len(sd))
    cov_res = (S[a, b] - fit.sigma[a, b]) / (sd[a] * sd[b])
    mean_res = (xbar - fit.mu) / sd
    res = np.concatenate([cov_res, mean_res])
    return float(np.sqrt(np.mean(res**2)))


def _group_pos(fit: SemFit) -> int:
    return [d.label for d in fit.problem.datasets].index(fit.group)


def fit_indices(fit: SemFit | MgFit, baseline_fit: SemFit | MgFit) -> dict[str, float | None]:
    """CFI, TLI, RMSEA and SRMR against an independence baseline.

    ``None`` marks an undefined index (TLI at df 0, RMSEA at df 0 with
    positive misfit).
    """
    T, df, n = max(fit.T, 0.0), fit.df, fit.n
    Tb, dfb = max(baseline_fit.T, 0.0), baseline_fit.df
    num = max(T - df, 0.0)
    den = max(Tb - dfb, T - df, 0.0)
    cfi = 1.0 - num / den if den > 0 else 1.0
    if df > 0 and dfb > 0 and Tb / dfb != 1.0:
        tli = ((Tb / dfb) - (T / df)) / ((Tb / dfb) - 1.0)
    else:
        tli = None
    groups = fit.groups if isinstance(fit, MgFit) else [fit]
    if df > 0:
        # multi-group RMSEA carries the usual sqrt(G) factor
        rmsea = math.sqrt(len(groups)) * math.sqrt(num / (df * n))
    elif T <= 1e-8:
        rmsea = 0.0
    else:
        rmsea = None
    total = sum(g.n for g in groups)
    sr = math.sqrt(sum(g.n * srmr(g) ** 2 for g in groups) / total)
    return {"CFI": cfi, "TLI": tli, "RMSEA": rmsea, "SRMR": sr}
