"""Maximum likelihood estimation of single- and multi-group models."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data import GroupDataset, SampleMoments, moments
from .model import LEVEL_CLASSES, LEVEL_FREED, LEVELS, Layout, SemSpec, default_spec, duplication_matrix

RCOND_MIN = 1e-10
GTOL = 1e-6
XTOL = 1e-9
MAXITER = 500
# keep iterating past GTOL while it is cheap; standardized solutions need the extra digits
POLISH_GTOL = 1e-10


class IdentificationError(RuntimeError):
    """The sample covariance is too ill-conditioned, or the model is not identified."""


class ConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    converged: bool
    iterations: int
    message: str
    trace: list[float] = field(default_factory=list)

    @property
    def grad_norm(self) -> float:
        return float(np.max(np.abs(self.grad))) if len(self.grad) else 0.0


def quasi_newton(fun_grad, x0, H0=None, gtol=GTOL, xtol=XTOL, maxiter=MAXITER, polish_gtol=POLISH_GTOL):
    """BFGS with Armijo backtracking.

    ``fun_grad`` returns ``(f, grad)`` and may return ``inf`` for infeasible
    points, which the line search backs away from. ``H0`` is the initial
    inverse-Hessian approximation. Converged means ``max|grad| < gtol``.
    """
    x = np.array(x0, dtype=float)
    n = len(x)
    H0 = np.eye(n) if H0 is None else np.array(H0, dtype=float)
    H = H0.copy()
    f, g = fun_grad(x)
    if not np.isfinite(f):
        raise ConvergenceError("objective is not finite at the starting values")
    trace = [f]
    message = "iteration limit reached"
    it = 0
    resets = 0
    for it in range(1, maxiter + 1):
        gmax = np.max(np.abs(g)) if n else 0.0
        if gmax < polish_gtol:
            message = "gradient tolerance reached"
            it -= 1
            break
        d = -H @ g
        gd = g @ d
        if not gd < 0:
            H = H0.copy()
            d = -H @ g
            gd = g @ d
        step = 1.0
        accepted = False
        for _ in range(60):
            xn = x + step * d
            fn, gn = fun_grad(xn)
            if np.isfinite(fn) and (fn <= f + 1e-4 * step * gd or (fn <= f and np.max(np.abs(gn)) < gmax)):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if resets < 2 and not np.allclose(H, H0):
                H = H0.copy()
                resets += 1
                continue
            message = "line search failed"
            break
        s = xn - x
        y = gn - g
        sy = s @ y
        if sy > 1e-14 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            Hy = H @ y
            H = H + (rho * rho * (y @ Hy) + rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
        x, f, g = xn, fn, gn
        trace.append(f)
        if np.max(np.abs(s)) < xtol:
            message = "step tolerance reached"
            break
    gmax = float(np.max(np.abs(g))) if n else 0.0
    return OptimResult(x, f, g, gmax < gtol, it, message, trace)


# ---------------------------------------------------------------------------
# the estimation problem


class Problem:
    """Joint ML discrepancy over groups, with parameters shared per level."""

    def __init__(self, spec: SemSpec, datasets: Sequence[GroupDataset], level: str = "configural",
                 sample: Sequence[SampleMoments] | None = None):
        if level not in LEVELS:
            raise ValueError(f"unknown level {level!r}")
        labels = [d.label for d in datasets]
        if len(set(labels)) != len(labels):
            raise ValueError("group labels must be unique")
        self.spec = spec
        self.level = level
        self.layout = Layout(spec)
        self.datasets = list(datasets)
        self.sample = list(sample) if sample is not None else [moments(d.rows) for d in self.datasets]
        self.n = np.array([s.n for s in self.sample], dtype=float)
        self.N = float(self.n.sum())
        self.w = self.n / self.N
        self.G = len(self.sample)
        self._build_table()
        self._logdetS = []
        for s in self.sample:
            sign, ld = np.linalg.slogdet(s.S)
            self._logdetS.append(ld if sign > 0 else -np.inf)
        self._W = None

    # parameter table -------------------------------------------------------
    def _build_table(self):
        classes = LEVEL_CLASSES[self.level]
        freed = LEVEL_FREED[self.level]
        keys: dict[str, int] = {}
        self.labels: list[str] = []
        self.index = []
        self.fixed = []
        multi = self.G > 1
        for g, ds in enumerate(self.datasets):
            idx = np.full(len(self.spec.entries), -1, dtype=int)
            fixed = np.zeros(len(self.spec.entries))
            for k, e in enumerate(self.spec.entries):
                fixed[k] = e.value
                free_here = e.free or (e.group_class in freed and g > 0)
                if not free_here:
                    continue
                if e.free and e.group_class in classes:
                    key = e.label
                else:
                    key = f"{e.label}@{ds.label}" if multi else e.label
                if key not in keys:
                    keys[key] = len(self.labels)
                    self.labels.append(key)
                idx[k] = keys[key]
            self.index.append(idx)
            self.fixed.append(fixed)
        self.q = len(self.labels)
        self.free_entries = [np.flatnonzero(idx >= 0) for idx in self.index]

    @property
    def df(self) -> int:
        return int(self.G * self.spec.n_moments - self.q)

    def values(self, theta, g):
        v = self.fixed[g].copy()
        fe = self.free_entries[g]
        v[fe] = theta[self.index[g][fe]]
        return v

    # discrepancy -------------------------------------------------------------
    def group_terms(self, theta, g, with_grad=True):
        lay = self.layout
        v = self.values(theta, g)
        sigma, mu = lay.implied(v)
        try:
            cf = cho_factor(sigma, lower=True)
        except np.linalg.LinAlgError:
            return np.inf, None
        s = self.sample[g]
        Sinv = cho_solve(cf, np.eye(lay.p))
        logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
        d = s.mean - mu
        Sinv_d = Sinv @ d
        F = logdet + np.sum(s.S * Sinv) - self._logdetS[g] - lay.p + d @ Sinv_d
        if not with_grad:
            return F, None
        G = Sinv - Sinv @ (s.S + np.outer(d, d)) @ Sinv
        h = -2.0 * Sinv_d
        return F, lay.value_gradient(v, G, h)

    def objective(self, theta):
        F = 0.0
        grad = np.zeros(self.q)
        for g in range(self.G):
            Fg, gg = self.group_terms(theta, g)
            if not np.isfinite(Fg):
                return np.inf, grad
            F += self.w[g] * Fg
            fe = self.free_entries[g]
            np.add.at(grad, self.index[g][fe], self.w[g] * gg[fe])
        return F, grad

    def group_discrepancies(self, theta):
        return np.array([self.group_terms(theta, g, with_grad=False)[0] for g in range(self.G)])

    # derivatives in moment space ------------------------------------------
    def moment_weight(self, sigma):
        """Per-observation expected information for (vech Sigma, mu)."""
        p = self.layout.p
        Sinv = np.linalg.inv(sigma)
        D = duplication_matrix(p)
        Wc = 0.5 * D.T @ np.kron(Sinv, Sinv) @ D
        nc = Wc.shape[0]
        W = np.zeros((nc + p, nc + p))
        W[:nc, :nc] = Wc
        W[nc:, nc:] = Sinv
        return W

    def jacobian(self, theta, g):
        """d(vech Sigma_g, mu_g) / d theta as a (moments x q) matrix."""
        fe = self.free_entries[g]
        Jl = self.layout.jacobian(self.values(theta, g), fe)
        J = np.zeros((self.layout.n_moments, self.q))
        np.add.at(J.T, self.index[g][fe], Jl.T)
        return J

    def expected_hessian(self, theta):
        """Expected second derivative of the weighted discrepancy."""
        H = np.zeros((self.q, self.q))
        for g in range(self.G):
            sigma, _ = self.layout.implied(self.values(theta, g))
            J = self.jacobian(theta, g)
            H += 2.0 * self.w[g] * J.T @ self.moment_weight(sigma) @ J
        return H

    def moment_scores(self, theta, g):
        """Casewise derivatives of the log-likelihood with respect to (vech Sigma, mu)."""
        lay = self.layout
        sigma, mu = lay.implied(self.values(theta, g))
        Sinv = np.linalg.inv(sigma)
        R = (self.datasets[g].rows - mu) @ Sinv
        a, b = lay.tril
        cov = 0.5 * lay.vech_weight * (R[:, a] * R[:, b] - Sinv[a, b])
        return np.hstack([cov, R])

    def casewise_scores(self, theta):
        """(N x q) matrix of per-observation score vectors, stacked by group."""
        blocks = [self.moment_scores(theta, g) @ self.jacobian(theta, g) for g in range(self.G)]
        return np.vstack(blocks)

    def numeric_hessian(self, theta, rel_step=1e-5):
        H = np.zeros((self.q, self.q))
        for k in range(self.q):
            h = rel_step * max(1.0, abs(theta[k]))
            tp, tm = theta.copy(), theta.copy()
            tp[k] += h
            tm[k] -= h
            gp = self.objective(tp)[1]
            gm = self.objective(tm)[1]
            H[:, k] = (gp - gm) / (2 * h)
        return 0.5 * (H + H.T)

    # starting values ---------------------------------------------------------
    def group_start(self, g):
        spec, s = self.spec, self.sample[g]
        var = np.diag(s.S)
        markers = {}
        for e in spec.entries:
            if e.matrix == "lambda" and not e.free and e.value == 1.0 and e.col not in markers:
                markers[e.col] = e.row
        free_theta = {e.row for e in spec.entries if e.matrix == "theta" and e.row == e.col and e.free}
        v = np.array([e.value for e in spec.entries])
        for k, e in enumerate(spec.entries):
            if e.matrix == "lambda":
                if e.free:
                    v[k] = 0.0 if e.group_class == "regression" else 1.0
            elif e.matrix == "phi":
                if e.row == e.col:
                    r = markers.get(e.row)
                    base = var[r] if r is not None else 1.0
                    v[k] = 0.5 * base if r in free_theta else base
                else:
                    v[k] = 0.0
            elif e.matrix == "theta":
                v[k] = 0.5 * var[e.row] if e.row == e.col else 0.0
            elif e.matrix == "nu":
                v[k] = s.mean[e.row]
            elif e.matrix == "alpha":
                if e.group_class == "latent_mean":
                    v[k] = 0.0
                else:
                    r = markers.get(e.row)
                    v[k] = s.mean[r] if r is not None else 0.0
        return v

    def start(self, group_values=None):
        """Global start vector: group-local entry values averaged per parameter."""
        total = np.zeros(self.q)
        count = np.zeros(self.q)
        for g in range(self.G):
            v = group_values[g] if group_values is not None else self.group_start(g)
            fe = self.free_entries[g]
            np.add.at(total, self.index[g][fe], v[fe])
            np.add.at(count, self.index[g][fe], 1.0)
        return total / np.maximum(count, 1.0)

    def optimize(self, theta0, maxiter=MAXITER):
        try:
            H = self.expected_hessian(theta0)
            H0 = np.linalg.inv(H + 1e-10 * np.eye(self.q))
        except np.linalg.LinAlgError:
            H0 = None
        return quasi_newton(self.objective, theta0, H0, maxiter=maxiter)


# ---------------------------------------------------------------------------
# results


@dataclass
class SemFit:
    group: str
    spec: SemSpec
    n: int
    values: np.ndarray
    sigma: np.ndarray
    mu: np.ndarray
    F: float
    T: float
    df: int
    converged: bool
    grad_norm: float
    iterations: int
    rcond: float
    message: str = ""
    c: float | None = None
    ses: dict = field(default_factory=dict)
    vcov: np.ndarray | None = None  # over free entries of this group, in entry order
    naive_vcov: np.ndarray | None = None
    trace: list = field(default_factory=list, repr=False)
    level: str = "configural"
    problem: Problem | None = field(default=None, repr=False)
    global_index: np.ndarray | None = field(default=None, repr=False)

    @property
    def free_entries(self) -> np.ndarray:
        if self.global_index is not None:
            return np.flatnonzero(self.global_index >= 0)
        return np.array([k for k, e in enumerate(self.spec.entries) if e.free], dtype=int)

    @property
    def estimates(self) -> dict[str, float]:
        return {self.spec.entries[k].label: float(self.values[k]) for k in self.free_entries}

    def value(self, label: str) -> float:
        return float(self.values[self.spec.entry_index(label)])


@dataclass
class MgFit:
    level: str
    groups: list[SemFit]
    labels: list[str]
    theta: np.ndarray
    T: float
    df: int
    converged: bool
    c: float | None = None
    dropped: list = field(default_factory=list)
    vcov: np.ndarray | None = None
    problem: Problem | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return int(sum(g.n for g in self.groups))

    @property
    def group_labels(self) -> list[str]:
        return [g.group for g in self.groups]

    def group(self, label: str) -> SemFit:
        for g in self.groups:
            if g.group == label:
                return g
        raise KeyError(label)


def check_identified(sample: SampleMoments, label: str = "") -> None:
    rc = sample.rcond
    if not rc >= RCOND_MIN:
        raise IdentificationError(
            f"group {label!r}: sample covariance is ill-conditioned (rcond={rc:.3g} < {RCOND_MIN:g})"
        )


def _group_fit(problem: Problem, theta, res: OptimResult, g: int) -> SemFit:
    v = problem.values(theta, g)
    sigma, mu = problem.layout.implied(v)
    Fg = problem.group_terms(theta, g, with_grad=False)[0]
    s = problem.sample[g]
    n_local = len(problem.free_entries[g])
    return SemFit(
        group=problem.datasets[g].label,
        spec=problem.spec,
        n=s.n,
        values=v,
        sigma=sigma,
        mu=mu,
        F=float(Fg),
        T=float(s.n * Fg),
        df=problem.spec.n_moments - n_local,
        converged=res.converged,
        grad_norm=res.grad_norm,
        iterations=res.iterations,
        rcond=s.rcond,
        message=res.message,
        trace=res.trace,
        level=problem.level,
        problem=problem,
        global_index=problem.index[g],
    )


def _identification_check(problem: Problem, theta) -> str:
    H = problem.expected_hessian(theta)
    eig = np.linalg.eigvalsh(H)
    if eig[-1] <= 0 or eig[0] / eig[-1] < 1e-12:
        return "information matrix is singular (model not identified)"
    for g in range(problem.G):
        sigma, _ = problem.layout.implied(problem.values(theta, g))
        if np.linalg.eigvalsh(sigma)[0] <= 0:
            return "implied covariance is not positive definite"
    return ""


def fit_single_group(dataset: GroupDataset, spec: SemSpec | None = None, *, strict: bool = True,
                     start=None, check: bool = True) -> SemFit:
    """Fit one group by ML.

    Raises :class:`IdentificationError` when the sample covariance fails the
    conditioning gate and, with ``strict``, :class:`ConvergenceError` when
    the optimizer does not converge. With ``strict=False`` a non-converged
    fit is returned with ``converged=False``.
    """
    spec = spec or default_spec()
    sample = moments(dataset.rows)
    if check:
        check_identified(sample, dataset.label)
    problem = Problem(spec, [dataset], "configural", sample=[sample])
    theta0 = problem.start() if start is None else np.asarray(start, dtype=float)
    res = problem.optimize(theta0)
    fit = _group_fit(problem, res.x, res, 0)
    if fit.converged:
        why = _identification_check(problem, res.x)
        if why:
            fit.converged = False
            fit.message = why
    if strict and not fit.converged:
        raise ConvergenceError(f"group {dataset.label!r}: {fit.message}")
    return fit


def _assemble_mgfit(problem: Problem, theta, res: OptimResult, dropped) -> MgFit:
    groups = [_group_fit(problem, theta, res, g) for g in range(problem.G)]
    T = float(sum(g.T for g in groups))
    return MgFit(problem.level, groups, list(problem.labels), theta, T, problem.df,
                 res.converged, dropped=list(dropped), problem=problem)


def fit_multigroup(datasets: Sequence[GroupDataset], spec: SemSpec | None = None,
                   level: str = "configural", start: MgFit | None = None) -> MgFit:
    """Joint ML fit of several groups under one invariance level.

    Groups whose sample covariance fails the conditioning gate (or, at the
    configural level, whose own fit does not converge) are dropped with a
    warning and listed in ``dropped``. For constrained levels a failed joint
    fit raises :class:`ConvergenceError`.
    """
    spec = spec or default_spec()
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}")
    if len(datasets) < 2:
        raise ValueError("multi-group fitting needs at least two groups")
    kept, samples, dropped = [], [], []
    for ds in datasets:
        try:
            s = moments(ds.rows)
            check_identified(s, ds.label)
        except (IdentificationError, ValueError) as exc:
            warnings.warn(f"dropping group {ds.label!r}: {exc}", stacklevel=2)
            dropped.append((ds.label, str(exc)))
            continue
        kept.append(ds)
        samples.append(s)

    if level == "configural":
        # the configural discrepancy separates by group
        fits = []
        for ds, s in zip(kept, samples):
            try:
                fit = fit_single_group(ds, spec, strict=True, check=False)
            except ConvergenceError as exc:
                warnings.warn(f"dropping group {ds.label!r}: {exc}", stacklevel=2)
                dropped.append((ds.label, str(exc)))
                continue
            fits.append(fit)
        if not fits:
            raise IdentificationError("no group could be estimated")
        keep = {f.group for f in fits}
        pairs = [(d, s) for d, s in zip(kept, samples) if d.label in keep]
        problem = Problem(spec, [d for d, _ in pairs], level, sample=[s for _, s in pairs])
        theta = problem.start([f.values for f in fits])
        F, grad = problem.objective(theta)
        res = OptimResult(theta, F, grad, all(f.converged for f in fits),
                          max(f.iterations for f in fits), "per-group fits")
        mg = _assemble_mgfit(problem, theta, res, dropped)
        for g, f in zip(mg.groups, fits):
            g.trace, g.message, g.iterations = f.trace, f.message, f.iterations
        return mg

    if not kept:
        raise IdentificationError("no group could be estimated")
    problem = Problem(spec, kept, level, sample=samples)
    if start is not None:
        by_label = {g.group: g.values for g in start.groups}
        theta0 = problem.start([by_label.get(d.label, problem.group_start(i)) for i, d in enumerate(kept)])
    else:
        theta0 = problem.start()
    res = problem.optimize(theta0)
    if res.converged:
        why = _identification_check(problem, res.x)
        if why:
            raise ConvergenceError(f"{level} fit: {why}")
    else:
        raise ConvergenceError(f"{level} fit did not converge: {res.message} (max|grad|={res.grad_norm:.3g})")
    return _assemble_mgfit(problem, res.x, res, dropped)
