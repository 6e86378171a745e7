"""Model specification and implied moments for the fixed SEM family.

Every observed variable ``x`` is written as ``x = nu + Lambda f + e`` with
exogenous factors ``f`` (mean ``alpha``, covariance ``Phi``) and residuals ``e``
(covariance ``Theta``). Observed exogenous predictors enter as factors with a
unit loading and zero residual, regressions of observed outcomes on a factor
are entries of ``Lambda``. This covers the default privacy/prosocial model as
well as the OLS, saturated, independence and mean-only variants used as
estimator oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..instruments import OBSERVED_ORDER
from ..vaar import FOCAL_PATHS

MATRICES = ("lambda", "phi", "theta", "nu", "alpha")
LEVELS = ("configural", "metric", "scalar", "structural")

# equality classes imposed at each invariance level
LEVEL_CLASSES = {
    "configural": frozenset(),
    "metric": frozenset({"loading"}),
    "scalar": frozenset({"loading", "intercept"}),
    "structural": frozenset({"loading", "intercept", "regression"}),
}
# classes whose fixed entries become free outside the reference group
LEVEL_FREED = {
    "configural": frozenset(),
    "metric": frozenset(),
    "scalar": frozenset({"latent_mean"}),
    "structural": frozenset({"latent_mean"}),
}


@dataclass(frozen=True)
class Entry:
    matrix: str
    row: int
    col: int
    label: str
    free: bool = True
    value: float = 0.0
    group_class: str = ""


@dataclass(frozen=True)
class SemSpec:
    name: str
    observed: tuple[str, ...]
    factors: tuple[str, ...]
    entries: tuple[Entry, ...]
    # path id -> (outcome observed index, factor index, entry label)
    focal: dict = field(default_factory=dict)
    # standardized loadings to report: label -> (indicator index, factor index)
    loadings: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return len(self.observed)

    @property
    def m(self) -> int:
        return len(self.factors)

    @property
    def n_moments(self) -> int:
        return self.p * (self.p + 1) // 2 + self.p

    @property
    def n_free(self) -> int:
        return sum(e.free for e in self.entries)

    @property
    def df(self) -> int:
        return self.n_moments - self.n_free

    def entry_index(self, label: str) -> int:
        for k, e in enumerate(self.entries):
            if e.label == label:
                return k
        raise KeyError(label)

    def with_entries(self, entries) -> "SemSpec":
        return replace(self, entries=tuple(entries))


def default_spec() -> SemSpec:
    """PrivacyConcern measured by Awareness (marker), Control, Collection;
    PSA and PrivacyConcern predict the three AoDS outcomes, whose residuals
    covary. 26 free parameters against 35 moments."""
    obs = OBSERVED_ORDER
    aw, ctl, col, psa, sp, pa, fw = range(7)
    PC, PS = 0, 1
    e = [
        Entry("lambda", aw, PC, "PrivacyConcern=~Awareness", free=False, value=1.0),
        Entry("lambda", ctl, PC, "PrivacyConcern=~Control", group_class="loading"),
        Entry("lambda", col, PC, "PrivacyConcern=~Collection", group_class="loading"),
        Entry("lambda", psa, PS, "PSA=~PSA", free=False, value=1.0),
    ]
    for y in (sp, pa, fw):
        e.append(Entry("lambda", y, PS, f"{obs[y]}~PSA", group_class="regression"))
    for y in (sp, pa, fw):
        e.append(Entry("lambda", y, PC, f"{obs[y]}~PrivacyConcern", group_class="regression"))
    e += [
        Entry("phi", PC, PC, "PrivacyConcern~~PrivacyConcern"),
        Entry("phi", PS, PS, "PSA~~PSA"),
    ]
    for i in (aw, ctl, col, sp, pa, fw):
        e.append(Entry("theta", i, i, f"{obs[i]}~~{obs[i]}"))
    for i, j in ((pa, sp), (fw, sp), (fw, pa)):
        e.append(Entry("theta", i, j, f"{obs[j]}~~{obs[i]}"))
    for i in (aw, ctl, col, sp, pa, fw):
        e.append(Entry("nu", i, 0, f"{obs[i]}~1", group_class="intercept"))
    e += [
        Entry("alpha", PC, 0, "PrivacyConcern~1", free=False, value=0.0, group_class="latent_mean"),
        Entry("alpha", PS, 0, "PSA~1"),
    ]
    focal = {}
    for y in (sp, pa, fw):
        focal[f"PSA->{obs[y]}"] = (y, PS, f"{obs[y]}~PSA")
        focal[f"PrivacyConcern->{obs[y]}"] = (y, PC, f"{obs[y]}~PrivacyConcern")
    assert set(focal) == set(FOCAL_PATHS)
    loadings = {
        f"PrivacyConcern=~{obs[i]}": (i, PC) for i in (aw, ctl, col)
    }
    return SemSpec("full", obs, ("PrivacyConcern", "PSA"), tuple(e), focal, loadings)


def ols_spec(x: str = "x", y: str = "y") -> SemSpec:
    """One observed predictor, one outcome, no latent variable."""
    e = (
        Entry("lambda", 0, 0, f"{x}=~{x}", free=False, value=1.0),
        Entry("lambda", 1, 0, f"{y}~{x}", group_class="regression"),
        Entry("phi", 0, 0, f"{x}~~{x}"),
        Entry("theta", 1, 1, f"{y}~~{y}"),
        Entry("nu", 1, 0, f"{y}~1", group_class="intercept"),
        Entry("alpha", 0, 0, f"{x}~1"),
    )
    return SemSpec("ols", (x, y), (x,), e, {f"{x}->{y}": (1, 0, f"{y}~{x}")})


def saturated_spec(observed=OBSERVED_ORDER) -> SemSpec:
    """All means, variances and covariances free (df 0)."""
    observed = tuple(observed)
    e = []
    for i in range(len(observed)):
        for j in range(i + 1):
            e.append(Entry("theta", i, j, f"{observed[j]}~~{observed[i]}"))
    for i, name in enumerate(observed):
        e.append(Entry("nu", i, 0, f"{name}~1"))
    return SemSpec("saturated", observed, (), tuple(e))


def independence_spec(observed=OBSERVED_ORDER) -> SemSpec:
    """Baseline model: free means and variances, zero covariances."""
    observed = tuple(observed)
    e = [Entry("theta", i, i, f"{n}~~{n}") for i, n in enumerate(observed)]
    e += [Entry("nu", i, 0, f"{n}~1") for i, n in enumerate(observed)]
    return SemSpec("independence", observed, (), tuple(e))


def mean_only_spec(name: str = "x") -> SemSpec:
    return saturated_spec((name,))


# ---------------------------------------------------------------------------
# matrices and moments


class Layout:
    """Index arrays for turning an entry-value vector into model matrices."""

    def __init__(self, spec: SemSpec):
        self.spec = spec
        self.p, self.m = spec.p, spec.m
        self.rows = np.array([e.row for e in spec.entries], dtype=int)
        self.cols = np.array([e.col for e in spec.entries], dtype=int)
        self.kind = {
            name: np.array([k for k, e in enumerate(spec.entries) if e.matrix == name], dtype=int)
            for name in MATRICES
        }
        self.tril = np.tril_indices(self.p)
        self.n_cov = len(self.tril[0])
        self.n_moments = self.n_cov + self.p
        # symmetric off-diagonal weighting for d/dvech
        self.vech_weight = np.where(self.tril[0] == self.tril[1], 1.0, 2.0)

    def matrices(self, values):
        p, m = self.p, self.m
        lam = np.zeros((p, m))
        phi = np.zeros((m, m))
        theta = np.zeros((p, p))
        nu = np.zeros(p)
        alpha = np.zeros(m)
        k = self.kind
        lam[self.rows[k["lambda"]], self.cols[k["lambda"]]] = values[k["lambda"]]
        r, c = self.rows[k["phi"]], self.cols[k["phi"]]
        phi[r, c] = values[k["phi"]]
        phi[c, r] = values[k["phi"]]
        r, c = self.rows[k["theta"]], self.cols[k["theta"]]
        theta[r, c] = values[k["theta"]]
        theta[c, r] = values[k["theta"]]
        nu[self.rows[k["nu"]]] = values[k["nu"]]
        alpha[self.rows[k["alpha"]]] = values[k["alpha"]]
        return lam, phi, theta, nu, alpha

    def implied(self, values):
        lam, phi, theta, nu, alpha = self.matrices(values)
        sigma = lam @ phi @ lam.T + theta
        mu = nu + lam @ alpha
        return sigma, mu

    def value_gradient(self, values, G, h):
        """Gradient of ``sum(G * Sigma) + h @ mu`` with respect to entry values.

        ``G`` is symmetric (derivative with respect to each element of Sigma,
        both triangles counted) and ``h`` the derivative with respect to mu.
        """
        lam, phi, _, _, alpha = self.matrices(values)
        out = np.zeros(len(values))
        k = self.kind
        if len(k["lambda"]):
            GLP = 2.0 * G @ lam @ phi
            r, c = self.rows[k["lambda"]], self.cols[k["lambda"]]
            out[k["lambda"]] = GLP[r, c] + h[r] * alpha[c]
        if len(k["phi"]):
            LGL = lam.T @ G @ lam
            r, c = self.rows[k["phi"]], self.cols[k["phi"]]
            out[k["phi"]] = np.where(r == c, 1.0, 2.0) * LGL[r, c]
        if len(k["theta"]):
            r, c = self.rows[k["theta"]], self.cols[k["theta"]]
            out[k["theta"]] = np.where(r == c, 1.0, 2.0) * G[r, c]
        if len(k["nu"]):
            out[k["nu"]] = h[self.rows[k["nu"]]]
        if len(k["alpha"]):
            out[k["alpha"]] = (lam.T @ h)[self.rows[k["alpha"]]]
        return out

    def jacobian(self, values, which):
        """d(vech Sigma, mu) / d(entry values) for the entry positions ``which``."""
        lam, phi, _, _, alpha = self.matrices(values)
        LP = lam @ phi
        p = self.p
        J = np.zeros((self.n_moments, len(which)))
        for col, k in enumerate(which):
            e = self.spec.entries[k]
            dS = np.zeros((p, p))
            dmu = np.zeros(p)
            i, j = e.row, e.col
            if e.matrix == "lambda":
                v = LP[:, j]
                dS[i, :] += v
                dS[:, i] += v
                dmu[i] = alpha[j]
            elif e.matrix == "phi":
                if i == j:
                    dS = np.outer(lam[:, i], lam[:, i])
                else:
                    dS = np.outer(lam[:, i], lam[:, j])
                    dS = dS + dS.T
            elif e.matrix == "theta":
                dS[i, j] = 1.0
                dS[j, i] = 1.0
            elif e.matrix == "nu":
                dmu[i] = 1.0
            elif e.matrix == "alpha":
                dmu = lam[:, i].copy()
            J[: self.n_cov, col] = dS[self.tril]
            J[self.n_cov :, col] = dmu
        return J


def duplication_matrix(p: int) -> np.ndarray:
    """D with vec(A) = D vech(A) for symmetric A (vech in row-major lower order)."""
    rows, cols = np.tril_indices(p)
    D = np.zeros((p * p, len(rows)))
    for k, (i, j) in enumerate(zip(rows, cols)):
        D[i * p + j, k] = 1.0
        D[j * p + i, k] = 1.0
    return D
