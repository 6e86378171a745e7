from __future__ import annotations

import dataclasses
import math
import warnings

import numpy as np
import pytest

from vaarkit.instruments import OBSERVED_ORDER
from vaarkit.respondents import degenerate_presets, presets, sample_continuous, sample_observed
from vaarkit.sem import (
    ConvergenceError,
    GroupDataset,
    IdentificationError,
    InsufficientData,
    NestingError,
    attach_scaling,
    default_spec,
    fit_indices,
    fit_multigroup,
    fit_single_group,
    independence_spec,
    invariance_sequence,
    mean_only_spec,
    moments,
    ols_spec,
    parse_datasets,
    robust_se,
    saturated_spec,
    scaled_chisq_diff,
    standardize,
    write_datasets,
)
from vaarkit.sem import invariance as invariance_mod
from vaarkit.sem.estimation import Problem, quasi_newton

from .conftest import aligned_dataset


def std_betas(fit):
    robust_se(fit)
    return {p.path: p.beta for p in standardize(fit)}


# -- moments ---------------------------------------------------------------


def test_two_point_moments():
    m = moments(np.array([[3.0] * 7, [5.0] * 7]))
    assert np.allclose(m.mean, 4.0) and np.allclose(np.diag(m.S), 1.0)


def test_one_row_is_insufficient():
    with pytest.raises(InsufficientData):
        moments(np.full((1, 7), 4.0))


@pytest.mark.parametrize("name", ["aligned", "reversed", "null"])
def test_simulator_moment_oracle(name):
    p = presets()[name]
    S = moments(sample_continuous(p, 10_000, np.random.default_rng(5))).S
    assert np.max(np.abs(S - p.implied_cov())) < 0.05


def test_dataset_interchange_round_trip():
    a = aligned_dataset(20, 1, "g one")
    b = aligned_dataset(15, 2, "g,two")
    back = parse_datasets(write_datasets([a, b]))
    assert [d.label for d in back] == ["g one", "g,two"]
    for x, y in zip(back, (a, b)):
        assert np.array_equal(x.rows, y.rows) and x.columns == OBSERVED_ORDER


# -- estimation --------------------------------------------------------------


def test_default_spec_counts():
    spec = default_spec()
    assert spec.n_moments == 35 and spec.n_free == 26 and spec.df == 9
    marker = [e for e in spec.entries if e.matrix == "lambda" and not e.free and e.label.startswith("PrivacyConcern")]
    assert [e.label for e in marker] == ["PrivacyConcern=~Awareness"]


def test_ols_equivalence():
    rng = np.random.default_rng(3)
    x = rng.normal(4.0, 1.3, 250)
    y = 1.5 - 0.7 * x + rng.normal(0, 0.8, 250)
    fit = fit_single_group(GroupDataset("ols", np.column_stack([x, y]), ("x", "y")), ols_spec())
    X = np.column_stack([np.ones_like(x), x])
    coef, ssr, *_ = np.linalg.lstsq(X, y, rcond=None)
    assert fit.value("y~x") == pytest.approx(coef[1], abs=1e-6)
    assert fit.value("y~1") == pytest.approx(coef[0], abs=1e-6)
    assert fit.value("y~~y") == pytest.approx(ssr[0] / len(y), abs=1e-6)
    assert fit.T == pytest.approx(0.0, abs=1e-8) and fit.df == 0
    # standardized slope of a simple regression is the correlation
    robust_se(fit)
    (pe,) = standardize(fit)
    assert pe.beta == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-6)


def test_mean_only_robust_se_closed_form():
    x = np.random.default_rng(9).gamma(2.0, 1.5, 400)
    fit = fit_single_group(GroupDataset("m", x[:, None], ("x",)), mean_only_spec())
    se = robust_se(fit)
    assert se["x~1"] == pytest.approx(x.std() / math.sqrt(len(x)), abs=1e-8)


def test_saturated_model():
    ds = aligned_dataset(200, 4)
    fit = fit_single_group(ds, saturated_spec())
    base = fit_single_group(ds, independence_spec(), check=False)
    idx = fit_indices(fit, base)
    assert fit.df == 0 and fit.T == pytest.approx(0.0, abs=1e-8)
    assert idx["CFI"] == 1.0 and idx["RMSEA"] == 0.0 and idx["TLI"] is None
    assert idx["SRMR"] == pytest.approx(0.0, abs=1e-6)


def test_independence_as_target_has_zero_cfi():
    ds = aligned_dataset(200, 4)
    base = fit_single_group(ds, independence_spec(), check=False)
    assert fit_indices(base, base)["CFI"] == 0.0


def test_fit_indices_shape(aligned_fit, aligned_big):
    base = fit_single_group(aligned_big, independence_spec(), check=False)
    idx = fit_indices(aligned_fit, base)
    assert list(idx) == ["CFI", "TLI", "RMSEA", "SRMR"]
    assert 0.9 < idx["CFI"] <= 1.0 and idx["RMSEA"] < 0.1 and 0 < idx["SRMR"] < 0.1


def test_converged_fit_invariants(aligned_fit):
    assert aligned_fit.converged and aligned_fit.grad_norm < 1e-6
    assert np.linalg.eigvalsh(aligned_fit.sigma)[0] > 0
    assert aligned_fit.df == 9 and aligned_fit.T == pytest.approx(aligned_fit.n * aligned_fit.F)


def test_likelihood_monotone(aligned_fit):
    diffs = np.diff(aligned_fit.trace)
    assert len(diffs) > 3 and np.all(diffs <= 1e-12)


def test_quasi_newton_quadratic():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    b = np.array([1.0, -1.0])
    res = quasi_newton(lambda x: (0.5 * x @ A @ x - b @ x, A @ x - b), np.zeros(2))
    assert res.converged and np.allclose(res.x, np.linalg.solve(A, b), atol=1e-8)


def test_quasi_newton_iteration_cap():
    rosen = lambda x: ((1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2,
                       np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2), 200 * (x[1] - x[0] ** 2)]))
    res = quasi_newton(rosen, np.array([-1.2, 1.0]), maxiter=3)
    assert not res.converged and res.iterations <= 3


def test_strict_nonconvergence_raises(monkeypatch):
    ds = aligned_dataset(150, 2)
    monkeypatch.setattr("vaarkit.sem.estimation.MAXITER", 2)
    monkeypatch.setattr(Problem, "optimize", lambda self, theta0, maxiter=2: quasi_newton(
        self.objective, theta0, maxiter=2))
    with pytest.raises(ConvergenceError):
        fit_single_group(ds)
    fit = fit_single_group(ds, strict=False)
    assert not fit.converged
    assert all(not p.estimable for p in standardize(fit))


@pytest.mark.parametrize("name", ["near_constant", "collinear"])
def test_degenerate_identification_error(name):
    rows = sample_observed(degenerate_presets()[name], 100, np.random.default_rng(0))
    with pytest.raises(IdentificationError):
        fit_single_group(GroupDataset(name, rows))


def test_robust_to_naive_ratio():
    ratios = []
    for seed in range(5):
        rows = sample_continuous(presets()["aligned"], 2000, np.random.default_rng(100 + seed))
        fit = fit_single_group(GroupDataset("c", rows))
        robust_se(fit)
        ratios.append(np.sqrt(np.diag(fit.vcov) / np.diag(fit.naive_vcov)))
    mean_ratio = np.mean(ratios, axis=0)
    assert np.all(np.abs(mean_ratio - 1.0) < 0.10)


def test_scaling_factor_near_one_under_normality():
    rows = sample_continuous(presets()["aligned"], 3000, np.random.default_rng(77))
    fit = fit_single_group(GroupDataset("c", rows))
    assert attach_scaling(fit) == pytest.approx(1.0, abs=0.15)


# -- standardized solution ---------------------------------------------------


@pytest.mark.parametrize("factors", [(2.0,) * 7, (1, 3.0, 1, 0.5, 1, 1, 2.5), (1, 1, 1, 1, 10.0, 1, 1)])
def test_standardized_rescale_invariance(factors):
    ds = aligned_dataset(400, 8)
    a = std_betas(fit_single_group(ds))
    b = std_betas(fit_single_group(ds.scaled(factors)))
    for path in a:
        assert b[path] == pytest.approx(a[path], abs=1e-6)


def test_zero_latent_variance_is_non_estimable(aligned_fit):
    values = aligned_fit.values.copy()
    values[aligned_fit.spec.entry_index("PrivacyConcern~~PrivacyConcern")] = 0.0
    broken = dataclasses.replace(aligned_fit, values=values)
    est = {p.path: p for p in standardize(broken)}
    assert not any(est[p].estimable for p in est if p.startswith("PrivacyConcern"))
    assert all(est[p].estimable for p in est if p.startswith("PSA"))


def test_standardize_requires_se():
    fit = fit_single_group(aligned_dataset(150, 12))
    with pytest.raises(Exception):
        standardize(fit)


# -- multi-group and invariance ----------------------------------------------


def ledger_df(G):
    free = 26 * G
    metric = free - (G - 1) * 2
    scalar = metric - (G - 1) * 6 + (G - 1)
    structural = scalar - (G - 1) * 6
    return [35 * G - k for k in (free, metric, scalar, structural)]


@pytest.mark.parametrize("G", range(2, 9))
def test_df_ledger(G):
    ds = [aligned_dataset(50, g, f"g{g}") for g in range(G)]
    got = [Problem(default_spec(), ds, level).df for level in ("configural", "metric", "scalar", "structural")]
    assert got == ledger_df(G)
    if G == 2:
        assert got == [18, 20, 25, 31]
    if G == 8:
        assert got == [72, 86, 121, 163]


def _two_groups(seed=0, n=200):
    rng = np.random.default_rng(seed)
    p = presets()["aligned"]
    return [GroupDataset("a", sample_observed(p, n, rng)), GroupDataset("b", sample_observed(p, n, rng))]


@pytest.fixture(scope="module")
def ladder():
    return invariance_sequence(_two_groups())


def test_ladder_rows_and_nesting(ladder):
    assert ladder.status == "complete"
    assert [r.df for r in ladder.rows] == [18, 20, 25, 31]
    Ts = [r.T for r in ladder.rows]
    assert all(b >= a - 1e-6 for a, b in zip(Ts, Ts[1:]))
    for r in ladder.rows[1:]:
        assert r.p is not None and 0 <= r.p <= 1


def test_configural_is_sum_of_groups(ladder):
    conf = ladder.fits["configural"]
    assert conf.df == 18 and conf.T == pytest.approx(sum(g.T for g in conf.groups))


def test_unscaled_reduction(ladder):
    metric, conf = ladder.fits["metric"], ladder.fits["configural"]
    m2, c2 = dataclasses.replace(metric, c=1.0), dataclasses.replace(conf, c=1.0)
    d = scaled_chisq_diff(m2, c2)
    assert d.delta_T == metric.T - conf.T and d.c_d == 1.0


def test_negative_cd_reported_na(ladder):
    metric, conf = ladder.fits["metric"], ladder.fits["configural"]
    d = scaled_chisq_diff(dataclasses.replace(metric, c=0.1), dataclasses.replace(conf, c=2.0))
    assert d.delta_T is None and d.p is None and "negative" in d.note


def test_nesting_errors(ladder):
    metric, conf = ladder.fits["metric"], ladder.fits["configural"]
    with pytest.raises(NestingError):
        scaled_chisq_diff(conf, metric)
    ds = aligned_dataset(200, 3)
    sat = fit_single_group(ds, saturated_spec())
    full = fit_single_group(ds)
    with pytest.raises(NestingError):
        scaled_chisq_diff(sat, full)
    with pytest.raises(NestingError):
        scaled_chisq_diff(full, conf)
    other = fit_single_group(aligned_dataset(200, 4))
    with pytest.raises(NestingError):
        scaled_chisq_diff(fit_single_group(ds, independence_spec(), check=False), other)
    d = scaled_chisq_diff(full, sat)
    assert d.delta_df == 9 and d.delta_T is not None


def test_single_group_ladder_is_error():
    with pytest.raises(ValueError):
        invariance_sequence(_two_groups()[:1])


def test_ladder_truncates_on_failure(monkeypatch):
    real = invariance_mod.fit_multigroup

    def flaky(datasets, spec, level, start=None):
        if level == "scalar":
            raise ConvergenceError("scalar fit did not converge")
        return real(datasets, spec, level, start=start)

    monkeypatch.setattr(invariance_mod, "fit_multigroup", flaky)
    lad = invariance_sequence(_two_groups(1))
    assert lad.status == "truncated at scalar"
    assert [r.status for r in lad.rows] == ["ok", "ok", "failed"]


def test_configural_drops_degenerate_group():
    groups = _two_groups(2) + [GroupDataset("flat", sample_observed(degenerate_presets()["near_constant"], 100,
                                                                     np.random.default_rng(0)))]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        mg = fit_multigroup(groups, default_spec(), "configural")
    assert mg.group_labels == ["a", "b"] and mg.dropped[0][0] == "flat"
    assert any("flat" in str(w.message) for w in caught)


def test_group_view_se_guard(ladder):
    with pytest.raises(ValueError):
        robust_se(ladder.fits["metric"].groups[0])
    se = robust_se(ladder.fits["metric"])
    assert all(v > 0 for v in se.values())


def test_multigroup_rmsea_and_indices(ladder):
    conf = ladder.fits["configural"]
    ds = _two_groups()
    base = fit_multigroup(ds, independence_spec(), "configural")
    idx = fit_indices(conf, base)
    expect = math.sqrt(2) * math.sqrt(max(conf.T - conf.df, 0) / (conf.df * conf.n))
    assert idx["RMSEA"] == pytest.approx(expect)
