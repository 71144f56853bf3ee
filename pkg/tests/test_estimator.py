from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from strdecomp.estimator import (
    ConvergenceError,
    ar1_covariance,
    confidence_intervals,
    fit,
    fit_gls,
    fit_ols,
    fit_robust,
    forecast,
    l1_solve,
)
from strdecomp.model import CovariateSpec, ModelSpec, SeasonalSpec, TimeSeriesData, assemble
from strdecomp.sparsemat import RankDeficiencyError


def mixed_spec(rng, n, flexible=True):
    z = rng.standard_normal((3, n))
    covs = [CovariateSpec("static", z[0], name="a")]
    if flexible:
        covs.append(CovariateSpec("flexible", z[1], (3.0,), name="b"))
    covs.append(CovariateSpec("seasonal", z[2], (1.0, 1.0, 1.0), season_ref=0, name="c"))
    return ModelSpec(
        2.0,
        [SeasonalSpec.cycle(5, (1.0, 0.5, 2.0), name="w"), SeasonalSpec.cycle(3, (0.3, 0.0, 1.5), phase=1, name="q")],
        covs,
    )


def series(rng, n, missing=()):
    t = np.arange(n)
    y = np.sin(t) + 0.05 * t + 0.1 * rng.standard_normal(n)
    y[list(missing)] = np.nan
    return TimeSeriesData(y)


def dense_oracle(ds, weights=None):
    X = ds.X.toarray()
    W = np.eye(X.shape[0]) if weights is None else weights
    C = np.linalg.inv(X.T @ W @ X)
    return X, C, C @ X.T @ W @ ds.y_plus


def component_variance(ds, C, name):
    O = ds.observation_operator(name).toarray()
    return np.einsum("ij,jk,ik->i", O, C, O)


ROUTES = ["sparse", "dual"]


# ordinary least squares ------------------------------------------------------------


@pytest.mark.parametrize("method", ROUTES)
@pytest.mark.parametrize("flexible", [True, False])
@pytest.mark.parametrize("missing", [(), (3, 17)])
def test_ols_matches_dense_oracle(method, flexible, missing):
    rng = np.random.default_rng(0)
    n = 40
    ds = assemble(mixed_spec(rng, n, flexible), series(rng, n, missing))
    X, C, eta = dense_oracle(ds)
    res = fit_ols(ds, method)
    assert res.route == method
    np.testing.assert_allclose(res.eta, eta, atol=1e-8)
    H = X @ C @ X.T
    np.testing.assert_allclose(res.leverages, np.diag(H)[: ds.n_obs], atol=1e-10)
    r = res.components.remainder[ds.obs_index]
    assert res.sigma_R == pytest.approx(np.sqrt(r @ r / (ds.n_obs - np.trace(H[: ds.n_obs, : ds.n_obs]))), rel=1e-10)
    var = res.component_variances
    for name in ["w", "q", "trend", "c"] + (["b"] if flexible else []):
        np.testing.assert_allclose(var[name], res.sigma_R**2 * component_variance(ds, C, name), atol=1e-10)
    O = sum(ds.observation_operator(nm).toarray() for nm in ds.component_names())
    np.testing.assert_allclose(var["fitted"], res.sigma_R**2 * np.einsum("ij,jk,ik->i", O, C, O), atol=1e-10)
    a = ds.blocks["static"].start
    np.testing.assert_allclose(var["a"], res.sigma_R**2 * C[a, a] * ds.spec.covariates[0].values ** 2, rtol=1e-8)
    np.testing.assert_allclose(res.coef_variances, res.sigma_R**2 * np.diag(C), atol=1e-10)


def test_surface_variance_matches_dense_oracle(rng):
    n = 20
    ds = assemble(ModelSpec(1.0, [SeasonalSpec.cycle(4, name="w")]), series(rng, n))
    _, C, _ = dense_oracle(ds)
    res = fit_ols(ds, "sparse")
    from strdecomp.topology import embedding_matrix

    E = sp.hstack([embedding_matrix(4, n), sp.csr_array((4 * n, n))]).toarray()
    full = np.einsum("ij,jk,ik->i", E, C, E).reshape(n, 4).T
    np.testing.assert_allclose(res.surface_variance("w"), res.sigma_R**2 * full, atol=1e-10)


@given(st.floats(0.01, 100.0), st.floats(-5, 5), st.floats(-5, 5))
def test_affine_data_is_pure_trend(lam, a, b):
    y = a + b * np.arange(15.0)
    res = fit(ModelSpec(lam), TimeSeriesData(y))
    np.testing.assert_allclose(res.components.trend, y, atol=1e-8)
    assert np.abs(res.components.remainder).max() < 1e-8


def test_stiff_trend_approaches_straight_line_fit():
    t = np.arange(30.0)
    y = 0.02 * (t - 10) ** 2
    res = fit(ModelSpec(1e6), TimeSeriesData(y))
    line = np.polyval(np.polyfit(t, y, 1), t)
    assert np.abs(res.components.trend - line).max() < 1e-3 * np.ptp(y)


@pytest.mark.parametrize("method", ROUTES)
def test_ols_objective_is_minimal(method, rng):
    n = 30
    ds = assemble(mixed_spec(rng, n), series(rng, n))
    res = fit_ols(ds, method)
    X, y = ds.X, ds.y_plus

    def obj(e):
        return float(np.sum((X @ e - y) ** 2))

    base = obj(res.eta)
    for _ in range(100):
        d = rng.standard_normal(ds.ncols)
        assert obj(res.eta + 1e-3 * d / np.linalg.norm(d)) >= base


@given(st.integers(0, 2**32 - 1))
def test_fits_reconstruct_and_keep_zero_sum_surfaces(seed):
    rng = np.random.default_rng(seed)
    n = 24
    data = series(rng, n, missing=[int(rng.integers(0, n))])
    ds = assemble(mixed_spec(rng, n), data)
    for res in (fit_ols(ds), fit_robust(ds), fit_gls(ds, ar1_covariance(n, 0.3))):
        c = res.components
        o = ds.obs_index
        total = c.trend + sum(c.seasonal.values()) + sum(c.covariates.values()) + c.remainder
        np.testing.assert_allclose(total[o], data.y[o], atol=1e-10)
        for S in c.surfaces.values():
            assert np.abs(S.sum(axis=0)).max() < 1e-8


def test_variances_are_nonnegative(rng):
    n = 30
    res = fit_ols(assemble(mixed_spec(rng, n), series(rng, n)))
    assert res.sigma_R >= 0
    assert np.all(res.coef_variances >= 0)
    assert all(np.all(v >= 0) for v in res.component_variances.values())


def test_no_residual_degrees_of_freedom():
    y = np.array([1.0, np.nan, 3.0])
    with pytest.raises(RankDeficiencyError, match="degrees of freedom"):
        fit(ModelSpec(1.0), TimeSeriesData(y))


def test_unpenalized_seasonal_is_rank_deficient(rng):
    spec = ModelSpec(1.0, [SeasonalSpec.cycle(2, (0.0, 0.0, 0.0))])
    data = TimeSeriesData(rng.standard_normal(4))
    with pytest.raises(RankDeficiencyError, match="smoothing parameter"):
        fit(spec, data)


def test_fit_dispatch(rng):
    data = series(rng, 10)
    assert fit(ModelSpec(1.0), data, "robust").fit_kind == "robust"
    assert fit(ModelSpec(1.0), data, "gls", sigma_eps=1.0).fit_kind == "gls"
    with pytest.raises(ValueError):
        fit(ModelSpec(1.0), data, "bayes")
    with pytest.raises(ValueError):
        fit(ModelSpec(1.0), data, method="qr")


def test_dual_route_needs_cycles(rng):
    from strdecomp.topology import make_two_cylinder

    topo = make_two_cylinder(3, 0, 1)
    spec = ModelSpec(1.0, [SeasonalSpec(topo, season_map=[0, 1, 2, 0, 1, 2], name="g")])
    with pytest.raises(ValueError, match="dual"):
        fit(spec, TimeSeriesData(rng.standard_normal(6)), method="dual")


def test_dual_route_rejects_a_season_weight_lost_to_rounding(rng):
    from strdecomp._cyclic import IllConditionedPrior

    data = TimeSeriesData(rng.standard_normal(40))
    bad = ModelSpec(1.0, [SeasonalSpec.cycle(7, (1e-3, 800.0, 1e-5))])
    with pytest.raises(IllConditionedPrior, match="rounding"):
        fit(bad, data, method="dual")
    ok = ModelSpec(1.0, [SeasonalSpec.cycle(7, (1e-3, 800.0, 1e-1))])
    a = fit(ok, data, method="dual").eta
    b = fit(ok, data, method="sparse").eta
    assert np.allclose(a, b, atol=1e-6 * np.abs(b).max())


# intervals ---------------------------------------------------------------------------


def test_interval_half_width_uses_normal_quantile(rng):
    n = 20
    res = fit(ModelSpec(1.0, [SeasonalSpec.cycle(4, name="w")]), series(rng, n))
    ci = confidence_intervals(res, 0.95)
    sd = np.sqrt(res.component_variances["trend"])
    lo, hi = ci["trend"]
    np.testing.assert_allclose((hi - lo) / 2, 1.959964 * sd, rtol=1e-6)
    np.testing.assert_allclose((hi + lo) / 2, res.components.trend, atol=1e-12)
    assert "remainder" not in ci
    widths = [np.subtract(*confidence_intervals(res, lv)["w"][::-1]) for lv in (0.5, 0.8, 0.95, 0.99)]
    for a, b in zip(widths, widths[1:]):
        assert np.all(b >= a)


def test_zero_variance_gives_degenerate_interval(rng):
    res = fit(ModelSpec(1.0), TimeSeriesData(np.arange(6.0)))
    res.__dict__["component_variances"] = {"trend": np.zeros(6), "fitted": np.zeros(6)}
    lo, hi = confidence_intervals(res)["trend"]
    np.testing.assert_array_equal(lo, res.components.trend)
    np.testing.assert_array_equal(hi, res.components.trend)


@pytest.mark.parametrize("level", [0.0, 1.0, -0.5, 1.5])
def test_interval_level_must_be_a_probability(level, rng):
    res = fit(ModelSpec(1.0), series(rng, 8))
    with pytest.raises(ValueError):
        confidence_intervals(res, level)


def test_robust_fits_have_no_intervals(rng):
    res = fit(ModelSpec(1.0), series(rng, 8), "robust")
    with pytest.raises(ValueError):
        confidence_intervals(res)
    with pytest.raises(ValueError):
        res.component_variances


# robust ------------------------------------------------------------------------------


def test_l1_location_is_the_median():
    X = sp.csr_array(np.ones((4, 1)))
    eta, obj, _ = l1_solve(X, np.array([1.0, 2.0, 2.0, 9.0]))
    assert eta[0] == pytest.approx(2.0, abs=1e-12)
    assert obj == pytest.approx(8.0)


@given(st.lists(st.integers(-10**6, 10**6), min_size=1, max_size=25))
def test_l1_location_on_odd_samples_is_exact_median(values):
    # values on a 1e-4 grid so distinct candidates have distinct objectives in floating point
    if len(values) % 2 == 0:
        values = values[:-1] or [0]
    y = np.array(values) * 1e-4
    eta, _, _ = l1_solve(sp.csr_array(np.ones((len(y), 1))), y)
    assert eta[0] == np.median(y)


def test_symmetric_data_gives_the_mean():
    y = 3.0 + np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    eta, _, _ = l1_solve(sp.csr_array(np.ones((5, 1))), y)
    assert eta[0] == pytest.approx(y.mean(), abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_robust_objective_never_exceeds_ols(seed):
    rng = np.random.default_rng(seed)
    n = 21
    ds = assemble(mixed_spec(rng, n, flexible=False), series(rng, n))
    rob, ols = fit_robust(ds), fit_ols(ds)
    l1 = lambda e: float(np.abs(ds.X @ e - ds.y_plus).sum())  # noqa: E731
    assert rob.objective == pytest.approx(l1(rob.eta), rel=1e-9)
    assert l1(rob.eta) <= l1(ols.eta) * (1 + 1e-12)


def test_robust_trend_resists_a_spike(rng):
    n = 41
    t = np.arange(n)
    clean = np.sin(t / 6.0) + 0.05 * rng.standard_normal(n)
    spiked = clean.copy()
    spiked[20] += 100 * 0.05
    spec = ModelSpec(5.0)
    d_ols = fit(spec, TimeSeriesData(spiked)).components.trend[20] - fit(spec, TimeSeriesData(clean)).components.trend[20]
    d_rob = (
        fit(spec, TimeSeriesData(spiked), "robust").components.trend[20]
        - fit(spec, TimeSeriesData(clean), "robust").components.trend[20]
    )
    assert abs(d_rob) < 0.1 * abs(d_ols)


def test_robust_scale_is_normal_consistent_mad(rng):
    res = fit(ModelSpec(1.0), series(rng, 31), "robust")
    r = res.components.remainder
    assert res.sigma_R == pytest.approx(1.4826 * np.median(np.abs(r - np.median(r))))
    assert res.leverages is None and res.variance_scale is None


def test_l1_stall_without_fallback_raises():
    rng = np.random.default_rng(1)
    X = sp.csr_array(rng.standard_normal((60, 3)))
    y = rng.standard_normal(60)
    with pytest.raises(ConvergenceError) as info:
        l1_solve(X, y, max_iter=1, lp_fallback=False)
    assert info.value.objective > 0
    eta, obj, _ = l1_solve(X, y, max_iter=1)
    from scipy.optimize import linprog

    N = 60
    lp = linprog(np.r_[np.zeros(3), np.ones(2 * N)], A_eq=np.hstack([X.toarray(), np.eye(N), -np.eye(N)]), b_eq=y,
                 bounds=[(None, None)] * 3 + [(0, None)] * (2 * N), method="highs")
    assert obj == pytest.approx(lp.fun, rel=1e-9)


# GLS ------------------------------------------------------------------------------------


@pytest.mark.parametrize("method", ROUTES)
def test_gls_with_identity_is_ols(method, rng):
    n = 30
    ds = assemble(mixed_spec(rng, n), series(rng, n, missing=[4]))
    ols, gls = fit_ols(ds, method), fit_gls(ds, np.eye(n), method)
    np.testing.assert_allclose(gls.eta, ols.eta, atol=1e-10)
    np.testing.assert_allclose(gls.leverages, ols.leverages, atol=1e-10)


@pytest.mark.parametrize("method", ROUTES)
@pytest.mark.parametrize("c", [0.1, 4.0, 100.0])
def test_scalar_covariance_keeps_the_estimate(method, c, rng):
    n = 30
    ds = assemble(mixed_spec(rng, n), series(rng, n))
    base = fit_gls(ds, 1.0, method)
    res = fit_gls(ds, c * np.eye(n), method)
    np.testing.assert_allclose(res.eta, base.eta, atol=1e-10 * max(1, np.abs(base.eta).max()))
    np.testing.assert_allclose(res.component_variances["trend"], c * base.component_variances["trend"], rtol=1e-8)


@pytest.mark.parametrize("method", ROUTES)
def test_ar1_gls_matches_dense_oracle(method, rng):
    n = 36
    ds = assemble(mixed_spec(rng, n), series(rng, n, missing=[7]))
    S = ar1_covariance(n, 0.5, 2.0)
    o = ds.obs_index
    So = S[np.ix_(o, o)]
    W = np.eye(ds.X.shape[0])
    W[: ds.n_obs, : ds.n_obs] = np.linalg.inv(So)
    W[ds.n_obs:, ds.n_obs:] /= np.mean(np.diag(So))
    _, C, eta = dense_oracle(ds, W)
    res = fit_gls(ds, S, method)
    np.testing.assert_allclose(res.eta, eta, atol=1e-8)
    np.testing.assert_allclose(res.component_variances["w"], component_variance(ds, C, "w"), atol=1e-10)
    np.testing.assert_allclose(res.coef_variances, np.diag(C), atol=1e-10)


def test_gls_covariance_validation(rng):
    n = 10
    ds = assemble(ModelSpec(1.0), series(rng, n))
    with pytest.raises(np.linalg.LinAlgError):
        fit_gls(ds, -np.eye(n))
    bad = np.eye(n)
    bad[0, 1] = 0.5
    with pytest.raises(ValueError, match="symmetric"):
        fit_gls(ds, bad)
    with pytest.raises(ValueError):
        fit_gls(ds, np.ones(n + 1))
    np.testing.assert_allclose(fit_gls(ds, np.full(n, 2.0)).eta, fit_gls(ds, 2.0).eta, atol=1e-12)
    with pytest.raises(ValueError):
        ar1_covariance(5, 1.0)


# forecasting ------------------------------------------------------------------------------


@pytest.mark.parametrize("method", ROUTES[:1])
def test_forecast_extends_a_line(method):
    y = 1.5 - 0.25 * np.arange(30.0)
    res = forecast(ModelSpec(3.0), TimeSeriesData(y), 20, method=method)
    fut = 1.5 - 0.25 * np.arange(30.0, 50.0)
    assert np.abs(res.forecast.mean - fut).max() < 1e-6
    np.testing.assert_array_equal(res.forecast.times, np.arange(30.0, 50.0))


def test_forecast_repeats_a_cycle():
    pattern = np.array([1.0, -2.0, 0.5, 0.5])
    y = np.tile(pattern, 6) + 3.0
    spec = ModelSpec(10.0, [SeasonalSpec.cycle(4, (10.0, 10.0, 1e-5), name="s")])
    res = forecast(spec, TimeSeriesData(y), 4)
    assert np.abs(res.forecast.mean - (pattern + 3.0)).max() < 1e-6


def test_forecast_intervals(rng):
    res = forecast(ModelSpec(1.0), series(rng, 25), 5, level=0.9)
    f = res.forecast
    assert np.all(f.sd >= res.sigma_R)
    np.testing.assert_allclose(f.upper - f.mean, norm.ppf(0.95) * f.sd)
    assert np.all(np.diff(f.sd) > 0)


@pytest.mark.parametrize("h", [0, -1, 2.5])
def test_forecast_horizon_must_be_positive(h, rng):
    with pytest.raises(ValueError):
        forecast(ModelSpec(1.0), series(rng, 10), h)


def test_forecast_needs_covariates_over_the_horizon(rng):
    spec = ModelSpec(1.0, [], [CovariateSpec("static", np.ones(10), name="a")])
    with pytest.raises(ValueError, match="needed"):
        forecast(spec, series(rng, 10), 3)
