from dataclasses import dataclass

import numpy as np
import pytest
from scipy.special import expit

from doseinfer.data import ObservationSet
from doseinfer.nuisance import (
    NuisanceError,
    NuisanceFit,
    PluginCurve,
    RidgeLearner,
    covariate_features,
    fit_conditional_density,
    fit_conditional_mean,
    fit_nuisance,
    reflected_kernel,
    select_bandwidth_marginal,
    stability_weights,
)
from doseinfer.simulation import DgpConfig, centered_truth, exposure_density, gen_data, outcome_mean


@dataclass
class _Constant:
    value: float

    def predict(self, X):
        return np.full(np.asarray(X).shape[0], self.value)


class _Lambda:
    """Density stub with ``matrix(a01, W)[j, k] = g(a01_k, W_j)``."""

    def __init__(self, func, g_floor=0.01):
        self.func = func
        self.g_floor = g_floor
        self.bandwidth = 0.1

    def matrix(self, a01, W, floor=True):
        M = self.func(np.asarray(a01)[None, :], np.asarray(W)[:, :1])
        return np.maximum(M, self.g_floor) if floor else M


class _MeanStub:
    def __init__(self, func):
        self.func = func

    def grid(self, W, a01):
        return self.func(np.asarray(W)[:, :1], np.asarray(a01)[None, :])


def test_covariate_features_degrees():
    W = np.array([[2.0, 3.0]])
    np.testing.assert_array_equal(covariate_features(W, 1), [[2.0, 3.0]])
    np.testing.assert_array_equal(covariate_features(W, 2), [[2.0, 3.0, 4.0, 6.0, 9.0]])
    assert covariate_features(np.empty((4, 0)), 3).shape == (4, 0)


def test_constant_outcome_gives_constant_fit():
    rng = np.random.default_rng(0)
    obs = ObservationSet(W=rng.standard_normal((80, 2)), A=rng.uniform(size=80), Y=np.full(80, 3.0))
    Q = fit_conditional_mean(obs)
    np.testing.assert_allclose(Q(obs.W, obs.A01), 3.0, atol=1e-10)
    np.testing.assert_allclose(Q.grid(obs.W[:5], np.linspace(0, 1, 7)), 3.0, atol=1e-10)


def test_outcome_fit_accuracy_setting1(setting1_data, setting1_fit):
    nuisance, _ = setting1_fit
    obs = setting1_data
    truth = outcome_mean(obs.W, obs.A, 1)
    mse = np.mean((nuisance.Q(obs.W, obs.A01) - truth) ** 2)
    assert mse < 4.0 / 3.0


def test_grid_matches_pointwise(setting2_fit, setting2_data):
    Q = setting2_fit[0].Q
    W = setting2_data.W[:6]
    a = np.linspace(0, 1, 9)
    G = Q.grid(W, a)
    direct = np.array([[Q(W[j : j + 1], a[k : k + 1])[0] for k in range(9)] for j in range(6)])
    np.testing.assert_allclose(G, direct, atol=1e-12)


def test_no_covariates_reduces_to_exposure_regression():
    rng = np.random.default_rng(1)
    A = rng.uniform(size=300)
    obs = ObservationSet(W=np.empty((300, 0)), A=A, Y=np.sin(3 * A) + 0.1 * rng.standard_normal(300))
    Q = fit_conditional_mean(obs)
    grid = np.linspace(0.05, 0.95, 10)
    vals = Q(np.empty((10, 0)), grid)
    np.testing.assert_allclose(vals, np.sin(3 * obs.from_unit(grid)), atol=0.1)
    G = Q.grid(np.empty((4, 0)), grid)
    np.testing.assert_allclose(G, np.tile(vals, (4, 1)))


def test_generic_learner_path():
    rng = np.random.default_rng(2)
    obs = ObservationSet(W=rng.standard_normal((50, 1)), A=rng.uniform(size=50), Y=rng.standard_normal(50))
    Q = fit_conditional_mean(obs, learner=RidgeLearner())
    assert Q.grid(obs.W[:3], np.array([0.2, 0.8])).shape == (3, 2)


def test_too_few_rows_for_folds():
    obs = ObservationSet(W=np.zeros((6, 0)), A=np.arange(6.0), Y=np.arange(6.0))
    with pytest.raises(NuisanceError):
        fit_conditional_mean(obs, folds=5)


def test_reflected_kernel_integrates_to_one():
    x = np.linspace(0, 1, 20001)
    for r in (0.02, 0.1, 0.4):
        K = reflected_kernel(x, [0.0, 0.3, 1.0], r)
        np.testing.assert_allclose(np.trapezoid(K, x, axis=0), 1.0, atol=2e-3)


def test_independent_exposure_gives_flat_density():
    rng = np.random.default_rng(3)
    n = 2000
    obs = ObservationSet(W=rng.standard_normal((n, 2)), A=rng.uniform(size=n), Y=np.zeros(n))
    g = fit_conditional_density(obs)
    vals = g.grid_values(rng.standard_normal((25, 2)))
    assert np.max(np.abs(vals - 1.0)) < 0.15


def test_density_integrates_near_one(setting2_fit):
    g = setting2_fit[0].g
    rng = np.random.default_rng(4)
    W = rng.standard_normal((10, 2))
    u = np.linspace(0, 1, 2001)
    integrals = np.trapezoid(g.matrix(u, W), u, axis=1)
    assert np.all((integrals >= 0.9) & (integrals <= 1.1))


def test_density_tracks_truth(setting2_fit, setting2_data):
    g = setting2_fit[0].g
    obs = setting2_data
    u = np.linspace(0.1, 0.9, 9)
    W = np.array([[-1.0, -1.0], [0.0, 0.0], [1.0, 1.0]])
    z = 3 * (expit(W.sum(axis=1)) - 0.5)
    truth = np.array([exposure_density(obs.from_unit(u), zi) for zi in z]) * (obs.a_max - obs.a_min)
    assert np.max(np.abs(g.matrix(u, W) - truth)) < 0.35


def test_density_floor_holds(setting2_fit, setting2_data):
    g = setting2_fit[0].g
    assert np.min(g(setting2_data.A01, setting2_data.W)) >= g.g_floor


def test_conditional_bandwidth_method(small_data):
    g = fit_conditional_density(small_data, bandwidths=[0.05, 0.2], method="conditional")
    assert g.bandwidth in (0.05, 0.2)
    with pytest.raises(ValueError):
        fit_conditional_density(small_data, method="bogus")


def test_marginal_bandwidth_selection_validates():
    with pytest.raises(NuisanceError):
        select_bandwidth_marginal(np.linspace(0, 1, 10), [])
    with pytest.raises(NuisanceError):
        select_bandwidth_marginal(np.linspace(0, 1, 10), [0.1, -1.0])


def test_larger_bandwidth_not_rougher(small_data):
    rng = np.random.default_rng(5)
    W = rng.standard_normal((5, 2))
    tv = []
    for r in (0.03, 0.08, 0.2, 0.4):
        vals = fit_conditional_density(small_data, bandwidths=[r]).grid_values(W)
        tv.append(np.abs(np.diff(vals, axis=1)).sum(axis=1).mean())
    assert all(b <= a * 1.05 for a, b in zip(tv, tv[1:]))


def test_weights_all_one_when_density_ignores_covariates():
    obs = ObservationSet(W=np.arange(10.0)[:, None], A=np.linspace(0, 1, 10), Y=np.zeros(10))
    fit = NuisanceFit(Q=None, g=_Lambda(lambda a, w: 1.0 + 0.5 * a + 0.0 * w))
    np.testing.assert_allclose(stability_weights(fit, obs), 1.0)


def test_weights_two_point_example():
    obs = ObservationSet(W=np.array([[0.0], [1.0]]), A=np.array([0.0, 1.0]), Y=np.zeros(2))
    fit = NuisanceFit(Q=None, g=_Lambda(lambda a, w: np.where(w == 0.0, 2.0, 1.0) + 0.0 * a))
    np.testing.assert_allclose(stability_weights(fit, obs), [0.75, 1.5])


def test_weights_range_on_simulated_data(setting2_fit, setting2_data):
    w = stability_weights(setting2_fit[0], setting2_data)
    assert np.all((w >= 0.05) & (w <= 20.0))
    np.testing.assert_allclose(w, setting2_fit[1].weights)


def test_plugin_curve_examples():
    W = np.array([[1.0], [-2.0], [4.0]])
    a = np.linspace(0, 1, 5)
    np.testing.assert_allclose(PluginCurve(_MeanStub(lambda w, u: u + 0.0 * w), W)(a), a)
    np.testing.assert_allclose(PluginCurve(_MeanStub(lambda w, u: w + 0.0 * u), W)(a), np.full(5, 1.0))


def test_plugin_curve_linear_in_outcome(small_data):
    doubled = ObservationSet(W=small_data.W, A=small_data.A, Y=2 * small_data.Y)
    a = np.linspace(0, 1, 11)
    one = PluginCurve(fit_conditional_mean(small_data), small_data.W)(a)
    two = PluginCurve(fit_conditional_mean(doubled), small_data.W)(a)
    np.testing.assert_allclose(two, 2 * one, rtol=1e-8, atol=1e-10)


def test_plugin_curve_close_to_truth_setting2():
    dist = []
    for rep in range(20):
        obs = gen_data(DgpConfig(2, 500, 700 + rep))
        fit = fit_nuisance(obs)
        u = np.linspace(0, 1, 101)
        est = PluginCurve(fit.Q, obs.W)(u)
        weights = PluginCurve(fit.Q, obs.W)(obs.A01)
        truth = centered_truth(obs.from_unit(u))
        dist.append(np.max(np.abs((est - weights.mean()) - truth)))
    assert np.median(dist) < 0.35
