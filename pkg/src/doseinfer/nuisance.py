"""Nuisance estimation: outcome regression Q and conditional exposure density g.

Both nuisances are fitted through small cross-validated penalized learners.
Anything exposing ``fit(X, y)`` returning an object with ``predict(X)`` can
stand in for the outcome regression.
"""

from __future__ import annotations

import itertools

import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from numpy.typing import NDArray

from .basis import SobolevBasis
from .data import ObservationSet

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = tuple(np.logspace(-6, 2, 17))
DEFAULT_OUTCOME_ALPHAS = tuple(np.logspace(-6, -2, 5))
DEFAULT_DENSITY_ALPHAS = (1e-4, 1e-2, 1.0, 10.0, 100.0)
DEFAULT_BANDWIDTHS = tuple(np.geomspace(0.02, 0.4, 14))
SQRT_2PI = np.sqrt(2.0 * np.pi)


class NuisanceError(RuntimeError):
    pass


class Predictor(Protocol):
    def predict(self, X) -> NDArray[np.float64]: ...


class RegressionLearner(Protocol):
    def fit(self, X, y) -> Predictor: ...


def fold_ids(n: int, folds: int) -> NDArray[np.int64]:
    """Deterministic interleaved fold assignment."""
    return np.arange(n) % folds


def covariate_features(W, degree: int = 2) -> NDArray[np.float64]:
    """All monomials of the covariates up to total ``degree`` (no constant column)."""
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    cols = [W]
    for k in range(2, degree + 1):
        for idx in itertools.combinations_with_replacement(range(W.shape[1]), k):
            cols.append(np.prod(W[:, list(idx)], axis=1, keepdims=True))
    return np.hstack(cols)


# ----------------------------------------------------------------------------
# ridge regression with K-fold CV
# ----------------------------------------------------------------------------


def _standardize(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd < 1e-12] = np.inf
    return mu, sd


def _ridge_path(X, y, alphas):
    """Coefficients on standardized, centered data for each alpha; shape (len(alphas), p)."""
    n = X.shape[0]
    if X.shape[1] == 0:
        return np.zeros((len(alphas), 0))
    Uv, s, Vt = np.linalg.svd(X, full_matrices=False)
    uty = Uv.T @ y
    shrink = s[None, :] / (s[None, :] ** 2 + n * np.asarray(alphas)[:, None])
    return (shrink * uty[None, :]) @ Vt


@dataclass
class RidgePredictor:
    coef: NDArray[np.float64]
    intercept: float
    mu: NDArray[np.float64]
    sd: NDArray[np.float64]
    alpha: float

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        return self.intercept + ((X - self.mu) / self.sd) @ self.coef


@dataclass
class RidgeLearner:
    """Squared-error ridge with the penalty chosen by K-fold CV (minimum rule)."""

    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    folds: int = 5

    def _fit_alpha(self, X, y, alpha):
        mu, sd = _standardize(X)
        Xs = (X - mu) / sd
        coef = _ridge_path(Xs, y - y.mean(), [alpha])[0]
        return RidgePredictor(coef=coef, intercept=float(y.mean()), mu=mu, sd=sd, alpha=float(alpha))

    def cv_errors(self, X, y) -> NDArray[np.float64]:
        ids = fold_ids(X.shape[0], self.folds)
        errs = np.zeros((self.folds, len(self.alphas)))
        for k in range(self.folds):
            tr, te = ids != k, ids == k
            mu, sd = _standardize(X[tr])
            ym = y[tr].mean()
            path = _ridge_path((X[tr] - mu) / sd, y[tr] - ym, self.alphas)
            pred = ym + ((X[te] - mu) / sd) @ path.T
            errs[k] = np.mean((y[te, None] - pred) ** 2, axis=0)
        return errs

    def fit(self, X, y) -> RidgePredictor:
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if np.ptp(y) == 0.0:
            return RidgePredictor(np.zeros(X.shape[1]), float(y[0]), np.zeros(X.shape[1]),
                                  np.ones(X.shape[1]), np.inf)
        if X.shape[0] < 2 * self.folds:
            raise NuisanceError(f"need n >= 2*folds ({2 * self.folds}), got {X.shape[0]}")
        errs = self.cv_errors(X, y).mean(axis=0)
        alpha = self.alphas[int(np.argmin(errs))]
        return self._fit_alpha(X, y, alpha)


# ----------------------------------------------------------------------------
# conditional mean
# ----------------------------------------------------------------------------


@dataclass
class TensorFeatures:
    """Exposure terms crossed with low-order covariate terms.

    Exposure terms are ``1, a, ..., a^poly_degree`` plus the first
    ``trig_terms`` Sobolev eigenfunctions; covariate terms are ``1`` and the
    covariate monomials up to ``covariate_degree``. Covariate terms interact
    only with ``a^k`` for ``k <= interaction_degree``; ``None`` keeps the full
    tensor product.
    """

    poly_degree: int = 3
    trig_terms: int = 2
    covariate_degree: int = 3
    interaction_degree: int | None = 1

    def exposure_part(self, a01) -> NDArray[np.float64]:
        a = np.asarray(a01, dtype=float).reshape(-1)
        cols = [a**k for k in range(self.poly_degree + 1)]
        if self.trig_terms:
            cols.extend(SobolevBasis(self.trig_terms).evaluate(a).T)
        return np.column_stack(cols)

    def covariate_part(self, W) -> NDArray[np.float64]:
        W = np.asarray(W, dtype=float)
        return np.hstack([np.ones((W.shape[0], 1)), covariate_features(W, self.covariate_degree)])

    def mask(self, n_exposure: int, n_covariate: int) -> NDArray[np.bool_]:
        """Kept cells of the ``exposure x covariate`` tensor, flattened row-major, constant dropped."""
        keep = np.ones((n_exposure, n_covariate), dtype=bool)
        if self.interaction_degree is not None:
            keep[self.interaction_degree + 1 :, 1:] = False
        keep[0, 0] = False
        return keep.reshape(-1)

    def __call__(self, W, a01) -> NDArray[np.float64]:
        Fa = self.exposure_part(a01)
        Fw = self.covariate_part(W)
        X = (Fa[:, :, None] * Fw[:, None, :]).reshape(Fa.shape[0], -1)
        return X[:, self.mask(Fa.shape[1], Fw.shape[1])]


@dataclass
class SobolevTensorRidge:
    """Default outcome learner: lightly penalized ridge on :class:`TensorFeatures`.

    The penalty grid stays small on purpose. Heavy shrinkage of the
    exposure-covariate interactions moves confounded signal into the
    exposure main effect and biases the plug-in curve.
    """

    features: TensorFeatures = field(default_factory=TensorFeatures)
    ridge: RidgeLearner = field(default_factory=lambda: RidgeLearner(alphas=DEFAULT_OUTCOME_ALPHAS))

    def fit_mean(self, W, a01, y) -> ConditionalMean:
        pred = self.ridge.fit(self.features(W, a01), y)
        return ConditionalMean(predictor=pred, features=self.features)


@dataclass
class ConditionalMean:
    """Fitted ``Q_n(w, a01)``.

    ``features`` is ``None`` for generic learners, whose predictors receive
    the raw design ``[W, a01]``.
    """

    predictor: Predictor
    features: TensorFeatures | None = None

    def __call__(self, W, a01) -> NDArray[np.float64]:
        W = np.asarray(W, dtype=float)
        a01 = np.asarray(a01, dtype=float).reshape(-1)
        if self.features is not None:
            return self.predictor.predict(self.features(W, a01))
        return np.asarray(self.predictor.predict(np.column_stack([W, a01])), dtype=float)

    def grid(self, W, a01) -> NDArray[np.float64]:
        """Matrix ``[Q_n(W_j, a_k)]`` of shape ``(len(W), len(a01))``."""
        W = np.asarray(W, dtype=float)
        a01 = np.asarray(a01, dtype=float).reshape(-1)
        if self.features is not None and isinstance(self.predictor, RidgePredictor):
            # factorized evaluation of the tensor model
            p = self.predictor
            Fa = self.features.exposure_part(a01)
            Fw = self.features.covariate_part(W)
            beta = np.zeros(Fa.shape[1] * Fw.shape[1])
            beta[self.features.mask(Fa.shape[1], Fw.shape[1])] = p.coef / p.sd
            shift = p.intercept - float(np.sum(p.mu * p.coef / p.sd))
            B = beta.reshape(Fa.shape[1], Fw.shape[1])
            return shift + Fw @ B.T @ Fa.T
        nw, na = W.shape[0], a01.shape[0]
        return self(np.repeat(W, na, axis=0), np.tile(a01, nw)).reshape(nw, na)


def fit_conditional_mean(data: ObservationSet, learner=None, folds: int = 5) -> ConditionalMean:
    """Fit the outcome regression of Y on (W, A01)."""
    if data.n < 2 * folds:
        raise NuisanceError(f"need n >= 2*folds ({2 * folds}), got {data.n}")
    if learner is None:
        learner = SobolevTensorRidge(ridge=RidgeLearner(alphas=DEFAULT_OUTCOME_ALPHAS, folds=folds))
    if hasattr(learner, "fit_mean"):
        Q = learner.fit_mean(data.W, data.A01, data.Y)
    else:
        try:
            Q = ConditionalMean(predictor=learner.fit(np.column_stack([data.W, data.A01]), data.Y))
        except Exception as exc:
            raise NuisanceError(f"outcome learner failed: {exc}") from exc
    fitted = Q(data.W, data.A01)
    if not np.all(np.isfinite(fitted)):
        raise NuisanceError("outcome regression produced non-finite predictions")
    return Q


# ----------------------------------------------------------------------------
# conditional density
# ----------------------------------------------------------------------------


def reflected_kernel(x, centers, r: float) -> NDArray[np.float64]:
    """Gaussian kernel on [0, 1] with reflection at both boundaries.

    Returns ``K[i, j] = k_r(x_i; centers_j)``.
    """
    x = np.asarray(x, dtype=float)[:, None]
    c = np.asarray(centers, dtype=float)[None, :]
    out = np.zeros(np.broadcast_shapes(x.shape, c.shape))
    # images of the center at 2k +/- c, enough for bandwidths up to about 0.5
    for k in range(-2, 3):
        out += np.exp(-0.5 * ((x - 2.0 * k - c) / r) ** 2)
        out += np.exp(-0.5 * ((x - 2.0 * k + c) / r) ** 2)
    return out / (r * SQRT_2PI)


def select_bandwidth_marginal(A01, bandwidths=DEFAULT_BANDWIDTHS, *, one_se: bool = True
                              ) -> tuple[float, NDArray[np.float64]]:
    """Leave-one-out likelihood CV for a marginal KDE of the rescaled exposure.

    With ``one_se`` the largest bandwidth whose total score is within one
    paired standard error of the best is returned, which keeps flat
    densities from being fit with a needlessly small bandwidth.
    """
    bandwidths = np.asarray(bandwidths, dtype=float)
    if bandwidths.size == 0:
        raise NuisanceError("bandwidth list is empty")
    if np.any(bandwidths <= 0):
        raise NuisanceError("bandwidths must be positive")
    A01 = np.asarray(A01, dtype=float)
    n = A01.shape[0]
    loglik = np.empty((bandwidths.size, n))
    for k, r in enumerate(bandwidths):
        K = reflected_kernel(A01, A01, r)
        np.fill_diagonal(K, 0.0)
        loglik[k] = np.log(np.maximum(K.sum(axis=1) / (n - 1), 1e-300))
    scores = loglik.sum(axis=1)
    best = int(np.argmax(scores))
    if not one_se:
        return float(bandwidths[best]), scores
    se = np.sqrt(n) * np.std(loglik - loglik[best], axis=1, ddof=1)
    ok = np.flatnonzero(scores >= scores[best] - se)
    pick = ok[np.argmax(bandwidths[ok])]
    return float(bandwidths[pick]), scores


@dataclass
class LogLinearPredictor:
    coef: NDArray[np.float64]  # (p + 1, G), first row is the intercept
    mu: NDArray[np.float64]
    sd: NDArray[np.float64]

    def predict_log(self, X) -> NDArray[np.float64]:
        Xs = (np.asarray(X, dtype=float) - self.mu) / self.sd
        return self.coef[0] + Xs @ self.coef[1:]

    def predict(self, X) -> NDArray[np.float64]:
        return np.exp(self.predict_log(X))


@dataclass
class LogLinearRidge:
    """Multi-output ridge-penalized Poisson regression (log link).

    Each column of the target matrix is a separate log-linear fit sharing
    the design; the common penalty is chosen by K-fold CV on pooled Poisson
    deviance.
    """

    alphas: tuple[float, ...] = DEFAULT_DENSITY_ALPHAS
    folds: int = 5
    max_iter: int = 50
    tol: float = 1e-10

    def _fit_alpha(self, Xs, T, alpha):
        n, p = Xs.shape
        G = T.shape[1]
        X1 = np.hstack([np.ones((n, 1)), Xs])
        pen = np.full(p + 1, alpha)
        pen[0] = 0.0
        B = np.zeros((p + 1, G))
        B[0] = np.log(np.maximum(T.mean(axis=0), 1e-12))

        def objective(B):
            eta = X1 @ B
            return np.mean(np.exp(eta) - T * eta, axis=0) + 0.5 * np.sum(pen[:, None] * B**2, axis=0)

        obj = objective(B)
        for _ in range(self.max_iter):
            mu = np.exp(X1 @ B)
            grad = X1.T @ (mu - T) / n + pen[:, None] * B
            H = np.einsum("ni,nj,ng->gij", X1, X1, mu) / n + np.diag(pen)[None]
            H[:, 0, 0] += 1e-12
            step = np.linalg.solve(H, grad.T[..., None])[..., 0].T
            scale = np.ones(G)
            for _ in range(30):
                cand = B - scale * step
                new = objective(cand)
                worse = new > obj + 1e-15
                if not np.any(worse):
                    break
                scale = np.where(worse, 0.5 * scale, scale)
            B, dec = cand, obj - new
            obj = new
            if np.all(np.abs(dec) <= self.tol * (1.0 + np.abs(obj))):
                break
        return B

    def _fit(self, X, T, alpha) -> LogLinearPredictor:
        mu, sd = _standardize(X) if X.shape[1] else (np.zeros(0), np.ones(0))
        Xs = (X - mu) / sd if X.shape[1] else X
        return LogLinearPredictor(coef=self._fit_alpha(Xs, T, alpha), mu=mu, sd=sd)

    def fit(self, X, T) -> LogLinearPredictor:
        X = np.asarray(X, dtype=float)
        T = np.asarray(T, dtype=float)
        if T.ndim == 1:
            T = T[:, None]
        if X.shape[1] == 0 or len(self.alphas) == 1:
            return self._fit(X, T, self.alphas[0])
        ids = fold_ids(X.shape[0], self.folds)
        dev = np.zeros(len(self.alphas))
        for k in range(self.folds):
            tr, te = ids != k, ids == k
            for j, alpha in enumerate(self.alphas):
                pred = self._fit(X[tr], T[tr], alpha)
                eta = pred.predict_log(X[te])
                dev[j] += np.sum(np.exp(eta) - T[te] * eta)
        return self._fit(X, T, self.alphas[int(np.argmin(dev))])


@dataclass
class ConditionalDensity:
    """Fitted ``g_n(a01 | w)``: log-linear fits at grid points, linear interpolation between."""

    predictor: LogLinearPredictor
    grid: NDArray[np.float64]
    bandwidth: float
    g_floor: float
    covariate_degree: int = 2

    def grid_values(self, W) -> NDArray[np.float64]:
        X = covariate_features(W, self.covariate_degree)
        return self.predictor.predict(X)

    def _interp_weights(self, a01):
        a = np.clip(np.asarray(a01, dtype=float).reshape(-1), self.grid[0], self.grid[-1])
        idx = np.clip(np.searchsorted(self.grid, a, side="right") - 1, 0, self.grid.size - 2)
        t = (a - self.grid[idx]) / (self.grid[idx + 1] - self.grid[idx])
        return idx, t

    def matrix(self, a01, W, floor: bool = True) -> NDArray[np.float64]:
        """``M[j, k] = g_n(a01_k | W_j)``."""
        vals = self.grid_values(W)
        idx, t = self._interp_weights(a01)
        out = (1.0 - t) * vals[:, idx] + t * vals[:, idx + 1]
        return np.maximum(out, self.g_floor) if floor else out

    def __call__(self, a01, W, floor: bool = True) -> NDArray[np.float64]:
        """Pairwise evaluation ``g_n(a01_i | W_i)``."""
        vals = self.grid_values(W)
        idx, t = self._interp_weights(a01)
        rows = np.arange(vals.shape[0])
        out = (1.0 - t) * vals[rows, idx] + t * vals[rows, idx + 1]
        return np.maximum(out, self.g_floor) if floor else out


def _kernel_targets(A01, grid, r):
    return reflected_kernel(A01, grid, r)


def _conditional_cv_bandwidth(data, learner, grid, bandwidths, g_floor, folds):
    ids = fold_ids(data.n, folds)
    X = covariate_features(data.W, learner_degree(learner))
    scores = np.zeros(len(bandwidths))
    for b, r in enumerate(bandwidths):
        for k in range(folds):
            tr, te = ids != k, ids == k
            pred = learner.fit(X[tr], _kernel_targets(data.A01[tr], grid, r))
            dens = ConditionalDensity(pred, grid, r, g_floor, learner_degree(learner))
            scores[b] += np.sum(np.log(dens(data.A01[te], data.W[te])))
    return float(bandwidths[int(np.argmax(scores))]), scores


def learner_degree(learner) -> int:
    return getattr(learner, "covariate_degree", 2)


def fit_conditional_density(
    data: ObservationSet,
    learner: LogLinearRidge | None = None,
    grid_size: int = 51,
    bandwidths=DEFAULT_BANDWIDTHS,
    *,
    method: str = "marginal",
    g_floor: float = 0.01,
    folds: int = 5,
) -> ConditionalDensity:
    """Kernel-smoothed conditional density on the rescaled exposure scale.

    At each grid point ``a_j`` the reflected Gaussian kernel
    ``k_r(A01; a_j)`` is regressed on covariate features with a log link.
    ``method="marginal"`` picks ``r`` by likelihood CV of the marginal
    KDE; ``method="conditional"`` runs the full held-out log-likelihood CV.
    """
    if grid_size < 10:
        raise NuisanceError("grid_size must be at least 10")
    if np.ptp(data.A01) == 0.0:
        raise NuisanceError("all exposures identical")
    if learner is None:
        learner = LogLinearRidge(folds=folds)
    grid = np.linspace(0.0, 1.0, grid_size)
    bandwidths = tuple(bandwidths)
    if method == "marginal":
        r, _ = select_bandwidth_marginal(data.A01, bandwidths)
    elif method == "conditional":
        if not bandwidths:
            raise NuisanceError("bandwidth list is empty")
        r, _ = _conditional_cv_bandwidth(data, learner, grid, bandwidths, g_floor, folds)
    else:
        raise ValueError(f"unknown bandwidth method {method!r}")
    X = covariate_features(data.W, learner_degree(learner))
    pred = learner.fit(X, _kernel_targets(data.A01, grid, r))
    return ConditionalDensity(pred, grid, r, float(g_floor), learner_degree(learner))


# ----------------------------------------------------------------------------
# bundles
# ----------------------------------------------------------------------------


@dataclass
class NuisanceFit:
    Q: ConditionalMean
    g: ConditionalDensity

    @property
    def bandwidth(self) -> float:
        return self.g.bandwidth

    @property
    def g_floor(self) -> float:
        return self.g.g_floor


def fit_nuisance(
    data: ObservationSet,
    outcome_learner=None,
    density_learner: LogLinearRidge | None = None,
    *,
    folds: int = 5,
    grid_size: int = 51,
    bandwidths=DEFAULT_BANDWIDTHS,
    bandwidth_method: str = "marginal",
    g_floor: float = 0.01,
) -> NuisanceFit:
    Q = fit_conditional_mean(data, outcome_learner, folds)
    g = fit_conditional_density(data, density_learner, grid_size, bandwidths,
                                method=bandwidth_method, g_floor=g_floor, folds=folds)
    return NuisanceFit(Q=Q, g=g)


def stability_weights(fit: NuisanceFit, data: ObservationSet) -> NDArray[np.float64]:
    """``mean_j g_n(A_i | W_j) / max(g_n(A_i | W_i), floor)`` for each observation."""
    G = fit.g.matrix(data.A01, data.W, floor=False)  # G[j, i] = g(A_i | W_j)
    own = np.diag(G).copy()
    n_floored = int(np.sum(own < fit.g_floor))
    if n_floored:
        log.info("density floor applied to %d of %d observations", n_floored, data.n)
    G = np.maximum(G, fit.g_floor)
    return G.mean(axis=0) / np.diag(G)


@dataclass
class PluginCurve:
    """``theta_n(a01) = mean_i Q_n(W_i, a01)`` with cached values on a dense grid."""

    Q: ConditionalMean
    W: NDArray[np.float64]
    grid: NDArray[np.float64] = field(default_factory=lambda: np.linspace(0.0, 1.0, 201))
    values: NDArray[np.float64] = field(init=False)

    def __post_init__(self):
        self.values = self(self.grid)

    def __call__(self, a01) -> NDArray[np.float64]:
        a = np.asarray(a01, dtype=float)
        return self.Q.grid(self.W, a.reshape(-1)).mean(axis=0).reshape(a.shape)


def plugin_curve(Q: ConditionalMean, data: ObservationSet) -> PluginCurve:
    return PluginCurve(Q=Q, W=data.W)

