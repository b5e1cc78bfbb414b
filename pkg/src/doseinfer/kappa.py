"""Data-adaptive roughness bound from a penalized regression of a doubly robust pseudo-outcome."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .basis import BasisFunction, SobolevBasis
from .data import NullCurve, ObservationSet
from .estimators import Workspace, build_workspace
from .nuisance import NuisanceFit, fold_ids

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = tuple(np.logspace(-12, 0, 49))


@dataclass(frozen=True)
class KappaSelection:
    kappa: float
    h: BasisFunction
    coef: NDArray[np.float64]
    lam: float
    cv_lambdas: NDArray[np.float64]
    cv_mean: NDArray[np.float64]
    cv_se: NDArray[np.float64]
    degenerate: bool
    roughness: float
    """``J`` of the one-SE fit itself (not normalized)."""
    roughness_min_cv: float = float("nan")
    """``J`` of the CV-minimizing fit; sizes the band's curve class."""


def pseudo_outcome(ws: Workspace, null: NullCurve | None) -> NDArray[np.float64]:
    """``theta_n(A_i) + weight_i (Y_i - Q_n(W_i, A_i)) - theta*(A_i)``."""
    f = ws.theta_n + ws.weights * ws.residuals
    if null is not None:
        f = f - np.asarray(null(ws.data.A01), dtype=float)
    return f


class _RidgePath:
    """Generalized ridge ``(V + lam Gamma)^{-1} b`` along a lambda path via one eigendecomposition."""

    def __init__(self, E, f, penalty):
        self.E_mean = E.mean(axis=0)
        self.f_mean = f.mean()
        Ec = E - self.E_mean
        n = E.shape[0]
        V = Ec.T @ Ec / n
        b = Ec.T @ (f - self.f_mean) / n
        self.ginv = 1.0 / np.sqrt(penalty)
        S = self.ginv[:, None] * V * self.ginv[None, :]
        self.s, self.Q = np.linalg.eigh(0.5 * (S + S.T))
        self.s = np.maximum(self.s, 0.0)
        self.bt = self.Q.T @ (self.ginv * b)

    def coef(self, lambdas) -> NDArray[np.float64]:
        lam = np.asarray(lambdas, dtype=float)[:, None]
        return ((self.bt / (self.s + lam)) @ self.Q.T) * self.ginv

    def predict(self, E, coefs) -> NDArray[np.float64]:
        return self.f_mean + (E - self.E_mean) @ coefs.T


def select_kappa(
    data: ObservationSet,
    nuisance: NuisanceFit,
    null: NullCurve | None,
    basis: SobolevBasis,
    folds: int = 5,
    *,
    lambdas=DEFAULT_LAMBDAS,
    workspace: Workspace | None = None,
) -> KappaSelection:
    """Estimate the roughness of the centered curve ``theta_0 - theta*``.

    The pseudo-outcome is regressed on the basis with penalty
    ``lam * sum c_d^2 / gamma_d``; ``lam`` is the largest grid value whose
    K-fold CV error is within one standard error of the minimum.
    """
    ws = workspace or build_workspace(data, nuisance, basis)
    f = pseudo_outcome(ws, null)
    E = ws.E
    lambdas = np.sort(np.asarray(lambdas, dtype=float))
    penalty = basis.penalty
    ids = fold_ids(data.n, folds)
    errs = np.empty((folds, lambdas.size))
    for k in range(folds):
        tr, te = ids != k, ids == k
        path = _RidgePath(E[tr], f[tr], penalty)
        pred = path.predict(E[te], path.coef(lambdas))
        errs[k] = np.mean((f[te, None] - pred) ** 2, axis=0)
    mean = errs.mean(axis=0)
    se = errs.std(axis=0, ddof=1) / np.sqrt(folds)
    best = int(np.argmin(mean))
    ok = np.flatnonzero(mean <= mean[best] + se[best])
    lam = float(lambdas[ok.max()])
    full = _RidgePath(E, f, penalty)
    coef = full.coef([lam])[0]
    rough_min = float(np.sum(full.coef([lambdas[best]])[0] ** 2 * penalty))
    var = float(coef @ ws.V @ coef)
    rough = float(np.sum(coef**2 * penalty))
    if not var > 1e-14 * max(1.0, float(np.var(f))) or rough == 0.0:
        log.warning("fitted curve has zero variance; falling back to the smoothest direction")
        var1 = float(ws.V[0, 0])
        unit = np.zeros(basis.D)
        unit[0] = 1.0 / np.sqrt(var1)
        return KappaSelection(
            kappa=float(penalty[0] / var1), h=BasisFunction(unit, -float(unit @ ws.E_mean)), coef=coef,
            lam=lam, cv_lambdas=lambdas, cv_mean=mean, cv_se=se, degenerate=True, roughness=rough,
            roughness_min_cv=rough_min,
        )
    unit = coef / np.sqrt(var)
    return KappaSelection(
        kappa=rough / var, h=BasisFunction(unit, -float(unit @ ws.E_mean)), coef=coef, lam=lam,
        cv_lambdas=lambdas, cv_mean=mean, cv_se=se, degenerate=False, roughness=rough,
        roughness_min_cv=rough_min,
    )
