"""Inner-product estimators over the basis: plug-in, one-step and TML.

For a direction ``h`` the target is the empirical covariance between the
centered dose-response difference ``theta - theta*`` and ``h(A)``. All
three estimators are linear in the coefficients of ``h``, so each reduces
to a D-vector ``U`` with ``psi(sum c_d eta_d) = U'c``.

The TML update follows the universal least-favorable submodel, discretized
into steps of size ``eps``. Because every step adds
``eps * Z_n(.; h_b)`` with ``Z_n(w, a; h) = weight(w, a) (h(a) - mean h(A))``,
the fluctuated regression is ``Q_n + weight(w, a) (eta(a) - eta_bar)'C``
for an accumulated coefficient vector ``C``; nothing else needs storing.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .basis import BasisFunction, FunctionClassSpec, SobolevBasis
from .data import NullCurve, ObservationSet
from .nuisance import NuisanceFit, PluginCurve
from .qcqp import QcqpSolver

log = logging.getLogger(__name__)

DEFAULT_MAX_STEPS = 500
DEFAULT_EPS_FACTOR = 1e-3


class TmlConvergenceError(RuntimeError):
    """The update did not reach the stopping threshold; carries the trace."""

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


class DegenerateThresholdError(RuntimeError):
    pass


@dataclass
class Workspace:
    """Per-dataset quantities shared by every estimator and the bootstrap.

    ``Qmat[j, i] = Q_n(W_j, A_i)`` and ``Gmat[j, i] = g_n(A_i | W_j)``
    (floored), so column means give ``theta_n(A_i)`` and the marginal
    density average ``mean_j g_n(A_i | W_j)``.
    """

    data: ObservationSet
    nuisance: NuisanceFit
    basis: SobolevBasis
    E: NDArray[np.float64]
    Ec: NDArray[np.float64]
    E_mean: NDArray[np.float64]
    Qmat: NDArray[np.float64]
    Gmat: NDArray[np.float64]
    theta_n: NDArray[np.float64]
    fitted: NDArray[np.float64]
    residuals: NDArray[np.float64]
    weights: NDArray[np.float64]
    n_floored: int

    @property
    def n(self) -> int:
        return self.data.n

    @property
    def V(self) -> NDArray[np.float64]:
        V = self.Ec.T @ self.Ec / self.n
        return 0.5 * (V + V.T)

    @property
    def Gamma(self) -> NDArray[np.float64]:
        return np.diag(self.basis.penalty)

    def weight_surface(self) -> NDArray[np.float64]:
        """``[gbar(A_i) / g_n(A_i | W_j)]`` indexed ``[j, i]``."""
        return self.Gmat.mean(axis=0)[None, :] / self.Gmat

    def Z(self, coef) -> NDArray[np.float64]:
        """``Z_n(W_i, A_i; h)`` for ``h = sum c_d eta_d``."""
        return self.weights * (self.Ec @ np.asarray(coef, dtype=float))


def build_workspace(data: ObservationSet, nuisance: NuisanceFit, basis: SobolevBasis) -> Workspace:
    E = basis.evaluate(data.A01)
    E_mean = E.mean(axis=0)
    Qmat = nuisance.Q.grid(data.W, data.A01)
    raw = nuisance.g.matrix(data.A01, data.W, floor=False)
    n_floored = int(np.sum(np.diag(raw) < nuisance.g_floor))
    Gmat = np.maximum(raw, nuisance.g_floor)
    fitted = np.diag(Qmat).copy()
    weights = Gmat.mean(axis=0) / np.diag(Gmat)
    if n_floored:
        log.info("density floor applied to %d of %d observations", n_floored, data.n)
    return Workspace(
        data=data, nuisance=nuisance, basis=basis, E=E, Ec=E - E_mean, E_mean=E_mean,
        Qmat=Qmat, Gmat=Gmat, theta_n=Qmat.mean(axis=0), fitted=fitted,
        residuals=data.Y - fitted, weights=weights, n_floored=n_floored,
    )


@dataclass(frozen=True)
class PsiVector:
    U: NDArray[np.float64]
    kind: str
    null: NullCurve | None = None
    tml_steps: int | None = None
    tml_final: float | None = None

    def __call__(self, coef) -> float:
        """``psi(sum c_d eta_d) = U'c``."""
        return float(self.U @ np.asarray(coef, dtype=float))


def _null_values(null, a01) -> NDArray[np.float64]:
    if null is None:
        return np.zeros_like(np.asarray(a01, dtype=float))
    return np.asarray(null(a01), dtype=float)


def centered_difference(theta_values, null_values) -> NDArray[np.float64]:
    delta = np.asarray(theta_values, dtype=float) - np.asarray(null_values, dtype=float)
    return delta - delta.mean()


def psi_plugin(theta_curve, null: NullCurve | None, data: ObservationSet, basis: SobolevBasis,
               *, kind: str = "plugin") -> PsiVector:
    """``U[d] = mean_i [delta_i - mean(delta)] eta_d(A_i)`` with ``delta = theta - theta*``.

    ``theta_curve`` is any callable on the rescaled scale, or an array of
    its values at the observed exposures.
    """
    a01 = data.A01
    theta = np.asarray(theta_curve(a01) if callable(theta_curve) else theta_curve, dtype=float)
    delta_c = centered_difference(theta, _null_values(null, a01))
    U = basis.evaluate(a01).T @ delta_c / data.n
    return PsiVector(U=U, kind=kind, null=null)


def one_step_correction(ws: Workspace) -> NDArray[np.float64]:
    return ws.Ec.T @ (ws.weights * ws.residuals) / ws.n


def psi_one_step(data: ObservationSet, nuisance: NuisanceFit, null: NullCurve | None,
                 basis: SobolevBasis, *, workspace: Workspace | None = None) -> PsiVector:
    ws = workspace or build_workspace(data, nuisance, basis)
    plug = psi_plugin(ws.theta_n, null, data, basis)
    return PsiVector(U=plug.U + one_step_correction(ws), kind="one_step", null=null)


# ----------------------------------------------------------------------------
# TML
# ----------------------------------------------------------------------------


@dataclass
class TmlCurve:
    """``theta(a) = mean_j Q~_n(W_j, a)`` for the fluctuated regression."""

    ws: Workspace
    C: NDArray[np.float64]

    def __call__(self, a01) -> NDArray[np.float64]:
        a = np.asarray(a01, dtype=float)
        flat = a.reshape(-1)
        base = self.ws.nuisance.Q.grid(self.ws.data.W, flat).mean(axis=0)
        G = np.maximum(self.ws.nuisance.g.matrix(flat, self.ws.data.W), self.ws.nuisance.g_floor)
        ratio = (G.mean(axis=0)[None, :] / G).mean(axis=0)
        shift = (self.ws.basis.evaluate(flat) - self.ws.E_mean) @ self.C
        return (base + ratio * shift).reshape(a.shape)

    def at_observed(self) -> NDArray[np.float64]:
        ratio = self.ws.weight_surface().mean(axis=0)
        return self.ws.theta_n + ratio * (self.ws.Ec @ self.C)


@dataclass
class TmlUpdate:
    eps: float
    steps: int
    C: NDArray[np.float64]
    directions: list[NDArray[np.float64]]
    trace: list[float]
    threshold: float
    kappa: float
    ws: Workspace = field(repr=False)

    @property
    def final(self) -> float:
        return self.trace[-1]

    def fluctuated(self, W, a01) -> NDArray[np.float64]:
        """``Q~_n(W_i, a01_i)`` pairwise."""
        ws = self.ws
        W = np.asarray(W, dtype=float)
        a = np.asarray(a01, dtype=float).reshape(-1)
        g = ws.nuisance.g
        gbar = np.maximum(g.matrix(a, ws.data.W), g.g_floor).mean(axis=0)
        own = g(a, W)
        shift = (ws.basis.evaluate(a) - ws.E_mean) @ self.C
        return ws.nuisance.Q(W, a) + gbar / own * shift

    def curve(self) -> TmlCurve:
        return TmlCurve(self.ws, self.C)

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "steps": self.steps,
            "threshold": self.threshold,
            "kappa": self.kappa,
            "trace": [float(v) for v in self.trace],
            "coefficients": [float(v) for v in self.C],
        }

    def dump_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def residual_moments(ws: Workspace, C) -> NDArray[np.float64]:
    """``mean_i (Y_i - Q_C(W_i, A_i)) weight_i (eta(A_i) - eta_bar)`` for the fluctuation ``C``."""
    res = ws.residuals - ws.weights * (ws.Ec @ C)
    return ws.Ec.T @ (ws.weights * res) / ws.n


def stopping_threshold(ws: Workspace, h_ref) -> float:
    """``(n log n)^{-1/2} Var_n^{-1/2}((Y - Q_n) Z_n(h_ref))``."""
    coef = np.asarray(getattr(h_ref, "coef", h_ref), dtype=float)
    var = float(np.var(ws.residuals * ws.Z(coef)))
    if not var > 0.0:
        raise DegenerateThresholdError("variance of the reference score is zero")
    n = ws.n
    return 1.0 / math.sqrt(n * math.log(n)) / math.sqrt(var)


def tml_update(
    data: ObservationSet,
    nuisance: NuisanceFit,
    basis: SobolevBasis,
    spec: FunctionClassSpec,
    eps: float | None = None,
    h_ref: BasisFunction | None = None,
    *,
    max_steps: int = DEFAULT_MAX_STEPS,
    workspace: Workspace | None = None,
) -> TmlUpdate:
    """Iterate the discretized universal least-favorable submodel.

    ``eps`` defaults to ``1e-3 * sd(Y)``. When ``h_ref`` is omitted the
    initial steepest direction is used as the reference in the stopping
    threshold.
    """
    ws = workspace or build_workspace(data, nuisance, basis)
    if eps is None:
        eps = DEFAULT_EPS_FACTOR * float(np.std(data.Y))
    if not eps > 0:
        raise ValueError("eps must be positive")
    solver = QcqpSolver(spec.V, spec.Gamma, spec.kappa)
    C = np.zeros(basis.D)
    moments = residual_moments(ws, C)
    sol = solver.solve(moments)
    if h_ref is None:
        h_ref = sol.c if not sol.degenerate else np.ones(basis.D)
    threshold = stopping_threshold(ws, h_ref)
    trace = [sol.psi]
    directions: list[NDArray[np.float64]] = []
    steps = 0
    while sol.psi > threshold:
        if steps >= max_steps:
            raise TmlConvergenceError(
                f"TML did not converge in {max_steps} steps (last {trace[-1]:.4g}, threshold {threshold:.4g})",
                trace,
            )
        directions.append(sol.c)
        C = C + eps * sol.c
        steps += 1
        moments = residual_moments(ws, C)
        sol = solver.solve(moments)
        trace.append(sol.psi)
    return TmlUpdate(eps=float(eps), steps=steps, C=C, directions=directions, trace=trace,
                     threshold=threshold, kappa=spec.kappa, ws=ws)


def psi_tml(data: ObservationSet, nuisance: NuisanceFit, update: TmlUpdate, null: NullCurve | None,
            basis: SobolevBasis) -> PsiVector:
    theta = update.curve().at_observed()
    plug = psi_plugin(theta, null, data, basis, kind="tml")
    return PsiVector(U=plug.U, kind="tml", null=null, tml_steps=update.steps, tml_final=update.final)


def squared_error_loss(ws: Workspace, C) -> float:
    """``(2n)^{-1} sum (Y_i - Q_C(W_i, A_i))^2``."""
    res = ws.residuals - ws.weights * (ws.Ec @ np.asarray(C, dtype=float))
    return 0.5 * float(np.mean(res**2))


@dataclass
class SubmodelPath:
    """Continuous universal submodel ``dC/dbeta = argmax_{H_kappa} moments(C)'c``.

    Integrated with classical Runge-Kutta steps no longer than ``h``; used
    to check that the loss derivative along the path equals minus the
    worst-case residual moment.
    """

    ws: Workspace
    solver: QcqpSolver
    h: float

    def velocity(self, C):
        sol = self.solver.solve(residual_moments(self.ws, C))
        return np.zeros_like(C) if sol.degenerate else sol.c

    def advance(self, C, length: float):
        if length <= 0:
            return np.array(C, dtype=float)
        k = max(1, math.ceil(length / self.h))
        dt = length / k
        C = np.array(C, dtype=float)
        for _ in range(k):
            k1 = self.velocity(C)
            k2 = self.velocity(C + 0.5 * dt * k1)
            k3 = self.velocity(C + 0.5 * dt * k2)
            k4 = self.velocity(C + dt * k3)
            C = C + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return C

    def loss_derivative_check(self, beta: float, delta: float) -> tuple[float, float]:
        """(central difference of the loss at ``beta``, minus the sup moment at ``beta``)."""
        C_lo = self.advance(np.zeros(self.ws.basis.D), beta - delta)
        C_mid = self.advance(C_lo, delta)
        C_hi = self.advance(C_mid, delta)
        fd = (squared_error_loss(self.ws, C_hi) - squared_error_loss(self.ws, C_lo)) / (2 * delta)
        sup = self.solver.solve(residual_moments(self.ws, C_mid)).psi
        return fd, -sup


# ----------------------------------------------------------------------------
# influence function matrix
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class EifMatrix:
    Phi: NDArray[np.float64]
    null_mode: bool

    @property
    def n(self) -> int:
        return self.Phi.shape[0]


def eif_columns(ws: Workspace, H, theta_values, null_values) -> NDArray[np.float64]:
    """Estimated influence function for each column of ``H[i, k] = h_k(A_i)``.

    Sum of the centered-difference term, the weighted residual term and the
    covariate-averaged regression term, minus the empirical mean of the
    first and third terms so that the column means equal the one-step
    correction.
    """
    H = np.asarray(H, dtype=float)
    Hc = H - H.mean(axis=0)
    delta_c = centered_difference(theta_values, null_values)
    first = delta_c[:, None] * Hc
    second = (ws.weights * ws.residuals)[:, None] * Hc
    third = ws.Qmat @ Hc / ws.n
    return first + second + third - (first + third).mean(axis=0)


def eif_evaluate(
    data: ObservationSet,
    nuisance: NuisanceFit,
    theta_curve,
    null: NullCurve | None,
    basis: SobolevBasis,
    *,
    null_mode: bool = False,
    workspace: Workspace | None = None,
) -> EifMatrix:
    """``Phi[i, d]``, the influence function at ``O_i`` in direction ``eta_d``.

    In ``null_mode`` the candidate curve is replaced by ``theta_curve``
    itself, which removes the first term.
    """
    ws = workspace or build_workspace(data, nuisance, basis)
    if theta_curve is None:
        theta = ws.theta_n
    elif callable(theta_curve) and not isinstance(theta_curve, np.ndarray):
        theta = np.asarray(theta_curve(data.A01), dtype=float)
    else:
        theta = np.asarray(theta_curve, dtype=float)
    null_vals = theta if null_mode else _null_values(null, data.A01)
    return EifMatrix(Phi=eif_columns(ws, ws.E, theta, null_vals), null_mode=null_mode)


__all__ = [
    "DegenerateThresholdError",
    "EifMatrix",
    "PluginCurve",
    "PsiVector",
    "SubmodelPath",
    "TmlConvergenceError",
    "TmlCurve",
    "TmlUpdate",
    "Workspace",
    "build_workspace",
    "eif_columns",
    "eif_evaluate",
    "one_step_correction",
    "psi_one_step",
    "psi_plugin",
    "psi_tml",
    "residual_moments",
    "squared_error_loss",
    "stopping_threshold",
    "tml_update",
]
