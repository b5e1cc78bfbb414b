"""Simultaneous confidence bands by inverting the sup test.

A candidate curve ``theta = sum c_d eta_d`` gives ``U(c) = U(0) - V c`` for
every estimator kind. With the multipliers frozen at their values for the
zero curve the statistic becomes ``U(c)' P U(c)``, so each band limit is a
linear objective over the intersection of the ball ``c' Gamma c <= nu`` and
an ellipsoid. Whitening the ball and diagonalizing the ellipsoid leaves a
separable problem whose two multipliers are found by nested bisection,
vectorized across grid points and both directions.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .basis import SobolevBasis, gram_matrices, stabilize_gram
from .data import ObservationSet
from .estimators import (
    Workspace,
    build_workspace,
    eif_evaluate,
    psi_one_step,
    psi_plugin,
    psi_tml,
    tml_update,
)
from .basis import FunctionClassSpec
from .kappa import KappaSelection, select_kappa
from .nuisance import DEFAULT_BANDWIDTHS, NuisanceFit, fit_nuisance
from .qcqp import QcqpSolver
from .sup_test import DEFAULT_M, DEFAULT_MARGIN, ESTIMATORS, BootstrapDistribution, bootstrap_null

log = logging.getLogger(__name__)

KKT_TOL = 1e-6
BISECT_ITERS = 64
NU_INFLATION = 4.0


class InfeasibleBandError(ArithmeticError):
    """No candidate curve in the norm ball passes the test."""


def critical_value(boot: BootstrapDistribution | NDArray, alpha: float) -> float:
    """Empirical ``1 - alpha`` quantile with linear (type 7) interpolation."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    samples = boot.samples if isinstance(boot, BootstrapDistribution) else np.asarray(boot, dtype=float)
    if samples.size * alpha < 5:
        warnings.warn(f"only {samples.size * alpha:.1f} bootstrap draws beyond the quantile", RuntimeWarning,
                      stacklevel=2)
    return float(np.quantile(samples, 1.0 - alpha, method="linear"))


def fixed_multiplier_matrix(lambda1: float, lambda2: float, V, Gamma) -> NDArray[np.float64]:
    """``lambda1^{-1} (V + lambda2 Gamma)^{-1}``."""
    M = np.linalg.inv(np.asarray(V, dtype=float) + lambda2 * np.asarray(Gamma, dtype=float)) / lambda1
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class BandSolution:
    lower: NDArray[np.float64]
    upper: NDArray[np.float64]
    kkt_residual: NDArray[np.float64]
    coef_lower: NDArray[np.float64]
    coef_upper: NDArray[np.float64]


class BandProblem:
    """``max / min l'c`` subject to ``c' Gamma c <= nu`` and ``U(c)' P U(c) <= tau``."""

    def __init__(self, U0, V, Gamma, P, nu: float, tau: float):
        if not nu > 0:
            raise ValueError("nu must be positive; increase nu")
        if not tau >= 0:
            raise ValueError("tau must be nonnegative")
        V = stabilize_gram(V)
        self.nu = float(nu)
        self.tau = float(tau)
        self.ginv = np.sqrt(1.0 / np.diag(np.asarray(Gamma, dtype=float)))
        Vt = V * self.ginv[None, :]
        P = 0.5 * (np.asarray(P, dtype=float) + np.asarray(P, dtype=float).T)
        U0 = np.asarray(U0, dtype=float)
        M = Vt.T @ P @ Vt
        m, R = np.linalg.eigh(0.5 * (M + M.T))
        self.m = np.maximum(m, 0.0)
        self.R = R
        self.beta = R.T @ (Vt.T @ P @ U0)
        self.k = float(U0 @ P @ U0)
        self.min_stat = self._min_statistic()
        self.feasible = self.min_stat <= self.tau * (1.0 + 1e-12) + 1e-300

    def stat(self, y) -> NDArray[np.float64]:
        """``U(c)' P U(c)`` in rotated whitened coordinates."""
        return np.sum(self.m * y * y, axis=-1) - 2.0 * (y @ self.beta) + self.k

    def _ball_sigma(self, num, den0, need):
        """Smallest ``sigma >= 0`` with ``||num / (sigma + den0)||^2 <= nu`` (rows flagged by ``need``)."""
        hi = np.sqrt(np.sum(num * num, axis=-1)) / np.sqrt(self.nu) * (1.0 + 1e-12) + 1e-300
        lo = hi * 1e-18
        llo, lhi = np.log(lo), np.log(hi)
        for _ in range(BISECT_ITERS + 16):
            mid = 0.5 * (llo + lhi)
            y = num / (np.exp(mid)[:, None] + den0)
            inside = np.sum(y * y, axis=-1) <= self.nu
            lhi = np.where(inside, mid, lhi)
            llo = np.where(inside, llo, mid)
        return np.where(need, np.exp(lhi), 0.0)

    def _primal(self, lam, mu):
        """Maximizer of the Lagrangian over the ball for fixed ellipsoid multiplier ``mu``."""
        num = 0.5 * lam + mu[:, None] * self.beta
        den0 = mu[:, None] * self.m
        with np.errstate(divide="ignore", invalid="ignore"):
            y0 = np.where(den0 > 0, num / den0, np.where(num == 0, 0.0, np.inf))
        need = ~(np.sum(y0 * y0, axis=-1) <= self.nu)
        sigma = self._ball_sigma(num, den0, need)
        with np.errstate(divide="ignore", invalid="ignore"):
            y = np.where(need[:, None], num / (sigma[:, None] + den0), y0)
        return y, sigma

    def _min_statistic(self) -> float:
        """``min U(c)' P U(c)`` over the ball; the band exists iff this is at most ``tau``."""
        num = self.beta[None, :]
        den0 = self.m[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            y0 = np.where(den0 > 0, num / den0, np.where(num == 0, 0.0, np.inf))
        need = ~(np.sum(y0 * y0, axis=-1) <= self.nu)
        if np.any(need):
            sigma = self._ball_sigma(num, den0, need)
            y = num / (sigma[:, None] + den0)
        else:
            y = y0
        return float(self.stat(y)[0])

    def maximize(self, L) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]]:
        """Row-wise ``max l'c``; returns (values, coefficient rows, KKT residuals)."""
        L = np.atleast_2d(np.asarray(L, dtype=float))
        scale = np.linalg.norm(L * self.ginv, axis=1)
        zero = scale == 0
        lam = (L * self.ginv) @ self.R / np.where(zero, 1.0, scale)[:, None]
        G = lam.shape[0]
        mu0 = np.zeros(G)
        y, sigma = self._primal(lam, mu0)
        done = self.stat(y) <= self.tau
        mu = mu0.copy()
        todo = ~done
        if np.any(todo):
            lt = lam[todo]
            hi = np.ones(lt.shape[0])
            for _ in range(200):
                yy, _ = self._primal(lt, hi)
                bad = self.stat(yy) > self.tau
                if not np.any(bad):
                    break
                hi = np.where(bad, hi * 4.0, hi)
            llo, lhi = np.log(hi) - 80.0, np.log(hi)
            for _ in range(BISECT_ITERS):
                mid = 0.5 * (llo + lhi)
                yy, _ = self._primal(lt, np.exp(mid))
                ok = self.stat(yy) <= self.tau
                lhi = np.where(ok, mid, lhi)
                llo = np.where(ok, llo, mid)
            mu[todo] = np.exp(lhi)
            y[todo], sigma[todo] = self._primal(lt, mu[todo])
        resid = self._kkt(lam, y, sigma, mu)
        x = y @ self.R.T
        c = x * self.ginv
        vals = np.where(zero, 0.0, np.sum(lam * y, axis=1) * scale)
        return vals, c, np.where(zero, 0.0, resid)

    def _kkt(self, lam, y, sigma, mu) -> NDArray[np.float64]:
        ball = np.sum(y * y, axis=1)
        st = self.stat(y)
        grad = lam - 2.0 * sigma[:, None] * y - 2.0 * mu[:, None] * (self.m * y - self.beta)
        obj = np.abs(np.sum(lam * y, axis=1)) + 1e-300
        parts = [
            np.linalg.norm(grad, axis=1),
            np.maximum(ball / self.nu - 1.0, 0.0),
            np.maximum(st - self.tau, 0.0) / max(self.tau, 1e-300),
            np.abs(sigma * (ball - self.nu)) / obj,
            np.abs(mu * (st - self.tau)) / obj,
        ]
        return np.max(np.vstack(parts), axis=0)

    def solve(self, L) -> BandSolution:
        if not self.feasible:
            raise InfeasibleBandError(
                f"no curve with norm below nu={self.nu:.4g} passes the test "
                f"(smallest statistic {self.min_stat:.4g} > {self.tau:.4g}); increase nu"
            )
        L = np.atleast_2d(np.asarray(L, dtype=float))
        both = np.vstack([L, -L])
        vals, c, resid = self.maximize(both)
        G = L.shape[0]
        return BandSolution(lower=-vals[G:], upper=vals[:G], kkt_residual=np.maximum(resid[:G], resid[G:]),
                            coef_lower=c[G:], coef_upper=c[:G])


def band_at(ell, U0, V, Gamma, nu: float, lambda1: float, lambda2: float, tau: float) -> tuple[float, float]:
    """Band limits for one centered evaluation vector ``ell = eta(a0) - mean eta(A)``.

    ``tau`` is the critical value on the same ``1/n`` scale as the
    statistic. Raises :class:`InfeasibleBandError` when the set is empty.
    """
    P = fixed_multiplier_matrix(lambda1, lambda2, V, Gamma)
    sol = BandProblem(U0, V, Gamma, P, nu, tau).solve(np.asarray(ell, dtype=float)[None, :])
    if sol.kkt_residual[0] > KKT_TOL:
        log.warning("band KKT residual %.3g exceeds tolerance", sol.kkt_residual[0])
    return float(sol.lower[0]), float(sol.upper[0])


# ----------------------------------------------------------------------------
# orchestration
# ----------------------------------------------------------------------------


@dataclass
class BandConfig:
    """Settings for :func:`build_band`.

    ``kappa`` and ``nu`` accept a positive number or ``"adaptive"``; the
    adaptive ``nu`` is ``4 x`` the roughness of the CV-minimizing ridge fit of
    the curve.
    """

    alpha: float = 0.05
    estimator: str = "one_step"
    kappa: float | str = "adaptive"
    nu: float | str = "adaptive"
    D: int = 20
    margin: float = DEFAULT_MARGIN
    M: int = DEFAULT_M
    seed: int = 0
    grid_size: int = 101
    folds: int = 5
    density_grid_size: int = 51
    g_floor: float = 0.01
    bandwidths: list[float] = field(default_factory=lambda: [float(b) for b in DEFAULT_BANDWIDTHS])
    bandwidth_method: str = "marginal"
    tml_eps: float | None = None
    tml_max_steps: int = 500
    audit_exact: bool = False

    def validate(self) -> None:
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}; choose from {ESTIMATORS}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        for name in ("kappa", "nu"):
            v = getattr(self, name)
            if isinstance(v, str):
                if v != "adaptive":
                    raise ValueError(f"{name} must be a positive number or 'adaptive'")
            elif not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                hint = "; increase nu" if name == "nu" else ""
                raise ValueError(f"{name} must be a positive number or 'adaptive'{hint}")
        if self.grid_size < 1:
            raise ValueError("grid_size must be positive")
        if self.M < 100:
            raise ValueError("M must be at least 100")

    def basis(self) -> SobolevBasis:
        return SobolevBasis(self.D, margin=self.margin)

    def fit_nuisance(self, data: ObservationSet) -> NuisanceFit:
        return fit_nuisance(data, folds=self.folds, grid_size=self.density_grid_size,
                            bandwidths=self.bandwidths, bandwidth_method=self.bandwidth_method,
                            g_floor=self.g_floor)


@dataclass
class BandResult:
    a: NDArray[np.float64]
    lower: NDArray[np.float64]
    upper: NDArray[np.float64]
    alpha: float
    kappa: float
    nu: float
    lambda1: float
    lambda2: float
    t_star: float
    seed: int
    kkt_max: float
    details: dict = field(default_factory=dict)

    @property
    def width(self) -> NDArray[np.float64]:
        return self.upper - self.lower

    def contains(self, values, tol: float = 0.0) -> NDArray[np.bool_]:
        values = np.asarray(values, dtype=float)
        return (values >= self.lower - tol) & (values <= self.upper + tol)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "kappa": self.kappa,
            "nu": self.nu,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "t_star": self.t_star,
            "seed": self.seed,
            "kkt_max": self.kkt_max,
            "details": self.details,
            "a": [float(v) for v in self.a],
            "lower": [float(v) for v in self.lower],
            "upper": [float(v) for v in self.upper],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write_csv(self, path, header_comment: str | None = None) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(["a", "lower", "upper"])
            for row in zip(self.a, self.lower, self.upper):
                w.writerow([repr(float(v)) for v in row])


def estimate_U(data, nuisance, basis, estimator, ws, spec=None, h_ref=None, tml_eps=None, tml_max_steps=500):
    """``U`` for the zero candidate curve under the chosen estimator."""
    if estimator == "plugin":
        return psi_plugin(ws.theta_n, None, data, basis).U, {}
    if estimator == "one_step":
        return psi_one_step(data, nuisance, None, basis, workspace=ws).U, {}
    upd = tml_update(data, nuisance, basis, spec, tml_eps, h_ref, max_steps=tml_max_steps, workspace=ws)
    return psi_tml(data, nuisance, upd, None, basis).U, {"tml_steps": upd.steps}


def build_band(
    data: ObservationSet,
    config: BandConfig,
    *,
    nuisance: NuisanceFit | None = None,
    workspace: Workspace | None = None,
    selection: KappaSelection | None = None,
) -> BandResult:
    config.validate()
    basis = workspace.basis if workspace is not None else config.basis()
    nuisance = nuisance or (workspace.nuisance if workspace is not None else config.fit_nuisance(data))
    ws = workspace or build_workspace(data, nuisance, basis)
    V, Gamma = gram_matrices(basis, data.A01)
    need_sel = config.kappa == "adaptive" or config.nu == "adaptive" or config.estimator == "tml"
    if selection is None and need_sel:
        selection = select_kappa(data, nuisance, None, basis, config.folds, workspace=ws)
    kappa = selection.kappa if config.kappa == "adaptive" else float(config.kappa)
    nu = NU_INFLATION * selection.roughness_min_cv if config.nu == "adaptive" else float(config.nu)
    if not nu > 0:
        raise InfeasibleBandError("adaptive nu is zero (flat fit); supply a positive nu")
    spec = FunctionClassSpec(basis=basis, kappa=kappa, V=V, Gamma=Gamma)
    U0, extra = estimate_U(data, nuisance, basis, config.estimator, ws, spec,
                           selection.h if selection is not None else None, config.tml_eps, config.tml_max_steps)
    solver = QcqpSolver(V, Gamma, kappa)
    sol = solver.solve(U0)
    if sol.degenerate:
        raise InfeasibleBandError("estimate for the zero curve is exactly zero; multipliers undefined")
    eif = eif_evaluate(data, nuisance, None, None, basis, null_mode=True, workspace=ws)
    boot = bootstrap_null(eif, V, Gamma, kappa, config.M, config.seed)
    tau = critical_value(boot, config.alpha)
    problem = BandProblem(U0, V, Gamma, sol.P, nu, tau)
    u = np.linspace(0.0, 1.0, config.grid_size)
    L = basis.evaluate(u) - ws.E_mean
    band = problem.solve(L)
    kkt = float(np.max(band.kkt_residual))
    if kkt > KKT_TOL:
        log.warning("band KKT residual %.3g exceeds %.0e", kkt, KKT_TOL)
    details = {"estimator": config.estimator, "branch": sol.branch, "psi_zero": sol.psi, "M": boot.M,
               "margin": basis.margin, "D": basis.D, "n": data.n, "bandwidth": nuisance.bandwidth,
               "kappa_degenerate": bool(selection.degenerate) if selection is not None else False, **extra}
    if config.audit_exact:
        exact = []
        for c in np.vstack([band.coef_lower, band.coef_upper]):
            exact.append(solver.values((U0 - V @ c)[None, :])[0])
        exact = np.asarray(exact)
        details["audit_exact_max_stat"] = float(exact.max())
        details["audit_exact_excess"] = float(max(exact.max() - tau, 0.0))
        log.info("exact statistic at band extremes: max %.4g vs critical value %.4g", exact.max(), tau)
    return BandResult(
        a=np.asarray(data.from_unit(u), dtype=float), lower=band.lower, upper=band.upper, alpha=config.alpha,
        kappa=kappa, nu=nu, lambda1=sol.lambda1, lambda2=sol.lambda2, t_star=tau, seed=int(config.seed),
        kkt_max=kkt, details=details,
    )


__all__ = [
    "BandConfig",
    "BandProblem",
    "BandResult",
    "BandSolution",
    "InfeasibleBandError",
    "KappaSelection",
    "band_at",
    "build_band",
    "critical_value",
    "fixed_multiplier_matrix",
    "select_kappa",
]
