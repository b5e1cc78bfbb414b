"""Closed-form maximizer of a linear functional over ``H_kappa``.

Solves::

    maximize    U'c
    subject to  c'Vc = 1,  c'Gamma c <= kappa

with ``Gamma`` diagonal. Whitening by ``Gamma^{-1/2}`` and diagonalizing
``S = Gamma^{-1/2} V Gamma^{-1/2} = Q diag(s) Q'`` turns the stationarity
condition ``U = lambda1 (V + lambda2 Gamma) c`` into a scalar secular
equation. Writing ``w = 1/lambda2``, the candidate ``z(w) = (I + w S)^{-1} u``
(``u = Q' Gamma^{-1/2} U``) traces every KKT point as ``w`` runs over
``(-1/s_max, inf)``; the roughness/variance ratio along the path increases
from ``1/s_max`` to the ratio of the unconstrained maximizer ``V^{-1}U``.
Negative ``w`` (``lambda2 < -s_max``, ``lambda1 < 0``) is needed when
``kappa`` lies below the ratio of ``Gamma^{-1}U``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .basis import stabilize_gram

T_LO, T_HI = -40.0, 60.0
MAX_ITER = 200
RATIO_RTOL = 1e-12


class QcqpError(ArithmeticError):
    """Root bracketing failed or the class is empty."""


class EmptyClassError(QcqpError):
    """``kappa`` is below the smallest attainable roughness/variance ratio."""


@dataclass(frozen=True)
class QcqpSolution:
    c: NDArray[np.float64]
    lambda1: float
    lambda2: float
    psi: float
    active: bool
    branch: str
    degenerate: bool
    P: NDArray[np.float64]
    """``lambda1^{-1} (V + lambda2 Gamma)^{-1}``; positive definite on every branch."""

    def statistic(self, U) -> float:
        """Fixed-multiplier approximation ``U' P U`` of the statistic."""
        U = np.asarray(U, dtype=float)
        return float(U @ self.P @ U)


class QcqpSolver:
    """Reusable solver for a fixed ``(V, Gamma, kappa)``."""

    def __init__(self, V, Gamma, kappa: float):
        V = stabilize_gram(V)
        g = np.diag(np.asarray(Gamma, dtype=float)).copy()
        if np.any(g <= 0):
            raise ValueError("Gamma must be diagonal with positive entries")
        self.D = V.shape[0]
        self.kappa = float(kappa)
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        self.ginv = 1.0 / np.sqrt(g)
        S = self.ginv[:, None] * V * self.ginv[None, :]
        s, Q = np.linalg.eigh(0.5 * (S + S.T))
        s = np.maximum(s, s[-1] * 1e-300)
        self.s, self.Q = s, Q
        self.s_max = float(s[-1])
        self.r = s / self.s_max
        # (1/s_max) is the smallest roughness attainable at unit variance
        self.min_ratio = 1.0 / self.s_max
        if self.kappa * (1.0 + 1e-12) < self.min_ratio:
            raise EmptyClassError(
                f"H_kappa is empty: kappa={self.kappa:.6g} < minimal roughness {self.min_ratio:.6g}"
            )

    def _whiten(self, U):
        return (np.asarray(U, dtype=float) * self.ginv) @ self.Q

    def _denom(self, t):
        # 1 + w s with w = (e^t - 1)/s_max, written to avoid cancellation near w = -1/s_max
        t = np.asarray(t, dtype=float)[..., None]
        return (1.0 - self.r) + np.exp(t) * self.r

    def _ratio(self, u, d):
        z = u / d
        return np.sum(z * z, axis=-1) / np.sum(self.s * z * z, axis=-1)

    def _solve_t(self, u, ratio_max):
        """Bisection on t for rows whose unconstrained ratio exceeds kappa."""
        lo = np.full(u.shape[0], T_LO)
        hi = np.full(u.shape[0], T_HI)
        r_lo = self._ratio(u, self._denom(lo))
        r_hi = self._ratio(u, self._denom(hi))
        bad = (r_lo > self.kappa) | (r_hi < self.kappa)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise QcqpError(
                f"could not bracket kappa={self.kappa:.6g}: ratio endpoints "
                f"[{r_lo[i]:.6g}, {r_hi[i]:.6g}] (unconstrained {ratio_max[i]:.6g})"
            )
        for _ in range(MAX_ITER):
            mid = 0.5 * (lo + hi)
            r_mid = self._ratio(u, self._denom(mid))
            up = r_mid <= self.kappa
            lo = np.where(up, mid, lo)
            hi = np.where(up, hi, mid)
            r_lo = np.where(up, r_mid, r_lo)
            if np.all(np.abs(r_lo - self.kappa) <= RATIO_RTOL * self.kappa) or np.all(hi - lo < 1e-14):
                break
        # the lower end keeps the roughness constraint satisfied
        return lo

    def values(self, Umat) -> NDArray[np.float64]:
        """Optimal values for each row of ``Umat``."""
        Umat = np.atleast_2d(np.asarray(Umat, dtype=float))
        u = self._whiten(Umat)
        a = u * u
        out = np.zeros(u.shape[0])
        nz = a.sum(axis=1) > 0
        unc = np.sum(a / self.s**2, axis=1)
        ratio_max = np.where(nz, unc / np.maximum(np.sum(a / self.s, axis=1), 1e-300), 0.0)
        free = nz & (ratio_max <= self.kappa)
        out[free] = np.sqrt(np.sum(a[free] / self.s, axis=1))
        act = nz & ~free
        if np.any(act):
            t = self._solve_t(u[act], ratio_max[act])
            z = u[act] / self._denom(t)
            out[act] = np.sum(u[act] * z, axis=1) / np.sqrt(np.sum(self.s * z * z, axis=1))
        return out

    def solve(self, U) -> QcqpSolution:
        U = np.asarray(U, dtype=float)
        u = self._whiten(U)
        if not np.any(u != 0):
            return QcqpSolution(
                c=np.full(self.D, np.nan), lambda1=0.0, lambda2=0.0, psi=0.0, active=False,
                branch="degenerate", degenerate=True, P=np.full((self.D, self.D), np.nan),
            )
        a = u * u
        ratio_max = float(np.sum(a / self.s**2) / np.sum(a / self.s))
        if ratio_max <= self.kappa:
            z = u / self.s
            norm = float(np.sqrt(np.sum(self.s * z * z)))
            c = self.ginv * (self.Q @ z) / norm
            psi = float(u @ z) / norm
            P = (self.ginv[:, None] * (self.Q / self.s) @ self.Q.T * self.ginv[None, :]) / psi
            return QcqpSolution(c=c, lambda1=psi, lambda2=0.0, psi=psi, active=False,
                                branch="unconstrained", degenerate=False, P=P)
        t = float(self._solve_t(u[None, :], np.array([ratio_max]))[0])
        d = self._denom(t)
        z = u / d
        norm = float(np.sqrt(np.sum(self.s * z * z)))
        c = self.ginv * (self.Q @ z) / norm
        psi = float(u @ z) / norm
        w = np.expm1(t) / self.s_max
        if w == 0.0:
            lambda2 = np.inf
        else:
            lambda2 = 1.0 / w
        lambda1 = w * norm
        P = self.ginv[:, None] * (self.Q / (norm * d)) @ self.Q.T * self.ginv[None, :]
        return QcqpSolution(c=c, lambda1=float(lambda1), lambda2=float(lambda2), psi=psi, active=True,
                            branch="positive" if w > 0 else "negative", degenerate=False, P=P)


def solve_qcqp(U, V, Gamma, kappa: float) -> QcqpSolution:
    """Maximize ``U'c`` over unit-variance coefficient vectors with roughness at most ``kappa``."""
    return QcqpSolver(V, Gamma, kappa).solve(U)
