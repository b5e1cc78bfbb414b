"""Second-order Sobolev eigenbasis on [0, 1] and the function classes built on it.

The eigenfunctions are ``sqrt(2) cos(2 pi d a)`` and ``sqrt(2) sin(2 pi d a)``
with eigenvalues ``(2 pi d)^-4``, interleaved cosine first. A function
``h = sum_d c_d eta_d`` has roughness ``J(h) = sum_d c_d^2 / gamma_d``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

DEFAULT_D = 20


@dataclass(frozen=True)
class SobolevBasis:
    """Truncated eigenbasis of size ``D``.

    ``margin`` places the rescaled exposure range ``[0, 1]`` on the
    sub-interval ``[margin, 1 - margin]`` of the periodic basis domain.
    With the default ``margin=0`` exposures are fed to the eigenfunctions
    unchanged.
    """

    D: int = DEFAULT_D
    margin: float = 0.0
    gamma: NDArray[np.float64] = field(init=False, repr=False)
    freq: NDArray[np.float64] = field(init=False, repr=False)

    def __post_init__(self):
        if self.D < 1:
            raise ValueError("D must be positive")
        if not 0.0 <= self.margin < 0.5:
            raise ValueError("margin must lie in [0, 0.5)")
        freq = np.repeat(np.arange(1, self.D // 2 + 2), 2)[: self.D].astype(float)
        gamma = (2.0 * np.pi * freq) ** -4
        freq.setflags(write=False)
        gamma.setflags(write=False)
        object.__setattr__(self, "freq", freq)
        object.__setattr__(self, "gamma", gamma)

    @property
    def penalty(self) -> NDArray[np.float64]:
        """Diagonal of Gamma, i.e. ``1 / gamma_d``."""
        return 1.0 / self.gamma

    def to_domain(self, a01):
        return self.margin + (1.0 - 2.0 * self.margin) * np.asarray(a01, dtype=float)

    def evaluate(self, a01, deriv: int = 0) -> NDArray[np.float64]:
        """Eigenfunctions (or their ``deriv``-th derivative in ``a01``) at ``a01``.

        Returns an array of shape ``np.shape(a01) + (D,)``.
        """
        x = self.to_domain(a01)
        arg = 2.0 * np.pi * np.multiply.outer(x, self.freq)
        omega = 2.0 * np.pi * self.freq * (1.0 - 2.0 * self.margin)
        is_cos = (np.arange(self.D) % 2) == 0
        # derivative k of cos is cos(x + k pi/2), same for sin
        shift = deriv * np.pi / 2.0
        out = np.where(is_cos, np.cos(arg + shift), np.sin(arg + shift))
        return np.sqrt(2.0) * omega**deriv * out


def eval_basis(basis: SobolevBasis, a01) -> NDArray[np.float64]:
    return basis.evaluate(a01)


@dataclass(frozen=True)
class BasisFunction:
    """``h(a) = intercept + sum_d coef_d eta_d(a)``."""

    coef: NDArray[np.float64]
    intercept: float = 0.0

    def __call__(self, a01, basis: SobolevBasis):
        return self.intercept + basis.evaluate(a01) @ np.asarray(self.coef, dtype=float)


def roughness(f, basis: SobolevBasis) -> float:
    """RKHS roughness ``sum_d c_d^2 / gamma_d``; any intercept is ignored."""
    c = np.asarray(getattr(f, "coef", f), dtype=float)
    return float(np.sum(c**2 / basis.gamma[: c.shape[0]]))


def gram_matrices(basis: SobolevBasis, A01) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Empirical covariance ``V`` of the basis at the exposures and ``Gamma = diag(1/gamma)``."""
    E = basis.evaluate(np.asarray(A01, dtype=float))
    Ec = E - E.mean(axis=0)
    V = Ec.T @ Ec / E.shape[0]
    V = 0.5 * (V + V.T)
    return V, np.diag(basis.penalty)


def stabilize_gram(V, rel: float = 1e-10) -> NDArray[np.float64]:
    """Add ``rel * tr(V)/D`` to the diagonal when V is numerically singular."""
    V = np.asarray(V, dtype=float)
    D = V.shape[0]
    ridge = rel * np.trace(V) / D
    if ridge <= 0.0:
        ridge = rel
    if np.linalg.eigvalsh(V)[0] > ridge:
        return V
    return V + ridge * np.eye(D)


@dataclass(frozen=True)
class FunctionClassSpec:
    """Unit-variance, bounded-roughness directions ``H_kappa``."""

    basis: SobolevBasis
    kappa: float
    V: NDArray[np.float64]
    Gamma: NDArray[np.float64]

    @classmethod
    def from_exposures(cls, basis: SobolevBasis, A01, kappa: float) -> FunctionClassSpec:
        V, Gamma = gram_matrices(basis, A01)
        return cls(basis=basis, kappa=float(kappa), V=V, Gamma=Gamma)


def project_membership(c, spec: FunctionClassSpec, tol: float = 1e-8) -> tuple[bool, dict]:
    c = np.asarray(c, dtype=float)
    rough = float(c @ spec.Gamma @ c)
    var = float(c @ spec.V @ c)
    ok = rough <= spec.kappa * (1.0 + tol) and abs(var - 1.0) <= tol
    return ok, {"roughness": rough, "variance": var, "kappa": spec.kappa}
