"""Observation container, exposure rescaling and CSV ingestion."""

from __future__ import annotations

import csv
import warnings
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray


class DataError(ValueError):
    """Raised when input data fail validation."""


class OutOfRangeWarning(UserWarning):
    """Exposure value outside the observed range used for rescaling."""


def rescale_to_unit(a, a_min: float, a_max: float, *, warn: bool = True):
    """Affine map of exposure values from ``[a_min, a_max]`` onto ``[0, 1]``.

    Nothing is clamped. Values outside the range map outside ``[0, 1]`` and
    emit an :class:`OutOfRangeWarning` when ``warn`` is set.
    """
    if not a_min < a_max:
        raise DataError(f"degenerate exposure range: a_min={a_min!r} >= a_max={a_max!r}")
    u = (np.asarray(a, dtype=float) - a_min) / (a_max - a_min)
    if warn and np.any((u < 0.0) | (u > 1.0)):
        warnings.warn("exposure outside the rescaling range", OutOfRangeWarning, stacklevel=2)
    if np.ndim(u) == 0:
        return float(u)
    return u


def rescale_from_unit(u, a_min: float, a_max: float):
    """Inverse of :func:`rescale_to_unit`."""
    out = a_min + np.asarray(u, dtype=float) * (a_max - a_min)
    if np.ndim(out) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class ObservationSet:
    """n i.i.d. records ``(W, A, Y)`` plus the exposure mapped to ``[0, 1]``.

    ``W`` is stored as an ``(n, q)`` matrix; ``q`` may be zero.
    """

    W: NDArray[np.float64]
    A: NDArray[np.float64]
    Y: NDArray[np.float64]
    a_min: float = field(default=np.nan)
    a_max: float = field(default=np.nan)
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float).reshape(-1)
        Y = np.asarray(self.Y, dtype=float).reshape(-1)
        n = A.shape[0]
        W = np.asarray(self.W, dtype=float)
        if W.ndim == 1:
            W = W.reshape(n, -1) if W.size else np.empty((n, 0))
        if W.shape[0] != n or Y.shape[0] != n:
            raise DataError(f"row mismatch: W has {W.shape[0]}, A has {n}, Y has {Y.shape[0]}")
        if n < 2:
            raise DataError(f"need at least 2 observations, got {n}")
        for name, arr in (("W", W), ("A", A), ("Y", Y)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite values in {name}")
        a_min = float(A.min()) if np.isnan(self.a_min) else float(self.a_min)
        a_max = float(A.max()) if np.isnan(self.a_max) else float(self.a_max)
        if not a_min < a_max:
            raise DataError("degenerate exposure range")
        names = tuple(self.covariate_names) or tuple(f"w{j + 1}" for j in range(W.shape[1]))
        if len(names) != W.shape[1]:
            raise DataError("covariate_names does not match the number of W columns")
        for arr in (W, A, Y):
            arr.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "a_min", a_min)
        object.__setattr__(self, "a_max", a_max)
        object.__setattr__(self, "covariate_names", names)
        A01 = rescale_to_unit(A, a_min, a_max, warn=True)
        A01.setflags(write=False)
        object.__setattr__(self, "_A01", A01)

    @property
    def A01(self) -> NDArray[np.float64]:
        return self._A01

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def q(self) -> int:
        return self.W.shape[1]

    def to_unit(self, a):
        return rescale_to_unit(a, self.a_min, self.a_max)

    def from_unit(self, u):
        return rescale_from_unit(u, self.a_min, self.a_max)


@dataclass(frozen=True)
class NullCurve:
    """Candidate dose-response curve on the rescaled exposure scale.

    Either the zero curve, a coefficient vector over a Sobolev basis
    (``coef`` plus optional ``intercept``), or an arbitrary callable.
    Centering is applied downstream, so the intercept never matters for
    testing.
    """

    kind: str = "zero"
    coef: NDArray[np.float64] | None = None
    intercept: float = 0.0
    func: Callable[[NDArray[np.float64]], NDArray[np.float64]] | None = None
    basis: object | None = None

    @classmethod
    def zero(cls) -> NullCurve:
        return cls()

    @classmethod
    def from_coefficients(cls, coef, basis, intercept: float = 0.0) -> NullCurve:
        return cls(kind="basis", coef=np.asarray(coef, dtype=float), intercept=float(intercept), basis=basis)

    @classmethod
    def from_callable(cls, func) -> NullCurve:
        return cls(kind="callable", func=func)

    def __call__(self, a01):
        a01 = np.asarray(a01, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(a01)
        if self.kind == "basis":
            return self.intercept + self.basis.evaluate(a01) @ self.coef
        if self.kind == "callable":
            return np.broadcast_to(np.asarray(self.func(a01), dtype=float), a01.shape).copy()
        raise ValueError(f"unknown null curve kind {self.kind!r}")


def _parse_float(value: str, column: str, row: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise DataError(f"non-numeric value {value!r} in column {column!r} (row {row})") from None


def load_csv(
    path,
    covariate_columns: Sequence[str],
    exposure_column: str,
    outcome_column: str,
) -> ObservationSet:
    """Read a header-row CSV into an :class:`ObservationSet`, preserving row order."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in [*covariate_columns, exposure_column, outcome_column]:
            if col not in header:
                raise DataError(f"missing column {col!r} in {path.name}")
        rows = list(reader)
    if len(rows) < 2:
        raise DataError(f"need at least 2 rows, found {len(rows)}")
    W = np.array(
        [[_parse_float(r[c], c, i + 2) for c in covariate_columns] for i, r in enumerate(rows)],
        dtype=float,
    ).reshape(len(rows), len(covariate_columns))
    A = np.array([_parse_float(r[exposure_column], exposure_column, i + 2) for i, r in enumerate(rows)])
    Y = np.array([_parse_float(r[outcome_column], outcome_column, i + 2) for i, r in enumerate(rows)])
    if A.min() == A.max():
        raise DataError("degenerate exposure range: exposure column is constant")
    return ObservationSet(W=W, A=A, Y=Y, covariate_names=tuple(covariate_columns))


def write_csv(data: ObservationSet, path, exposure_column: str = "a", outcome_column: str = "y") -> None:
    """Write observations with full-precision floats (``repr`` round-trips)."""
    path = Path(path)
    header = [*data.covariate_names, exposure_column, outcome_column]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.n):
            writer.writerow([repr(float(v)) for v in (*data.W[i], data.A[i], data.Y[i])])
