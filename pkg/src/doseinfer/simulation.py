"""Synthetic data for the two simulation settings, κ oracles and the Monte Carlo harness.

Covariates are bivariate normal with unit variances and correlation 1/2.
Given ``W = w`` the exposure on ``[-1, 1]`` has density proportional to
``expit(zeta(w) a)`` with ``zeta(w) = 3 (expit(w1 + w2) - 1/2)``; the outcome
is ``-zeta(W)(1 - A/2) + eps`` (flat truth) or that plus
``theta0(A) = (2A + A^2 - A^3)/2``, with ``eps ~ U[-2, 2]``.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, log_expit

from .basis import SobolevBasis
from .data import ObservationSet

log = logging.getLogger(__name__)

CORRELATION = 0.5
NOISE_HALF_WIDTH = 2.0
GH_NODES = 80


@dataclass(frozen=True)
class DgpConfig:
    setting: int
    n: int
    seed: int = 0

    def __post_init__(self):
        if self.setting not in (1, 2):
            raise ValueError(f"unknown setting {self.setting!r}; expected 1 or 2")
        if self.n < 10:
            raise ValueError("n must be at least 10")


def zeta(W) -> NDArray[np.float64]:
    W = np.asarray(W, dtype=float)
    return 3.0 * (expit(W[..., 0] + W[..., 1]) - 0.5)


def theta0(a) -> NDArray[np.float64]:
    a = np.asarray(a, dtype=float)
    return 0.5 * (2.0 * a + a**2 - a**3)


def theta0_second_derivative(a) -> NDArray[np.float64]:
    return 1.0 - 3.0 * np.asarray(a, dtype=float)


def outcome_mean(W, a, setting: int) -> NDArray[np.float64]:
    """``Q0(w, a)``."""
    base = -zeta(W) * (1.0 - np.asarray(a, dtype=float) / 2.0)
    return base + theta0(a) if setting == 2 else base


def _softplus(x):
    return -log_expit(-x)


def exposure_cdf(a, z) -> NDArray[np.float64]:
    """CDF on ``[-1, 1]`` of the density proportional to ``expit(z a)``."""
    a = np.asarray(a, dtype=float)
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-8
    zs = np.where(small, 1.0, z)
    exact = (_softplus(zs * a) - _softplus(-zs)) / zs
    return np.where(small, (a + 1.0) / 2.0, exact)


def exposure_density(a, z) -> NDArray[np.float64]:
    """``g0(a | w)`` on ``[-1, 1]`` for ``zeta(w) = z``.

    ``expit(z a) + expit(-z a) = 1`` makes the normalizing integral equal to
    one, so the density is ``expit(z a)`` itself.
    """
    a = np.asarray(a, dtype=float)
    inside = (a >= -1.0) & (a <= 1.0)
    return np.where(inside, expit(np.asarray(z, dtype=float) * a), 0.0)


def exposure_quantile(u, z) -> NDArray[np.float64]:
    """Inverse of :func:`exposure_cdf` in closed form."""
    u = np.asarray(u, dtype=float)
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-8
    zs = np.where(small, 1.0, z)
    s = u * zs + _softplus(-zs)
    exact = np.log(np.expm1(s)) / zs
    return np.clip(np.where(small, 2.0 * u - 1.0, exact), -1.0, 1.0)


def gen_data(cfg: DgpConfig) -> ObservationSet:
    rng = np.random.default_rng(cfg.seed)
    cov = np.array([[1.0, CORRELATION], [CORRELATION, 1.0]])
    W = rng.multivariate_normal(np.zeros(2), cov, size=cfg.n, method="cholesky")
    A = exposure_quantile(rng.uniform(size=cfg.n), zeta(W))
    eps = rng.uniform(-NOISE_HALF_WIDTH, NOISE_HALF_WIDTH, size=cfg.n)
    Y = outcome_mean(W, A, cfg.setting) + eps
    return ObservationSet(W=W, A=A, Y=Y, covariate_names=("w1", "w2"))


def marginal_exposure_density(a, nodes: int = GH_NODES) -> NDArray[np.float64]:
    """``E_W[g0(a | W)]`` by Gauss-Hermite quadrature over ``w1 + w2 ~ N(0, 3)``."""
    x, wts = np.polynomial.hermite_e.hermegauss(nodes)
    wts = wts / wts.sum()
    z = 3.0 * (expit(np.sqrt(2.0 + 2.0 * CORRELATION) * x) - 0.5)
    a = np.asarray(a, dtype=float)
    return np.tensordot(wts, exposure_density(a[None, ...], z.reshape((-1,) + (1,) * a.ndim)), axes=1)


def _unit_grid(size: int = 20001):
    u = np.linspace(0.0, 1.0, size)
    return u, 2.0 * marginal_exposure_density(2.0 * u - 1.0)


def centered_truth(a) -> NDArray[np.float64]:
    """``theta0(a) - E[theta0(A)]`` under the population exposure marginal."""
    u, p = _unit_grid()
    mean = np.trapezoid(theta0(2.0 * u - 1.0) * p, u)
    return theta0(a) - mean


def oracle_kappa(setting: int, basis: SobolevBasis, method: str = "projection", *, curve=None) -> float:
    """Population roughness-to-variance ratio of the centered truth on the rescaled domain.

    ``method="projection"`` takes the best ``L2(P_A)`` approximation of the
    curve by the centered basis and reports its ``J / Var``; this is the
    quantity the function class actually sees. ``method="seminorm"`` is
    ``int (d^2/du^2 theta)^2 du / Var`` on the rescaled scale, which ignores
    periodicity of the basis. ``curve`` overrides the truth (a callable on
    ``[-1, 1]``); a flat curve yields ``kappa = 0`` with a warning.
    Setting 1 has a flat truth, so its oracle borrows the Setting 2 curve.
    """
    if setting not in (1, 2):
        raise ValueError(f"unknown setting {setting!r}")
    f = theta0 if curve is None else curve
    u, p = _unit_grid()
    a = 2.0 * u - 1.0
    vals = np.asarray(f(a), dtype=float)
    mean = np.trapezoid(vals * p, u)
    var = np.trapezoid((vals - mean) ** 2 * p, u)
    if method == "seminorm":
        h = u[1] - u[0]
        d2 = np.gradient(np.gradient(vals, h), h)
        J = np.trapezoid(d2[2:-2] ** 2, u[2:-2])
    elif method == "projection":
        E = basis.evaluate(u)
        Eb = np.trapezoid(E * p[:, None], u, axis=0)
        Ec = E - Eb
        V = np.trapezoid(Ec[:, :, None] * Ec[:, None, :] * p[:, None, None], u, axis=0)
        b = np.trapezoid(Ec * ((vals - mean) * p)[:, None], u, axis=0)
        c = np.linalg.solve(V, b)
        J = float(np.sum(c**2 * basis.penalty))
        var = float(c @ V @ c)
    else:
        raise ValueError(f"unknown method {method!r}")
    if J < 1e-12 * max(var, 1e-300) or var <= 1e-300:
        log.warning("oracle kappa is zero: curve has no roughness")
        return 0.0
    return float(J / var)


# ----------------------------------------------------------------------------
# Monte Carlo harness
# ----------------------------------------------------------------------------

METHODS = ("one_step_oracle", "one_step_adaptive", "tml_oracle", "tml_adaptive", "primitive")


def rep_seed(seed: int, n: int, rep: int) -> int:
    """Seed of one replicate, derived from ``(seed, n, rep)`` so any rep reruns in isolation."""
    return int(np.random.SeedSequence([int(seed), int(n), int(rep)]).generate_state(1)[0])


@dataclass
class McSpec:
    """What each replicate runs. ``oracle_kappa`` defaults to the projection oracle."""

    setting: int
    methods: tuple[str, ...] = METHODS
    M: int = 1000
    D: int = 20
    margin: float = 0.15
    oracle_kappa: float | None = None
    bands: bool = False
    alpha: float = 0.05

    def __post_init__(self):
        if self.setting not in (1, 2):
            raise ValueError(f"unknown setting {self.setting!r}; expected 1 or 2")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")


def _one_rep(spec: McSpec, n: int, rep: int, seed: int, kappa0: float) -> list[dict]:
    from .bands import BandConfig, build_band
    from .estimators import build_workspace
    from .kappa import select_kappa
    from .sup_test import TestConfig, primitive_function_test, run_test

    s = rep_seed(seed, n, rep)
    out: list[dict] = []
    t0 = time.perf_counter()
    try:
        data = gen_data(DgpConfig(spec.setting, n, s))
        base = TestConfig(D=spec.D, margin=spec.margin, M=spec.M, seed=s, alpha=spec.alpha)
        nuis = base.fit_nuisance(data)
        ws = build_workspace(data, nuis, base.basis())
        sel = select_kappa(data, nuis, None, ws.basis, base.folds, workspace=ws)
    except Exception as exc:  # noqa: BLE001 - failures are data, not crashes
        msg = f"{type(exc).__name__}: {exc}"
        return [dict(method=m, n=n, rep=rep, seed=s, p_value=np.nan, stat=np.nan, kappa=np.nan, error=msg,
                     seconds=0.0) for m in spec.methods]
    for method in spec.methods:
        t1 = time.perf_counter()
        row = dict(method=method, n=n, rep=rep, seed=s, p_value=np.nan, stat=np.nan, kappa=np.nan, error="")
        try:
            if method == "primitive":
                res = primitive_function_test(data, nuis, None, spec.M, s, workspace=ws)
            else:
                est, policy = method.rsplit("_", 1)
                kappa = kappa0 if policy == "oracle" else sel.kappa
                cfg = TestConfig(estimator=est, kappa=kappa, D=spec.D, margin=spec.margin, M=spec.M, seed=s)
                res = run_test(data, cfg, workspace=ws, h_ref=sel.h)
            row.update(p_value=res.p_value, stat=res.psi_stat, kappa=res.kappa)
        except Exception as exc:  # noqa: BLE001
            row["error"] = f"{type(exc).__name__}: {exc}"
        row["seconds"] = time.perf_counter() - t1
        out.append(row)
    if spec.bands:
        t1 = time.perf_counter()
        row = dict(method="band", n=n, rep=rep, seed=s, p_value=np.nan, stat=np.nan, kappa=np.nan, error="")
        try:
            band = build_band(data, BandConfig(alpha=spec.alpha, D=spec.D, margin=spec.margin, M=spec.M, seed=s),
                              workspace=ws, selection=sel)
            truth = np.zeros_like(band.a)
            if spec.setting == 2:
                truth = theta0(band.a) - float(np.mean(theta0(data.A)))
            row.update(kappa=band.kappa, covered=bool(np.all(band.contains(truth))),
                       median_width=float(np.median(band.width)), nu=band.nu)
        except Exception as exc:  # noqa: BLE001
            row["error"] = f"{type(exc).__name__}: {exc}"
        row["seconds"] = time.perf_counter() - t1
        out.append(row)
    log.debug("rep %d (n=%d) done in %.2fs", rep, n, time.perf_counter() - t0)
    return out


def _rep_task(args):
    return _one_rep(*args)


@dataclass
class McReport:
    setting: int
    seed: int
    n_list: list[int]
    reps: int
    records: list[dict] = field(default_factory=list)
    elapsed: float = 0.0

    def _rows(self, method: str, n: int) -> list[dict]:
        return [r for r in self.records if r["method"] == method and r["n"] == n]

    def p_values(self, method: str, n: int) -> NDArray[np.float64]:
        vals = [r["p_value"] for r in self._rows(method, n) if not r["error"]]
        return np.asarray(vals, dtype=float)

    def rejection_rate(self, method: str, n: int, alpha: float = 0.05) -> float:
        p = self.p_values(method, n)
        return float(np.mean(p <= alpha)) if p.size else float("nan")

    def failure_rate(self, method: str, n: int) -> float:
        rows = self._rows(method, n)
        return float(np.mean([bool(r["error"]) for r in rows])) if rows else float("nan")

    def coverage(self, n: int) -> float:
        rows = [r for r in self._rows("band", n) if not r["error"]]
        return float(np.mean([r["covered"] for r in rows])) if rows else float("nan")

    def median_width(self, n: int) -> float:
        rows = [r for r in self._rows("band", n) if not r["error"]]
        return float(np.median([r["median_width"] for r in rows])) if rows else float("nan")

    def methods(self) -> list[str]:
        return sorted({r["method"] for r in self.records})

    def summary(self, alphas=(0.01, 0.05, 0.1)) -> list[dict]:
        out = []
        for method in self.methods():
            for n in self.n_list:
                row = {"method": method, "n": n, "failure_rate": self.failure_rate(method, n)}
                if method == "band":
                    row.update(coverage=self.coverage(n), median_width=self.median_width(n))
                else:
                    row.update({f"reject_{a:g}": self.rejection_rate(method, n, a) for a in alphas})
                out.append(row)
        return out

    def write_csv(self, path, header_comment: str | None = None, include_timing: bool = False) -> None:
        """Per-rep table with columns ``method, n, rep, seed, p_value, ...`` (the p-value ECDF input).

        Timing is left out by default so reruns are byte-identical.
        """
        cols = ["method", "n", "rep", "seed", "p_value", "stat", "kappa", "covered", "median_width", "nu",
                *(["seconds"] if include_timing else []), "error"]
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            for r in self.records:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    def to_dict(self, include_timing: bool = True) -> dict:
        recs = [{k: v for k, v in r.items() if include_timing or k != "seconds"} for r in self.records]
        out = {"setting": self.setting, "seed": self.seed, "n_list": self.n_list, "reps": self.reps,
               "summary": self.summary(), "records": recs}
        if include_timing:
            out["elapsed_seconds"] = self.elapsed
        return out

    def to_json(self, include_timing: bool = True) -> str:
        def clean(v):
            if isinstance(v, float) and not np.isfinite(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, list):
                return [clean(x) for x in v]
            return v

        return json.dumps(clean(self.to_dict(include_timing)), indent=2, sort_keys=True) + "\n"


def run_mc(setting: int, methods=METHODS, n_list=(100, 200, 300, 400, 500), reps: int = 500, seed: int = 0, *,
           spec: McSpec | None = None, threads: int = 1) -> McReport:
    """Replicate the selected methods over sample sizes; per-rep failures are recorded, not raised."""
    if reps < 1:
        raise ValueError("reps must be at least 1")
    spec = spec or McSpec(setting=setting, methods=tuple(methods))
    kappa0 = spec.oracle_kappa or oracle_kappa(2, SobolevBasis(spec.D, margin=spec.margin))
    tasks = [(spec, int(n), rep, int(seed), kappa0) for n in n_list for rep in range(reps)]
    t0 = time.perf_counter()
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_rep_task, tasks))
    else:
        chunks = [_rep_task(t) for t in tasks]
    records = [r for chunk in chunks for r in chunk]
    records.sort(key=lambda r: (r["n"], r["rep"], r["method"]))
    for r in records:
        if r["error"]:
            log.warning("rep %d n=%d %s failed: %s", r["rep"], r["n"], r["method"], r["error"])
    return McReport(setting=setting, seed=int(seed), n_list=[int(n) for n in n_list], reps=reps,
                    records=records, elapsed=time.perf_counter() - t0)
