"""Monte Carlo strong-error harness, rate fitting and moment diagnostics.

Fine and coarse discretisations are coupled: every coarse grid is driven by
block sums of the fine-grid increments of the same path, so the difference of
the two terminal values measures discretisation error only.

Path ``i`` always draws its noise from streams derived from
``(base_seed, i)``, and paths are processed in fixed-size chunks whose results
are reduced in path order.  Reports are therefore bit-identical for any
number of workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .model import ModelSpec
from .noise import GridSpec, check_hurst, fgn_covariance, sample_noise_batch
from .scheme import Trajectory, euler_batch, lamperti_euler_batch, lamperti_transform

__all__ = [
    "AbortedRunError",
    "BoundInapplicableError",
    "CouplingPlan",
    "DegenerateFitError",
    "ErrorRecord",
    "ErrorReport",
    "ExpMomentResult",
    "FitResult",
    "MomentEstimate",
    "PlanError",
    "aggregate_increments",
    "derivative_moment_check",
    "derivative_product_batch",
    "exp_moment_check",
    "fit_rate",
    "grid_continuity_check",
    "stochastic_derivative_product",
    "strong_error",
    "terminal_moment_check",
    "theoretical_rate",
]

ABORT_LIMIT = 1e-4
EXACT_TOL = 1e-12


class PlanError(ValueError):
    pass


class DegenerateFitError(ValueError):
    """Raised when a log-log fit sees a zero error (report exactness instead)."""


class AbortedRunError(RuntimeError):
    def __init__(self, message, aborted):
        super().__init__(message)
        self.aborted = aborted


class BoundInapplicableError(ValueError):
    pass


def aggregate_increments(fine: np.ndarray, factor: int) -> np.ndarray:
    """Block sums of ``factor`` consecutive increments along the last axis."""
    fine = np.asarray(fine, dtype=float)
    n = fine.shape[-1]
    if factor < 1 or n % factor:
        raise PlanError(f"factor {factor} does not divide {n} increments")
    if factor == 1:
        return fine.copy()
    return fine.reshape(*fine.shape[:-1], n // factor, factor).sum(axis=-1)


def theoretical_rate(h: float) -> float:
    """Exponent of the RMS error bound: min(1/2, 2H - 1)."""
    if not 0.5 < h < 1.0:
        raise ValueError(f"theoretical rate needs 1/2 < H < 1, got {h}")
    return min(0.5, 2.0 * h - 1.0)


# ---------------------------------------------------------------------------
# Rate fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    ci: tuple[float, float]
    slope_stderr: float

    def contains(self, value: float) -> bool:
        return self.ci[0] <= value <= self.ci[1]


def fit_rate(records: Sequence, level: float = 0.95) -> FitResult:
    """Weighted least squares of log rmse on log delta.

    ``records`` holds ``(delta, rmse, stderr)`` triples (or ``ErrorRecord``).
    Weights are the inverse squared relative standard errors, i.e. the
    inverse variances of log rmse.  Those variances are taken as known, so the
    slope standard error is ``1 / sqrt(sum w (x - xbar)^2)`` with a normal
    quantile.  When every stderr is zero or missing the points are weighted
    equally and the interval falls back to the residual scale with Student t
    on ``n - 2`` degrees of freedom.
    """
    rows = [(r.delta, r.rmse, r.stderr) if isinstance(r, ErrorRecord) else tuple(r) for r in records]
    if len(rows) < 3:
        raise PlanError(f"rate fit needs at least 3 meshes, got {len(rows)}")
    delta = np.array([r[0] for r in rows], dtype=float)
    rmse = np.array([r[1] for r in rows], dtype=float)
    if np.any(rmse <= 0):
        raise DegenerateFitError("zero error on some mesh; the scheme is exact there")
    se = np.array([r[2] if len(r) > 2 and r[2] is not None else 0.0 for r in rows], dtype=float)
    rel = se / rmse
    known = not np.all(rel == 0)
    w = 1.0 / np.maximum(rel, 1e-300) ** 2 if known else np.ones_like(rel)
    x, y = np.log(delta), np.log(rmse)
    xm = np.sum(w * x) / np.sum(w)
    ym = np.sum(w * y) / np.sum(w)
    sxx = np.sum(w * (x - xm) ** 2)
    slope = float(np.sum(w * (x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    if known:
        slope_se = math.sqrt(1.0 / sxx)
        half = stats.norm.ppf(0.5 + level / 2) * slope_se
    else:
        resid = y - (intercept + slope * x)
        dof = len(x) - 2
        slope_se = math.sqrt(float(np.sum(resid**2) / dof) / sxx)
        half = stats.t.ppf(0.5 + level / 2, dof) * slope_se
    return FitResult(slope, intercept, (slope - half, slope + half), slope_se)


# ---------------------------------------------------------------------------
# Strong error
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CouplingPlan:
    model: ModelSpec
    h: float
    fine_n: int
    factors: tuple[int, ...]
    paths: int
    base_seed: int = 0
    horizon: float = 1.0
    sampler: str = "auto"
    reference: str = "auto"
    chunk_size: int = 100
    degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(sorted(int(f) for f in self.factors)))
        check_hurst(self.h, self.degenerate)
        if len(self.factors) < 3:
            raise PlanError(f"need at least 3 coarse grids for a rate fit, got {len(self.factors)}")
        if len(set(self.factors)) != len(self.factors):
            raise PlanError("factors must be distinct")
        for f in self.factors:
            if f < 2:
                raise PlanError(f"factor {f} must be at least 2")
            if self.fine_n % f:
                raise PlanError(f"factor {f} does not divide fine_n={self.fine_n}")
        if self.factors[-1] < 8:
            raise PlanError("reference mesh must be at most 1/8 of the coarsest mesh")
        if self.paths < 2:
            raise PlanError("need at least 2 paths")
        if self.reference not in ("auto", "euler", "lamperti"):
            raise PlanError(f"unknown reference {self.reference!r}")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.horizon, self.fine_n)

    @property
    def reference_kind(self) -> str:
        if self.reference != "auto":
            return self.reference
        # for constant c the transform is linear and both references coincide
        return "euler" if self.model.constant_coefficients else "lamperti"


@dataclass(frozen=True)
class ErrorRecord:
    factor: int
    delta: float
    rmse: float
    stderr: float


@dataclass
class ErrorReport:
    records: list[ErrorRecord]
    fit: FitResult | None
    theoretical_slope: float
    paths_used: int
    paths_aborted: int
    aborted_paths: list[int] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def exact(self) -> bool:
        return all(r.rmse < EXACT_TOL for r in self.records)

    @property
    def fitted_slope(self) -> float:
        return self.fit.slope if self.fit else math.nan

    @property
    def slope_ci(self) -> tuple[float, float]:
        return self.fit.ci if self.fit else (math.nan, math.nan)

    @property
    def ci_contains_theory(self) -> bool:
        return self.fit is not None and self.fit.contains(self.theoretical_slope)

    def to_csv(self) -> str:
        lines = ["factor,delta,rmse,stderr"]
        for r in self.records:
            lines.append(f"{r.factor},{r.delta:.17g},{r.rmse:.17g},{r.stderr:.17g}")
        return "\n".join(lines) + "\n"

    def metadata_text(self) -> str:
        items = dict(self.metadata)
        items.update(
            fitted_slope=self.fitted_slope,
            slope_ci_low=self.slope_ci[0],
            slope_ci_high=self.slope_ci[1],
            theoretical_slope=self.theoretical_slope,
            paths_used=self.paths_used,
            paths_aborted=self.paths_aborted,
            exact=self.exact,
        )
        out = []
        for k, v in items.items():
            if isinstance(v, float):
                v = f"{v:.17g}"
            elif isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            out.append(f"{k} = {v}")
        return "\n".join(out) + "\n"


def _strong_error_chunk(plan: CouplingPlan, indices: range) -> np.ndarray:
    """Squared terminal errors, shape (len(indices), n_factors); nan marks an aborted path."""
    grid = plan.grid
    dW, dBH = sample_noise_batch(grid, plan.h, plan.base_seed, indices, plan.sampler, plan.degenerate)
    if plan.reference_kind == "lamperti":
        ref = lamperti_euler_batch(lamperti_transform(plan.model), grid, dW, dBH, stride=grid.steps)
    else:
        ref = euler_batch(plan.model, grid, dW, dBH, stride=grid.steps)
    x_ref = ref[:, -1]
    out = np.empty((len(indices), len(plan.factors)))
    for j, m in enumerate(plan.factors):
        coarse = grid.coarsen(m)
        xc = euler_batch(
            plan.model,
            coarse,
            aggregate_increments(dW, m),
            aggregate_increments(dBH, m),
            stride=coarse.steps,
        )[:, -1]
        out[:, j] = (x_ref - xc) ** 2
    return out


def _chunks(paths: int, size: int) -> list[range]:
    return [range(lo, min(lo + size, paths)) for lo in range(0, paths, size)]


def _run_chunks(fn, plan, chunks, workers):
    if workers is None or workers <= 1 or len(chunks) == 1:
        return [fn(plan, c) for c in chunks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, [plan] * len(chunks), chunks))


def strong_error(plan: CouplingPlan, workers: int | None = 1) -> ErrorReport:
    """Mean-square terminal error of coarse Euler grids against a fine reference.

    The reference is either Euler on the fine grid or, by default for
    non-constant ``c``, Euler for ``psi(X)`` on the fine grid mapped back
    through ``psi^{-1}``.  The transformed equation has additive fractional
    noise, so its own bias is of order ``delta_ref^{1/2}`` instead of
    ``delta_ref^{2H-1}``.
    """
    chunks = _chunks(plan.paths, plan.chunk_size)
    sq = np.concatenate(_run_chunks(_strong_error_chunk, plan, chunks, workers), axis=0)
    bad = ~np.all(np.isfinite(sq), axis=1)
    aborted = [int(i) for i in np.flatnonzero(bad)]
    if len(aborted) > ABORT_LIMIT * plan.paths:
        raise AbortedRunError(
            f"{len(aborted)} of {plan.paths} paths produced non-finite states (first: {aborted[:10]})",
            aborted,
        )
    good = sq[~bad]
    used = good.shape[0]
    records = []
    for j, m in enumerate(plan.factors):
        e2 = good[:, j]
        mse = math.fsum(e2) / used
        var = math.fsum((e2 - mse) ** 2) / (used - 1)
        rmse = math.sqrt(mse)
        se = math.sqrt(var / used) / (2.0 * rmse) if rmse > 0 else 0.0
        records.append(ErrorRecord(m, plan.grid.delta * m, rmse, se))
    fit = None
    if not all(r.rmse < EXACT_TOL for r in records):
        fit = fit_rate(records)
    theory = theoretical_rate(plan.h) if 0.5 < plan.h < 1 else 0.5
    meta = {
        "model": plan.model.name,
        "h": plan.h,
        "horizon": plan.horizon,
        "fine_n": plan.fine_n,
        "factors": list(plan.factors),
        "paths": plan.paths,
        "base_seed": plan.base_seed,
        "sampler": plan.sampler,
        "reference": plan.reference_kind,
    }
    return ErrorReport(records, fit, theory, used, len(aborted), aborted, meta)


# ---------------------------------------------------------------------------
# Stochastic derivative of the scheme
# ---------------------------------------------------------------------------


def stochastic_derivative_product(traj: Trajectory, s_index: int, n_index: int) -> float:
    """Derivative of X_{n} with respect to the fractional increment of cell ``s_index``.

        c(X_{k0}) * prod_{k=k0+1}^{n-1} (1 + a_x delta + b_x dW_k + c_x dBH_k)

    The product is empty (equal to one) when ``n == k0 + 1``.
    """
    N = traj.grid.steps
    k0, n = int(s_index), int(n_index)
    if not 0 <= k0 < n <= N:
        raise ValueError(f"need 0 <= s_index < n_index <= N={N}, got {k0}, {n}")
    m, x, delta = traj.model, traj.values, traj.grid.delta
    dW, dBH = traj.noise.dW, traj.noise.dBH
    value = float(m.c(x[k0]))
    for k in range(k0 + 1, n):
        t = k * delta
        value *= 1.0 + m.a_x(t, x[k]) * delta + m.b_x(t, x[k]) * dW[k] + m.c_x(x[k]) * dBH[k]
    return float(value)


def derivative_product_batch(
    model: ModelSpec, grid: GridSpec, X: np.ndarray, dW: np.ndarray, dBH: np.ndarray, s_index: int, n_index: int
) -> np.ndarray:
    """Row-wise ``stochastic_derivative_product`` for Euler states ``X`` of shape (M, N+1)."""
    k0, n = s_index, n_index
    if not 0 <= k0 < n <= grid.steps:
        raise ValueError(f"need 0 <= s_index < n_index <= N={grid.steps}, got {k0}, {n}")
    delta = grid.delta
    value = np.asarray(model.c(X[:, k0]), dtype=float) * np.ones(X.shape[0])
    for k in range(k0 + 1, n):
        t = k * delta
        x = X[:, k]
        value = value * (1.0 + model.a_x(t, x) * delta + model.b_x(t, x) * dW[:, k] + model.c_x(x) * dBH[:, k])
    return value


@dataclass(frozen=True)
class MomentEstimate:
    steps: int
    mean: float
    stderr: float


def _moment(samples: np.ndarray, steps: int) -> MomentEstimate:
    m = len(samples)
    mean = math.fsum(samples) / m
    var = math.fsum((samples - mean) ** 2) / (m - 1)
    return MomentEstimate(steps, mean, math.sqrt(var / m))


def _euler_states(model, grid, h, seed, indices, sampler, degenerate):
    dW, dBH = sample_noise_batch(grid, h, seed, indices, sampler, degenerate)
    return euler_batch(model, grid, dW, dBH), dW, dBH


def derivative_moment_check(
    model: ModelSpec,
    h: float,
    grid: GridSpec,
    p: int,
    paths: int,
    seed: int = 0,
    sampler: str = "auto",
    chunk_size: int = 500,
    degenerate: bool = False,
) -> MomentEstimate:
    """Monte Carlo E|D_s X_T|^p with ``s`` at mid-horizon (cell N // 2)."""
    if p not in (2, 4):
        raise ValueError(f"p must be 2 or 4, got {p}")
    k0 = grid.steps // 2
    values = []
    for chunk in _chunks(paths, chunk_size):
        X, dW, dBH = _euler_states(model, grid, h, seed, chunk, sampler, degenerate)
        values.append(np.abs(derivative_product_batch(model, grid, X, dW, dBH, k0, grid.steps)) ** p)
    return _moment(np.concatenate(values), grid.steps)


def terminal_moment_check(
    model: ModelSpec,
    h: float,
    grid: GridSpec,
    p: int,
    paths: int,
    seed: int = 0,
    sampler: str = "auto",
    chunk_size: int = 500,
    degenerate: bool = False,
) -> MomentEstimate:
    """Monte Carlo E[(X_T)^p] for the Euler approximation."""
    values = []
    for chunk in _chunks(paths, chunk_size):
        dW, dBH = sample_noise_batch(grid, h, seed, chunk, sampler, degenerate)
        x_t = euler_batch(model, grid, dW, dBH, stride=grid.steps)[:, -1]
        values.append(np.abs(x_t) ** p)
    return _moment(np.concatenate(values), grid.steps)


def grid_continuity_check(
    model: ModelSpec,
    h: float,
    grid: GridSpec,
    paths: int,
    seed: int = 0,
    refine: int = 2,
    sampler: str = "auto",
    chunk_size: int = 500,
    degenerate: bool = False,
) -> MomentEstimate:
    """Monte Carlo E|X_u - X_{t_u}|^2 averaged over the interior refined nodes of every cell.

    Noise is drawn on a grid ``refine`` times finer than ``grid``; the Euler
    path runs on the block sums and the partial sums give the bridge
    increments inside each cell.
    """
    fine = GridSpec(grid.horizon, grid.steps * refine)
    delta = grid.delta
    t = grid.nodes()[:-1]
    values = []
    for chunk in _chunks(paths, chunk_size):
        fW, fB = sample_noise_batch(fine, h, seed, chunk, sampler, degenerate)
        dW, dBH = aggregate_increments(fW, refine), aggregate_increments(fB, refine)
        X = euler_batch(model, grid, dW, dBH)[:, :-1]
        a, b, c = model.a(t, X), model.b(t, X), model.c(X)
        cw = np.cumsum(fW.reshape(len(chunk), grid.steps, refine), axis=-1)
        cb = np.cumsum(fB.reshape(len(chunk), grid.steps, refine), axis=-1)
        acc = np.zeros(len(chunk))
        for j in range(1, refine):
            gap = a * (j * delta / refine) + b * cw[..., j - 1] + c * cb[..., j - 1]
            acc += np.mean(gap**2, axis=1)
        values.append(acc / (refine - 1))
    return _moment(np.concatenate(values), grid.steps)


# ---------------------------------------------------------------------------
# Exponential moment of the quadratic variation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpMomentResult:
    estimate: float
    stderr: float
    brownian_estimate: float
    brownian_stderr: float
    brownian_closed_form: float
    bound: float
    exact: float

    @property
    def within_bound(self) -> bool:
        return self.estimate <= self.bound + 3 * self.stderr

    @property
    def brownian_matches(self) -> bool:
        return abs(self.brownian_estimate - self.brownian_closed_form) <= 3 * self.brownian_stderr


def exp_moment_check(
    M_coef: float,
    grid: GridSpec,
    h: float,
    paths: int,
    seed: int = 0,
    sampler: str = "auto",
    chunk_size: int = 1000,
    degenerate: bool = False,
) -> ExpMomentResult:
    """E exp{M sum_k (dW_k^2 + dBH_k^2)} against its closed forms.

    The Brownian factor equals (1 - 2 M delta)^{-N/2}.  The full expectation
    is bounded by that factor times (1 - 2 M N delta^{2H})^{-1/2} (Hoelder over
    the N correlated fractional increments).  ``exact`` is the true value
    prod_i (1 - 2 M lambda_i)^{-1/2} over the eigenvalues of the fGn
    covariance, for reference.
    """
    check_hurst(h, degenerate)
    N, delta = grid.steps, grid.delta
    if not 2 * M_coef * delta < 1:
        raise BoundInapplicableError(f"2 M delta = {2 * M_coef * delta:.4g} >= 1")
    if not 2 * M_coef * N * delta ** (2 * h) < 1:
        raise BoundInapplicableError(
            f"2 M N delta^(2H) = {2 * M_coef * N * delta ** (2 * h):.4g} >= 1; "
            "the bound needs a larger N"
        )
    brown_cf = (1.0 - 2.0 * M_coef * delta) ** (-N / 2)
    bound = brown_cf * (1.0 - 2.0 * M_coef * N * delta ** (2 * h)) ** -0.5
    gamma = np.atleast_1d(fgn_covariance(np.arange(N), h, delta))
    idx = np.arange(N)
    lam = np.linalg.eigvalsh(gamma[np.abs(idx[:, None] - idx[None, :])])
    exact = brown_cf * float(np.exp(-0.5 * np.sum(np.log1p(-2.0 * M_coef * lam))))

    full, brown = [], []
    for chunk in _chunks(paths, chunk_size):
        dW, dBH = sample_noise_batch(grid, h, seed, chunk, sampler, degenerate)
        qw = np.sum(dW**2, axis=1)
        qb = np.sum(dBH**2, axis=1)
        full.append(np.exp(M_coef * (qw + qb)))
        brown.append(np.exp(M_coef * qw))
    f = _moment(np.concatenate(full), N)
    b = _moment(np.concatenate(brown), N)
    return ExpMomentResult(f.mean, f.stderr, b.mean, b.stderr, brown_cf, bound, exact)
