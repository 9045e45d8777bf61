"""Euler recursion for the mixed equation and related transforms.

The recursion is

    X_{k+1} = X_k + a(t_k, X_k) delta + b(t_k, X_k) dW_k + c(X_k) dBH_k,

with ``X_0 = x0``.  ``euler_path`` runs it for a single noise path and keeps the
whole trajectory; ``euler_batch`` runs many paths at once (one row per path)
and is what the Monte Carlo harness uses.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import integrate, optimize

from .model import ModelSpec
from .noise import GridSpec, NoisePath

__all__ = [
    "SchemeError",
    "Trajectory",
    "TransformedModel",
    "discrete_gronwall_bound",
    "euler_batch",
    "euler_path",
    "euler_step",
    "interpolate",
    "lamperti_euler_batch",
    "lamperti_transform",
    "write_trajectory_csv",
]


class SchemeError(ArithmeticError):
    """Non-finite state, unsupported interpolation point, or failed transform."""


def euler_step(model: ModelSpec, t: float, x: float, delta: float, dW: float, dBH: float) -> float:
    if not delta > 0:
        raise SchemeError(f"delta must be positive, got {delta}")
    x_new = x + model.a(t, x) * delta + model.b(t, x) * dW + model.c(x) * dBH
    if not math.isfinite(x_new):
        raise SchemeError(f"Euler step produced a non-finite state from (t={t}, x={x})")
    return float(x_new)


@dataclass(frozen=True)
class Trajectory:
    """Euler values at the grid nodes of ``noise.grid``.

    ``refinement`` optionally holds noise on a finer grid whose block sums are
    ``noise``; it supplies the bridge increments needed between nodes.
    """

    grid: GridSpec
    values: np.ndarray
    model: ModelSpec
    noise: NoisePath
    refinement: NoisePath | None = None

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes()

    def interpolate(self, u: float) -> float:
        return interpolate(self, u)


def euler_path(model: ModelSpec, noise: NoisePath, refinement: NoisePath | None = None) -> Trajectory:
    grid = noise.grid
    if refinement is not None:
        r, rem = divmod(refinement.grid.steps, grid.steps)
        if rem or r < 1 or not math.isclose(refinement.grid.horizon, grid.horizon):
            raise SchemeError("refinement grid must subdivide the trajectory grid")
        coarse = refinement.coarsen(r)
        if not (np.allclose(coarse.dW, noise.dW, rtol=0, atol=1e-12)
                and np.allclose(coarse.dBH, noise.dBH, rtol=0, atol=1e-12)):
            raise SchemeError("refinement noise does not aggregate to the trajectory noise")
    delta = grid.delta
    values = np.empty(grid.steps + 1)
    x = values[0] = model.x0
    for k in range(grid.steps):
        try:
            x = euler_step(model, k * delta, x, delta, noise.dW[k], noise.dBH[k])
        except SchemeError as exc:
            raise SchemeError(f"step {k}: {exc}") from None
        values[k + 1] = x
    values.setflags(write=False)
    return Trajectory(grid, values, model, noise, refinement)


def euler_batch(
    model: ModelSpec,
    grid: GridSpec,
    dW: np.ndarray,
    dBH: np.ndarray,
    stride: int = 1,
    x0: float | None = None,
) -> np.ndarray:
    """Run the recursion on ``M`` paths at once.

    ``dW`` and ``dBH`` have shape ``(M, N)``.  Returns the states at nodes
    ``0, stride, 2*stride, ..., N`` as an ``(M, N // stride + 1)`` array.
    Paths that leave the finite range keep ``nan`` from then on; the caller
    decides what to do with them.
    """
    M, N = dW.shape
    if N != grid.steps or dBH.shape != dW.shape:
        raise SchemeError(f"noise shape {dW.shape}/{dBH.shape} does not match grid with N={grid.steps}")
    if N % stride:
        raise SchemeError(f"stride {stride} does not divide N={N}")
    delta = grid.delta
    out = np.empty((M, N // stride + 1))
    x = np.full(M, model.x0 if x0 is None else x0, dtype=float)
    out[:, 0] = x
    a, b, c = model.a, model.b, model.c
    with np.errstate(all="ignore"):
        for k in range(N):
            t = k * delta
            x = x + a(t, x) * delta + b(t, x) * dW[:, k] + c(x) * dBH[:, k]
            if (k + 1) % stride == 0:
                out[:, (k + 1) // stride] = x
    out[~np.isfinite(out)] = np.nan
    return out


def interpolate(traj: Trajectory, u: float) -> float:
    """Continuous Euler interpolation at time ``u``.

    On grid nodes this is the stored value.  Between nodes the Brownian and
    fractional bridge increments are read off ``traj.refinement``, so ``u``
    must be one of its nodes.
    """
    grid = traj.grid
    T, delta = grid.horizon, grid.delta
    if not 0.0 <= u <= T:
        raise SchemeError(f"u={u} outside [0, {T}]")
    tol = 1e-12 * T
    k = min(int(math.floor(u / delta + 1e-9)), grid.steps)
    if abs(u - grid.node(k)) <= tol:
        return float(traj.values[k])
    ref = traj.refinement
    if ref is None:
        raise SchemeError(f"u={u} is off-grid and no refined noise is available")
    r = ref.grid.steps // grid.steps
    j = round(u / ref.grid.delta)
    if abs(u - j * ref.grid.delta) > tol:
        raise SchemeError(f"u={u} is not a node of the refined noise grid")
    lo = k * r
    w_bridge = float(np.sum(ref.dW[lo:j]))
    b_bridge = float(np.sum(ref.dBH[lo:j]))
    t_k = grid.node(k)
    x = float(traj.values[k])
    m = traj.model
    return float(x + m.a(t_k, x) * (u - t_k) + m.b(t_k, x) * w_bridge + m.c(x) * b_bridge)


def discrete_gronwall_bound(x0: float, K: float, delta: float, n: int) -> float:
    """Upper bound (x0 + 1) exp(K delta n) for x_{k+1} <= x_k (1 + K delta) + K delta."""
    if x0 + 1.0 == 0.0:
        return 0.0
    try:
        return (x0 + 1.0) * math.exp(K * delta * n)
    except OverflowError:
        return math.copysign(math.inf, x0 + 1.0)


# ---------------------------------------------------------------------------
# Lamperti-type transform
# ---------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(10)


def _hermite(xq, xs, ys, slopes):
    """Cubic Hermite interpolation on sorted knots ``xs``."""
    i = np.clip(np.searchsorted(xs, xq, side="right") - 1, 0, len(xs) - 2)
    x_lo, x_hi = xs[i], xs[i + 1]
    h = x_hi - x_lo
    s = (xq - x_lo) / h
    s2, s3 = s * s, s * s * s
    return (
        (2 * s3 - 3 * s2 + 1) * ys[i]
        + (s3 - 2 * s2 + s) * h * slopes[i]
        + (-2 * s3 + 3 * s2) * ys[i + 1]
        + (s3 - s2) * h * slopes[i + 1]
    )


@dataclass(frozen=True)
class TransformedModel:
    """psi(x) = int_0^x dz / c(z) and the drift/diffusion of psi(X).

    ``psi`` and ``psi_inv`` accept scalars or arrays.  Inside the tabulated
    range they use cubic Hermite interpolation of a Gauss-Legendre table
    (exact slopes 1/c and c at the knots); outside it they fall back to
    adaptive quadrature and bracketing root-finding.
    """

    model: ModelSpec
    x_range: tuple[float, float] = (-64.0, 64.0)
    knots_per_unit: int = 512
    quad_tol: float = 1e-10

    def alpha(self, s, x):
        m = self.model
        c = m.c(x)
        return m.a(s, x) / c - m.b(s, x) ** 2 * m.c_x(x) / (2.0 * c * c)

    def beta(self, s, x):
        return self.model.b(s, x) / self.model.c(x)

    @cached_property
    def _table(self):
        lo, hi = self.x_range
        step = 1.0 / self.knots_per_unit
        xs = np.arange(math.floor(lo / step), math.ceil(hi / step) + 1) * step
        mid = 0.5 * (xs[1:] + xs[:-1])
        pts = mid[:, None] + 0.5 * step * _GL_NODES[None, :]
        panels = 0.5 * step * (_GL_WEIGHTS / self.model.c(pts)).sum(axis=1)
        cum = np.concatenate([[0.0], np.cumsum(panels)])
        zero = int(np.argmin(np.abs(xs)))
        ys = cum - cum[zero]
        ys[zero] = 0.0
        cx = np.asarray(self.model.c(xs), dtype=float)
        if np.any(cx <= 0) or np.any(np.diff(ys) <= 0):
            raise SchemeError("psi is not strictly increasing; c must be positive")
        for arr in (xs, ys, cx):
            arr.setflags(write=False)
        return xs, ys, cx

    def psi_quad(self, x: float) -> float:
        val, err = integrate.quad(lambda z: 1.0 / float(self.model.c(z)), 0.0, float(x),
                                  epsabs=self.quad_tol, epsrel=self.quad_tol, limit=500)
        if not err <= max(self.quad_tol, self.quad_tol * abs(val)) * 10:
            raise SchemeError(f"quadrature for psi({x}) did not converge (error {err:.2e})")
        return val

    def psi(self, x):
        xs, ys, cx = self._table
        xq = np.asarray(x, dtype=float)
        out = _hermite(xq, xs, ys, 1.0 / cx)
        outside = (xq < xs[0]) | (xq > xs[-1])
        if np.any(outside):
            out = np.array(out, dtype=float, ndmin=1)
            flat = np.broadcast_to(xq, out.shape)
            for idx in zip(*np.nonzero(outside.reshape(out.shape))):
                out[idx] = self.psi_quad(flat[idx])
            out = out.reshape(xq.shape)
        return float(out) if np.ndim(out) == 0 else out

    def _psi_inv_root(self, y: float) -> float:
        K = self.model.K
        lo, hi = -abs(y) * K - 1.0, abs(y) * K + 1.0
        return optimize.brentq(lambda z: self.psi_quad(z) - y, lo, hi, xtol=1e-13, rtol=1e-15)

    @cached_property
    def _inverse_table(self):
        """Knots of psi^{-1} on a uniform grid in y, so lookup needs no search."""
        xs, ys, cx = self._table
        step = 1.0 / self.knots_per_unit
        y0 = math.ceil(ys[0] / step) * step
        yk = y0 + step * np.arange(int((ys[-1] - y0) / step) + 1)
        xk = _hermite(yk, ys, xs, cx)
        for _ in range(3):
            xk = xk - (_hermite(xk, xs, ys, 1.0 / cx) - yk) * self.model.c(xk)
        ck = np.asarray(self.model.c(xk), dtype=float)
        for arr in (yk, xk, ck):
            arr.setflags(write=False)
        return y0, step, xk, ck

    def psi_inv(self, y):
        y0, step, xk, ck = self._inverse_table
        yq = np.asarray(y, dtype=float)
        pos = (yq - y0) / step
        inside = (pos >= 0) & (pos <= len(xk) - 1)
        i = np.clip(np.floor(np.where(inside, pos, 0.0)).astype(np.intp), 0, len(xk) - 2)
        s = pos - i
        s2 = s * s
        s3 = s2 * s
        x = ((2 * s3 - 3 * s2 + 1) * xk[i] + (s3 - 2 * s2 + s) * step * ck[i]
             + (3 * s2 - 2 * s3) * xk[i + 1] + (s3 - s2) * step * ck[i + 1])
        outside = ~inside & np.isfinite(yq)
        if np.any(outside):
            x = np.array(x, dtype=float, ndmin=1)
            flat = np.broadcast_to(yq, x.shape)
            for idx in zip(*np.nonzero(outside.reshape(x.shape))):
                x[idx] = self._psi_inv_root(flat[idx])
            x = x.reshape(yq.shape)
        return float(x) if np.ndim(x) == 0 else x

    def coefficients(self, s, x):
        """(alpha, beta) sharing one evaluation of each coefficient."""
        m = self.model
        c = m.c(x)
        b = m.b(s, x)
        beta = b / c
        return m.a(s, x) / c - 0.5 * beta * beta * m.c_x(x), beta


def lamperti_transform(model: ModelSpec, **kwargs) -> TransformedModel:
    return TransformedModel(model, **kwargs)


def lamperti_euler_batch(
    transformed: TransformedModel,
    grid: GridSpec,
    dW: np.ndarray,
    dBH: np.ndarray,
    stride: int = 1,
) -> np.ndarray:
    """Euler on Y = psi(X), whose fractional noise is additive, mapped back to X.

        Y_{k+1} = Y_k + alpha(t_k, X_k) delta + beta(t_k, X_k) dW_k + dBH_k,
        X_k = psi_inv(Y_k).

    Same shapes and ``nan`` policy as ``euler_batch``.
    """
    M, N = dW.shape
    if N != grid.steps or dBH.shape != dW.shape:
        raise SchemeError(f"noise shape {dW.shape}/{dBH.shape} does not match grid with N={grid.steps}")
    if N % stride:
        raise SchemeError(f"stride {stride} does not divide N={N}")
    tm = transformed
    delta = grid.delta
    out = np.empty((M, N // stride + 1))
    x = np.full(M, tm.model.x0, dtype=float)
    y = np.full(M, tm.psi(tm.model.x0), dtype=float)
    out[:, 0] = x
    with np.errstate(all="ignore"):
        for k in range(N):
            t = k * delta
            alpha, beta = tm.coefficients(t, x)
            y = y + alpha * delta + beta * dW[:, k] + dBH[:, k]
            x = tm.psi_inv(y)
            if (k + 1) % stride == 0:
                out[:, (k + 1) // stride] = x
    out[~np.isfinite(out)] = np.nan
    return out


def write_trajectory_csv(path: Path | str, traj: Trajectory) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["k", "t", "x"])
        for k, (t, x) in enumerate(zip(traj.times, traj.values)):
            out.writerow([k, f"{t:.17g}", f"{x:.17g}"])
