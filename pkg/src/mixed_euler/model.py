"""Coefficients of the mixed equation and a finite probe of their hypotheses.

A model is the triple ``a(t, x)``, ``b(t, x)``, ``c(x)`` together with the
derivatives the scheme diagnostics need.  Coefficient callables must accept
numpy arrays and be pure; the built-in catalog uses module-level functions so
models can be shipped to worker processes.

The hypothesis check evaluates the bounds on a finite grid.  It can falsify a
hypothesis but never prove one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Callable

import numpy as np

__all__ = [
    "HypothesisReport",
    "HypothesisResult",
    "ModelError",
    "ModelSpec",
    "ProbeDomain",
    "builtin_models",
    "check_hypotheses",
    "get_model",
]


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    name: str
    a: Callable
    b: Callable
    c: Callable
    a_x: Callable
    b_x: Callable
    c_x: Callable
    c_xx: Callable
    K: float
    x0: float = 0.0
    domain: "ProbeDomain | None" = field(default=None, compare=False)
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.K > 0:
            raise ModelError(f"hypothesis constant K must be positive, got {self.K}")

    @property
    def constant_coefficients(self) -> bool:
        return bool(self.params.get("constant", False))


@dataclass(frozen=True)
class ProbeDomain:
    t_range: tuple[float, float] = (0.0, 1.0)
    x_range: tuple[float, float] = (-10.0, 10.0)
    t_samples: int = 65
    x_samples: int = 401

    def __post_init__(self):
        if not self.t_range[0] <= self.t_range[1] or not self.x_range[0] <= self.x_range[1]:
            raise ModelError("probe ranges must be nonempty")
        if self.t_samples < 2 or self.x_samples < 2:
            raise ModelError("probe sample counts must be at least 2")

    def times(self) -> np.ndarray:
        return np.linspace(*self.t_range, self.t_samples)

    def states(self) -> np.ndarray:
        return np.linspace(*self.x_range, self.x_samples)


# ---------------------------------------------------------------------------
# Built-in coefficients (module level so they pickle)
# ---------------------------------------------------------------------------


def _const(value, *args):
    return value + 0.0 * args[-1]


def _zero(*args):
    return 0.0 * args[-1]


def _trig_a(t, x):
    return np.cos(x)


def _trig_a_x(t, x):
    return -np.sin(x)


def _trig_b(t, x):
    return 1.0 + 0.5 * np.sin(x)


def _trig_b_x(t, x):
    return 0.5 * np.cos(x)


def _trig_c(x):
    return 2.0 + np.sin(x)


def _trig_c_x(x):
    return np.cos(x)


def _trig_c_xx(x):
    return -np.sin(x)


def _th_a(kappa, t, x):
    return 0.5 * np.abs(t) ** kappa + 0.5 * np.sin(x)


def _th_a_x(kappa, t, x):
    return 0.5 * np.cos(x) + 0.0 * t


def _th_b(kappa, t, x):
    return 1.0 + 0.25 * np.abs(t) ** kappa * np.cos(x)


def _th_b_x(kappa, t, x):
    return -0.25 * np.abs(t) ** kappa * np.sin(x)


def _th_c(x):
    return 1.5 + 0.5 * np.cos(x)


def _th_c_x(x):
    return -0.5 * np.sin(x)


def _th_c_xx(x):
    return -0.5 * np.cos(x)


def additive(alpha=1.0, beta=1.0, gamma=1.0, x0=0.0) -> ModelSpec:
    """Constant coefficients; the exact solution is x0 + alpha t + beta W + gamma B^H."""
    if not gamma > 0:
        raise ModelError("additive model needs gamma > 0")
    K = max(abs(alpha) + abs(beta), gamma + 1.0 / gamma, 1.0)
    return ModelSpec(
        name="additive",
        a=partial(_const, alpha),
        b=partial(_const, beta),
        c=partial(_const, gamma),
        a_x=_zero,
        b_x=_zero,
        c_x=_zero,
        c_xx=_zero,
        K=K,
        x0=x0,
        domain=ProbeDomain((0.0, 1.0), (-10.0, 10.0), 9, 41),
        params={"alpha": alpha, "beta": beta, "gamma": gamma, "constant": True},
    )


def trig(x0=0.0) -> ModelSpec:
    # the (C) sum c + 1/c + |c'| + |c''| peaks near 4.58 (x ~ 2.06), so K = 4 is too small
    return ModelSpec(
        name="trig",
        a=_trig_a,
        b=_trig_b,
        c=_trig_c,
        a_x=_trig_a_x,
        b_x=_trig_b_x,
        c_x=_trig_c_x,
        c_xx=_trig_c_xx,
        K=5.0,
        x0=x0,
        domain=ProbeDomain((0.0, 1.0), (-10.0, 10.0), 65, 2001),
    )


def time_hoelder(h=0.75, x0=0.0) -> ModelSpec:
    """Drift and diffusion with a t^{2H-1} term, sitting on the edge of the time-Hoelder bound."""
    kappa = 2.0 * h - 1.0
    return ModelSpec(
        name="time-hoelder",
        a=partial(_th_a, kappa),
        b=partial(_th_b, kappa),
        c=_th_c,
        a_x=partial(_th_a_x, kappa),
        b_x=partial(_th_b_x, kappa),
        c_x=_th_c_x,
        c_xx=_th_c_xx,
        K=3.5,
        x0=x0,
        domain=ProbeDomain((0.0, 1.0), (-10.0, 10.0), 65, 401),
        params={"h": h},
    )


def builtin_models(h: float = 0.75) -> dict[str, ModelSpec]:
    """Catalog of named models; ``h`` tunes the Hoelder exponent of "time-hoelder"."""
    return {
        "additive": additive(),
        "trig": trig(),
        "time-hoelder": time_hoelder(h),
    }


def get_model(name: str, h: float = 0.75) -> ModelSpec:
    models = builtin_models(h)
    try:
        return models[name]
    except KeyError:
        raise ModelError(f"unknown model {name!r}; choose from {sorted(models)}") from None


# ---------------------------------------------------------------------------
# Hypothesis probe
# ---------------------------------------------------------------------------


@dataclass
class HypothesisResult:
    name: str
    passed: bool
    worst_ratio: float
    witness: tuple

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        return f"({self.name}) {verdict}: worst ratio {self.worst_ratio:.4g} at {self.witness}"


@dataclass
class HypothesisReport:
    results: dict[str, HypothesisResult]
    derivative_errors: dict[str, tuple[float, tuple]]
    derivative_tol: float

    @property
    def derivatives_ok(self) -> bool:
        return all(err <= self.derivative_tol for err, _ in self.derivative_errors.values())

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values()) and self.derivatives_ok

    def __getitem__(self, key):
        return self.results[key]


def _evaluate(fn, *args, label):
    with np.errstate(all="ignore"):
        val = np.broadcast_to(np.asarray(fn(*args), dtype=float), np.broadcast(*args).shape)
    bad = ~np.isfinite(val)
    if bad.any():
        idx = np.argwhere(bad)[0]
        point = tuple(float(np.broadcast_to(arg, val.shape)[tuple(idx)]) for arg in args)
        raise ModelError(f"{label} is not finite at {point}")
    return val


def _fd_error(fn, deriv, args, var, step):
    """Max relative gap between a declared derivative and a central difference in ``args[var]``."""
    up = list(args)
    dn = list(args)
    up[var] = args[var] + step
    dn[var] = args[var] - step
    fd = (np.asarray(fn(*up), dtype=float) - np.asarray(fn(*dn), dtype=float)) / (2 * step)
    declared = np.broadcast_to(np.asarray(deriv(*args), dtype=float), fd.shape)
    rel = np.abs(fd - declared) / np.maximum(1.0, np.abs(declared))
    i = np.unravel_index(np.argmax(rel), rel.shape)
    point = tuple(float(np.broadcast_to(a, rel.shape)[i]) for a in args)
    return float(rel[i]), point


def check_hypotheses(
    model: ModelSpec,
    h: float,
    domain: ProbeDomain | None = None,
    K: float | None = None,
    fd_step: float = 1e-6,
    fd_tol: float = 1e-4,
) -> HypothesisReport:
    """Probe hypotheses (A), (B), (C) on a grid and cross-check derivatives.

    Each hypothesis is summarised by its worst ratio ``lhs / K`` (for (B),
    ``lhs / (K |t-s|^{2H-1})``) and the point where it occurs; a hypothesis
    passes when that ratio is at most one.  (C) additionally fails wherever
    ``c <= 0``.
    """
    domain = domain or model.domain or ProbeDomain()
    K = model.K if K is None else K
    ts, xs = domain.times(), domain.states()
    T, X = np.meshgrid(ts, xs, indexing="ij")

    a = _evaluate(model.a, T, X, label="a")
    b = _evaluate(model.b, T, X, label="b")
    a_x = _evaluate(model.a_x, T, X, label="a_x")
    b_x = _evaluate(model.b_x, T, X, label="b_x")
    c = _evaluate(model.c, xs, label="c")
    c_x = _evaluate(model.c_x, xs, label="c_x")
    c_xx = _evaluate(model.c_xx, xs, label="c_xx")

    results = {}

    lhs_a = np.abs(a) + np.abs(b) + np.abs(a_x) + np.abs(b_x)
    i = np.unravel_index(np.argmax(lhs_a), lhs_a.shape)
    ratio = float(lhs_a[i] / K)
    results["A"] = HypothesisResult("A", ratio <= 1.0, ratio, (float(ts[i[0]]), float(xs[i[1]])))

    # every pair (p, q > p), not just neighbours: the ratio can peak at separated small times
    worst, witness = 0.0, (float(ts[0]), float(ts[-1]), float(xs[0]))
    exponent = 2.0 * h - 1.0
    for p in range(len(ts) - 1):
        gap = ts[p + 1 :] - ts[p]
        lhs = np.abs(a[p + 1 :] - a[p]) + np.abs(b[p + 1 :] - b[p])
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(gap[:, None] > 0, lhs / (K * gap[:, None] ** exponent), 0.0)
        q, j = np.unravel_index(np.argmax(ratio), ratio.shape)
        if ratio[q, j] > worst:
            worst, witness = float(ratio[q, j]), (float(ts[p]), float(ts[p + 1 + q]), float(xs[j]))
    results["B"] = HypothesisResult("B", worst <= 1.0, worst, witness)

    with np.errstate(divide="ignore"):
        lhs_c = np.where(c > 0, c + 1.0 / c + np.abs(c_x) + np.abs(c_xx), np.inf)
    j = int(np.argmax(lhs_c))
    ratio = float(lhs_c[j] / K)
    results["C"] = HypothesisResult("C", ratio <= 1.0, ratio, (float(xs[j]),))

    deriv = {
        "a_x": _fd_error(model.a, model.a_x, (T, X), 1, fd_step),
        "b_x": _fd_error(model.b, model.b_x, (T, X), 1, fd_step),
        "c_x": _fd_error(model.c, model.c_x, (xs,), 0, fd_step),
        "c_xx": _fd_error(model.c_x, model.c_xx, (xs,), 0, fd_step),
    }
    return HypothesisReport(results, deriv, fd_tol)

