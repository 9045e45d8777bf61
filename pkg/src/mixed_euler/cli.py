"""Command-line entry point: ``mixed-euler <command> --config run.ini``.

Exit codes: 0 pass, 1 scientific failure or run error, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, noise, scheme
from .model import ModelError, builtin_models, get_model

COMMANDS = ("convergence", "simulate", "noise-test", "diagnostics")
SAMPLERS = ("auto", "cholesky", "circulant")

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    command: str
    model: str = "trig"
    hurst: float = 0.75
    horizon: float = 1.0
    fine_n: int = 1024
    factors: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    paths: int = 1000
    seed: int = 0
    output_dir: str = "out"
    sampler: str = "auto"
    reference: str = "auto"
    degenerate_brownian: bool = False
    # diagnostics sweeps (log2 of step counts)
    moment_sweep: list[int] = field(default_factory=lambda: list(range(6, 13)))
    continuity_sweep: list[int] = field(default_factory=lambda: list(range(4, 11)))
    exp_m: float = 1.0
    exp_n: int = 1024
    exp_paths: int = 100000
    max_lag: int = -1

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"command: unknown command {self.command!r}")
        if self.model not in builtin_models(0.75):
            raise ConfigError(f"model: unknown model {self.model!r}; choose from {sorted(builtin_models())}")
        if not (0.5 < self.hurst < 1.0 or (self.degenerate_brownian and self.hurst == 0.5)):
            raise ConfigError(
                f"hurst: {self.hurst} must lie in (1/2, 1) (0.5 needs --degenerate-brownian)"
            )
        if not self.horizon > 0:
            raise ConfigError(f"horizon: must be positive, got {self.horizon}")
        if self.fine_n < 1:
            raise ConfigError(f"fine_n: must be positive, got {self.fine_n}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler: must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.paths < 2:
            raise ConfigError(f"paths: need at least 2, got {self.paths}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed: must be an unsigned 64-bit integer, got {self.seed}")
        if self.command == "convergence":
            for f in self.factors:
                if f < 2 or self.fine_n % f:
                    raise ConfigError(f"factors: factor {f} does not divide fine_n={self.fine_n}")
            if len(self.factors) < 3:
                raise ConfigError("factors: need at least 3 factors")

    def to_ini(self) -> str:
        lines = [f"[{self.command}]"]
        for k, v in asdict(self).items():
            if k != "command":
                lines.append(f"{k} = " + (", ".join(map(str, v)) if isinstance(v, list) else str(v)))
        return "\n".join(lines) + "\n"


_INT_LISTS = {"factors", "moment_sweep", "continuity_sweep"}


def load_config(path: str | None, command: str) -> ExperimentConfig:
    """Read the section named after ``command`` (plus ``[DEFAULT]``) from an INI file."""
    cfg = ExperimentConfig(command=command)
    if path is None:
        return cfg
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    section = cp[command] if cp.has_section(command) else cp.defaults()
    known = {f for f in ExperimentConfig.__dataclass_fields__ if f != "command"}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"{path} [{command}] {key}: unknown field")
        current = getattr(cfg, key)
        try:
            if key in _INT_LISTS:
                value = [int(x) for x in raw.replace(",", " ").split()]
            elif isinstance(current, bool):
                value = section.getboolean(key)
            elif isinstance(current, int):
                value = int(raw, 0)
            elif isinstance(current, float):
                value = float(raw)
            else:
                value = raw.strip()
        except ValueError:
            raise ConfigError(f"{path} [{command}] {key}: cannot parse {raw!r}") from None
        setattr(cfg, key, value)
    return cfg


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _g(x: float) -> str:
    return f"{x:.17g}"


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_g(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def _prepare_output(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def run_convergence(cfg: ExperimentConfig, workers: int = 1) -> int:
    out = _prepare_output(cfg)
    model = get_model(cfg.model, cfg.hurst)
    plan = analysis.CouplingPlan(
        model=model,
        h=cfg.hurst,
        fine_n=cfg.fine_n,
        factors=tuple(cfg.factors),
        paths=cfg.paths,
        base_seed=cfg.seed,
        horizon=cfg.horizon,
        sampler=cfg.sampler,
        reference=cfg.reference,
        degenerate=cfg.degenerate_brownian,
    )
    report = analysis.strong_error(plan, workers=workers)
    (out / "errors.csv").write_text(report.to_csv())
    (out / "errors_meta.txt").write_text(report.metadata_text())

    lines = [
        f"model: {cfg.model}  H={cfg.hurst}  T={cfg.horizon}  fine_n={cfg.fine_n}",
        f"paths: {report.paths_used} used, {report.paths_aborted} aborted",
        f"reference: {plan.reference_kind}",
    ]
    for r in report.records:
        lines.append(f"  m={r.factor:5d}  delta={r.delta:.6g}  rmse={r.rmse:.6g}  stderr={r.stderr:.3g}")
    if report.exact:
        lines.append("exact coincidence: rmse < 1e-12 on every mesh; regression skipped")
        verdict = True
    else:
        lo, hi = report.slope_ci
        lines.append(f"fitted slope: {report.fitted_slope:.4f}  95% CI [{lo:.4f}, {hi:.4f}]")
        lines.append(f"theoretical slope: {report.theoretical_slope:.4f}")
        verdict = report.ci_contains_theory
    lines.append("PASS" if verdict else "FAIL")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_PASS if verdict else EXIT_FAIL


def run_simulate(cfg: ExperimentConfig, workers: int = 1) -> int:
    out = _prepare_output(cfg)
    model = get_model(cfg.model, cfg.hurst)
    grid = noise.GridSpec(cfg.horizon, cfg.fine_n)
    path = noise.sample_noise_path(grid, cfg.hurst, cfg.seed, 0, cfg.sampler, cfg.degenerate_brownian)
    traj = scheme.euler_path(model, path)
    scheme.write_trajectory_csv(out / "trajectory.csv", traj)
    noise.write_noise_csv(out / "noise.csv", path)
    print(f"wrote {grid.steps + 1} states to {out / 'trajectory.csv'}; X_T = {traj.values[-1]:.10g}")
    return EXIT_PASS


def covariance_table(cfg: ExperimentConfig, sampler: str | None = None):
    """Per-lag empirical fGn autocovariance with z-scores against the exact value.

    For each path the lag-k statistic is the average of x_i x_{i+k}; these are
    i.i.d. across paths, so their sample standard error is exact for the
    pooled mean.
    """
    grid = noise.GridSpec(cfg.horizon, cfg.fine_n)
    sampler = sampler or cfg.sampler
    n = grid.steps
    max_lag = n - 1 if cfg.max_lag < 0 else min(cfg.max_lag, n - 1)
    sums = np.zeros((cfg.paths, max_lag + 1))
    cross = np.zeros(cfg.paths)
    chunk = 5000
    for lo in range(0, cfg.paths, chunk):
        idx = range(lo, min(lo + chunk, cfg.paths))
        dW, dBH = noise.sample_noise_batch(grid, cfg.hurst, cfg.seed, idx, sampler, cfg.degenerate_brownian)
        for k in range(max_lag + 1):
            sums[lo : idx.stop, k] = np.mean(dBH[:, : n - k] * dBH[:, k:], axis=1)
        cross[lo : idx.stop] = np.mean(dW * dBH, axis=1)
    emp = sums.mean(axis=0)
    se = sums.std(axis=0, ddof=1) / math.sqrt(cfg.paths)
    analytic = np.atleast_1d(noise.fgn_covariance(np.arange(max_lag + 1), cfg.hurst, grid.delta))
    z = (emp - analytic) / se
    cross_z = cross.mean() / (cross.std(ddof=1) / math.sqrt(cfg.paths))
    return [(k, float(emp[k]), float(analytic[k]), float(z[k])) for k in range(max_lag + 1)], float(cross_z)


def run_noise_test(cfg: ExperimentConfig, workers: int = 1) -> int:
    out = _prepare_output(cfg)
    rows, cross_z = covariance_table(cfg)
    _write_csv(out / "cov.csv", ["lag", "empirical", "analytic", "z"], rows)
    worst = max(abs(r[3]) for r in rows)
    verdict = worst < 4 and abs(cross_z) < 4
    lines = [
        f"fGn covariance check: H={cfg.hurst} N={cfg.fine_n} paths={cfg.paths} sampler={cfg.sampler}",
        f"max |z| over {len(rows)} lags: {worst:.3f}",
        f"dW/dBH cross-correlation z: {cross_z:.3f}",
        "PASS" if verdict else "FAIL",
    ]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_PASS if verdict else EXIT_FAIL


def _variation(values) -> float:
    v = np.asarray(values, dtype=float)
    return float((v.max() - v.min()) / v.min())


def run_diagnostics(cfg: ExperimentConfig, workers: int = 1) -> int:
    out = _prepare_output(cfg)
    model = get_model(cfg.model, cfg.hurst)
    h, T, seed, sampler = cfg.hurst, cfg.horizon, cfg.seed, cfg.sampler
    deg = cfg.degenerate_brownian
    rows, verdicts = [], {}

    deriv = [
        analysis.derivative_moment_check(model, h, noise.GridSpec(T, 2**e), 2, cfg.paths, seed, sampler, degenerate=deg)
        for e in cfg.moment_sweep
    ]
    quart = [
        analysis.terminal_moment_check(model, h, noise.GridSpec(T, 2**e), 4, cfg.paths, seed + 1, sampler, degenerate=deg)
        for e in cfg.moment_sweep
    ]
    for name, ests in (("derivative_p2", deriv), ("terminal_p4", quart)):
        for est in ests:
            rows.append((name, est.steps, T / est.steps, est.mean, est.stderr))
    if model.constant_coefficients:
        c2 = float(model.c(0.0)) ** 2
        verdicts["derivative_p2"] = ("PASS" if all(e.mean == c2 for e in deriv) else "FAIL",
                                     f"constant c: every estimate equals c^2 = {c2:g}")
    else:
        var = _variation([e.mean for e in deriv])
        verdicts["derivative_p2"] = ("PASS" if var < 0.30 else "FAIL", f"variation {var:.3f} (limit 0.30)")
    var = _variation([e.mean for e in quart])
    verdicts["terminal_p4"] = ("PASS" if var < 0.30 else "FAIL", f"variation {var:.3f} (limit 0.30)")

    cont = [
        analysis.grid_continuity_check(model, h, noise.GridSpec(T, 2**e), cfg.paths, seed + 2, sampler=sampler, degenerate=deg)
        for e in cfg.continuity_sweep
    ]
    for est in cont:
        rows.append(("continuity_p2", est.steps, T / est.steps, est.mean, est.stderr))
    fit = analysis.fit_rate([(T / e.steps, e.mean, e.stderr) for e in cont])
    ok = abs(fit.slope - 1.0) <= 0.15
    verdicts["continuity_p2"] = ("PASS" if ok else "FAIL", f"slope {fit.slope:.4f} (target 1.0 +- 0.15)")

    exp_grid = noise.GridSpec(T, cfg.exp_n)
    try:
        res = analysis.exp_moment_check(cfg.exp_m, exp_grid, h, cfg.exp_paths, seed + 3, sampler, degenerate=deg)
    except analysis.BoundInapplicableError as exc:
        verdicts["exp_moment"] = ("SKIPPED", str(exc))
    else:
        rows.append(("exp_moment", cfg.exp_n, exp_grid.delta, res.estimate, res.stderr))
        rows.append(("exp_moment_brownian", cfg.exp_n, exp_grid.delta, res.brownian_estimate, res.brownian_stderr))
        ok = res.within_bound and res.brownian_matches
        verdicts["exp_moment"] = (
            "PASS" if ok else "FAIL",
            f"estimate {res.estimate:.6g} +- {res.stderr:.2g}, bound {res.bound:.6g}; "
            f"Brownian {res.brownian_estimate:.6g} vs closed form {res.brownian_closed_form:.6g}",
        )

    _write_csv(out / "diagnostics.csv", ["check", "steps", "delta", "estimate", "stderr"], rows)
    lines = [f"diagnostics: model={cfg.model} H={h} paths={cfg.paths}"]
    lines += [f"{name}: {v} ({detail})" for name, (v, detail) in verdicts.items()]
    failed = any(v == "FAIL" for v, _ in verdicts.values())
    lines.append("FAIL" if failed else "PASS")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_FAIL if failed else EXIT_PASS


RUNNERS = {
    "convergence": run_convergence,
    "simulate": run_simulate,
    "noise-test": run_noise_test,
    "diagnostics": run_diagnostics,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixed-euler", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="INI file; the section named after the command is used")
    parser.add_argument("--seed", type=int, help="base seed (unsigned 64-bit)")
    parser.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    parser.add_argument("--output", help="output directory")
    parser.add_argument("--sampler", choices=SAMPLERS)
    parser.add_argument("--degenerate-brownian", action="store_true",
                        help="allow H = 0.5 (test mode: fGn reduces to white noise)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.command)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.output is not None:
            cfg.output_dir = args.output
        if args.sampler is not None:
            cfg.sampler = args.sampler
        if args.degenerate_brownian:
            cfg.degenerate_brownian = True
        cfg.validate()
    except (ConfigError, ModelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return RUNNERS[args.command](cfg, workers=max(1, args.workers))
    except (analysis.AbortedRunError, analysis.PlanError, noise.NoiseError, scheme.SchemeError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
