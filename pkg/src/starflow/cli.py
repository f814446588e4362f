"""Experiment driver: ``starflow <experiment> [--config FILE] [--out DIR] [--seed N]``.

Each subcommand reads an optional flat JSON config (keys override the
experiment's defaults), writes ``manifest.json`` to the output directory
before doing any heavy work, and then its CSV/JSON artifacts. Errors are
reported as one ``error: <experiment>: <message>`` line on stderr with a
nonzero exit status.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np
from scipy import stats

from . import flow as fl
from . import mcmc, targets, vi
from .bench import time_jacdet
from .jacdet import fast_log_det, hutchinson_grad_estimate, oracle_log_det, relative_error
from .manifolds import DeformedSphere, LpBall, RadiusField, Simplex, Sphere
from .spherical import sample_uniform_angles

EXPERIMENTS = (
    "jacdet-bench", "jacdet-verify", "train-3d", "objective-bayes", "mixing-mcmc-compare",
    "portfolio", "hutchinson-compare", "density-grid",
)

_FLOW_DEFAULTS = {"n_layers": 5, "blocks_per_layer": 3, "n_bins": 8, "hidden": 32}
_TRAIN_DEFAULTS = {"steps": 5000, "batch_size": 256, "learning_rate": 1e-3, "adam_betas": [0.9, 0.999],
                   "adam_eps": 1e-8, "path_gradient": True}

DEFAULTS = {
    "jacdet-bench": {"dims": [16, 32, 64, 128, 256, 512], "reps": 20, "manifold": "sphere"},
    "jacdet-verify": {"dims": [3], "n_points": 100, "manifold": "sphere", "tolerance": 1e-8},
    "train-3d": {"target": "vmf", "manifold": "sphere", "kappa": 5.0, "mu": [0.0, 0.0, 1.0],
                 "n_components": 50, "mse_samples": 10000, "grid_resolution": 100,
                 "constraint_samples": 100000, **_FLOW_DEFAULTS, **_TRAIN_DEFAULTS},
    "objective-bayes": {"manifold_p": 1.0, "norm": 2.0, "sigma": 4.0, "n_samples": 10000,
                        **_FLOW_DEFAULTS, **_TRAIN_DEFAULTS, "steps": 2000},
    "mixing-mcmc-compare": {"counts": [12, 7, 4, 3, 2, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0], "alpha": 1.0,
                            "level": 0.95, "n_samples": 100000, "chains": 100,
                            "max_samples_per_chain": 20000, "mcmc_samples_per_chain": None,
                            "write_mcmc_samples": False,
                            **_FLOW_DEFAULTS, **_TRAIN_DEFAULTS, "steps": 3000},
    "portfolio": {"csv": None, "sigma": 1.0, "prior": "uniform", "alpha": 0.5, "n_samples": 10000,
                  "nonzero_threshold": 1e-3, **_FLOW_DEFAULTS, **_TRAIN_DEFAULTS, "steps": 2000},
    "hutchinson-compare": {"dim": 8, "manifold_p": 0.5, "n_probes": [1], "variance_probes": [1, 5, 7],
                           "variance_points": 100, "variance_draws": 1000, "mse_samples": 10000,
                           "constraint_samples": 100000,
                           **_FLOW_DEFAULTS, **_TRAIN_DEFAULTS, "steps": 2000},
    "density-grid": {"checkpoint": None, "resolution": 100},
}

_MANIFOLD_KEYS = ("manifold", "manifold_c", "manifold_p", "manifold_t", "amplitude", "frequency")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# config handling


def load_config(experiment: str, path=None, seed=None) -> dict:
    """Defaults for ``experiment`` overridden by the JSON file at ``path`` and ``seed``."""
    cfg = dict(DEFAULTS[experiment])
    cfg.setdefault("seed", 0)
    if path is not None:
        p = Path(path)
        try:
            user = json.loads(p.read_text())
        except OSError:
            raise ConfigError(f"config: cannot read file: {p}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: {p}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(user, dict):
            raise ConfigError("config: top level must be a JSON object")
        allowed = set(cfg) | set(_MANIFOLD_KEYS) | {"seed"}
        for key in user:
            if key not in allowed:
                raise ConfigError(f"config: unknown field {key!r} for {experiment}")
        cfg.update(user)
    if seed is not None:
        cfg["seed"] = seed
    if not isinstance(cfg["seed"], int):
        raise ConfigError("config: field 'seed' must be an integer")
    return cfg


def manifold_from_config(cfg: dict, default: str = "sphere") -> RadiusField:
    kind = cfg.get("manifold", default)
    try:
        if kind == "sphere":
            return Sphere(cfg.get("manifold_c", 1.0))
        if kind == "lp_ball":
            return LpBall(cfg.get("manifold_p", 2.0), cfg.get("manifold_t", 1.0))
        if kind == "simplex":
            return Simplex()
        if kind == "deformed":
            return DeformedSphere(cfg.get("amplitude", 0.2), cfg.get("frequency", 3.0))
    except ValueError as exc:
        raise ConfigError(f"config: field 'manifold': {exc}") from None
    raise ConfigError(f"config: field 'manifold': unknown kind {kind!r}")


def train_config(cfg: dict) -> vi.TrainConfig:
    try:
        return vi.TrainConfig(steps=cfg["steps"], batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"],
                              adam_betas=tuple(cfg["adam_betas"]), adam_eps=cfg["adam_eps"], seed=cfg["seed"],
                              path_gradient=bool(cfg["path_gradient"]))
    except ValueError as exc:
        raise ConfigError(f"config: training: {exc}") from None


def build_model(cfg: dict, dim: int, field: RadiusField) -> fl.FlowModel:
    return fl.build_flow(dim, field, cfg["n_layers"], cfg["blocks_per_layer"], cfg["n_bins"], cfg["hidden"],
                         seed=cfg["seed"])


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "numba", "artifact"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def write_manifest(out: Path, experiment: str, cfg: dict) -> Path:
    manifest = {"experiment": experiment, "config": cfg, "seed": cfg["seed"], "versions": _versions(),
                "started_unix": time.time()}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default))
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))
    return path


def write_table(path: Path, header, rows) -> Path:
    with path.open("w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in r) + "\n")
    return path


# --------------------------------------------------------------------------
# experiments


def run_jacdet_bench(cfg, out: Path) -> dict:
    field = manifold_from_config(cfg)
    res = time_jacdet(cfg["dims"], cfg["reps"], field, np.random.default_rng(cfg["seed"]))
    res.write_csv(out / "bench.csv")
    summary = res.summary()
    write_json(out / "bench_summary.json", summary)
    return summary


def run_jacdet_verify(cfg, out: Path) -> dict:
    field = manifold_from_config(cfg)
    rng = np.random.default_rng(cfg["seed"])
    per_d = {}
    for d in cfg["dims"]:
        th = sample_uniform_angles(d, cfg["n_points"], rng, field.positive_orthant)
        fast = fast_log_det(th, field).log_abs
        ref = oracle_log_det(th, field)
        per_d[str(d)] = float(np.max(relative_error(fast, ref)))
    worst = max(per_d.values())
    report = {"manifold": field.describe(), "max_rel_error": worst, "per_dim": per_d,
              "tolerance": cfg["tolerance"], "pass": worst < cfg["tolerance"]}
    write_json(out / "verify.json", report)
    return report


def _target_3d(cfg) -> targets.TargetDensity:
    kind = cfg["target"]
    if kind == "vmf":
        return targets.make_vmf(cfg["mu"], cfg["kappa"])
    if kind == "uniform":
        return targets.make_uniform(3)
    if kind == "mixture":
        return targets.make_spiral_mixture(cfg["n_components"], cfg.get("kappa_mixture", 50.0))
    if kind == "sinusoidal":
        return targets.make_sinusoidal()
    raise ConfigError(f"config: field 'target': unknown 3D target {kind!r}")


def emit_density_grid(model: fl.FlowModel, resolution: int, path: Path | None = None) -> np.ndarray:
    """Rows ``(theta1, theta2, log_q)`` over a midpoint angle grid (d = 3)."""
    if model.dim != 3:
        raise ValueError(f"density grid needs a d = 3 model, got d = {model.dim}")
    grid, _ = fl.angle_grid(resolution, model.positive_orthant)
    th = grid.reshape(-1, 2)
    table = np.column_stack([th, fl.log_prob_angles(model, th)])
    if path is not None:
        write_table(path, ["theta1", "theta2", "log_q"], table)
    return table


def _train(model, target, cfg, out: Path) -> vi.TrainReport:
    try:
        return vi.train(model, target, train_config(cfg), log_path=out / "train_log.csv")
    except vi.TrainingError as exc:
        raise RuntimeError(f"training failed: {exc}") from None


def run_train_3d(cfg, out: Path) -> dict:
    target = _target_3d(cfg)
    default_manifold = "deformed" if cfg["target"] == "sinusoidal" else "sphere"
    field = manifold_from_config(cfg, default_manifold)
    model = build_model(cfg, 3, field)
    report = _train(model, target, cfg, out)
    fl.save_checkpoint(model, out / "model.npz")
    rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"]).spawn(3)[2])
    metrics = {"final_loss": float(np.median(report.losses[-max(1, len(report.losses) // 10):])),
               "steps": len(report.losses), "train_seconds": report.total_seconds,
               "quadrature_mass": fl.quadrature_mass(model, cfg["grid_resolution"])}
    if target.log_normalizer is not None and isinstance(field, Sphere) and field.c == 1.0:
        metrics["mse_log_density"] = vi.mse_log_density(model, target.normalized, cfg["mse_samples"], rng)
        metrics["loss_at_optimum"] = -target.log_normalizer
    if cfg["target"] == "mixture":
        metrics["mode_recovery"] = vi.mode_recovery(model, target, target.params["means"], cfg["grid_resolution"])
    x = vi.draw(model, cfg["constraint_samples"], rng)
    metrics["max_constraint_residual"] = float(np.max(field.constraint_residual(x)))
    emit_density_grid(model, cfg["grid_resolution"], out / "density_grid.csv")
    write_json(out / "metrics.json", metrics)
    return metrics


def synthetic_regression(seed: int, d: int = 5, df: int = 7, noise_sd: float = 4.0):
    """``X ~ Wishart_d(df, I)``, ``beta* ~ N(0, I)``, ``y = X beta* + N(0, noise_sd^2)``."""
    rng = np.random.default_rng(seed)
    X = stats.wishart(df=df, scale=np.eye(d)).rvs(random_state=rng)
    beta = rng.standard_normal(d)
    y = X @ beta + noise_sd * rng.standard_normal(d)
    return X, y, beta


def run_objective_bayes(cfg, out: Path) -> dict:
    X, y, beta_true = synthetic_regression(cfg["seed"])
    try:
        field = LpBall(cfg["manifold_p"], cfg["norm"])
    except ValueError as exc:
        raise ConfigError(f"config: field 'norm'/'manifold_p': {exc}") from None
    target = targets.make_regression(X, y, cfg["sigma"])
    model = build_model(cfg, X.shape[1], field)
    report = _train(model, target, cfg, out)
    fl.save_checkpoint(model, out / "model.npz")
    rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"]).spawn(3)[2])
    samples = vi.draw(model, cfg["n_samples"], rng)
    lo, hi = vi.credibility_intervals(samples)
    write_table(out / "posterior_samples.csv", [f"beta_{i + 1}" for i in range(X.shape[1])], samples)
    metrics = {"beta_true": beta_true, "posterior_mean": samples.mean(0), "ci_low": lo, "ci_high": hi,
               "final_loss": float(report.losses[-1]), "train_seconds": report.total_seconds,
               "max_constraint_residual": float(np.max(field.constraint_residual(samples)))}
    write_json(out / "metrics.json", metrics)
    return metrics


def run_mixing_mcmc_compare(cfg, out: Path) -> dict:
    counts = np.asarray(cfg["counts"], dtype=float)
    d = counts.size
    target = targets.make_dirichlet_multinomial(counts, cfg["alpha"])
    post = mcmc.dirichlet_posterior_analytic(cfg["alpha"], counts)
    lo_true, hi_true = post.credibility_intervals(cfg["level"])
    seeds = np.random.SeedSequence(cfg["seed"]).spawn(3)
    model = build_model(cfg, d, Simplex())
    t0 = time.perf_counter()
    _train(model, target, cfg, out)
    samples = vi.draw(model, cfg["n_samples"], np.random.default_rng(seeds[2]))
    flow_seconds = time.perf_counter() - t0
    fl.save_checkpoint(model, out / "model.npz")
    lo_f, hi_f = vi.credibility_intervals(samples, cfg["level"])
    if cfg["mcmc_samples_per_chain"] is None:
        # matched wall-clock: MH runs as long as the flow took (capped by the sample buffer)
        mh_cfg = mcmc.MHConfig(chains=cfg["chains"], samples_per_chain=cfg["max_samples_per_chain"],
                               seed=cfg["seed"], time_budget_s=flow_seconds)
    else:
        mh_cfg = mcmc.MHConfig(chains=cfg["chains"], samples_per_chain=cfg["mcmc_samples_per_chain"], seed=cfg["seed"])
    mh = mcmc.mh_simplex(target, mh_cfg,
                         np.random.default_rng(seeds[1]))
    lo_m, hi_m = vi.credibility_intervals(mh.flat, cfg["level"])
    if cfg["write_mcmc_samples"]:
        mh.write_csv(out / "mcmc_samples.csv")
    rows = [[i + 1, lo_true[i], hi_true[i], lo_f[i], hi_f[i], lo_m[i], hi_m[i]] for i in range(d)]
    write_table(out / "credibility_intervals.csv",
                ["coord", "true_lo", "true_hi", "flow_lo", "flow_hi", "mcmc_lo", "mcmc_hi"], rows)
    flow_err = float(np.mean(np.abs(np.r_[lo_f - lo_true, hi_f - hi_true])))
    mh_err = float(np.mean(np.abs(np.r_[lo_m - lo_true, hi_m - hi_true])))
    metrics = {"flow_ci_mae": flow_err, "mcmc_ci_mae": mh_err, "flow_seconds": flow_seconds,
               "mcmc_seconds": mh.wallclock_s, "mcmc_steps": mh.steps_run, "mcmc_acceptance": mh.acceptance_rate,
               "max_constraint_residual": float(np.max(Simplex().constraint_residual(samples)))}
    write_json(out / "metrics.json", metrics)
    return metrics


def run_portfolio(cfg, out: Path) -> dict:
    if not cfg["csv"]:
        raise ConfigError("config: field 'csv' is required for portfolio")
    try:
        R, rho, names = targets.load_portfolio_csv(cfg["csv"])
    except (FileNotFoundError, ValueError) as exc:
        raise ConfigError(f"config: field 'csv': {exc}") from None
    prior = cfg["prior"]
    if prior not in ("uniform", "dirichlet"):
        raise ConfigError(f"config: field 'prior': must be 'uniform' or 'dirichlet', got {prior!r}")
    target = targets.make_portfolio(R, rho, cfg["sigma"], prior, cfg["alpha"] if prior == "dirichlet" else None)
    model = build_model(cfg, R.shape[1], Simplex())
    report = _train(model, target, cfg, out)
    fl.save_checkpoint(model, out / "model.npz")
    rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"]).spawn(3)[2])
    samples = vi.draw(model, cfg["n_samples"], rng)
    write_table(out / "posterior_samples.csv", names, samples)
    nonzero = np.sum(samples > cfg["nonzero_threshold"], axis=1)
    lo, hi = vi.credibility_intervals(samples)
    metrics = {"assets": names, "posterior_mean": samples.mean(0), "ci_low": lo, "ci_high": hi,
               "nonzero_histogram": np.bincount(nonzero, minlength=R.shape[1] + 1),
               "final_loss": float(report.losses[-1]), "train_seconds": report.total_seconds,
               "max_constraint_residual": float(np.max(Simplex().constraint_residual(samples)))}
    write_json(out / "metrics.json", metrics)
    return metrics


def centered_log_density_mse(model: fl.FlowModel, target: targets.TargetDensity, n: int, rng) -> float:
    """Log-density MSE against a target whose normalizer is unknown.

    With the best constant offset the MSE is ``Var_q(log q - log p~)``, which
    is zero exactly when ``q`` matches the normalized target.
    """
    s = fl.sample_and_logprob(model, n, rng)
    diff = s.log_q - np.asarray(target(s.x))
    return float(np.mean((diff - diff.mean()) ** 2))


def run_hutchinson_compare(cfg, out: Path) -> dict:
    d = cfg["dim"]
    field = LpBall(cfg["manifold_p"], 1.0)
    target = targets.TargetDensity("uniform_manifold", lambda x: np.zeros(np.shape(getattr(x, "value", x))[:-1]),
                                   d)
    seeds = np.random.SeedSequence(cfg["seed"]).spawn(3)
    results = {}
    runs = [("exact", None)] + [("hutchinson", n) for n in cfg["n_probes"]]
    for estimator, n in runs:
        name = estimator if n is None else f"hutchinson_n{n}"
        model = build_model(cfg, d, field)
        tc = train_config(cfg)
        tc.estimator, tc.n_probes = estimator, n
        try:
            rep = vi.train(model, target, tc, log_path=out / f"train_log_{name}.csv")
        except vi.TrainingError as exc:
            raise RuntimeError(f"training ({name}) failed: {exc}") from None
        rng = np.random.default_rng(seeds[2])
        mse = centered_log_density_mse(model, target, cfg["mse_samples"], rng)
        x = vi.draw(model, cfg["constraint_samples"], rng)
        results[name] = {"mse_log_density": mse, "final_loss": float(rep.losses[-1]),
                         "train_seconds": rep.total_seconds,
                         "max_constraint_residual": float(np.max(field.constraint_residual(x)))}
    var = hutchinson_variance(field, d, cfg["variance_probes"], cfg["variance_points"], cfg["variance_draws"],
                              np.random.default_rng(seeds[1]))
    metrics = {"runs": results, "estimator_variance": var}
    write_json(out / "metrics.json", metrics)
    return metrics


def hutchinson_variance(field: RadiusField, d: int, probes, n_points: int, n_draws: int, rng) -> dict:
    """Median over points of the total variance of the Hutchinson gradient, per probe count.

    The median is used because near the axes of a p < 1 ball a few points
    carry variances orders of magnitude above the rest.
    """
    th = sample_uniform_angles(d, n_points, rng, field.positive_orthant)
    out = {}
    for n in probes:
        draws = np.stack([hutchinson_grad_estimate(th, field, n, rng) for _ in range(n_draws)])
        out[str(n)] = float(np.median(np.sum(draws.var(axis=0, ddof=1), axis=-1)))
    return out


def run_density_grid(cfg, out: Path) -> dict:
    if not cfg["checkpoint"]:
        raise ConfigError("config: field 'checkpoint' is required for density-grid")
    path = Path(cfg["checkpoint"])
    if not path.is_file():
        raise ConfigError(f"config: field 'checkpoint': file not found: {path}")
    model = fl.load_checkpoint(path)
    if model.dim != 3:
        raise ConfigError(f"config: field 'checkpoint': density grid needs a d = 3 model, got d = {model.dim}")
    table = emit_density_grid(model, cfg["resolution"], out / "density_grid.csv")
    return {"rows": len(table)}


# fields that record elapsed time; everything else in an output directory is reproducible
TIMING_KEYS = frozenset({"started_unix", "train_seconds", "flow_seconds", "mcmc_seconds", "median_seconds",
                         "fits", "speedup_d256"})
TIMING_COLUMNS = frozenset({"wallclock_s", "seconds"})


def _drop_timing(obj):
    if isinstance(obj, dict):
        return {k: _drop_timing(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [_drop_timing(v) for v in obj]
    return obj


def stable_artifacts(out) -> dict[str, bytes]:
    """Contents of every artifact in ``out`` with wall-clock fields removed.

    Two runs with the same config and seed on one platform give equal
    dictionaries. The one exception is ``mixing-mcmc-compare`` under matched
    wall-clock, where the MH chain length is itself a timing; setting
    ``mcmc_samples_per_chain`` makes that experiment reproducible too.
    """
    out = Path(out)
    result = {}
    for path in sorted(out.iterdir()):
        if path.suffix == ".json":
            obj = _drop_timing(json.loads(path.read_text()))
            result[path.name] = json.dumps(obj, sort_keys=True).encode()
        elif path.suffix == ".csv":
            lines = path.read_text().splitlines()
            header = lines[0].split(",") if lines else []
            keep = [i for i, h in enumerate(header) if h not in TIMING_COLUMNS]
            rows = [",".join(r.split(",")[i] for i in keep) for r in lines]
            result[path.name] = "\n".join(rows).encode()
        else:
            result[path.name] = path.read_bytes()
    return result


RUNNERS = {
    "jacdet-bench": run_jacdet_bench,
    "jacdet-verify": run_jacdet_verify,
    "train-3d": run_train_3d,
    "objective-bayes": run_objective_bayes,
    "mixing-mcmc-compare": run_mixing_mcmc_compare,
    "portfolio": run_portfolio,
    "hutchinson-compare": run_hutchinson_compare,
    "density-grid": run_density_grid,
}


def run(experiment: str, config_path=None, out=None, seed=None) -> dict:
    """Run one experiment; returns its summary and leaves artifacts in ``out``."""
    cfg = load_config(experiment, config_path, seed)
    out = Path(out if out is not None else Path("runs") / experiment)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, experiment, cfg)
    return RUNNERS[experiment](cfg, out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="starflow", description="Injective flows on star-like manifolds.")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat JSON file overriding the experiment defaults")
        p.add_argument("--out", help="output directory (default runs/<experiment>)")
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        summary = run(args.experiment, args.config, args.out, args.seed)
    except (ConfigError, RuntimeError, ValueError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {args.experiment}: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    print(json.dumps(summary, sort_keys=True, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
