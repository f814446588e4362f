"""Reverse-KL variational inference for injective flows, plus evaluation metrics."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from . import ad
from .flow import FlowModel, angle_grid, log_prob_angles, sample_and_logprob
from .spherical import to_cartesian
from .targets import TargetDensity


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or target value."""


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 256
    learning_rate: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    estimator: str = "exact"
    n_probes: int | None = None
    time_budget_s: float | None = None
    path_gradient: bool = True

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.estimator not in ("exact", "hutchinson"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.estimator == "hutchinson" and not self.n_probes:
            raise ValueError("hutchinson estimator needs n_probes")
        self.adam_betas = tuple(self.adam_betas)


@dataclass
class TrainReport:
    losses: np.ndarray
    wallclock_s: np.ndarray
    metrics: dict = field(default_factory=dict)

    @property
    def total_seconds(self) -> float:
        return float(self.wallclock_s[-1]) if len(self.wallclock_s) else 0.0

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "wallclock_s"])
            for i, (l, t) in enumerate(zip(self.losses, self.wallclock_s)):
                w.writerow([i, repr(float(l)), repr(float(t))])
        return path


# --------------------------------------------------------------------------
# loss and optimizer


def reverse_kl_loss(model: FlowModel, target: TargetDensity, batch_size: int, rng: np.random.Generator,
                    estimator: str = "exact", n_probes: int | None = None, probe_rng=None,
                    path_gradient: bool = False):
    """Monte Carlo reverse KL ``mean(log q(x) - log p(x))`` with ``x ~ q``, fully taped.

    With ``path_gradient`` the gradient is the path-derivative estimator
    (the score term, zero in expectation, is left out); it vanishes
    exactly once ``q`` matches the target.

    Returns ``(loss, tape, params)`` where ``params`` maps parameter names to
    the taped leaves, ready for :func:`ad.backward`.
    """
    tape = ad.Tape()
    params = {k: tape.var(v) for k, v in model.params.items()}
    s = sample_and_logprob(model, batch_size, rng, params, estimator, n_probes, probe_rng, path_gradient)
    log_p = target(s.x)
    lp = np.asarray(ad.value(log_p))
    if not np.all(np.isfinite(lp)):
        i = int(np.flatnonzero(~np.isfinite(lp))[0])
        raise TrainingError(f"target is not finite at x = {np.asarray(ad.value(s.x))[i].tolist()}")
    loss = ad.mean(s.log_q - log_p)
    return loss, tape, params


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig) -> dict:
    """One bias-corrected Adam update; returns the new parameters and advances ``state``."""
    b1, b2 = config.adam_betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k!r} {p.shape}")
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        out[k] = p - config.learning_rate * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + config.adam_eps)
    return out


def loss_and_grads(model: FlowModel, target: TargetDensity, batch_size: int, rng, estimator="exact",
                   n_probes=None, probe_rng=None, path_gradient=False):
    loss, tape, params = reverse_kl_loss(model, target, batch_size, rng, estimator, n_probes, probe_rng,
                                         path_gradient)
    g = ad.backward(tape, loss)
    return float(ad.value(loss)), {k: g[v.index] for k, v in params.items()}


def train(model: FlowModel, target: TargetDensity, config: TrainConfig, log_path=None,
          callback=None) -> TrainReport:
    """Minimize the reverse KL in place; deterministic given ``config.seed``.

    Stops early only if ``config.time_budget_s`` is set and exhausted.
    """
    if target.dim != model.dim:
        raise ValueError(f"target dimension {target.dim} does not match model dimension {model.dim}")
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    rng = np.random.default_rng(seeds[0])
    probe_rng = np.random.default_rng(seeds[1])
    state = AdamState.zeros_like(model.params)
    losses, clock = [], []
    t0 = time.perf_counter()
    for step in range(config.steps):
        try:
            loss, grads = loss_and_grads(model, target, config.batch_size, rng, config.estimator,
                                         config.n_probes, probe_rng, config.path_gradient)
        except (TrainingError, ad.DomainError, ArithmeticError) as exc:
            raise TrainingError(f"step {step}: {exc}") from exc
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(f"step {step}: non-finite loss or gradient (loss = {loss})")
        model.params = adam_step(model.params, grads, state, config)
        losses.append(loss)
        clock.append(time.perf_counter() - t0)
        if callback is not None:
            callback(step, loss)
        if config.time_budget_s is not None and clock[-1] >= config.time_budget_s:
            break
    report = TrainReport(np.array(losses), np.array(clock))
    if log_path is not None:
        report.write_csv(log_path)
    return report


# --------------------------------------------------------------------------
# metrics


def mse_log_density(model: FlowModel, log_p_true, n_samples: int, rng: np.random.Generator,
                    batch: int = 4096) -> float:
    """Mean of ``(log q(x) - log p_true(x))^2`` over ``x ~ q``; ``log_p_true`` is normalized."""
    total, done = 0.0, 0
    while done < n_samples:
        n = min(batch, n_samples - done)
        s = sample_and_logprob(model, n, rng)
        diff = s.log_q - np.asarray(log_p_true(s.x))
        total += float(np.sum(diff * diff))
        done += n
    return total / n_samples


def draw(model: FlowModel, n: int, rng: np.random.Generator, batch: int = 8192) -> np.ndarray:
    """``n`` plain samples from the model."""
    out = [sample_and_logprob(model, min(batch, n - i), rng).x for i in range(0, n, batch)]
    return np.concatenate(out, axis=0)


def _mean_pairwise(a, b, chunk, same):
    total = 0.0
    for i in range(0, len(a), chunk):
        total += cdist(a[i: i + chunk], b).sum()
    if same:
        n = len(a)
        return total / (n * (n - 1))
    return total / (len(a) * len(b))


def energy_distance(a, b, chunk: int = 2048) -> float:
    """``2 E|a-b| - E|a-a'| - E|b-b'|`` with U-statistics for the within-sample terms."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("energy_distance needs nonempty samples")
    ab = _mean_pairwise(a, b, chunk, False)
    aa = _mean_pairwise(a, a, chunk, True) if len(a) > 1 else 0.0
    bb = _mean_pairwise(b, b, chunk, True) if len(b) > 1 else 0.0
    return float(2 * ab - aa - bb)


def credibility_intervals(samples, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate empirical quantiles at ``(1 - level)/2`` and ``(1 + level)/2``."""
    if not 0 < level < 1:
        raise ValueError(f"level must be in (0, 1), got {level}")
    samples = np.asarray(samples, dtype=float)
    lo, hi = np.quantile(samples, [(1 - level) / 2, (1 + level) / 2], axis=0)
    return lo, hi


def mode_recovery(model: FlowModel, target: TargetDensity, means, resolution: int = 100,
                  radius: float = 0.15) -> float:
    """Fraction of mixture means whose neighbourhood the model covers (d = 3 sphere).

    On a ``resolution``-squared angle grid, mean ``i`` counts as recovered
    when the highest model density within ``radius`` (great-circle) of it is
    at least half the highest normalized target density there.
    """
    if model.dim != 3:
        raise ValueError("mode_recovery is for d = 3 models")
    grid, _ = angle_grid(resolution, model.positive_orthant)
    th = grid.reshape(-1, 2)
    x = to_cartesian(th, model.field.radius(th))
    u = x / np.linalg.norm(x, axis=-1, keepdims=True)
    lq = log_prob_angles(model, th)
    lt = target.normalized(x)
    ok = 0
    means = np.asarray(means, dtype=float)
    for mu in means:
        near = np.arccos(np.clip(u @ mu, -1.0, 1.0)) < radius
        if np.any(near) and lq[near].max() >= lt[near].max() - np.log(2.0):
            ok += 1
    return ok / len(means)
