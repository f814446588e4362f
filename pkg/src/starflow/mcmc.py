"""Metropolis-Hastings on the probability simplex, and the conjugate posterior.

The proposal is a Dirichlet centred on the current state,
``pi' ~ Dirichlet(c * pi + eps)``, so every proposal lies on the simplex by
construction. Because the proposal is not symmetric, the acceptance ratio
carries the correction ``q(pi | pi') / q(pi' | pi)``. Chains advance in
lock-step as one vectorized array.

Draws are made in log space: for shape ``a < 1`` a Gamma(a) variate can
underflow to zero, while ``log Gamma(a+1) + log(U) / a`` stays finite.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.special import gammaln, logsumexp

from . import ad
from .targets import TargetDensity

PROPOSAL_FLOOR = 1e-3


@dataclass
class MHConfig:
    chains: int = 100
    samples_per_chain: int = 10000
    concentration_scale: float | None = None  # default 100 * d
    burn_in: int | None = None  # default 10% of the steps actually run
    seed: int = 0
    time_budget_s: float | None = None

    def __post_init__(self):
        if self.chains < 1 or self.samples_per_chain < 1:
            raise ValueError("chains and samples_per_chain must be >= 1")
        if self.concentration_scale is not None and not self.concentration_scale > 0:
            raise ValueError("concentration_scale must be > 0")
        if self.burn_in is not None and not 0 <= self.burn_in < self.samples_per_chain:
            raise ValueError("burn_in must be in [0, samples_per_chain)")


@dataclass
class ChainOutput:
    samples: np.ndarray  # (chains, kept, d)
    acceptance_rate: float
    steps_run: int
    burn_in: int
    wallclock_s: float

    @property
    def flat(self) -> np.ndarray:
        return self.samples.reshape(-1, self.samples.shape[-1])

    def write_csv(self, path) -> Path:
        """Samples as ``chain,step,pi_1,...,pi_d``; steps count from the end of burn-in."""
        path = Path(path)
        d = self.samples.shape[-1]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", "step"] + [f"pi_{i + 1}" for i in range(d)])
            for c, chain in enumerate(self.samples):
                for s, row in enumerate(chain):
                    w.writerow([c, s] + [repr(float(v)) for v in row])
        return path


def log_dirichlet_sample(alpha: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """``log`` of a Dirichlet(alpha) draw per row of ``alpha``."""
    alpha = np.asarray(alpha, dtype=float)
    small = alpha < 1.0
    # Gamma(a) = Gamma(a + 1) * U^(1/a)
    log_g = np.log(rng.standard_gamma(np.where(small, alpha + 1.0, alpha)))
    u = rng.random(alpha.shape)
    log_g = np.where(small, log_g + np.log(u) / alpha, log_g)
    return log_g - logsumexp(log_g, axis=-1, keepdims=True)


def log_dirichlet_pdf(log_x: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Dirichlet log-density given the log of the point."""
    return gammaln(alpha.sum(-1)) - gammaln(alpha).sum(-1) + np.sum((alpha - 1.0) * log_x, axis=-1)


def mh_simplex(target: TargetDensity, config: MHConfig, rng: np.random.Generator | None = None,
               init=None) -> ChainOutput:
    """Run ``config.chains`` Metropolis-Hastings chains on the simplex."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    d = target.dim
    c = 100.0 * d if config.concentration_scale is None else config.concentration_scale
    n = config.chains
    if init is None:
        log_pi = log_dirichlet_sample(np.ones((n, d)), rng)
    else:
        init = np.broadcast_to(np.asarray(init, dtype=float), (n, d))
        if np.any(init <= 0) or np.any(np.abs(init.sum(-1) - 1) > 1e-12):
            raise ValueError("init must lie in the open simplex")
        log_pi = np.log(init)
    pi = np.exp(log_pi)
    lp = np.asarray(ad.value(target(pi)), dtype=float)
    if not np.all(np.isfinite(lp)):
        raise ValueError("target is not finite at the initial state")
    out = np.empty((n, config.samples_per_chain, d))
    accepted = 0
    t0 = time.perf_counter()
    steps = 0
    for step in range(config.samples_per_chain):
        a_fwd = c * pi + PROPOSAL_FLOOR
        log_prop = log_dirichlet_sample(a_fwd, rng)
        prop = np.exp(log_prop)
        lp_prop = np.asarray(ad.value(target(prop)), dtype=float)
        a_rev = c * prop + PROPOSAL_FLOOR
        log_ratio = (lp_prop - lp + log_dirichlet_pdf(log_pi, a_rev) - log_dirichlet_pdf(log_prop, a_fwd))
        accept = np.log(rng.random(n)) < np.where(np.isfinite(log_ratio), log_ratio, -np.inf)
        accepted += int(accept.sum())
        log_pi = np.where(accept[:, None], log_prop, log_pi)
        pi = np.where(accept[:, None], prop, pi)
        lp = np.where(accept, lp_prop, lp)
        out[:, step] = pi
        steps = step + 1
        if config.time_budget_s is not None and time.perf_counter() - t0 >= config.time_budget_s:
            break
    elapsed = time.perf_counter() - t0
    burn = config.burn_in if config.burn_in is not None else steps // 10
    burn = min(burn, steps - 1)
    return ChainOutput(out[:, burn:steps], accepted / (n * steps), steps, burn, elapsed)


@dataclass
class DirichletPosterior:
    """The conjugate posterior Dirichlet(alpha + counts)."""

    concentration: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.concentration / self.concentration.sum()

    def marginal(self, i: int):
        a = self.concentration
        return stats.beta(a[i], a.sum() - a[i])

    def marginal_quantile(self, q) -> np.ndarray:
        """Per-coordinate quantiles of the Beta marginals, shape ``(len(q), d)``."""
        a = self.concentration
        q = np.atleast_1d(np.asarray(q, dtype=float))
        return stats.beta.ppf(q[:, None], a[None, :], a.sum() - a[None, :])

    def credibility_intervals(self, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.marginal_quantile([(1 - level) / 2, (1 + level) / 2])
        return lo, hi

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.dirichlet(self.concentration, size=n)


def dirichlet_posterior_analytic(alpha, counts) -> DirichletPosterior:
    counts = np.asarray(counts, dtype=float)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), counts.shape)
    if np.any(alpha <= 0):
        raise ValueError("alpha must be positive")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    return DirichletPosterior(alpha + counts)
