"""Unnormalized target log-densities on the ambient space R^d.

Every function accepts Cartesian points with the coordinate on the last
axis, taped or plain, so the same code serves as a VI target (gradients
through the tape) and as a plain evaluator.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import gammaln, ive

from . import ad
from .spherical import log_sphere_area, to_spherical

SIMPLEX_FLOOR = 1e-12


@dataclass
class TargetDensity:
    """An unnormalized log-density plus a descriptor of what it is."""

    kind: str
    fn: Callable
    dim: int
    params: dict = field(default_factory=dict)
    log_normalizer: float | None = None

    def __call__(self, x):
        return self.fn(x)

    def normalized(self, x):
        """Normalized log-density; only for targets with a known normalizer."""
        if self.log_normalizer is None:
            raise ValueError(f"target {self.kind!r} has no known normalizer")
        return ad.value(self.fn(x)) - self.log_normalizer

    def grad(self, x) -> np.ndarray:
        """Gradient of the log-density with respect to ``x``."""
        tape = ad.Tape()
        xv = tape.var(np.asarray(x, dtype=float))
        out = self.fn(xv)
        if not ad.is_var(out):
            return np.zeros_like(xv.value)
        return ad.backward(tape, ad.sum_(out))[xv.index]

    def shifted(self, c: float) -> "TargetDensity":
        """The same target with ``c`` added to its log-density."""
        base = self.fn
        lz = None if self.log_normalizer is None else self.log_normalizer + c
        return TargetDensity(self.kind, lambda x: base(x) + c, self.dim, dict(self.params, shift=c), lz)

    def describe(self) -> dict:
        out = {"kind": self.kind, "dim": self.dim}
        for k, v in self.params.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def _check_dim(x, d, name):
    if np.shape(ad.value(x))[-1] != d:
        raise ValueError(f"{name}: expected points of dimension {d}, got {np.shape(ad.value(x))[-1]}")


# --------------------------------------------------------------------------
# sphere targets


def vmf_log(x, mu, kappa: float):
    """``kappa <mu, x>``, the unnormalized von Mises-Fisher log-density."""
    mu = np.asarray(mu, dtype=float)
    if abs(np.linalg.norm(mu) - 1.0) > 1e-10:
        raise ValueError(f"vmf_log: mean direction must be a unit vector, got norm {np.linalg.norm(mu)}")
    if kappa < 0:
        raise ValueError(f"vmf_log: kappa must be >= 0, got {kappa}")
    _check_dim(x, mu.size, "vmf_log")
    return kappa * ad.matmul(x, mu)


def vmf_log_normalizer(kappa: float, d: int) -> float:
    """log of ``int_{S^{d-1}} exp(kappa <mu, x>) dx``."""
    if kappa == 0:
        return log_sphere_area(d)
    nu = 0.5 * d - 1
    # I_nu(k) = ive(nu, k) * exp(k)
    return float(0.5 * d * np.log(2 * np.pi) - nu * np.log(kappa) + np.log(ive(nu, kappa)) + kappa)


def spiral_means(n: int = 50, turns: float = 2.0, colat=(0.1 * np.pi, 0.9 * np.pi)) -> np.ndarray:
    """Unit vectors on a spherical spiral: colatitude sweeps ``colat``, longitude ``2 pi turns i / n``."""
    i = np.arange(n)
    t1 = np.linspace(colat[0], colat[1], n)
    t2 = 2 * np.pi * turns * i / n
    return np.stack([np.cos(t1), np.sin(t1) * np.cos(t2), np.sin(t1) * np.sin(t2)], axis=-1)


def mixture_vmf_log(x, mus, kappas, weights):
    """``log sum_i w_i exp(kappa_i <mu_i, x>)`` by log-sum-exp."""
    mus = np.atleast_2d(np.asarray(mus, dtype=float))
    if mus.shape[0] == 0:
        raise ValueError("mixture_vmf_log: empty mixture")
    kappas = np.broadcast_to(np.asarray(kappas, dtype=float), (mus.shape[0],))
    weights = np.broadcast_to(np.asarray(weights, dtype=float), (mus.shape[0],))
    if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-10:
        raise ValueError("mixture_vmf_log: weights must be positive and sum to 1")
    if np.any(np.abs(np.linalg.norm(mus, axis=-1) - 1.0) > 1e-10):
        raise ValueError("mixture_vmf_log: mean directions must be unit vectors")
    _check_dim(x, mus.shape[1], "mixture_vmf_log")
    terms = ad.matmul(x, (mus * kappas[:, None]).T) + np.log(weights)
    return ad.logsumexp(terms, axis=-1)


def sinusoidal_log(x):
    """``sin(4 t1) sin(4 t2)`` in the polar/azimuthal angles of ``x`` (d = 3)."""
    if np.shape(ad.value(x))[-1] != 3:
        raise ValueError(f"sinusoidal_log is defined for d = 3, got d = {np.shape(ad.value(x))[-1]}")
    theta, _ = to_spherical(x)
    return ad.sin(4.0 * theta[..., 0]) * ad.sin(4.0 * theta[..., 1])


# --------------------------------------------------------------------------
# regression and simplex targets


def gaussian_regression_log(beta, X, y, sigma: float):
    """``-||y - X beta||^2 / (2 sigma^2)``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if X.ndim != 2 or y.shape != (X.shape[0],) or np.shape(ad.value(beta))[-1] != X.shape[1]:
        raise ValueError(
            f"shape mismatch: X {X.shape}, y {y.shape}, beta {np.shape(ad.value(beta))}"
        )
    resid = y - ad.matmul(beta, X.T)
    return ad.sum_(resid * resid, axis=-1) * (-0.5 / sigma**2)


def _floored_log(pi):
    return ad.log(ad.maximum(pi, SIMPLEX_FLOOR))


def dirichlet_multinomial_log(pi, counts, alpha):
    """``sum_i (counts_i + alpha_i - 1) log pi_i``, the conjugate posterior kernel."""
    counts = np.asarray(counts, dtype=float)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), counts.shape)
    if np.any(alpha <= 0):
        raise ValueError("alpha must be positive")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    _check_dim(pi, counts.size, "dirichlet_multinomial_log")
    w = counts + alpha - 1.0
    if not np.any(w):
        return np.zeros(np.shape(ad.value(pi))[:-1])
    return ad.sum_(_floored_log(pi) * w, axis=-1)


def portfolio_posterior_log(pi, R, rho, sigma: float, prior="uniform", alpha=None):
    """Gaussian index-replication likelihood plus a uniform or Dirichlet prior kernel."""
    out = gaussian_regression_log(pi, R, rho, sigma)
    if prior == "uniform":
        return out
    if prior == "dirichlet":
        if alpha is None:
            raise ValueError("dirichlet prior needs alpha")
        alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (np.shape(R)[1],))
        if np.any(alpha <= 0):
            raise ValueError("alpha must be positive")
        if not np.any(alpha - 1.0):
            return out
        return out + ad.sum_(_floored_log(pi) * (alpha - 1.0), axis=-1)
    raise ValueError(f"unknown prior {prior!r}")


def load_portfolio_csv(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Read asset returns ``R`` (T x n), index returns ``rho`` (T,) and asset names.

    The CSV has a header row; the column named ``index`` holds the index
    returns and every other column is an asset.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"portfolio CSV not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if "index" not in header:
        raise ValueError(f"{path}: no column named 'index' in header {header}")
    if len(header) < 2:
        raise ValueError(f"{path}: need at least one asset column")
    try:
        data = np.array([[float(v) for v in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric entry ({exc})") from None
    if data.ndim != 2 or data.shape[1] != len(header):
        raise ValueError(f"{path}: ragged rows")
    j = header.index("index")
    assets = [h for i, h in enumerate(header) if i != j]
    return np.delete(data, j, axis=1), data[:, j], assets


# --------------------------------------------------------------------------
# constructors


def make_uniform(d: int = 3) -> TargetDensity:
    return TargetDensity("uniform", lambda x: np.zeros(np.shape(ad.value(x))[:-1]), d, {}, log_sphere_area(d))


def make_vmf(mu=(0.0, 0.0, 1.0), kappa: float = 5.0) -> TargetDensity:
    mu = np.asarray(mu, dtype=float)
    mu = mu / np.linalg.norm(mu)
    d = mu.size
    return TargetDensity("vmf", lambda x: vmf_log(x, mu, kappa), d, {"mu": mu, "kappa": kappa},
                         vmf_log_normalizer(kappa, d))


def make_spiral_mixture(n: int = 50, kappa: float = 50.0) -> TargetDensity:
    mus = spiral_means(n)
    w = np.full(n, 1.0 / n)
    # every component shares kappa, so the normalizer factors out of the sum
    return TargetDensity("mixture_vmf", lambda x: mixture_vmf_log(x, mus, kappa, w), 3,
                         {"n": n, "kappa": kappa, "means": mus}, vmf_log_normalizer(kappa, 3))


def make_sinusoidal() -> TargetDensity:
    return TargetDensity("sinusoidal", sinusoidal_log, 3, {})


def make_regression(X, y, sigma: float = 1.0) -> TargetDensity:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    return TargetDensity("regression", lambda b: gaussian_regression_log(b, X, y, sigma), X.shape[1],
                         {"X": X, "y": y, "sigma": sigma})


def make_dirichlet_multinomial(counts, alpha=1.0) -> TargetDensity:
    counts = np.asarray(counts, dtype=float)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), counts.shape).copy()
    a = alpha + counts
    # log B(a): the kernel's integral over the simplex with respect to d pi_1 .. d pi_{d-1}
    log_b = float(np.sum(gammaln(a)) - gammaln(a.sum()))
    # the flow's density is with respect to surface measure on the simplex,
    # which is sqrt(d) times the projected Lebesgue measure
    return TargetDensity("dirichlet_multinomial", lambda p: dirichlet_multinomial_log(p, counts, alpha),
                         counts.size, {"counts": counts, "alpha": alpha},
                         log_b + 0.5 * np.log(counts.size))


def make_portfolio(R, rho, sigma: float = 1.0, prior="uniform", alpha=None) -> TargetDensity:
    R = np.asarray(R, dtype=float)
    rho = np.asarray(rho, dtype=float)
    params = {"sigma": sigma, "prior": prior, "T": R.shape[0], "n": R.shape[1]}
    if alpha is not None:
        params["alpha"] = np.broadcast_to(np.asarray(alpha, dtype=float), (R.shape[1],)).copy()
    return TargetDensity("portfolio", lambda p: portfolio_posterior_log(p, R, rho, sigma, prior, alpha),
                         R.shape[1], params)


def mixture_log_extended(x, mus, kappa: float, weights) -> np.ndarray:
    """Reference mixture log-density by direct summation in extended precision."""
    x = np.asarray(x, dtype=np.longdouble)
    e = np.exp(np.asarray(kappa, dtype=np.longdouble) * (x @ np.asarray(mus, dtype=np.longdouble).T))
    return np.log(e @ np.asarray(weights, dtype=np.longdouble))


__all__ = [
    "TargetDensity", "vmf_log", "vmf_log_normalizer", "spiral_means", "mixture_vmf_log", "sinusoidal_log",
    "gaussian_regression_log", "dirichlet_multinomial_log", "portfolio_posterior_log", "load_portfolio_csv",
    "make_uniform", "make_vmf", "make_spiral_mixture", "make_sinusoidal", "make_regression",
    "make_dirichlet_multinomial", "make_portfolio", "mixture_log_extended",
]
