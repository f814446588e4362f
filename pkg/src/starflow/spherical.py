"""Generalized d-spherical coordinates.

Angles live on the last axis: ``theta[..., k]`` for ``k = 0 .. d-2``. The
first ``d-2`` angles range over ``[0, pi]`` and the last over ``[0, 2 pi]``;
in the positive-orthant variant every angle is restricted to ``[0, pi/2]``.
Cartesian coordinates are

    x_k     = r sin(t_0) ... sin(t_{k-1}) cos(t_k),   k < d-1
    x_{d-1} = r sin(t_0) ... sin(t_{d-3}) sin(t_{d-2})

All functions broadcast over leading batch axes and accept taped values.
"""

from __future__ import annotations

from typing import NamedTuple

import numba
import numpy as np
from scipy.special import gammaln

from . import ad

EPS = 1e-6


class SingularAngleError(ValueError):
    """An angle sits exactly on a pole where the volume element vanishes."""


class SphericalLogDet(NamedTuple):
    log_abs: np.ndarray
    sign: int
    singular: np.ndarray


def angle_upper_bounds(m: int, positive_orthant: bool = False) -> np.ndarray:
    """Upper ends of the angle intervals for ``m = d - 1`` angles."""
    if positive_orthant:
        return np.full(m, np.pi / 2)
    hi = np.full(m, np.pi)
    hi[-1] = 2 * np.pi
    return hi


def clamp_angles(theta, positive_orthant: bool = False, eps: float = EPS):
    """Clamp every angle to ``[eps, upper - eps]``."""
    hi = angle_upper_bounds(np.shape(ad.value(theta))[-1], positive_orthant)
    return ad.clip(theta, eps, hi - eps)


def _prefix_sin_products(s):
    """``P[k] = prod_{j<k} s_j`` for ``k = 0 .. m-1`` (empty product is 1)."""
    m = np.shape(ad.value(s))[-1]
    ones = np.ones(np.shape(ad.value(s))[:-1] + (1,))
    if m == 1:
        return ones
    head = s[..., : m - 1]
    if ad.is_var(head):
        prods = ad.exp(ad.cumsum(ad.log(head), axis=-1))
    else:
        prods = np.cumprod(head, axis=-1)
    return ad.concatenate([ones, prods], axis=-1)


def _masks(m: int):
    d = m + 1
    upper = np.zeros((m, d))
    for i in range(m - 1):
        upper[i, i + 1:] = 1.0
    diag = np.zeros((m, d))
    diag[np.arange(m), np.arange(m)] = 1.0
    corner = np.zeros((m, d))
    corner[m - 1, d - 1] = 1.0
    return upper, diag, corner


def _direction(theta):
    m = np.shape(ad.value(theta))[-1]
    s, c = ad.sin(theta), ad.cos(theta)
    prev = _prefix_sin_products(s)  # prod of sines before each angle
    u = ad.concatenate([prev * c, prev[..., m - 1:] * s[..., m - 1:]], axis=-1)
    return s, c, prev, u


@numba.njit(cache=True)
def _frame_kernel(theta, u, block):
    nb, m = theta.shape
    d = m + 1
    s = np.empty(m)
    c = np.empty(m)
    prev = np.empty(m)
    for b in range(nb):
        acc = 1.0
        for k in range(m):
            s[k] = np.sin(theta[b, k])
            c[k] = np.cos(theta[b, k])
            prev[k] = acc
            acc *= s[k]
            u[b, k] = prev[k] * c[k]
        u[b, m] = prev[m - 1] * s[m - 1]
        for i in range(m):
            for k in range(i):
                block[b, i, k] = 0.0
            block[b, i, i] = -prev[i] * s[i]
        for i in range(m - 1):
            cot = c[i] / s[i]
            for k in range(i + 1, d):
                block[b, i, k] = u[b, k] * cot
        block[b, m - 1, m] = prev[m - 1] * c[m - 1]


def unit_frame(theta):
    """Unit direction ``u(theta)`` and ``du/dtheta`` as an ``(m, d)`` block.

    Row ``i`` of the block holds ``du_k / dtheta_i``; entries with ``k < i``
    are structurally zero.
    """
    if not ad.is_var(theta):
        theta = np.asarray(ad.value(theta), dtype=float)
        batch, m = theta.shape[:-1], theta.shape[-1]
        flat = np.ascontiguousarray(theta.reshape(-1, m))
        u = np.empty((flat.shape[0], m + 1))
        block = np.empty((flat.shape[0], m, m + 1))
        _frame_kernel(flat, u, block)
        return u.reshape(batch + (m + 1,)), block.reshape(batch + (m, m + 1))
    m = np.shape(ad.value(theta))[-1]
    s, c, prev, u = _direction(theta)
    upper, diag, corner = _masks(m)
    zero = np.zeros(np.shape(ad.value(theta))[:-1] + (1,))
    # the last angle's row is filled explicitly, not via cot (sin may vanish at pi)
    cot = ad.concatenate([c[..., : m - 1] / s[..., : m - 1], zero], axis=-1)
    block = ad.expand_dims(cot, -1) * ad.expand_dims(u, -2) * upper
    block = block - ad.expand_dims(prev * s, -1) * diag
    last = prev[..., m - 1] * c[..., m - 1]
    block = block + ad.expand_dims(ad.expand_dims(last, -1), -1) * corner
    return u, block


def to_cartesian(theta, r):
    """Map angles and radius to Cartesian coordinates."""
    u = _direction(theta)[3]
    return ad.expand_dims(r, -1) * u if np.ndim(ad.value(r)) else r * u


def to_spherical(x):
    """Inverse of :func:`to_cartesian`; returns ``(theta, r)``.

    On the singular set (a vanishing tail of coordinates) the remaining
    angles are 0.
    """
    xv = np.asarray(ad.value(x), dtype=float)
    d = xv.shape[-1]
    if d < 2:
        raise ValueError("to_spherical needs d >= 2")
    if np.any(np.all(xv == 0, axis=-1)):
        raise ValueError("to_spherical: radius undefined at x = 0")
    sq = x * x
    # tail[k] = sum_{j>=k} x_j^2
    tail = ad.cumsum(sq[..., ::-1], axis=-1)[..., ::-1]
    if ad.is_var(x):
        r = ad.sqrt(tail[..., 0])
        tail_norm = ad.sqrt(tail[..., 1: d - 1]) if d > 2 else None
    else:
        r = np.sqrt(tail[..., 0])
        tail_norm = np.sqrt(tail[..., 1: d - 1]) if d > 2 else None
    parts = []
    if d > 2:
        parts.append(ad.atan2(tail_norm, x[..., : d - 2]))
    last = ad.atan2(x[..., d - 1], x[..., d - 2])
    wrap = np.where(ad.value(last) < 0, 2 * np.pi, 0.0)
    parts.append(ad.expand_dims(last + wrap, -1))
    theta = ad.concatenate(parts, axis=-1) if len(parts) > 1 else parts[0]
    return theta, r


def log_abs_det_sc(theta, r) -> SphericalLogDet:
    """log |det J| of the spherical-to-Cartesian map, with its sign.

    ``singular`` flags points where some ``sin(theta_k)`` is exactly zero;
    there ``log_abs`` is ``-inf``.
    """
    m = np.shape(ad.value(theta))[-1]
    d = m + 1
    sv = np.sin(np.asarray(ad.value(theta))[..., : m - 1])
    singular = np.any(sv == 0, axis=-1) | (np.asarray(ad.value(r)) == 0)
    sign = -1 if (d - 1) % 2 else 1
    if m == 1:
        return SphericalLogDet(ad.log(r) if ad.is_var(r) else np.log(r), sign, singular)
    weights = np.arange(m - 1, 0, -1, dtype=float)  # d-k-2 for k = 0 .. d-3
    if ad.is_var(theta) or ad.is_var(r):
        if np.any(singular):
            raise SingularAngleError("log_abs_det_sc: angle on a pole")
        log_s = ad.log(ad.sin(theta[..., : m - 1]))
        total = (d - 1) * ad.log(r) + ad.sum_(log_s * weights, axis=-1)
        return SphericalLogDet(total, sign, singular)
    with np.errstate(divide="ignore"):
        total = (d - 1) * np.log(r) + np.sum(np.log(np.abs(sv)) * weights, axis=-1)
    return SphericalLogDet(total, sign, singular)


def jacobian_sc_transpose(theta, r):
    """Transposed Jacobian of the spherical-to-Cartesian map, shape ``(..., d, d)``.

    Rows ``0 .. d-2`` hold ``dx/dtheta_i`` (upper-triangular), the last row
    holds ``dx/dr``.
    """
    u, block = unit_frame(theta)
    return assemble_transpose(u, block, r)


def assemble_transpose(u, block, r):
    """Stack ``r * du/dtheta`` over ``u`` into the ``(d, d)`` transposed Jacobian."""
    rr = ad.expand_dims(ad.expand_dims(r, -1), -1) if np.ndim(ad.value(r)) else r
    return ad.concatenate([block * rr, ad.expand_dims(u, -2)], axis=-2)


def log_sphere_area(d: int) -> float:
    """log of the surface area of the unit sphere in R^d."""
    return float(np.log(2.0) + 0.5 * d * np.log(np.pi) - gammaln(0.5 * d))


def angle_log_density_uniform_sphere(theta, positive_orthant: bool = False, with_flag: bool = False):
    """Log-density of the angles of a uniform point on the sphere.

    With ``positive_orthant`` the law is that of a uniform point on the
    positive orthant of the sphere. Points on a pole raise
    :class:`SingularAngleError` unless ``with_flag`` is set, in which case
    ``(log_density, singular_mask)`` is returned.
    """
    m = np.shape(ad.value(theta))[-1]
    d = m + 1
    log_z = log_sphere_area(d) - (d * np.log(2.0) if positive_orthant else 0.0)
    if m == 1:
        out = np.full(np.shape(ad.value(theta))[:-1], -log_z)
        return (out, np.zeros(out.shape, dtype=bool)) if with_flag else out
    weights = np.arange(m - 1, 0, -1, dtype=float)
    sv = np.sin(np.asarray(ad.value(theta))[..., : m - 1])
    singular = np.any(sv == 0, axis=-1)
    if np.any(singular) and not with_flag:
        raise SingularAngleError("angle_log_density_uniform_sphere: angle on a pole")
    if ad.is_var(theta):
        out = ad.sum_(ad.log(ad.sin(theta[..., : m - 1])) * weights, axis=-1) - log_z
    else:
        with np.errstate(divide="ignore"):
            out = np.sum(np.log(np.abs(sv)) * weights, axis=-1) - log_z
    return (out, singular) if with_flag else out


def sample_uniform_angles(d: int, n: int, rng: np.random.Generator, positive_orthant: bool = False) -> np.ndarray:
    """Angles of ``n`` uniform points on the unit sphere in R^d, shape ``(n, d-1)``."""
    if d < 2 or n < 1:
        raise ValueError("need d >= 2 and n >= 1")
    g = rng.standard_normal((n, d))
    if positive_orthant:
        g = np.abs(g)
    theta, _ = to_spherical(g / np.linalg.norm(g, axis=-1, keepdims=True))
    return clamp_angles(theta, positive_orthant)
