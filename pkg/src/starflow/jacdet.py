"""Volume term of the injective map theta -> x = to_cartesian(theta, r(theta)).

Two routes to ``log vol = 1/2 log det(J^T J)`` with ``J`` the ``d x (d-1)``
Jacobian:

* :func:`fast_log_det` -- ``log|det J_sc| + log ||J_sc^{-T} y||`` with
  ``y = [-grad r, 1]``; the transposed spherical Jacobian is upper
  triangular apart from its last row, so the solve costs O(d^2).
* :func:`oracle_log_det` -- assemble ``J`` densely, form the Gram matrix
  and factor it, O(d^3).

Plain arrays go through compiled kernels; taped inputs go through the
same algorithm written with :mod:`starflow.ad` primitives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from . import ad
from .manifolds import RadiusField
from .spherical import assemble_transpose, log_abs_det_sc, to_cartesian, unit_frame


class SingularSystemError(ArithmeticError):
    pass


@dataclass
class JacDetResult:
    """log |det J_T| split into its three factors."""

    log_abs: object
    sign: int
    log_det_T_theta: object
    log_det_sc: object
    log_norm_solve: object

    @property
    def parts(self) -> dict:
        return {
            "log_det_T_theta": self.log_det_T_theta,
            "log_det_sc": self.log_det_sc,
            "log_norm_solve": self.log_norm_solve,
        }


def null_vector(grad_r):
    """``y = [-grad r, 1]``, the left null vector of the padded radius Jacobian."""
    ones = np.ones(np.shape(ad.value(grad_r))[:-1] + (1,))
    return ad.concatenate([ad.neg(grad_r), ones], axis=-1)


# --------------------------------------------------------------------------
# almost-triangular solve


@numba.njit(cache=True)
def _solve_kernel(jt, y, w):
    """Solve ``jt[b] @ w[b] = y[b]``; returns (flop count, index of first failed batch or -1)."""
    nb, d, _ = jt.shape
    flops = 0
    last = np.empty(d)
    for b in range(nb):
        for k in range(d):
            last[k] = jt[b, d - 1, k]
        rhs = y[b, d - 1]
        # eliminate the dense last row against the triangular rows above it
        for i in range(d - 1):
            piv = jt[b, i, i]
            if piv == 0.0:
                return flops, b
            f = last[i] / piv
            for k in range(i, d):
                last[k] -= f * jt[b, i, k]
            rhs -= f * y[b, i]
            flops += 2 * (d - i) + 3
        if last[d - 1] == 0.0:
            return flops, b
        w[b, d - 1] = rhs / last[d - 1]
        flops += 1
        for i in range(d - 2, -1, -1):
            acc = y[b, i]
            for k in range(i + 1, d):
                acc -= jt[b, i, k] * w[b, k]
            w[b, i] = acc / jt[b, i, i]
            flops += 2 * (d - 1 - i) + 1
    return flops, -1


def _solve_taped(jt, y):
    d = np.shape(ad.value(jt))[-1]
    last = jt[..., d - 1, :]
    rhs = y[..., d - 1]
    for i in range(d - 1):
        row = jt[..., i, :]
        piv = row[..., i]
        if np.any(ad.value(piv) == 0):
            raise SingularSystemError(f"zero pivot in column {i}")
        f = last[..., i] / piv
        last = last - ad.expand_dims(f, -1) * row
        rhs = rhs - f * y[..., i]
    if np.any(ad.value(last[..., d - 1]) == 0):
        raise SingularSystemError("zero pivot in the eliminated last row")
    tail = ad.expand_dims(rhs / last[..., d - 1], -1)
    for i in range(d - 2, -1, -1):
        acc = y[..., i] - ad.sum_(jt[..., i, i + 1:] * tail, axis=-1)
        tail = ad.concatenate([ad.expand_dims(acc / jt[..., i, i], -1), tail], axis=-1)
    return tail


def solve_almost_triangular(jt, y, return_flops: bool = False):
    """Solve ``jt w = y`` for ``jt`` upper triangular except for a dense last row.

    One sweep of Gaussian elimination clears the last row's sub-diagonal
    part, then back-substitution finishes; both are O(d^2) and no pivoting
    is done. Leading axes are batch axes.
    """
    if ad.is_var(jt) or ad.is_var(y):
        if return_flops:
            raise ValueError("flop counting is only available for plain arrays")
        return _solve_taped(jt, y)
    jt = np.ascontiguousarray(jt, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    d = jt.shape[-1]
    batch = jt.shape[:-2]
    jt3 = jt.reshape(-1, d, d)
    y2 = np.broadcast_to(y, batch + (d,)).reshape(-1, d).copy()
    w = np.empty_like(y2)
    flops, failed = _solve_kernel(jt3, y2, w)
    if failed >= 0:
        raise SingularSystemError(f"singular system (zero pivot) in batch element {failed}")
    w = w.reshape(batch + (d,))
    return (w, int(flops)) if return_flops else w


# --------------------------------------------------------------------------
# fast path


def fast_log_det(theta, field: RadiusField, log_det_T_theta=0.0) -> JacDetResult:
    """log volume of ``theta -> x`` plus ``log_det_T_theta`` from preceding bijections."""
    frame = unit_frame(theta)
    r, grad = field.radius_and_grad(theta, frame)
    jt = assemble_transpose(frame[0], frame[1], r)
    y = null_vector(grad)
    w = solve_almost_triangular(jt, y)
    sc = log_abs_det_sc(theta, r)
    log_norm = 0.5 * ad.log(ad.sum_(w * w, axis=-1))
    total = log_det_T_theta + sc.log_abs + log_norm
    return JacDetResult(total, sc.sign, log_det_T_theta, sc.log_abs, log_norm)


# --------------------------------------------------------------------------
# brute-force oracle


@numba.njit(cache=True)
def _assemble_kernel(jt, grad, out):
    """``out[b] = J_sc[b] @ J_r[b]`` with ``J_r = [I; grad^T]``, as a dense product."""
    nb, d, _ = jt.shape
    m = d - 1
    pad = np.zeros((d, m))
    for b in range(nb):
        for j in range(m):
            for l in range(m):
                pad[l, j] = 1.0 if l == j else 0.0
            pad[m, j] = grad[b, j]
        for k in range(d):
            for j in range(m):
                acc = 0.0
                for l in range(d):
                    acc += jt[b, l, k] * pad[l, j]
                out[b, k, j] = acc


@numba.njit(cache=True)
def _gram_logdet_kernel(jac, out):
    """``out[b] = 1/2 log det(J^T J)`` by Cholesky; returns first failed batch or -1."""
    nb, d, m = jac.shape
    gram = np.empty((m, m))
    for b in range(nb):
        for i in range(m):
            for j in range(i + 1):
                acc = 0.0
                for k in range(d):
                    acc += jac[b, k, i] * jac[b, k, j]
                gram[i, j] = acc
        half_logdet = 0.0
        for j in range(m):
            acc = gram[j, j]
            for k in range(j):
                acc -= gram[j, k] * gram[j, k]
            if not acc > 0.0:
                return b
            ljj = np.sqrt(acc)
            gram[j, j] = ljj
            half_logdet += np.log(ljj)
            for i in range(j + 1, m):
                acc = gram[i, j]
                for k in range(j):
                    acc -= gram[i, k] * gram[j, k]
                gram[i, j] = acc / ljj
        out[b] = half_logdet
    return -1


def injective_jacobian(theta, field: RadiusField, method: str = "analytic", h: float = 1e-6):
    """Dense ``d x (d-1)`` Jacobian of ``theta -> to_cartesian(theta, r(theta))``."""
    if method == "analytic":
        theta = np.asarray(theta, dtype=float)
        u, block = unit_frame(theta)
        r, grad = field.radius_and_grad(theta, (u, block))
        jt = np.ascontiguousarray(assemble_transpose(u, block, r)).reshape(-1, u.shape[-1], u.shape[-1])
        g2 = np.ascontiguousarray(np.broadcast_to(grad, np.shape(r) + grad.shape[-1:])).reshape(-1, grad.shape[-1])
        out = np.empty((jt.shape[0], jt.shape[1], jt.shape[1] - 1))
        _assemble_kernel(jt, g2, out)
        return out.reshape(np.shape(theta)[:-1] + out.shape[1:])
    if method == "fd":
        theta = np.asarray(theta, dtype=float)
        m = theta.shape[-1]
        cols = []
        for i in range(m):
            e = np.zeros(m)
            e[i] = h
            hi, lo = theta + e, theta - e
            cols.append((to_cartesian(hi, field.radius(hi)) - to_cartesian(lo, field.radius(lo))) / (2 * h))
        return np.stack(cols, axis=-1)
    raise ValueError(f"unknown jacobian method {method!r}")


def _gram_taped(theta, field: RadiusField):
    frame = unit_frame(theta)
    r, grad = field.radius_and_grad(theta, frame)
    jt = assemble_transpose(frame[0], frame[1], r)
    m = np.shape(ad.value(theta))[-1]
    eye = np.broadcast_to(np.eye(m), np.shape(ad.value(theta))[:-1] + (m, m))
    pad = ad.concatenate([eye, ad.expand_dims(grad, -2)], axis=-2)
    jac = ad.matmul(ad.swapaxes(jt, -1, -2), pad)
    return ad.matmul(ad.swapaxes(jac, -1, -2), jac)


def gram_matrix(theta, field: RadiusField):
    """``J^T J`` for the injective map (taped if ``theta`` is taped)."""
    return _gram_taped(theta, field)


def oracle_log_det(theta, field: RadiusField, method: str = "analytic"):
    """``1/2 log det(J^T J)`` by dense assembly and Cholesky (O(d^3)).

    ``method='fd'`` builds the Jacobian by central differences instead, as
    an independent cross-check of the analytic assembly.
    """
    if ad.is_var(theta):
        return 0.5 * ad.logdet_spd(_gram_taped(theta, field))
    jac = injective_jacobian(theta, field, method)
    batch = jac.shape[:-2]
    j3 = np.ascontiguousarray(jac).reshape((-1,) + jac.shape[-2:])
    out = np.empty(j3.shape[0])
    failed = _gram_logdet_kernel(j3, out)
    if failed >= 0:
        raise np.linalg.LinAlgError(f"J^T J is not numerically positive definite (batch element {failed})")
    out = out.reshape(batch)
    return out if batch else float(out)


def relative_error(value, reference):
    """``|value - reference| / max(|reference|, 1)``.

    The unit floor keeps log volumes that are exactly zero (the unit circle,
    or the unit sphere on its equator) from dividing round-off by round-off.
    """
    ref = np.asarray(reference, dtype=float)
    return np.abs(np.asarray(value, dtype=float) - ref) / np.maximum(np.abs(ref), 1.0)


# --------------------------------------------------------------------------
# Hutchinson baseline


def _probes(rng, batch, m, n, orthogonal):
    v = rng.standard_normal(batch + (m, n))
    if orthogonal:
        q, _ = np.linalg.qr(v)
        v = q * np.sqrt(m)
    return v


def hutchinson_surrogate(theta, field: RadiusField, n_samples: int, rng: np.random.Generator,
                         orthogonal: bool = False):
    """Taped stand-in for ``1/2 log det(J^T J)`` whose gradient is the trace estimator.

    Its value equals the exact log volume (computed off-tape); its gradient
    is ``1/2 mean_v (G^{-1} v)^T dG v`` over ``n_samples`` Gaussian probes.
    """
    tv = np.asarray(ad.value(theta))
    m = tv.shape[-1]
    if not 1 <= n_samples <= m:
        raise ValueError(f"n_samples must be in [1, {m}] (the manifold dimension), got {n_samples}")
    gram = _gram_taped(theta, field)
    batch = tv.shape[:-1]
    v = _probes(rng, batch, m, n_samples, orthogonal)
    u = np.linalg.solve(ad.value(gram), v)
    est = 0.5 * ad.sum_(ad.sum_(u * ad.matmul(gram, v), axis=-1), axis=-1) / n_samples
    exact = fast_log_det(tv, field).log_abs
    return est - ad.value(est) + exact


def hutchinson_grad_estimate(theta, field: RadiusField, n_samples: int, rng: np.random.Generator,
                             orthogonal: bool = False) -> np.ndarray:
    """Stochastic estimate of d/dtheta of ``1/2 log det(J^T J)``.

    With ``orthogonal=True`` the probes are orthogonalized and scaled by
    sqrt(d-1); for ``n_samples = d-1`` the trace is then exact.
    """
    tape = ad.Tape()
    th = tape.var(np.asarray(theta, dtype=float))
    s = hutchinson_surrogate(th, field, n_samples, rng, orthogonal)
    return ad.backward(tape, ad.sum_(s))[th.index]


def exact_log_det_grad(theta, field: RadiusField) -> np.ndarray:
    """d/dtheta of ``1/2 log det(J^T J)`` by reverse mode through the oracle."""
    tape = ad.Tape()
    th = tape.var(np.asarray(theta, dtype=float))
    return ad.backward(tape, ad.sum_(oracle_log_det(th, field)))[th.index]
