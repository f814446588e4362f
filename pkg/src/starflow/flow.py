"""Injective flows on star-like manifolds.

The model pushes uniform-sphere angles ``z`` through a stack of spline
couplings ``T_theta`` to angles ``theta``, lifts them onto the manifold with
the radius field and embeds them with spherical coordinates:

    z -> theta = T_theta(z) -> x = to_cartesian(theta, r(theta))

so that ``log q(x) = log p(z) - log|det J_Ttheta| - log vol(theta)``.

Bounded angles use monotone rational-quadratic splines on their interval;
the azimuthal angle uses a circular spline (periodic knot derivatives plus
a rotation). Spline parameters of the transformed angles come from a small
MLP on the cos/sin features of the remaining angles, so the angle density
is not forced to factorize. All of this runs on plain arrays or on taped
values, which is how training gets its gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ad
from .jacdet import fast_log_det, hutchinson_surrogate, oracle_log_det
from .manifolds import RadiusField, field_from_description
from .spherical import (
    EPS,
    angle_log_density_uniform_sphere,
    angle_upper_bounds,
    clamp_angles,
    sample_uniform_angles,
    to_cartesian,
    to_spherical,
)

MIN_BIN = 1e-3
MIN_DERIV = 1e-3
# softplus(0 + offset) + MIN_DERIV = 1, so zero raw parameters give the identity
_DERIV_OFFSET = float(np.log(np.expm1(1.0 - MIN_DERIV)))
TWO_PI = 2 * np.pi


# --------------------------------------------------------------------------
# rational-quadratic splines


def constrain(raw, n_bins: int, circular: bool):
    """Map unconstrained ``(..., 3K+1)`` parameters to spline quantities.

    Returns bin-width fractions and bin-height fractions (each ``(..., K)``,
    positive, summing to 1), knot derivatives ``(..., K+1)`` and, for the
    circular mode, a rotation (``None`` otherwise). Circular splines have
    K free derivatives; the last knot reuses the first.
    """
    K = n_bins
    a, b = raw[..., :K], raw[..., K: 2 * K]
    widths = MIN_BIN + (1 - K * MIN_BIN) * ad.softmax(a, axis=-1)
    heights = MIN_BIN + (1 - K * MIN_BIN) * ad.softmax(b, axis=-1)
    if circular:
        d = MIN_DERIV + ad.softplus(raw[..., 2 * K: 3 * K] + _DERIV_OFFSET)
        derivs = ad.concatenate([d, d[..., :1]], axis=-1)
        return widths, heights, derivs, raw[..., 3 * K]
    derivs = MIN_DERIV + ad.softplus(raw[..., 2 * K: 3 * K + 1] + _DERIV_OFFSET)
    return widths, heights, derivs, None


def _knots(fracs, lo, length):
    """Left knot positions and bin sizes from fractions."""
    sizes = fracs * length
    left = lo + ad.cumsum(sizes, axis=-1) - sizes
    return left, sizes


def _bin_index(left_v, x_v):
    K = left_v.shape[-1]
    idx = np.sum(x_v[..., None] >= left_v[..., 1:], axis=-1)
    return np.clip(idx, 0, K - 1)[..., None]


def rq_forward(x, widths, heights, derivs, lo: float, hi: float):
    """Monotone rational-quadratic map of ``[lo, hi]`` onto itself.

    Returns ``(y, log dy/dx)``; all parameter arrays share the leading shape
    of ``x``.
    """
    length = hi - lo
    xl, w = _knots(widths, lo, length)
    yl, h = _knots(heights, lo, length)
    idx = _bin_index(ad.value(xl), np.asarray(ad.value(x)))

    def pick(a):
        return ad.take_along_axis(a, idx, axis=-1)[..., 0]

    xk, wk, yk, hk = pick(xl), pick(w), pick(yl), pick(h)
    dk = pick(derivs[..., :-1])
    dk1 = pick(derivs[..., 1:])
    out = ad.custom("rq_segment", _segment, _segment_vjp, x, xk, wk, yk, hk, dk, dk1)
    return out[0], out[1]


def _segment(x, xk, wk, yk, hk, dk, dk1):
    """Value and log-slope of one rational-quadratic segment, stacked on axis 0."""
    s = hk / wk
    xi = (x - xk) / wk
    q = xi * (1.0 - xi)
    den = s + (dk1 + dk - 2.0 * s) * q
    y = yk + hk * (s * xi * xi + dk * q) / den
    nd = dk1 * xi * xi + 2.0 * s * q + dk * (1.0 - xi) ** 2
    logd = 2.0 * np.log(s) + np.log(nd) - 2.0 * np.log(den)
    return np.stack(np.broadcast_arrays(y, logd))


def _segment_vjp(g, out, x, xk, wk, yk, hk, dk, dk1):
    gy, gl = g[0], g[1]
    s = hk / wk
    xi = (x - xk) / wk
    q = xi * (1.0 - xi)
    c2 = dk1 + dk - 2.0 * s
    den = s + c2 * q
    num = s * xi * xi + dk * q
    nd = dk1 * xi * xi + 2.0 * s * q + dk * (1.0 - xi) ** 2
    # adjoints, walking the forward computation backwards
    g_num = gy * hk / den
    g_den = -gy * hk * num / (den * den) - 2.0 * gl / den
    g_nd = gl / nd
    g_s = 2.0 * gl / s + g_nd * 2.0 * q + g_num * xi * xi + g_den
    g_q = g_nd * 2.0 * s + g_num * dk + g_den * c2
    g_c2 = g_den * q
    g_s = g_s - 2.0 * g_c2
    g_xi = g_nd * (2.0 * dk1 * xi - 2.0 * dk * (1.0 - xi)) + g_num * 2.0 * s * xi + g_q * (1.0 - 2.0 * xi)
    g_dk = g_nd * (1.0 - xi) ** 2 + g_num * q + g_c2
    g_dk1 = g_nd * xi * xi + g_c2
    g_hk = gy * num / den + g_s / wk
    g_x = g_xi / wk
    g_wk = -g_xi * xi / wk - g_s * s / wk
    return g_x, -g_x, g_wk, gy, g_hk, g_dk, g_dk1


def rq_inverse(y, widths, heights, derivs, lo: float, hi: float):
    """Inverse of :func:`rq_forward`; returns ``(x, log dx/dy)``.

    Works on plain or taped ``y``; the gradient of ``x`` follows from the
    implicit function theorem on the forward segment.
    """
    length = hi - lo
    xl, w = _knots(widths, lo, length)
    yl, h = _knots(heights, lo, length)
    idx = _bin_index(np.asarray(ad.value(yl)), np.asarray(ad.value(y)))

    def pick(a):
        return ad.take_along_axis(a, idx, axis=-1)[..., 0]

    xk, wk, yk, hk = pick(xl), pick(w), pick(yl), pick(h)
    dk, dk1 = pick(derivs[..., :-1]), pick(derivs[..., 1:])
    x = ad.custom("rq_inverse", _inverse_segment, _inverse_segment_vjp, y, xk, wk, yk, hk, dk, dk1)
    logd = ad.custom("rq_segment", _segment, _segment_vjp, x, xk, wk, yk, hk, dk, dk1)[1]
    return x, -logd


def _inverse_segment(y, xk, wk, yk, hk, dk, dk1):
    s = hk / wk
    dy = y - yk
    c2 = dk1 + dk - 2.0 * s
    a = hk * (s - dk) + dy * c2
    b = hk * dk - dy * c2
    c = -s * dy
    disc = np.maximum(b * b - 4.0 * a * c, 0.0)
    xi = 2.0 * c / (-b - np.sqrt(disc))
    return xk + xi * wk


def _inverse_segment_vjp(g, x, y, xk, wk, yk, hk, dk, dk1):
    # F(x, params) = y  =>  dx/dy = 1/F_x,  dx/dparams = -F_params/F_x
    slope = np.exp(_segment(x, xk, wk, yk, hk, dk, dk1)[1])
    gx = g / slope
    grads = _segment_vjp(np.stack(np.broadcast_arrays(gx, np.zeros_like(gx))), None, x, xk, wk, yk, hk, dk, dk1)
    return (gx,) + tuple(-gr for gr in grads[1:])


def _wrap(v):
    """``v mod 2 pi`` with unit derivative (the floor is piecewise constant)."""
    return v - TWO_PI * np.floor(ad.value(v) / TWO_PI)


def _check_interval(u, lo, hi, what):
    uv = np.asarray(ad.value(u))
    bad = (uv < lo - EPS) | (uv > hi + EPS) | ~np.isfinite(uv)
    if np.any(bad):
        raise ValueError(f"{what}: input {uv[bad].ravel()[0]} outside [{lo}, {hi}]")


def spline_forward(u, raw, lo: float, hi: float, circular: bool = False, n_bins: int = 8):
    """One spline transform of ``u`` with unconstrained parameters ``raw`` (3K+1).

    Returns ``(v, log dv/du)``. ``u`` must lie in ``[lo, hi]`` up to EPS.
    """
    _check_interval(u, lo, hi, "spline_forward")
    u = ad.clip(u, lo, hi)
    widths, heights, derivs, shift = constrain(raw, n_bins, circular)
    v, logd = rq_forward(u, widths, heights, derivs, lo, hi)
    if circular:
        v = _wrap(v + shift)
    return v, logd


def spline_inverse(v, raw, lo: float, hi: float, circular: bool = False, n_bins: int = 8):
    """Inverse of :func:`spline_forward`; returns ``(u, log du/dv)``.

    Plain or taped inputs alike.
    """
    _check_interval(v, lo, hi, "spline_inverse")
    widths, heights, derivs, shift = constrain(raw, n_bins, circular)
    if circular:
        v = _wrap(v - shift)
    return rq_inverse(ad.clip(v, lo, hi), widths, heights, derivs, lo, hi)


# --------------------------------------------------------------------------
# model


@dataclass
class FlowModel:
    """Injective flow: uniform-sphere base, spline couplings, radius field, embedding."""

    dim: int
    field: RadiusField
    n_layers: int = 5
    blocks_per_layer: int = 3
    n_bins: int = 8
    hidden: int = 32
    params: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.dim - 1

    @property
    def positive_orthant(self) -> bool:
        return self.field.positive_orthant

    @property
    def n_blocks(self) -> int:
        return self.n_layers * self.blocks_per_layer

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def boundary_modes(self) -> list[str]:
        if self.positive_orthant:
            return ["monotone_bounded"] * self.m
        return ["monotone_bounded"] * (self.m - 1) + ["circular"]

    def intervals(self) -> np.ndarray:
        return angle_upper_bounds(self.m, self.positive_orthant)

    def masks(self, block: int) -> tuple[np.ndarray, np.ndarray]:
        """Indices transformed by ``block`` and the indices it conditions on."""
        idx = np.arange(self.m)
        if self.m == 1:
            return idx, idx[:0]
        sel = idx % 2 == block % 2
        return idx[sel], idx[~sel]

    def describe(self) -> dict:
        return {
            "dim": self.dim,
            "field": self.field.describe(),
            "n_layers": self.n_layers,
            "blocks_per_layer": self.blocks_per_layer,
            "n_bins": self.n_bins,
            "hidden": self.hidden,
            "boundary_modes": self.boundary_modes(),
        }


def n_spline_params(n_bins: int) -> int:
    return 3 * n_bins + 1


def build_flow(dim: int, field: RadiusField, n_layers: int = 5, blocks_per_layer: int = 3, n_bins: int = 8,
               hidden: int = 32, seed: int = 0) -> FlowModel:
    """A flow initialized to the identity map on the angles.

    The conditioner's output layer starts at zero, so every spline starts
    with equal bins and unit derivatives; the hidden layer is random.
    """
    if dim < 2:
        raise ValueError(f"flow needs dim >= 2, got {dim}")
    if n_layers < 0 or blocks_per_layer < 1 or n_bins < 1 or hidden < 1:
        raise ValueError("invalid architecture sizes")
    model = FlowModel(dim, field, n_layers, blocks_per_layer, n_bins, hidden)
    rng = np.random.default_rng(seed)
    P = n_spline_params(n_bins)
    for j in range(model.n_blocks):
        tr, cond = model.masks(j)
        out = tr.size * P
        if cond.size:
            fan_in = 2 * cond.size
            model.params[f"{j}.w1"] = rng.standard_normal((fan_in, hidden)) / np.sqrt(fan_in)
            model.params[f"{j}.b1"] = np.zeros(hidden)
            model.params[f"{j}.w2"] = np.zeros((hidden, out))
        model.params[f"{j}.b2"] = np.zeros(out)
    return model


def _conditioner(model: FlowModel, params, j: int, theta, batch_shape):
    tr, cond = model.masks(j)
    P = n_spline_params(model.n_bins)
    b2 = params[f"{j}.b2"]
    if cond.size == 0:
        out = ad.reshape(b2, (tr.size, P)) if ad.is_var(b2) else np.reshape(b2, (tr.size, P))
        return out + np.zeros(batch_shape + (tr.size, P))
    c = ad.getitem(theta, (Ellipsis, cond)) if ad.is_var(theta) else theta[..., cond]
    feats = ad.concatenate([ad.cos(c), ad.sin(c)], axis=-1)
    hid = ad.tanh(ad.matmul(feats, params[f"{j}.w1"]) + params[f"{j}.b1"])
    out = ad.matmul(hid, params[f"{j}.w2"]) + b2
    return ad.reshape(out, batch_shape + (tr.size, P))


def _columns(x, idx):
    if ad.is_var(x):
        return ad.getitem(x, (Ellipsis, idx))
    return np.asarray(x)[..., idx]


def _block(model: FlowModel, params, j: int, theta, inverse: bool = False):
    """Apply coupling block ``j``; returns new angles and the summed log-derivative."""
    tr, cond = model.masks(j)
    batch_shape = np.shape(ad.value(theta))[:-1]
    raw = _conditioner(model, params, j, theta, batch_shape)
    hi = model.intervals()
    circ = np.array([mode == "circular" for mode in model.boundary_modes()])
    pieces, logd = [], 0.0
    order = []
    for circular in (False, True):
        sel = np.flatnonzero(circ[tr] == circular)
        if sel.size == 0:
            continue
        dims = tr[sel]
        # all dims of one group share an interval
        top = float(hi[dims[0]])
        u = _columns(theta, dims)
        r = ad.getitem(raw, (Ellipsis, sel, slice(None))) if ad.is_var(raw) else raw[..., sel, :]
        if inverse:
            v, ld = spline_inverse(u, r, 0.0, top, circular, model.n_bins)
        else:
            v, ld = spline_forward(u, r, 0.0, top, circular, model.n_bins)
        pieces.append(v)
        logd = logd + ad.sum_(ld, axis=-1)
        order.extend(dims.tolist())
    if cond.size:
        pieces.append(_columns(theta, cond))
        order.extend(cond.tolist())
    stacked = ad.concatenate(pieces, axis=-1) if len(pieces) > 1 else pieces[0]
    perm = np.argsort(np.asarray(order))
    return _columns(stacked, perm), logd


def transform_angles(model: FlowModel, z, params=None):
    """``theta = T_theta(z)`` and ``log|det J_Ttheta|`` per point."""
    params = model.params if params is None else params
    theta, total = z, np.zeros(np.shape(ad.value(z))[:-1])
    for j in range(model.n_blocks):
        theta, ld = _block(model, params, j, theta)
        total = total + ld
    return clamp_angles(theta, model.positive_orthant), total


def inverse_angles(model: FlowModel, theta, params=None):
    """``z = T_theta^{-1}(theta)`` and ``log|det J_Ttheta|`` evaluated at ``z``.

    Parameters are always constants here; a taped ``theta`` gives taped outputs.
    """
    params = {k: np.asarray(ad.value(v)) for k, v in (model.params if params is None else params).items()}
    z = theta if ad.is_var(theta) else np.asarray(theta, dtype=float)
    total = np.zeros(np.shape(ad.value(z))[:-1])
    for j in reversed(range(model.n_blocks)):
        z, ld = _block(model, params, j, z, inverse=True)
        total = total - ld
    return z, total


@dataclass
class FlowSample:
    x: object
    log_q: object
    theta: object
    z: np.ndarray
    log_det_T_theta: object = None


def sample_and_logprob(model: FlowModel, n: int, rng: np.random.Generator, params=None,
                       estimator: str = "exact", n_probes: int | None = None,
                       probe_rng: np.random.Generator | None = None,
                       path_gradient: bool = False) -> FlowSample:
    """Draw ``n`` points on the manifold with their exact log-density.

    With taped ``params`` every output is taped. ``estimator='hutchinson'``
    replaces the volume term by its trace-estimator surrogate (same value,
    stochastic gradient) for the baseline comparison.

    ``path_gradient`` re-evaluates the angle density through the inverse
    map with frozen parameters, so ``log_q`` depends on the parameters only
    through the sample location. Its value is unchanged (up to rounding);
    its gradient drops the zero-mean score term of the reverse KL.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    z = sample_uniform_angles(model.dim, n, rng, model.positive_orthant)
    log_pz = angle_log_density_uniform_sphere(z, model.positive_orthant)
    theta, ld = transform_angles(model, z, params)
    if path_gradient and ad.is_var(theta):
        z_back, ld = inverse_angles(model, theta)
        log_pz = angle_log_density_uniform_sphere(clamp_angles(z_back, model.positive_orthant),
                                                  model.positive_orthant)
    r = model.field.radius(theta)
    x = to_cartesian(theta, r)
    if estimator == "exact":
        vol = fast_log_det(theta, model.field).log_abs
    elif estimator == "hutchinson":
        if n_probes is None:
            raise ValueError("hutchinson estimator needs n_probes")
        vol = hutchinson_surrogate(theta, model.field, n_probes, probe_rng if probe_rng is not None else rng)
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    log_q = log_pz - ld - vol
    return FlowSample(x, log_q, theta, z, ld)


def logprob_at(model: FlowModel, x, tol: float = 1e-6) -> np.ndarray:
    """Exact log-density of the flow at points ``x`` on the manifold."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.dim:
        raise ValueError(f"expected points of dimension {model.dim}, got {x.shape[-1]}")
    theta, r = to_spherical(x)
    hi = model.intervals()
    if model.positive_orthant and np.any(theta > hi + EPS):
        raise ValueError("point outside the positive orthant, so not on the simplex")
    theta = np.clip(theta, EPS, hi - EPS)
    off = np.abs(r - model.field.radius(theta))
    if np.any(off > tol * np.maximum(1.0, np.abs(r))):
        raise ValueError(f"point is off the manifold by {np.max(off):.3e} (tolerance {tol})")
    return log_prob_angles(model, theta)


def log_prob_angles(model: FlowModel, theta) -> np.ndarray:
    """Log-density on the manifold at the image of the angles ``theta``."""
    theta = np.asarray(theta, dtype=float)
    z, ld = inverse_angles(model, theta)
    z = clamp_angles(z, model.positive_orthant)
    log_pz = angle_log_density_uniform_sphere(z, model.positive_orthant)
    vol = fast_log_det(theta, model.field).log_abs
    return log_pz - ld - vol


def angle_grid(resolution: int, positive_orthant: bool = False) -> tuple[np.ndarray, float]:
    """Midpoint grid over the two angles of d = 3 and the cell area."""
    hi = angle_upper_bounds(2, positive_orthant)
    t1 = (np.arange(resolution) + 0.5) * hi[0] / resolution
    t2 = (np.arange(resolution) + 0.5) * hi[1] / resolution
    T1, T2 = np.meshgrid(t1, t2, indexing="ij")
    return np.stack([T1, T2], axis=-1), float(hi[0] * hi[1] / resolution**2)


def quadrature_mass(model: FlowModel, resolution: int = 100) -> float:
    """Midpoint-rule integral of ``q`` over the manifold (d = 3)."""
    if model.dim != 3:
        raise ValueError(f"quadrature_mass is for d = 3, got d = {model.dim}")
    grid, cell = angle_grid(resolution, model.positive_orthant)
    th = grid.reshape(-1, 2)
    # the volume element comes from the dense oracle, independent of the fast path inside log q
    vol = oracle_log_det(th, model.field)
    return float(np.sum(np.exp(log_prob_angles(model, th) + vol)) * cell)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: FlowModel, path) -> Path:
    """Write the model as ``.npz``: flat parameter arrays plus a JSON header."""
    path = Path(path)
    arrays = {f"param:{k}": np.asarray(v) for k, v in model.params.items()}
    arrays["meta"] = np.array(json.dumps(model.describe(), sort_keys=True))
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> FlowModel:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        params = {k[len("param:"):]: data[k].copy() for k in data.files if k.startswith("param:")}
    model = FlowModel(meta["dim"], field_from_description(meta["field"]), meta["n_layers"],
                      meta["blocks_per_layer"], meta["n_bins"], meta["hidden"], params)
    if model.boundary_modes() != meta["boundary_modes"]:
        raise ValueError("checkpoint boundary modes do not match its manifold")
    return model
