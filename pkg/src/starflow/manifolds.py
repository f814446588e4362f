"""Star-like manifolds given by a radius over the spherical angles.

Each field maps angles ``theta`` (last axis, length ``d-1``) to ``r(theta)``
and its gradient. The gradients are closed-form expressions built from
taping-aware primitives, so differentiating them again (as training does
through the volume term) needs only first-order reverse mode.
"""

from __future__ import annotations

import numpy as np

from . import ad
from .spherical import to_spherical, unit_frame


class RadiusField:
    """Base class; subclasses implement :meth:`radius_and_grad`."""

    kind = "abstract"
    positive_orthant = False

    def radius(self, theta):
        return self.radius_and_grad(theta)[0]

    def grad(self, theta):
        return self.radius_and_grad(theta)[1]

    def radius_and_grad(self, theta, frame=None):
        """``(r, dr/dtheta)``; ``frame`` is an optional precomputed :func:`unit_frame`."""
        raise NotImplementedError

    def constraint_residual(self, x) -> np.ndarray:
        """Absolute violation of the manifold's defining equation at ``x``."""
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind}

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.describe().items() if k != "kind")
        return f"{type(self).__name__}({args})"


class Sphere(RadiusField):
    kind = "sphere"

    def __init__(self, c: float = 1.0):
        if not c > 0:
            raise ValueError(f"sphere radius must be > 0, got {c}")
        self.c = float(c)

    def radius_and_grad(self, theta, frame=None):
        shape = np.shape(ad.value(theta))
        return np.full(shape[:-1], self.c), np.zeros(shape)

    def constraint_residual(self, x):
        return np.abs(np.linalg.norm(x, axis=-1) - self.c)

    def describe(self):
        return {"kind": self.kind, "c": self.c}


def lp_norm(x, p: float) -> np.ndarray:
    """``(sum |x_i|^p)^(1/p)`` evaluated with the largest entry factored out."""
    a = np.abs(np.asarray(x, dtype=float))
    big = np.max(a, axis=-1, keepdims=True)
    big = np.where(big == 0, 1.0, big)
    return big[..., 0] * np.sum((a / big) ** p, axis=-1) ** (1.0 / p)


class LpBall(RadiusField):
    """The level set ``||x||_p = t`` (a pseudo-norm for ``p < 1``)."""

    kind = "lp_ball"

    def __init__(self, p: float, t: float = 1.0):
        if not p > 0:
            raise ValueError(f"lp_ball needs p > 0, got {p}")
        if not t > 0:
            raise ValueError(f"lp_ball needs t > 0, got {t}")
        self.p = float(p)
        self.t = float(t)

    def radius_and_grad(self, theta, frame=None):
        u, block = unit_frame(theta) if frame is None else frame
        p = self.p
        au = ad.abs_(u)
        # any positive scale cancels in r; the max keeps (|u|/big)^p in range
        big = np.max(ad.value(au), axis=-1, keepdims=True)
        ratio = au / big
        s = ad.sum_(ad.pow_const(ratio, p), axis=-1)
        denom = big[..., 0] * ad.pow_const(s, 1.0 / p)
        r = self.t / denom
        # dr/dtheta_i = -(r / (big * s)) * sum_k (|u_k|/big)^(p-1) sign(u_k) du_k/dtheta_i
        g = ad.pow_const(ratio, p - 1.0) * np.sign(ad.value(u))
        proj = ad.matmul(block, ad.expand_dims(g, -1))[..., 0]
        grad = ad.neg(ad.expand_dims(r / (big[..., 0] * s), -1) * proj)
        return r, grad

    def constraint_residual(self, x):
        return np.abs(lp_norm(x, self.p) - self.t)

    def describe(self):
        return {"kind": self.kind, "p": self.p, "t": self.t}


class Simplex(RadiusField):
    """The probability simplex, reached through positive-orthant angles."""

    kind = "simplex"
    positive_orthant = True

    def radius_and_grad(self, theta, frame=None):
        tv = np.asarray(ad.value(theta))
        if np.any(tv < -1e-12) or np.any(tv > np.pi / 2 + 1e-12):
            bad = tv[(tv < -1e-12) | (tv > np.pi / 2 + 1e-12)][0]
            raise ValueError(f"simplex angles must lie in [0, pi/2], got {bad}")
        u, block = unit_frame(theta) if frame is None else frame
        r = 1.0 / ad.sum_(u, axis=-1)
        grad = ad.neg(ad.expand_dims(r * r, -1) * ad.sum_(block, axis=-1))
        return r, grad

    def constraint_residual(self, x):
        x = np.asarray(x, dtype=float)
        return np.maximum(np.abs(np.sum(x, axis=-1) - 1.0), np.max(np.maximum(-x, 0.0), axis=-1))

    def describe(self):
        return {"kind": self.kind}


class DeformedSphere(RadiusField):
    """``r = 1 + a sin(m t_0) sin(m t_1)`` (``1 + a sin(m t_0)`` when d = 2)."""

    kind = "deformed"

    def __init__(self, amplitude: float = 0.2, frequency: float = 3.0):
        if not abs(amplitude) < 1:
            raise ValueError(f"deformed sphere needs |amplitude| < 1, got {amplitude}")
        self.amplitude = float(amplitude)
        self.frequency = float(frequency)

    def radius_and_grad(self, theta, frame=None):
        a, f = self.amplitude, self.frequency
        m = np.shape(ad.value(theta))[-1]
        s0, c0 = ad.sin(f * theta[..., 0]), ad.cos(f * theta[..., 0])
        if m == 1:
            return 1.0 + a * s0, ad.expand_dims(a * f * c0, -1)
        s1, c1 = ad.sin(f * theta[..., 1]), ad.cos(f * theta[..., 1])
        r = 1.0 + a * s0 * s1
        parts = [ad.expand_dims(a * f * c0 * s1, -1), ad.expand_dims(a * f * s0 * c1, -1)]
        if m > 2:
            parts.append(np.zeros(np.shape(ad.value(theta))[:-1] + (m - 2,)))
        return r, ad.concatenate(parts, axis=-1)

    def constraint_residual(self, x):
        theta, r = to_spherical(np.asarray(x, dtype=float))
        return np.abs(r - self.radius(theta))

    def describe(self):
        return {"kind": self.kind, "amplitude": self.amplitude, "frequency": self.frequency}


def field_from_description(desc: dict) -> RadiusField:
    kind = desc["kind"]
    if kind == "sphere":
        return Sphere(desc.get("c", 1.0))
    if kind == "lp_ball":
        return LpBall(desc["p"], desc.get("t", 1.0))
    if kind == "simplex":
        return Simplex()
    if kind == "deformed":
        return DeformedSphere(desc.get("amplitude", 0.2), desc.get("frequency", 3.0))
    raise ValueError(f"unknown manifold kind {kind!r}")


def radius_sphere(theta, c: float = 1.0):
    return Sphere(c).radius(theta)


def radius_lp(theta, p: float, t: float = 1.0):
    return LpBall(p, t).radius(theta)


def radius_simplex(theta):
    return Simplex().radius(theta)


def radius_deformed(theta, amplitude: float = 0.2, frequency: float = 3.0):
    return DeformedSphere(amplitude, frequency).radius(theta)


def grad_radius(field: RadiusField, theta):
    return field.grad(theta)
