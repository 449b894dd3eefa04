"""Analytic potentials evaluable at complex positions.

Every smooth potential provides value / gradient / hessian in closed form.
They accept arrays of shape (..., d) and evaluate at complex positions (the
analytic continuation of the real formula); real input gives real output.
The hard-wall billiard has no smooth continuation and only supplies the
steep tanh wall used by the grid propagator; its dynamics are handled
analytically elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UnsupportedPotentialOperation(TypeError):
    """Operation has no meaning for this potential variant."""


def _r2(x):
    return np.sum(np.asarray(x) ** 2, axis=-1)


def _outer(x):
    return x[..., :, None] * x[..., None, :]


def _eye_like(x):
    d = x.shape[-1]
    return np.broadcast_to(np.eye(d, dtype=x.dtype), x.shape[:-1] + (d, d))


class _SmoothPotential:
    """Shared-subexpression combined evaluations (defaults fall back)."""

    def value_grad(self, x):
        return self.value(x), self.gradient(x)

    def value_grad_hess(self, x):
        return self.value(x), self.gradient(x), self.hessian(x)

    def grid_value(self, x):
        return self.value(x)



@dataclass(frozen=True)
class GaussianWell(_SmoothPotential):
    """Attractive Gaussian well V(r) = -depth * exp(-r^2)."""

    depth: float = 1.0
    tag = "gaussian_well"

    def value(self, x):
        return -self.depth * np.exp(-_r2(x))

    def gradient(self, x):
        x = np.asarray(x)
        return 2.0 * self.depth * x * np.exp(-_r2(x))[..., None]

    def hessian(self, x):
        x = np.asarray(x)
        g = np.exp(-_r2(x))[..., None, None]
        return 2.0 * self.depth * g * (_eye_like(x) - 2.0 * _outer(x))

    def value_grad(self, x):
        x = np.asarray(x)
        e = np.exp(-_r2(x))
        return -self.depth * e, 2.0 * self.depth * x * e[..., None]

    def value_grad_hess(self, x):
        x = np.asarray(x)
        e = np.exp(-_r2(x))
        v = -self.depth * e
        g = 2.0 * self.depth * x * e[..., None]
        h = 2.0 * self.depth * e[..., None, None] * (_eye_like(x) - 2.0 * _outer(x))
        return v, g, h

    def params(self):
        return {"depth": self.depth}


@dataclass(frozen=True)
class Quartic(_SmoothPotential):
    """Isotropic quartic oscillator V(r) = a r^2 + b_q r^4."""

    a: float = 0.5
    b_q: float = 0.1
    tag = "quartic"

    def __post_init__(self):
        if self.a < 0 or self.b_q < 0:
            raise ValueError("quartic coefficients must be non-negative")

    def value(self, x):
        r2 = _r2(x)
        return self.a * r2 + self.b_q * r2 ** 2

    def gradient(self, x):
        x = np.asarray(x)
        r2 = _r2(x)[..., None]
        return (2.0 * self.a + 4.0 * self.b_q * r2) * x

    def hessian(self, x):
        x = np.asarray(x)
        r2 = _r2(x)[..., None, None]
        return (2.0 * self.a + 4.0 * self.b_q * r2) * _eye_like(x) \
            + 8.0 * self.b_q * _outer(x)


    def params(self):
        return {"a": self.a, "b_q": self.b_q}


@dataclass(frozen=True)
class Ridge(_SmoothPotential):
    """Circular ridge V(r) = v0 * exp(-(r^2 - r0^2)^2 / sigma^2)."""

    v0: float = 10.0
    r0: float = 5.0
    sigma: float = 10.0
    tag = "ridge"

    def __post_init__(self):
        if self.v0 <= 0 or self.r0 <= 0 or self.sigma <= 0:
            raise ValueError("ridge parameters must be positive")

    def value(self, x):
        u = _r2(x) - self.r0 ** 2
        return self.v0 * np.exp(-(u / self.sigma) ** 2)

    def gradient(self, x):
        x = np.asarray(x)
        u = (_r2(x) - self.r0 ** 2)[..., None]
        g = np.exp(-((u / self.sigma) ** 2))
        return -4.0 * self.v0 / self.sigma ** 2 * u * x * g

    def hessian(self, x):
        x = np.asarray(x)
        u = (_r2(x) - self.r0 ** 2)[..., None, None]
        g = np.exp(-((u / self.sigma) ** 2))
        xx = _outer(x)
        return -4.0 * self.v0 / self.sigma ** 2 * g * (
            2.0 * xx + u * _eye_like(x) - 4.0 * u ** 2 / self.sigma ** 2 * xx
        )

    def value_grad(self, x):
        x = np.asarray(x)
        u = _r2(x) - self.r0 ** 2
        g = np.exp(-((u / self.sigma) ** 2))
        v = self.v0 * g
        grad = -4.0 * self.v0 / self.sigma ** 2 * u[..., None] * x * g[..., None]
        return v, grad

    def value_grad_hess(self, x):
        x = np.asarray(x)
        u = _r2(x) - self.r0 ** 2
        g = np.exp(-((u / self.sigma) ** 2))
        v = self.v0 * g
        grad = -4.0 * self.v0 / self.sigma ** 2 * u[..., None] * x * g[..., None]
        u2 = u[..., None, None]
        xx = _outer(x)
        hess = -4.0 * self.v0 / self.sigma ** 2 * g[..., None, None] * (
            2.0 * xx + u2 * _eye_like(x) - 4.0 * u2 ** 2 / self.sigma ** 2 * xx
        )
        return v, grad, hess


    def params(self):
        return {"v0": self.v0, "r0": self.r0, "sigma": self.sigma}


@dataclass(frozen=True)
class Harmonic(_SmoothPotential):
    """Test potential V = sum_i omega_i^2 x_i^2 / 2 (unit mass convention)."""

    omega: tuple = (1.0, 1.0)
    tag = "harmonic"

    def _w2(self, x):
        w = np.asarray(self.omega, float)
        if w.size == 1:
            w = np.full(x.shape[-1], float(w))
        return w ** 2

    def value(self, x):
        x = np.asarray(x)
        return 0.5 * np.sum(self._w2(x) * x ** 2, axis=-1)

    def gradient(self, x):
        x = np.asarray(x)
        return self._w2(x) * x

    def hessian(self, x):
        x = np.asarray(x)
        d = x.shape[-1]
        h = np.zeros(x.shape[:-1] + (d, d), dtype=x.dtype)
        idx = np.arange(d)
        h[..., idx, idx] = self._w2(x)
        return h


    def params(self):
        return {"omega": list(np.atleast_1d(self.omega).astype(float))}


@dataclass(frozen=True)
class Free(_SmoothPotential):
    """Test potential V = 0."""

    tag = "free"

    def value(self, x):
        return np.zeros(np.asarray(x).shape[:-1], dtype=np.asarray(x).dtype)

    def gradient(self, x):
        return np.zeros_like(np.asarray(x))

    def hessian(self, x):
        x = np.asarray(x)
        d = x.shape[-1]
        return np.zeros(x.shape[:-1] + (d, d), dtype=x.dtype)


    def params(self):
        return {}


@dataclass(frozen=True)
class Billiard:
    """Hard-wall circular billiard of radius R.

    No smooth analytic continuation exists; semiclassical dynamics treat the
    wall analytically (free flight + specular reflection).  For the grid
    propagator the wall is modeled as a steep confining shoulder
    wall_height * (1 + tanh((r - R)/wall_width)) / 2.
    """

    radius: float = 3.0
    wall_height: float = 1.0e4
    wall_width: float = 0.02
    tag = "billiard"

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("billiard radius must be positive")
        if self.wall_height <= 0 or self.wall_width <= 0:
            raise ValueError("wall parameters must be positive")

    def _reject(self):
        raise UnsupportedPotentialOperation(
            "the hard-wall billiard has no smooth analytic form; use the "
            "analytic billiard dynamics (dynamics.evolve_billiard)"
        )

    def value(self, x):
        self._reject()

    def gradient(self, x):
        self._reject()

    def hessian(self, x):
        self._reject()

    def grid_value(self, x):
        r = np.sqrt(_r2(x))
        return self.wall_height * 0.5 * (1.0 + np.tanh((r - self.radius) / self.wall_width))

    def params(self):
        return {"radius": self.radius, "wall_height": self.wall_height,
                "wall_width": self.wall_width}


POTENTIAL_TAGS = {
    cls.tag: cls for cls in (GaussianWell, Quartic, Ridge, Harmonic, Free, Billiard)
}


def is_smooth(spec) -> bool:
    return not isinstance(spec, Billiard)


def potential_from_config(node: dict):
    """Build a potential from a {kind: tag, **params} mapping."""
    if not isinstance(node, dict) or "kind" not in node:
        raise ValueError("potential config needs a 'kind' tag")
    kind = node["kind"]
    if kind not in POTENTIAL_TAGS:
        raise ValueError(
            f"unknown potential kind '{kind}' (choose from {sorted(POTENTIAL_TAGS)})"
        )
    kwargs = {k: v for k, v in node.items() if k != "kind"}
    if kind == "harmonic" and "omega" in kwargs:
        kwargs["omega"] = tuple(np.atleast_1d(kwargs["omega"]).astype(float))
    try:
        return POTENTIAL_TAGS[kind](**kwargs)
    except TypeError as exc:
        raise ValueError(f"bad parameters for potential '{kind}': {exc}") from exc


def potential_to_config(spec) -> dict:
    return {"kind": spec.tag, **spec.params()}
