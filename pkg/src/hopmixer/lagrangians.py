"""Lagrangians whose gradients define the neuron activations.

Each Lagrangian ``L`` maps a layer state to a scalar; its gradient is the
activation ``g = grad L`` and its Hessian controls energy descent. States of
any shape are accepted and treated as flat vectors, so a 2D visible grid
normalized by :class:`CenteredNorm` gets the joint token/channel layer norm.

Four kinds are available:

* :class:`CenteredNorm` -- ``sqrt(sum (x_i - mean)^2 + eps)``; gradient is the
  plain layer norm without affine parameters.
* :class:`LayerNorm` -- ``D * gamma * sqrt(sum (x_i - mean)^2 / D + eps) + delta . x``.
* :class:`ReLUSquared` -- ``1/2 sum max(x_i, 0)^2``; gradient is ReLU.
* :class:`GELUPrimitive` -- ``sum G(x_i)`` with ``G' = gelu`` (exact erf form).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import DimensionError, SingularityError

_SQRT2 = math.sqrt(2.0)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(z):
    """Exact GELU, ``z * Phi(z)``."""
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def gelu_prime(z):
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * (1.0 + erf(z / _SQRT2)) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def gelu_primitive(z):
    """Antiderivative of :func:`gelu` with ``G(0) = 0``."""
    z = np.asarray(z, dtype=np.float64)
    z2 = z * z
    return 0.25 * (z2 + (z2 - 1.0) * erf(z / _SQRT2) + z * _SQRT_2_OVER_PI * np.exp(-0.5 * z2))


class Lagrangian:
    """Interface shared by all kinds."""

    #: activation acts coordinate-wise (diagonal Hessian)
    elementwise = False

    def value(self, x) -> float:
        raise NotImplementedError

    def activation(self, x) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, x) -> np.ndarray:
        """Hessian with respect to the flattened state, shape ``(n, n)``."""
        raise NotImplementedError


class _Elementwise(Lagrangian):
    elementwise = True

    def primitive(self, z):
        raise NotImplementedError

    def derivative(self, z):
        """Derivative of the activation, i.e. the Hessian diagonal."""
        raise NotImplementedError

    def value(self, x) -> float:
        return float(np.sum(self.primitive(x)))

    def hessian(self, x) -> np.ndarray:
        return np.diag(np.ravel(self.derivative(x)))


@dataclass(frozen=True)
class ReLUSquared(_Elementwise):
    def primitive(self, z):
        r = np.maximum(np.asarray(z, dtype=np.float64), 0.0)
        return 0.5 * r * r

    def activation(self, x):
        return np.maximum(np.asarray(x, dtype=np.float64), 0.0)

    def derivative(self, z):
        # subgradient choice: 0 at exactly z == 0
        return (np.asarray(z) > 0.0).astype(np.float64)


@dataclass(frozen=True)
class GELUPrimitive(_Elementwise):
    """Hidden-layer Lagrangian producing GELU.

    Note that ``gelu'`` is negative below roughly ``z = -0.75``, so the Hessian
    is not positive semi-definite everywhere.
    """

    def primitive(self, z):
        return gelu_primitive(z)

    def activation(self, x):
        return gelu(x)

    def derivative(self, z):
        return gelu_prime(z)


def _centered(x):
    x = np.asarray(x, dtype=np.float64)
    return x - x.mean()


@dataclass(frozen=True)
class CenteredNorm(Lagrangian):
    """``sqrt(sum_i (x_i - mean)^2 + eps)`` over every entry of the state."""

    eps: float = 1e-6

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be non-negative")

    def _radius(self, c):
        r = math.sqrt(float(np.sum(c * c)) + self.eps)
        if r == 0.0:
            raise SingularityError("layer norm of a constant input is undefined at eps = 0")
        return r

    def value(self, x) -> float:
        c = _centered(x)
        return math.sqrt(float(np.sum(c * c)) + self.eps)

    def activation(self, x):
        c = _centered(x)
        return c / self._radius(c)

    def hessian(self, x):
        c = _centered(x).ravel()
        r = self._radius(c)
        n = c.size
        proj = np.eye(n) - 1.0 / n
        return proj / r - np.outer(c, c) / r**3


@dataclass(frozen=True)
class LayerNorm(Lagrangian):
    """Layer norm with learnable scale ``gamma`` and shift ``delta``.

    ``delta=None`` means a zero shift of whatever length the input has.
    ``gamma`` must be non-negative for the Hessian to stay PSD.
    """

    gamma: float = 1.0
    delta: np.ndarray | None = field(default=None, compare=False)
    eps: float = 1e-6
    D: float = 1.0

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if not self.D > 0:
            raise ValueError("D must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.delta is not None:
            object.__setattr__(self, "delta", np.asarray(self.delta, dtype=np.float64).ravel())

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.delta is not None and self.delta.size != x.size:
            raise DimensionError(f"delta has length {self.delta.size} but state has {x.size} entries")
        return x

    def _scale(self, c):
        q = math.sqrt(float(np.sum(c * c)) / self.D + self.eps)
        if q == 0.0:
            raise SingularityError("layer norm of a constant input is undefined at eps = 0")
        return q

    def value(self, x) -> float:
        x = self._check(x)
        c = _centered(x)
        out = self.D * self.gamma * math.sqrt(float(np.sum(c * c)) / self.D + self.eps)
        if self.delta is not None:
            out += float(self.delta @ x.ravel())
        return out

    def activation(self, x):
        x = self._check(x)
        c = _centered(x)
        g = self.gamma * c / self._scale(c)
        if self.delta is not None:
            g = g + self.delta.reshape(x.shape)
        return g

    def hessian(self, x):
        x = self._check(x)
        c = _centered(x).ravel()
        q = self._scale(c)
        n = c.size
        proj = np.eye(n) - 1.0 / n
        return self.gamma * (proj / q - np.outer(c, c) / (self.D * q**3))


def from_name(name: str, **kwargs) -> Lagrangian:
    """Build a Lagrangian from a config string (``gelu``, ``relu``, ``centered_norm``, ``layer_norm``)."""
    table = {
        "gelu": GELUPrimitive,
        "relu": ReLUSquared,
        "centered_norm": CenteredNorm,
        "layer_norm": LayerNorm,
    }
    try:
        return table[name.lower()](**kwargs)
    except KeyError:
        raise ValueError(f"unknown Lagrangian {name!r}; choose from {sorted(table)}") from None


def name_of(lag: Lagrangian) -> str:
    return {GELUPrimitive: "gelu", ReLUSquared: "relu", CenteredNorm: "centered_norm", LayerNorm: "layer_norm"}[type(lag)]
