"""Closed-form proximity operators and gradients used by the CT instance.

* ``f = iota_[0, x_max]^N + (rho/2)||.||^2``           box + ridge, enters through its prox
* ``g = weight * Phi_delta o W``                       Huber in an orthonormal transform
* ``h = sum_m phi(y_m; c_m)``                          Generalized Anscombe fidelity, via its gradient

``W`` is an orthonormal Haar transform (1-D or separable 2-D).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linops import DimensionError, LinearMap

__all__ = [
    "BoxRidge",
    "HuberTransform",
    "AnscombeFidelity",
    "box_ridge_value",
    "prox_box_ridge",
    "huber_value",
    "huber_derivative",
    "prox_huber_scalar",
    "g_value",
    "prox_g",
    "grad_g",
    "anscombe_value",
    "anscombe_grad",
    "anscombe_nu",
    "anscombe_lipschitz",
    "haar_forward",
    "haar_inverse",
    "haar2_forward",
    "haar2_inverse",
    "haar_map",
    "haar2_map",
]


# --------------------------------------------------------------------------- box + ridge

@dataclass(frozen=True)
class BoxRidge:
    """``iota_[0, x_max]^N + (rho/2)||x||^2``. ``rho = 0`` gives the plain box."""

    x_max: float
    rho: float

    def __post_init__(self):
        if not self.x_max > 0:
            raise ValueError("x_max must be positive")
        if not (self.rho >= 0 and math.isfinite(self.rho)):
            raise ValueError("rho must be finite and nonnegative")


def box_ridge_value(p: BoxRidge, x) -> float:
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(x > p.x_max):
        return math.inf
    return 0.5 * p.rho * float(x @ x) if x.ndim else 0.5 * p.rho * float(x * x)


def prox_box_ridge(p: BoxRidge, gamma: float, x):
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return np.minimum(np.maximum(np.asarray(x, dtype=float) / (gamma * p.rho + 1.0), 0.0), p.x_max)


# --------------------------------------------------------------------------- Huber

def huber_value(delta: float, eta):
    a = np.abs(eta)
    return np.where(a > delta, a - 0.5 * delta, 0.5 * np.square(eta) / delta)


def huber_derivative(delta: float, eta):
    eta = np.asarray(eta, dtype=float)
    return np.where(np.abs(eta) > delta, np.sign(eta), eta / delta)


def prox_huber_scalar(delta: float, gamma: float, eta):
    """Prox of ``gamma * phi_delta``, componentwise when ``eta`` is an array."""
    eta = np.asarray(eta, dtype=float)
    out = np.where(np.abs(eta) <= delta + gamma, delta * eta / (gamma + delta), eta - gamma * np.sign(eta))
    return out if out.ndim else float(out)


@dataclass(frozen=True, eq=False)
class HuberTransform:
    """``g(x) = weight * sum_i phi_delta((W x)_i)`` with ``W`` orthonormal."""

    delta: float
    W: LinearMap
    weight: float = 1.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not self.weight > 0:
            raise ValueError("weight must be positive")
        if self.W.in_dim != self.W.out_dim or not self.W.has_adjoint:
            raise ValueError("W must be square with an adjoint")

    @property
    def lipschitz(self) -> float:
        """Lipschitz constant of ``grad g``."""
        return self.weight / self.delta

    @property
    def beta(self) -> float:
        """Cocoercivity constant of ``grad g`` (Baillon-Haddad)."""
        return self.delta / self.weight


def g_value(p: HuberTransform, x) -> float:
    return p.weight * float(np.sum(huber_value(p.delta, p.W(x))))


def prox_g(p: HuberTransform, gamma: float, x):
    return p.W.T(prox_huber_scalar(p.delta, gamma * p.weight, p.W(x)))


def grad_g(p: HuberTransform, x):
    return p.weight * p.W.T(huber_derivative(p.delta, p.W(x)))


# --------------------------------------------------------------------------- Generalized Anscombe

@dataclass(frozen=True, eq=False)
class AnscombeFidelity:
    """Generalized Anscombe data term for Poisson counts plus N(0, sigma^2) noise."""

    c: np.ndarray
    sigma: float

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        if c.ndim != 1 or c.size == 0:
            raise ValueError("Anscombe data c must be a nonempty vector")
        if not self.sigma >= 0:
            raise ValueError("sigma must be nonnegative")
        floor = -0.375 - self.sigma ** 2
        if np.any(c < floor):
            raise ValueError(f"data below -3/8 - sigma^2 = {floor}: crop before building the fidelity")
        object.__setattr__(self, "c", c)

    @property
    def offset(self) -> float:
        return 0.375 + self.sigma ** 2


def anscombe_nu(b, sigma: float):
    """Curvature bound ``nu(b) = (3/8 + s^2)^(-3/2) sqrt(3/8 + b + s^2)``."""
    off = 0.375 + sigma ** 2
    return off ** -1.5 * np.sqrt(off + np.asarray(b, dtype=float))


def anscombe_value(p: AnscombeFidelity, y) -> float:
    y = np.asarray(y, dtype=float)
    off = p.offset
    sb = np.sqrt(p.c + off)
    ya = np.maximum(y, 0.0)
    pos = 2.0 * (sb - np.sqrt(ya + off)) ** 2
    phi0 = 2.0 * (sb - math.sqrt(off)) ** 2
    dphi0 = 2.0 - 2.0 * sb / math.sqrt(off)
    neg = phi0 + dphi0 * y + 0.5 * anscombe_nu(p.c, p.sigma) * y ** 2
    return float(np.sum(np.where(y >= 0, pos, neg)))


def anscombe_grad(p: AnscombeFidelity, y):
    y = np.asarray(y, dtype=float)
    if y.shape != p.c.shape:
        raise DimensionError(f"y has shape {y.shape}, data has {p.c.shape}")
    off8 = 8.0 * p.sigma ** 2 + 3.0
    num = np.sqrt(8.0 * p.c + off8)
    pos = 2.0 - 2.0 * num / np.sqrt(8.0 * np.maximum(y, 0.0) + off8)
    neg = (2.0 - 2.0 * num / math.sqrt(off8)) + anscombe_nu(p.c, p.sigma) * y
    return np.where(y >= 0, pos, neg)


def anscombe_lipschitz(p: AnscombeFidelity) -> float:
    return float(np.max(anscombe_nu(p.c, p.sigma)))


# --------------------------------------------------------------------------- Haar

def _levels_for(n: int, levels: int) -> int:
    if n <= 0 or n & (n - 1):
        raise ValueError(f"Haar transform needs a power-of-two length, got {n}")
    if levels < 0:
        raise ValueError("levels must be nonnegative")
    return min(levels, n.bit_length() - 1)


_S = 1.0 / math.sqrt(2.0)


def haar_forward(x, levels: int = 2):
    """Orthonormal multilevel Haar analysis, output ``[a_J, d_J, ..., d_1]``.

    ``levels`` is capped at ``log2(len(x))``.
    """
    y = np.array(x, dtype=float)
    if y.ndim != 1:
        raise DimensionError("haar_forward expects a vector")
    m = y.shape[0]
    for _ in range(_levels_for(m, levels)):
        a = (y[0:m:2] + y[1:m:2]) * _S
        d = (y[0:m:2] - y[1:m:2]) * _S
        y[: m // 2] = a
        y[m // 2: m] = d
        m //= 2
    return y


def haar_inverse(y, levels: int = 2):
    x = np.array(y, dtype=float)
    if x.ndim != 1:
        raise DimensionError("haar_inverse expects a vector")
    n = x.shape[0]
    lv = _levels_for(n, levels)
    m = n >> lv
    for _ in range(lv):
        a = x[:m].copy()
        d = x[m: 2 * m].copy()
        x[0: 2 * m: 2] = (a + d) * _S
        x[1: 2 * m: 2] = (a - d) * _S
        m *= 2
    return x


def _step_rows(block):
    a = (block[:, 0::2] + block[:, 1::2]) * _S
    d = (block[:, 0::2] - block[:, 1::2]) * _S
    return np.hstack([a, d])


def _unstep_rows(block):
    h = block.shape[1] // 2
    a, d = block[:, :h], block[:, h:]
    out = np.empty_like(block)
    out[:, 0::2] = (a + d) * _S
    out[:, 1::2] = (a - d) * _S
    return out


def haar2_forward(img, levels: int = 2):
    """Separable orthonormal 2-D Haar on a square power-of-two image."""
    y = np.array(img, dtype=float)
    if y.ndim != 2 or y.shape[0] != y.shape[1]:
        raise DimensionError("haar2_forward expects a square image")
    m = y.shape[0]
    for _ in range(_levels_for(m, levels)):
        blk = _step_rows(y[:m, :m])
        y[:m, :m] = _step_rows(blk.T).T
        m //= 2
    return y


def haar2_inverse(coef, levels: int = 2):
    x = np.array(coef, dtype=float)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError("haar2_inverse expects a square array")
    n = x.shape[0]
    lv = _levels_for(n, levels)
    m = n >> (lv - 1) if lv else n
    for _ in range(lv):
        blk = _unstep_rows(x[:m, :m].T).T
        x[:m, :m] = _unstep_rows(blk)
        m *= 2
    return x


def haar_map(n: int, levels: int = 2) -> LinearMap:
    _levels_for(n, levels)
    return LinearMap(n, n, lambda x: haar_forward(x, levels), lambda y: haar_inverse(y, levels),
                     name="W")


def haar2_map(side: int, levels: int = 2) -> LinearMap:
    """2-D Haar acting on row-major flattened ``side x side`` images."""
    _levels_for(side, levels)
    shape = (side, side)
    return LinearMap(side * side, side * side,
                     lambda x: haar2_forward(x.reshape(shape), levels).ravel(),
                     lambda y: haar2_inverse(y.reshape(shape), levels).ravel(),
                     name="W2")
