"""Operator blocks of the mismatched inclusion ``0 in Ax + Cx + a K(Lx - c) + K B L x``.

Blocks are thin containers around user callables. The library never inverts an
operator numerically: ``A`` enters only through its resolvent, ``C`` through
its value (and, for MMFDRF, its resolvent) and ``B`` through its value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .linops import DimensionError, LinearMap, MismatchFamily, SpectralEstimates, operator_norm

__all__ = [
    "ResolventBlock",
    "CocoerciveBlock",
    "LipschitzBlock",
    "ProblemSpec",
    "MonotonicityReport",
    "zero_resolvent_block",
    "zero_cocoercive_block",
    "zero_lipschitz_block",
    "d_map",
    "lipschitz_bounds",
    "rho_hat",
    "check_rho_monotone",
    "sample_graph_pairs",
    "solution_gap_bound",
    "cocoercivity_slack",
]

Vector = np.ndarray


@dataclass(frozen=True, eq=False)
class ResolventBlock:
    """Maximally ``rho``-monotone ``A`` known through ``resolvent(gamma, y) = J_{gamma A}(y)``.

    The resolvent must be single-valued whenever ``gamma * rho > -1``.
    """

    rho: float
    resolvent: Callable[[float, Vector], Vector]


@dataclass(frozen=True, eq=False)
class CocoerciveBlock:
    beta: float
    eval: Callable[[Vector], Vector]
    resolvent: Optional[Callable[[float, Vector], Vector]] = None

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("cocoercivity constant beta must be positive")


@dataclass(frozen=True, eq=False)
class LipschitzBlock:
    zeta: float
    eval: Callable[[Vector], Vector]

    def __post_init__(self):
        if not self.zeta >= 0:
            raise ValueError("Lipschitz constant zeta must be nonnegative")


def zero_resolvent_block() -> ResolventBlock:
    """``A = 0``: resolvent is the identity."""
    return ResolventBlock(0.0, lambda gamma, y: np.array(y, dtype=float, copy=True))


def zero_cocoercive_block(beta: float = 1e12) -> CocoerciveBlock:
    # C = 0 is beta-cocoercive for every beta; a huge beta keeps chi = 1/kappa-limited
    return CocoerciveBlock(beta, lambda x: np.zeros_like(x, dtype=float),
                           lambda gamma, y: np.array(y, dtype=float, copy=True))


def zero_lipschitz_block() -> LipschitzBlock:
    return LipschitzBlock(0.0, lambda y: np.zeros_like(y, dtype=float))


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """A full instance of the mismatched inclusion."""

    A: ResolventBlock
    C: CocoerciveBlock
    B: LipschitzBlock
    L: LinearMap
    mismatch: MismatchFamily
    c: Vector
    alpha: float

    def __post_init__(self):
        K = self.mismatch.base
        if K.in_dim != self.L.out_dim or K.out_dim != self.L.in_dim:
            raise DimensionError(f"K {K.shape} incompatible with L {self.L.shape}")
        c = np.asarray(self.c, dtype=float)
        if c.shape != (self.L.out_dim,):
            raise DimensionError(f"c has shape {c.shape}, expected ({self.L.out_dim},)")
        object.__setattr__(self, "c", c)
        if not self.alpha >= 0:
            raise ValueError("alpha must be nonnegative")

    @property
    def K(self) -> LinearMap:
        return self.mismatch.base

    @property
    def dim(self) -> int:
        return self.L.in_dim

    def data_residual(self, x: Vector) -> Vector:
        """``a (Lx - c) + B(Lx)``, the vector hit by ``M`` in ``D_M``."""
        Lx = self.L(x)
        return self.alpha * (Lx - self.c) + self.B.eval(Lx)


def d_map(M: LinearMap, spec: ProblemSpec, x: Vector) -> Vector:
    """``D_M x = a M(Lx - c) + M B L x``, with one application each of L, B and M."""
    if M.in_dim != spec.L.out_dim or M.out_dim != spec.L.in_dim:
        raise DimensionError(f"M {M.shape} incompatible with L {spec.L.shape}")
    return M(spec.data_residual(x))


def lipschitz_bounds(M: LinearMap, spec: ProblemSpec, norms: SpectralEstimates,
                     norm_M: Optional[float] = None, norm_ML: Optional[float] = None) -> tuple[float, float]:
    """Certified upper bounds ``(kappa_M, zeta_tilde_M)``.

    ``kappa_M = a ||M L|| + z ||M|| ||L||`` bounds Lip(M(a Id + B)L) and
    ``zeta_tilde_M = z ||M|| ||L||`` bounds Lip(M B L). Norms not supplied are
    estimated by power iteration at ``norms.tol``.
    """
    if M.in_dim != spec.L.out_dim or M.out_dim != spec.L.in_dim:
        raise DimensionError(f"M {M.shape} incompatible with L {spec.L.shape}")
    if norm_M is None:
        norm_M = operator_norm(M, tol=norms.tol)
    if norm_ML is None:
        norm_ML = operator_norm(M @ spec.L, tol=norms.tol) if spec.alpha > 0 else 0.0
    zt = spec.B.zeta * norm_M * norms.norm_L
    return spec.alpha * norm_ML + zt, zt


def rho_hat(spec: ProblemSpec, estimates: SpectralEstimates, zeta_tilde_mismatch: float) -> float:
    """Monotonicity margin ``rho + a lambda_min - zeta_tilde_{L*-K}``; sign is not enforced."""
    return spec.A.rho + spec.alpha * estimates.lambda_min - zeta_tilde_mismatch


class MonotonicityReport(NamedTuple):
    min_slack: float
    min_relative_slack: float
    n_pairs: int


def check_rho_monotone(pairs: Sequence, rho: float) -> MonotonicityReport:
    """Sampled check of ``<x - y, u - v> >= rho ||x - y||^2``.

    ``pairs`` holds ``((x, u), (y, v))`` graph pairs. The relative slack divides
    by ``||x - y||^2`` so that rounding-level violations read as ~1e-16.
    """
    if len(pairs) == 0:
        raise ValueError("check_rho_monotone needs at least one pair")
    min_slack = math.inf
    min_rel = math.inf
    for (x, u), (y, v) in pairs:
        dx = np.asarray(x, float) - np.asarray(y, float)
        du = np.asarray(u, float) - np.asarray(v, float)
        nx2 = float(dx @ dx)
        slack = float(dx @ du) - rho * nx2
        min_slack = min(min_slack, slack)
        if nx2 > 0:
            scale = nx2 + float(np.linalg.norm(dx) * np.linalg.norm(du))
            min_rel = min(min_rel, slack / scale)
    return MonotonicityReport(min_slack, min_rel, len(pairs))


def sample_graph_pairs(spec: ProblemSpec, n_pairs: int, gamma: float = 1.0, seed: int = 0,
                       scale: float = 1.0, include_dk: bool = True) -> list:
    """Random graph pairs of ``A + D_K`` (or of ``A`` alone).

    A point of gra A is obtained from any ``w`` as ``x = J_{gA} w``,
    ``u = (w - x)/g``; ``D_K x`` is then added to ``u``.
    """
    if gamma * spec.A.rho <= -1:
        raise ValueError("gamma * rho must exceed -1")
    rng = np.random.default_rng(seed)

    def point():
        w = scale * rng.standard_normal(spec.dim)
        x = spec.A.resolvent(gamma, w)
        u = (w - x) / gamma
        if include_dk:
            u = u + d_map(spec.K, spec, x)
        return x, u

    return [(point(), point()) for _ in range(n_pairs)]


def cocoercivity_slack(C: CocoerciveBlock, xs: np.ndarray, ys: np.ndarray) -> float:
    """Smallest ``<x-y, Cx-Cy> - beta ||Cx-Cy||^2``, relative to ``||x-y||^2``, over rows."""
    worst = math.inf
    for x, y in zip(xs, ys):
        dx = x - y
        dc = C.eval(x) - C.eval(y)
        worst = min(worst, (float(dx @ dc) - C.beta * float(dc @ dc)) / max(float(dx @ dx), 1e-300))
    return worst


def solution_gap_bound(z: Vector, spec: ProblemSpec, estimates: SpectralEstimates) -> float:
    """Upper bound on the distance from a mismatched solution ``z`` to the matched one.

    ``||L* - K|| ||a(Lz - c) + BLz|| / (rho + a mu)`` where ``mu`` is the smallest
    eigenvalue of ``L^* L`` (strong monotonicity of the matched problem). Falls
    back to ``estimates.lambda_min`` only when the matched value is unavailable.
    """
    lam = estimates.lambda_min_matched
    if not math.isfinite(lam):
        lam = estimates.lambda_min
    denom = spec.A.rho + spec.alpha * lam
    if denom <= 0:
        raise ValueError(f"rho + alpha*lambda_min = {denom:.3g} <= 0: gap bound inapplicable")
    if estimates.norm_mismatch == 0.0:
        return 0.0
    return estimates.norm_mismatch * float(np.linalg.norm(spec.data_residual(z))) / denom
