"""Small dense instances with affine blocks and a box, plus a dense reference solver.

The inclusion is ``0 in rho x + N_box(x) + Q x + q + a K(Lx - c) + K S L x`` with
``Q`` positive semidefinite and ``S`` monotone (``S + S^T`` PSD).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .linops import from_matrix, make_mismatch_family
from .operators import CocoerciveBlock, LipschitzBlock, ProblemSpec, ResolventBlock

__all__ = ["AffineInstance", "make_quadratic_instance", "affine_problem", "solve_affine_vi", "affine_operator"]


@dataclass(frozen=True, eq=False)
class AffineInstance:
    L: np.ndarray
    K: np.ndarray
    c: np.ndarray
    Q: np.ndarray
    q: np.ndarray
    S: np.ndarray
    alpha: float
    rho: float
    lo: float
    hi: float

    @property
    def dim(self) -> int:
        return self.L.shape[1]

    def matched(self) -> "AffineInstance":
        """Same instance with ``K = L^T``."""
        return AffineInstance(self.L, self.L.T.copy(), self.c, self.Q, self.q, self.S, self.alpha,
                              self.rho, self.lo, self.hi)


def make_quadratic_instance(dim: int = 16, seed: int = 0, mismatch_scale: float = 0.0,
                            rho: float = 0.1, alpha: float = 1.0, box: float = 1.0) -> AffineInstance:
    """Seeded strongly monotone instance; ``K = L^T + mismatch_scale * E`` with ``||E|| = 1``."""
    if dim < 1:
        raise ValueError("dim must be positive")
    rng = np.random.default_rng(seed)
    L = np.eye(dim) * 0.5 + rng.standard_normal((dim, dim)) / math.sqrt(dim)
    G = rng.standard_normal((dim, dim)) / math.sqrt(dim)
    Q = 0.5 * G @ G.T
    q = 0.3 * rng.standard_normal(dim)
    R = rng.standard_normal((dim, dim)) / math.sqrt(dim)
    S = 0.2 * (R - R.T) + 0.05 * np.eye(dim)
    E = rng.standard_normal((dim, dim))
    E /= np.linalg.norm(E, 2)
    x_true = rng.uniform(-1.5 * box, 1.5 * box, dim)
    c = L @ x_true + 0.05 * rng.standard_normal(dim)
    return AffineInstance(L, L.T + mismatch_scale * E, c, Q, q, S, alpha, rho, -box, box)


def affine_problem(inst: AffineInstance, mismatch: Optional[dict] = None, seed: int = 0) -> ProblemSpec:
    """Wrap an :class:`AffineInstance` as a :class:`ProblemSpec`."""
    n = inst.dim
    rho, lo, hi = inst.rho, inst.lo, inst.hi
    A = ResolventBlock(rho, lambda gamma, y: np.clip(y / (1.0 + gamma * rho), lo, hi))
    qnorm = float(np.linalg.norm(inst.Q, 2))
    Q, q = inst.Q, inst.q
    if qnorm > 0:
        C = CocoerciveBlock(1.0 / qnorm, lambda x: Q @ x + q,
                            lambda gamma, y: np.linalg.solve(np.eye(n) + gamma * Q, y - gamma * q))
    else:
        C = CocoerciveBlock(1e12, lambda x: q + 0.0 * x, lambda gamma, y: y - gamma * q)
    S = inst.S
    B = LipschitzBlock(float(np.linalg.norm(S, 2)), lambda y: S @ y)
    L = from_matrix(inst.L, "L")
    # reuse the transpose product so a matched instance is matched bit for bit
    K = L.adjoint() if np.array_equal(inst.K, inst.L.T) else from_matrix(inst.K, "K")
    mm = dict(mismatch or {})
    family = make_mismatch_family(K, mm.get("kind", "constant"), mm.get("omega0", 0.0),
                                  mm.get("eta_bar", 0.0), mm.get("seed", seed))
    return ProblemSpec(A, C, B, L, family, inst.c, inst.alpha)


def affine_operator(inst: AffineInstance) -> tuple[np.ndarray, np.ndarray]:
    """``(T, r)`` such that the single-valued part is ``x -> T x + r``."""
    K, L = inst.K, inst.L
    T = inst.rho * np.eye(inst.dim) + inst.Q + inst.alpha * K @ L + K @ inst.S @ L
    r = inst.q - inst.alpha * K @ inst.c
    return T, r


def solve_affine_vi(inst: AffineInstance, tol: float = 1e-15, max_iter: int = 2_000_000) -> np.ndarray:
    """Solution of ``0 in T x + r + N_box(x)`` by projected fixed-point iteration.

    The step ``mu / ||T||^2`` makes the map a contraction when ``sym(T)`` has
    smallest eigenvalue ``mu > 0``. Once the active set settles the free block
    is solved directly and accepted if the result is a fixed point.
    """
    T, r = affine_operator(inst)
    mu = float(np.linalg.eigvalsh(0.5 * (T + T.T))[0])
    if mu <= 0:
        raise ValueError(f"operator is not strongly monotone (mu = {mu:.3g})")
    tau = mu / float(np.linalg.norm(T, 2)) ** 2
    lo, hi = inst.lo, inst.hi
    x = np.clip(np.zeros(inst.dim), lo, hi)
    for k in range(max_iter):
        x_new = np.clip(x - tau * (T @ x + r), lo, hi)
        step = float(np.linalg.norm(x_new - x))
        x = x_new
        if k % 200 == 0 and step < 1e-8:
            polished = _polish(T, r, x, lo, hi)
            if polished is not None:
                return polished
        if step <= tol * max(1.0, float(np.linalg.norm(x))):
            return x
    raise RuntimeError("projected fixed-point iteration did not converge")


def _polish(T, r, x, lo, hi):
    at_lo = x <= lo
    at_hi = x >= hi
    free = ~(at_lo | at_hi)
    z = np.where(at_lo, lo, np.where(at_hi, hi, 0.0))
    if np.any(free):
        rhs = -(r[free] + T[np.ix_(free, ~free)] @ z[~free])
        z[free] = np.linalg.solve(T[np.ix_(free, free)], rhs)
    if np.any(z < lo - 1e-12) or np.any(z > hi + 1e-12):
        return None
    z = np.clip(z, lo, hi)
    g = T @ z + r
    # KKT: gradient zero on free set, pushes outward on active bounds
    if np.any(g[at_lo] < -1e-10) or np.any(g[at_hi] > 1e-10):
        return None
    if np.any(np.abs(g[free]) > 1e-9 * max(1.0, float(np.linalg.norm(r)))):
        return None
    return z
