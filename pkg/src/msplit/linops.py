"""Matrix-free linear maps, adjoint-mismatch families and spectral estimates.

A :class:`LinearMap` only needs an ``apply`` callable and its dimensions.
The true adjoint is optional; the routines that need it (power iteration on
``M^* M``, symmetrisation of ``K L``) check for it and fail loudly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
import scipy.sparse as sp

__all__ = [
    "DimensionError",
    "SpectralConvergenceError",
    "LinearMap",
    "MismatchFamily",
    "SpectralEstimates",
    "PowerResult",
    "identity",
    "from_matrix",
    "materialize",
    "power_iteration",
    "operator_norm",
    "lambda_min_estimate",
    "make_mismatch_family",
    "estimate_spectra",
]

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 10_000
DENSE_EIG_LIMIT = 4096


class DimensionError(ValueError):
    """Raised when a vector or map does not have the expected dimension."""


class SpectralConvergenceError(RuntimeError):
    """Power iteration did not reach the requested tolerance.

    ``estimate`` holds the best value reached, ``bracket`` (when known) an
    interval guaranteed to contain the true value.
    """

    def __init__(self, msg, estimate, iters, bracket=None):
        super().__init__(msg)
        self.estimate = estimate
        self.iters = iters
        self.bracket = bracket


def _check_vec(x, dim, what):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != dim:
        raise DimensionError(f"{what}: expected vector of length {dim}, got shape {x.shape}")
    return x


@dataclass(frozen=True, eq=False)
class LinearMap:
    """Linear operator ``R^in_dim -> R^out_dim`` given by a callable.

    ``matrix`` is an optional dense or sparse materialisation. When present it
    is only used to speed up :func:`materialize`; ``apply`` stays the source of
    truth.
    """

    in_dim: int
    out_dim: int
    apply: Callable[[np.ndarray], np.ndarray]
    adjoint_apply: Optional[Callable[[np.ndarray], np.ndarray]] = None
    matrix: object = field(default=None, repr=False)
    name: str = "map"

    def __post_init__(self):
        if int(self.in_dim) <= 0 or int(self.out_dim) <= 0:
            raise DimensionError("LinearMap dimensions must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.out_dim, self.in_dim)

    @property
    def has_adjoint(self) -> bool:
        return self.adjoint_apply is not None

    def __call__(self, x) -> np.ndarray:
        x = _check_vec(x, self.in_dim, f"{self.name}.apply")
        return np.asarray(self.apply(x), dtype=float)

    def T(self, y) -> np.ndarray:
        """Apply the true adjoint."""
        if self.adjoint_apply is None:
            raise ValueError(f"{self.name} has no adjoint_apply")
        y = _check_vec(y, self.out_dim, f"{self.name}.adjoint_apply")
        return np.asarray(self.adjoint_apply(y), dtype=float)

    def adjoint(self) -> "LinearMap":
        if self.adjoint_apply is None:
            raise ValueError(f"{self.name} has no adjoint_apply")
        mat = None if self.matrix is None else self.matrix.T
        return LinearMap(self.out_dim, self.in_dim, self.adjoint_apply, self.apply,
                         matrix=mat, name=f"{self.name}*")

    def __matmul__(self, other: "LinearMap") -> "LinearMap":
        """Composition ``self o other``."""
        if other.out_dim != self.in_dim:
            raise DimensionError(
                f"cannot compose {self.name} {self.shape} with {other.name} {other.shape}")
        adj = None
        if self.has_adjoint and other.has_adjoint:
            adj = lambda y: other.adjoint_apply(self.adjoint_apply(y))  # noqa: E731
        mat = None
        if self.matrix is not None and other.matrix is not None:
            mat = self.matrix @ other.matrix
        return LinearMap(other.in_dim, self.out_dim, lambda x: self.apply(other.apply(x)), adj,
                         matrix=mat, name=f"{self.name}.{other.name}")

    def _combine(self, other: "LinearMap", a: float, b: float, sym: str) -> "LinearMap":
        if self.shape != other.shape:
            raise DimensionError(f"shape mismatch {self.shape} vs {other.shape}")
        adj = None
        if self.has_adjoint and other.has_adjoint:
            adj = lambda y: a * self.adjoint_apply(y) + b * other.adjoint_apply(y)  # noqa: E731
        mat = None
        if self.matrix is not None and other.matrix is not None:
            mat = a * self.matrix + b * other.matrix
        return LinearMap(self.in_dim, self.out_dim,
                         lambda x: a * self.apply(x) + b * other.apply(x), adj,
                         matrix=mat, name=f"({self.name}{sym}{other.name})")

    def __add__(self, other: "LinearMap") -> "LinearMap":
        return self._combine(other, 1.0, 1.0, "+")

    def __sub__(self, other: "LinearMap") -> "LinearMap":
        return self._combine(other, 1.0, -1.0, "-")

    def scaled(self, s: float) -> "LinearMap":
        s = float(s)
        adj = None if self.adjoint_apply is None else (lambda y: s * self.adjoint_apply(y))
        mat = None if self.matrix is None else s * self.matrix
        return LinearMap(self.in_dim, self.out_dim, lambda x: s * self.apply(x), adj,
                         matrix=mat, name=f"{s:g}*{self.name}")


def identity(n: int) -> LinearMap:
    return LinearMap(n, n, lambda x: x.copy(), lambda y: y.copy(), matrix=sp.identity(n, format="csr"),
                     name="Id")


def from_matrix(M, name: str = "M") -> LinearMap:
    """Wrap a dense array or scipy sparse matrix; the adjoint is its transpose."""
    if sp.issparse(M):
        M = sp.csr_matrix(M, dtype=float)
        MT = M.T.tocsr()
    else:
        M = np.atleast_2d(np.asarray(M, dtype=float))
        MT = M.T
    m, n = M.shape
    return LinearMap(n, m, lambda x: M @ x, lambda y: MT @ y, matrix=M, name=name)


def materialize(M: LinearMap) -> np.ndarray:
    """Dense ``out_dim x in_dim`` array of ``M`` (column-by-column if needed)."""
    if M.matrix is not None:
        mat = M.matrix
        return mat.toarray() if sp.issparse(mat) else np.array(mat, dtype=float)
    out = np.empty((M.out_dim, M.in_dim))
    e = np.zeros(M.in_dim)
    for j in range(M.in_dim):
        e[j] = 1.0
        out[:, j] = M.apply(e)
        e[j] = 0.0
    return out


def _unit_sphere(dim, seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class PowerResult(NamedTuple):
    value: float
    iters: int


def power_iteration(gram: Callable[[np.ndarray], np.ndarray], dim: int, tol: float = DEFAULT_TOL,
                    max_iter: int = DEFAULT_MAX_ITER, seed: int = 0) -> PowerResult:
    """Largest eigenvalue of a symmetric positive semidefinite operator.

    Stops when an Aitken-type extrapolation of the remaining error in the
    Rayleigh quotient drops below ``tol * max(1, value)``. The Rayleigh quotients
    of power iterates of a PSD operator are nondecreasing, so successive
    differences are a usable error proxy.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    v = _unit_sphere(dim, seed)
    mu_prev = None
    d_prev = None
    mu = 0.0
    for k in range(1, max_iter + 1):
        w = gram(v)
        mu = float(v @ w)
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return PowerResult(0.0, k)
        v = w / nw
        if mu_prev is not None:
            d = abs(mu - mu_prev)
            scale = tol * max(1.0, abs(mu))
            if d == 0.0:
                return PowerResult(mu, k)
            if d_prev is not None and d_prev > 0.0:
                q = d / d_prev
                if q < 1.0 and d * q / (1.0 - q) <= scale and d <= scale:
                    return PowerResult(mu, k)
            d_prev = d
        mu_prev = mu
    raise SpectralConvergenceError(
        f"power iteration did not converge in {max_iter} iterations", mu, max_iter)


def operator_norm(M: LinearMap, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                  seed: int = 0, return_iters: bool = False):
    """Spectral norm of ``M`` by power iteration on ``M^* M``.

    ``tol`` bounds the error on the norm itself (relative once the norm exceeds 1).
    """
    if not M.has_adjoint:
        raise ValueError(f"operator_norm needs adjoint_apply on {M.name}")
    if M.in_dim <= M.out_dim:
        gram, dim = (lambda x: M.adjoint_apply(M.apply(x))), M.in_dim
    else:
        gram, dim = (lambda y: M.apply(M.adjoint_apply(y))), M.out_dim
    # error in sigma ~ error in sigma^2 / (2 sigma); ask for the squared quantity accordingly
    try:
        res = power_iteration(gram, dim, tol=tol, max_iter=max_iter, seed=seed)
    except SpectralConvergenceError as exc:
        est = math.sqrt(max(exc.estimate, 0.0))
        raise SpectralConvergenceError(str(exc), est, exc.iters) from None
    sigma = math.sqrt(max(res.value, 0.0))
    return (sigma, res.iters) if return_iters else sigma


def lambda_min_estimate(K: LinearMap, L: LinearMap, tol: float = DEFAULT_TOL,
                        max_iter: int = DEFAULT_MAX_ITER, dense_limit: int = DENSE_EIG_LIMIT,
                        seed: int = 0) -> float:
    """Smallest eigenvalue of the symmetric part of ``K L``.

    Equivalently ``inf <x, K L x>`` over the unit sphere. Dense symmetric
    eigensolve up to ``dense_limit`` unknowns, shifted power iteration above.
    """
    if L.out_dim != K.in_dim or K.out_dim != L.in_dim:
        raise DimensionError(f"K L is not square: K {K.shape}, L {L.shape}")
    n = L.in_dim
    if n <= dense_limit:
        P = materialize(K) @ materialize(L)
        return float(np.linalg.eigvalsh(0.5 * (P + P.T))[0])
    if not (K.has_adjoint and L.has_adjoint):
        raise ValueError("matrix-free lambda_min needs adjoint_apply on both K and L")

    def sym(x):
        return 0.5 * (K.apply(L.apply(x)) + L.adjoint_apply(K.adjoint_apply(x)))

    shift = operator_norm(K, tol, max_iter, seed) * operator_norm(L, tol, max_iter, seed) * (1 + 1e-6) + tol
    try:
        top = power_iteration(lambda x: shift * x - sym(x), n, tol=tol, max_iter=max_iter, seed=seed)
    except SpectralConvergenceError as exc:
        est = shift - exc.estimate
        raise SpectralConvergenceError(str(exc), est, exc.iters, bracket=(-shift, est)) from None
    return float(shift - top.value)


@dataclass(frozen=True, eq=False)
class MismatchFamily:
    """Surrogate adjoint ``K`` and its iteration-indexed perturbations ``K_n``.

    ``K_n = K + omega(n) * E_n`` where ``E_n y = u_n <v_n, y>`` with seeded unit
    vectors ``u_n, v_n``; ``||E_n|| = 1`` exactly, which certifies
    ``||K_n - K|| <= omega(n)``.
    """

    base: LinearMap
    schedule_kind: str = "constant"
    omega0: float = 0.0
    eta_bar: float = 0.0
    seed: int = 0
    omega_fn: Optional[Callable[[int], float]] = field(default=None, repr=False)

    def omega(self, n: int) -> float:
        if self.schedule_kind == "constant":
            return 0.0
        if self.schedule_kind == "geometric":
            return self.omega0 * self.eta_bar ** int(n)
        w = float(self.omega_fn(int(n)))
        if not (w >= 0.0 and math.isfinite(w)):
            raise ValueError(f"custom omega({n}) = {w} is not a nonnegative finite number")
        return w

    def direction(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Unit vectors ``(u_n, v_n)`` of the rank-one direction ``E_n``."""
        rng = np.random.default_rng([int(self.seed), int(n)])
        u = rng.standard_normal(self.base.out_dim)
        v = rng.standard_normal(self.base.in_dim)
        return u / np.linalg.norm(u), v / np.linalg.norm(v)

    def perturbations(self, n: int) -> LinearMap:
        w = self.omega(n)
        if w == 0.0:
            return self.base
        u, v = self.direction(n)
        K = self.base
        adj = None
        if K.has_adjoint:
            adj = lambda x: K.adjoint_apply(x) + (w * float(u @ x)) * v  # noqa: E731
        return LinearMap(K.in_dim, K.out_dim, lambda y: K.apply(y) + (w * float(v @ y)) * u, adj,
                         name=f"{K.name}_{n}")


def make_mismatch_family(K: LinearMap, kind: str = "constant", omega0: float = 0.0, eta_bar: float = 0.0,
                         seed: int = 0, omega_fn: Optional[Callable[[int], float]] = None) -> MismatchFamily:
    """Build a :class:`MismatchFamily`.

    kind : ``"constant"`` (K_n = K), ``"geometric"`` (omega_n = omega0 * eta_bar**n)
        or ``"summable_custom"`` (``omega_fn`` supplies a summable schedule; the
        caller vouches for summability).
    """
    if kind not in ("constant", "geometric", "summable_custom"):
        raise ValueError(f"unknown mismatch schedule {kind!r}")
    if not omega0 >= 0.0:
        raise ValueError("omega0 must be nonnegative")
    if kind == "geometric" and not (0.0 <= eta_bar < 1.0):
        raise ValueError(f"eta_bar must lie in [0, 1), got {eta_bar}")
    if kind == "summable_custom" and omega_fn is None:
        raise ValueError("summable_custom schedule needs omega_fn")
    return MismatchFamily(K, kind, float(omega0), float(eta_bar), int(seed), omega_fn)


@dataclass(frozen=True)
class SpectralEstimates:
    """Spectral quantities feeding the step-size rules.

    ``lambda_min`` is the smallest eigenvalue of sym(K L) and may be negative;
    ``lambda_min_matched`` the same for ``L^* L``.
    """

    norm_L: float
    norm_mismatch: float
    lambda_min: float
    tol: float
    iters_used: int
    norm_K: float = math.nan
    norm_KL: float = math.nan
    lambda_min_matched: float = math.nan


def estimate_spectra(L: LinearMap, K: LinearMap, tol: float = DEFAULT_TOL,
                     max_iter: int = DEFAULT_MAX_ITER, seed: int = 0) -> SpectralEstimates:
    """All norms and eigenvalue bounds needed to assemble a constants ledger."""
    Lstar = L.adjoint()
    iters = 0
    norm_L, it = operator_norm(L, tol, max_iter, seed, return_iters=True)
    iters += it
    norm_K, it = operator_norm(K, tol, max_iter, seed, return_iters=True)
    iters += it
    norm_KL, it = operator_norm(K @ L, tol, max_iter, seed, return_iters=True)
    iters += it
    norm_mis, it = operator_norm(Lstar - K, tol, max_iter, seed, return_iters=True)
    iters += it
    return SpectralEstimates(
        norm_L=norm_L,
        norm_mismatch=norm_mis,
        lambda_min=lambda_min_estimate(K, L, tol, max_iter, seed=seed),
        tol=tol,
        iters_used=iters,
        norm_K=norm_K,
        norm_KL=norm_KL,
        lambda_min_matched=lambda_min_estimate(Lstar, L, tol, max_iter, seed=seed),
    )
