"""Mismatched Forward-Backward-Half-Forward and Forward-Douglas-Rachford-Forward iterations."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .linops import DimensionError, LinearMap
from .operators import ProblemSpec, d_map
from .stepsize import ConstantsLedger, in_gamma_set

__all__ = [
    "SolverConfig",
    "TraceRecord",
    "IterateTrace",
    "InadmissibleStepError",
    "NonFiniteIterateError",
    "mmfbhf_step",
    "mmfdrf_step",
    "run",
    "reference_point",
]

ALGORITHMS = ("mmfbhf", "mmfdrf")


class InadmissibleStepError(ValueError):
    pass


class NonFiniteIterateError(FloatingPointError):
    """Carries the trace up to the last finite iterate in ``trace``."""

    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


def _check_gamma_rho(gamma, rho):
    if not gamma > 0:
        raise InadmissibleStepError(f"step size must be positive, got {gamma}")
    if gamma * rho <= -1.0:
        raise InadmissibleStepError(f"gamma*rho = {gamma * rho:.4g} <= -1: resolvent not single-valued")


def mmfbhf_step(z: np.ndarray, gamma: float, K_n: LinearMap, spec: ProblemSpec):
    """One MMFBHF step; returns ``(z_next, x)``."""
    _check_gamma_rho(gamma, spec.A.rho)
    if z.shape != (spec.dim,):
        raise DimensionError(f"iterate has shape {z.shape}, expected ({spec.dim},)")
    u = d_map(K_n, spec, z)
    y = z - gamma * (spec.C.eval(z) + u)
    x = spec.A.resolvent(gamma, y)
    z_next = x + gamma * (u - d_map(K_n, spec, x))
    return z_next, x


def mmfdrf_step(z: np.ndarray, gamma: float, K_n: LinearMap, spec: ProblemSpec):
    """One MMFDRF step; returns ``(z_next, x, y)`` with ``x = J_{gC} z``."""
    if spec.C.resolvent is None:
        raise ValueError("MMFDRF needs the resolvent of C")
    _check_gamma_rho(gamma, spec.A.rho)
    if z.shape != (spec.dim,):
        raise DimensionError(f"iterate has shape {z.shape}, expected ({spec.dim},)")
    x = spec.C.resolvent(gamma, z)
    w = d_map(K_n, spec, x)
    y = spec.A.resolvent(gamma, 2.0 * x - z - gamma * w)
    z_next = z + y - x - gamma * (d_map(K_n, spec, y) - w)
    return z_next, x, y


@dataclass
class SolverConfig:
    algorithm: str
    gamma: float
    epsilon: float = 0.0
    max_iter: int = 1000
    rel_residual_tol: float = 0.0
    record_every: int = 1
    reference: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.rel_residual_tol < 0:
            raise ValueError("rel_residual_tol must be >= 0")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")

    @classmethod
    def from_ledger(cls, ledger: ConstantsLedger, algorithm: str, **kw) -> "SolverConfig":
        if algorithm == "mmfbhf":
            return cls(algorithm, ledger.gamma_fbhf, epsilon=ledger.epsilon_fbhf, **kw)
        if ledger.gamma_fdrf is None:
            raise InadmissibleStepError("ledger has no MMFDRF step (kappa_K = 0)")
        return cls(algorithm, ledger.gamma_fdrf, **kw)

    def validate(self, ledger: ConstantsLedger, rtol: float = 1e-12):
        """Check the step against the admissible set of the chosen algorithm."""
        g = self.gamma
        _check_gamma_rho(g, ledger.rho)
        if self.algorithm == "mmfbhf":
            eps = self.epsilon
            if not (0 < eps < ledger.chi / 2):
                raise InadmissibleStepError(f"epsilon={eps} must lie in (0, chi/2), chi={ledger.chi}")
            slack = rtol * ledger.chi
            if not (eps - slack <= g <= ledger.chi - eps + slack):
                raise InadmissibleStepError(
                    f"gamma={g} outside [eps, chi - eps] = [{eps}, {ledger.chi - eps}]")
        elif ledger.kappa_K > 0 and not in_gamma_set(g, ledger.beta, ledger.kappa_K, ledger.rho):
            raise InadmissibleStepError(f"gamma={g} outside the MMFDRF admissible set")


@dataclass
class TraceRecord:
    n: int
    z: np.ndarray
    x: np.ndarray
    residual: float
    wall_ns: int
    dist_to_ref: Optional[float] = None


@dataclass
class IterateTrace:
    """Run history.

    ``records`` keeps full iterates every ``record_every`` steps plus the last
    one; the per-step arrays keep every step. Step ``n`` maps ``z_n`` to
    ``z_{n+1}``; its record stores ``z_n`` and ``x_n``.
    """

    algorithm: str
    gamma: float
    records: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    wall_ns: list = field(default_factory=list)
    dist_to_ref: list = field(default_factory=list)
    x_dist_to_ref: list = field(default_factory=list)
    omegas: list = field(default_factory=list)
    z_final: Optional[np.ndarray] = None
    x_final: Optional[np.ndarray] = None
    converged: bool = False

    @property
    def n_iter(self) -> int:
        return len(self.residuals)

    def distances(self) -> np.ndarray:
        """``||z_n - z*||`` for ``n = 0..N`` (``N + 1`` entries), empty without reference."""
        return np.asarray(self.dist_to_ref, dtype=float)


def reference_point(spec: ProblemSpec, algorithm: str, gamma: float, x_ref: np.ndarray) -> np.ndarray:
    """Fixed point of the governing iteration corresponding to solution ``x_ref``.

    For MMFBHF this is ``x_ref`` itself; for MMFDRF it is ``x_ref + gamma C x_ref``
    since ``x* = J_{gC} z*``.
    """
    x_ref = np.asarray(x_ref, dtype=float)
    if algorithm == "mmfbhf":
        return x_ref.copy()
    return x_ref + gamma * spec.C.eval(x_ref)


def run(spec: ProblemSpec, config: SolverConfig, ledger: Optional[ConstantsLedger], z0: np.ndarray,
        callback: Optional[Callable[[TraceRecord], None]] = None) -> IterateTrace:
    """Iterate until the relative residual drops below tolerance or ``max_iter``.

    ``callback(record)`` fires on each recorded step with the new :class:`TraceRecord`.
    """
    if ledger is not None:
        config.validate(ledger)
    else:
        _check_gamma_rho(config.gamma, spec.A.rho)
    gamma = config.gamma
    z = np.array(z0, dtype=float)
    if z.shape != (spec.dim,):
        raise DimensionError(f"z0 has shape {z.shape}, expected ({spec.dim},)")
    fbhf = config.algorithm == "mmfbhf"
    trace = IterateTrace(config.algorithm, gamma)
    z_ref = x_ref = None
    if config.reference is not None:
        x_ref = np.asarray(config.reference, dtype=float)
        z_ref = reference_point(spec, config.algorithm, gamma, x_ref)
        trace.dist_to_ref.append(float(np.linalg.norm(z - z_ref)))

    t0 = time.perf_counter_ns()
    x = z
    for n in range(config.max_iter):
        K_n = spec.mismatch.perturbations(n)
        if fbhf:
            z_next, x = mmfbhf_step(z, gamma, K_n, spec)
        else:
            z_next, x, _ = mmfdrf_step(z, gamma, K_n, spec)
        elapsed = time.perf_counter_ns() - t0
        if not np.all(np.isfinite(z_next)):
            trace.z_final, trace.x_final = z, x
            raise NonFiniteIterateError(f"non-finite iterate at step {n}", trace)
        res = float(np.linalg.norm(z_next - z)) / max(float(np.linalg.norm(z)), 1.0)
        trace.residuals.append(res)
        trace.wall_ns.append(elapsed)
        trace.omegas.append(spec.mismatch.omega(n))
        if z_ref is not None:
            trace.dist_to_ref.append(float(np.linalg.norm(z_next - z_ref)))
            trace.x_dist_to_ref.append(float(np.linalg.norm(x - x_ref)))
        stop = res < config.rel_residual_tol or res == 0.0
        done = stop or n == config.max_iter - 1
        if n % config.record_every == 0 or done:
            rec = TraceRecord(n, z, x, res, elapsed,
                              None if z_ref is None else trace.dist_to_ref[n])
            trace.records.append(rec)
            if callback is not None:
                callback(rec)
        z = z_next
        if stop:
            trace.converged = True
            break
    trace.z_final = z
    trace.x_final = x if fbhf else spec.C.resolvent(gamma, z)
    return trace
