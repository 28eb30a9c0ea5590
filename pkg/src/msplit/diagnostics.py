"""Convergence monitors, bound checks and image-quality metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .linops import MismatchFamily, SpectralEstimates
from .operators import ProblemSpec, d_map, solution_gap_bound

__all__ = [
    "FejerReport",
    "RateReport",
    "GapReport",
    "QualityMetrics",
    "SNR_CAP_DB",
    "fejer_monitor",
    "rate_estimate",
    "gap_bound_report",
    "prop43i_check",
    "quality",
    "input_snr",
]

SNR_CAP_DB = 300.0
RATE_SLACK = 0.02
MIN_RATE_POINTS = 8
# distances below this fraction of d_0 are rounding noise
RATE_FLOOR = 1e-12


@dataclass(frozen=True)
class FejerReport:
    """Distance-increase statistics of ``d_n`` against the mismatch budget ``omega_n``.

    ``fitted_C`` is the smallest ``C`` with ``d_{n+1} - d_n <= C omega_n`` for
    every ``n``; it is ``inf`` if some increase happens where ``omega_n = 0``.
    """

    total_increase: float
    max_relative_increase: float
    fitted_C: float
    omega_sum: float
    n_increases: int
    violation: bool

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                for k, v in asdict(self).items()}


def fejer_monitor(distances: Sequence[float], omegas: Sequence[float],
                  rel_tol: float = 1e-10) -> FejerReport:
    """Quasi-Fejér check of a distance sequence.

    ``omegas[n]`` is the mismatch size used to go from ``d_n`` to ``d_{n+1}``;
    ``omegas`` may carry one entry fewer than ``distances``. Increases below
    ``rel_tol * max(d)`` are treated as rounding.
    """
    d = np.asarray(distances, dtype=float)
    w = np.asarray(omegas, dtype=float)
    if d.size < 2:
        raise ValueError("fejer_monitor needs at least two distances")
    if w.size == d.size:
        w = w[:-1]
    if w.size != d.size - 1:
        raise ValueError(f"omegas has {w.size} entries for {d.size} distances")
    scale = max(float(np.max(np.abs(d))), 1e-300)
    inc = np.diff(d)
    real = inc > rel_tol * scale
    pos = np.where(real, inc, 0.0)
    if np.any(real & (w <= 0)):
        fitted = math.inf
    else:
        mask = real & (w > 0)
        fitted = float(np.max(pos[mask] / w[mask])) if np.any(mask) else 0.0
    constant = bool(np.all(w == 0))
    return FejerReport(
        total_increase=float(np.sum(pos)),
        max_relative_increase=float(np.max(inc) / scale) if inc.size else 0.0,
        fitted_C=fitted,
        omega_sum=float(np.sum(w)),
        n_increases=int(np.count_nonzero(real)),
        violation=bool(constant and np.any(real)) or not math.isfinite(fitted),
    )


@dataclass(frozen=True)
class RateReport:
    fitted_ratio: float
    theoretical_theta: float
    eta_bar: float
    satisfied: bool
    slack: float = RATE_SLACK
    n_fit: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def rate_estimate(distances: Sequence[float], theta: float, eta_bar: float,
                  slack: float = RATE_SLACK, stride: int = 1, floor: float = RATE_FLOOR) -> RateReport:
    """Asymptotic per-step linear ratio of ``d_n`` fitted on the last quartile.

    ``stride`` is the number of iterations between consecutive entries.
    Only the leading run of entries above ``floor * d_0`` is used; below that
    the sequence sits at rounding level and carries no rate information. The
    fit is an ordinary least-squares slope of ``log d_n`` against ``n``.
    """
    d = np.asarray(distances, dtype=float)
    if d.size and d[0] > 0:
        below = np.flatnonzero(~(d > floor * d[0]))
    else:
        below = np.flatnonzero(~(d > 0))
    if below.size:
        d = d[: below[0]]
    if d.size < MIN_RATE_POINTS:
        raise ValueError(f"rate_estimate needs at least {MIN_RATE_POINTS} positive distances, got {d.size}")
    start = (3 * d.size) // 4
    start = min(start, d.size - MIN_RATE_POINTS // 2)
    seg = np.log(d[start:])
    n = np.arange(seg.size, dtype=float)
    slope = np.polyfit(n, seg, 1)[0]
    ratio = float(math.exp(slope / stride))
    return RateReport(ratio, float(theta), float(eta_bar),
                      ratio <= max(theta, eta_bar) + slack, slack, int(seg.size))


@dataclass(frozen=True)
class GapReport:
    actual_gap: float
    bound: float
    slack: float
    satisfied: bool

    def to_dict(self) -> dict:
        return asdict(self)


def gap_bound_report(z_mismatched: np.ndarray, z_matched: np.ndarray, spec: ProblemSpec,
                     estimates: SpectralEstimates, tol: float = 1e-8) -> GapReport:
    """Distance between the mismatched and matched solutions against its a priori bound."""
    z = np.asarray(z_mismatched, dtype=float)
    bound = solution_gap_bound(z, spec, estimates)
    gap = float(np.linalg.norm(z - np.asarray(z_matched, dtype=float)))
    return GapReport(gap, bound, bound - gap, bound - gap >= -tol)


def prop43i_check(spec: ProblemSpec, family: MismatchFamily, theta1: float, samples: int,
                  seed: int = 0, max_index: int = 50, scale: Optional[float] = None) -> float:
    """Worst relative slack of the per-iteration mismatch bound.

    On random ``(z, z*, n)`` compares ``lhs = ||D_{K_n} z - D_K z||`` with
    ``rhs = omega_n (theta1 ||z - z*|| + ||a(L z* - c) + B L z*||)`` and returns
    ``min (rhs - lhs) / max(rhs, lhs)``. The map ``(aId + B)L`` is affine when
    ``c != 0``, so the offset term carries ``c``. Returns 0 when every ``rhs`` is
    zero and every ``lhs`` is zero.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    if scale is None:
        scale = max(1.0, float(np.linalg.norm(spec.c)) / math.sqrt(spec.dim))
    worst = math.inf
    for _ in range(samples):
        n = int(rng.integers(0, max_index + 1))
        z = scale * rng.standard_normal(spec.dim)
        zs = scale * rng.standard_normal(spec.dim)
        Kn = family.perturbations(n)
        lhs = float(np.linalg.norm(d_map(Kn, spec, z) - d_map(family.base, spec, z)))
        rhs = family.omega(n) * (theta1 * float(np.linalg.norm(z - zs))
                                 + float(np.linalg.norm(spec.data_residual(zs))))
        denom = max(rhs, lhs, 1e-300)
        worst = min(worst, (rhs - lhs) / denom if (rhs or lhs) else 0.0)
    return worst


@dataclass(frozen=True)
class QualityMetrics:
    snr_db: float
    nmse: float
    mae: float
    roi_snr_db: Optional[float] = None
    roi_nmse: Optional[float] = None
    roi_mae: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _snr_from_nmse(nmse: float) -> float:
    if nmse <= 0:
        return SNR_CAP_DB
    return min(-10.0 * math.log10(nmse), SNR_CAP_DB) + 0.0


def _metrics(x_hat, x_bar):
    ref = float(x_bar @ x_bar)
    if ref == 0:
        raise ValueError("reference image has zero norm")
    e = x_bar - x_hat
    nmse = float(e @ e) / ref
    mae = float(np.max(np.abs(e))) if e.size else 0.0
    return _snr_from_nmse(nmse), nmse, mae


def quality(x_hat: np.ndarray, x_bar: np.ndarray, roi_mask: Optional[np.ndarray] = None) -> QualityMetrics:
    """NMSE, infinity-norm error and reconstruction SNR ``-10 log10 NMSE`` (capped at 300 dB)."""
    x_hat = np.asarray(x_hat, dtype=float).ravel()
    x_bar = np.asarray(x_bar, dtype=float).ravel()
    if x_hat.shape != x_bar.shape:
        raise ValueError(f"length mismatch: {x_hat.size} vs {x_bar.size}")
    snr, nmse, mae = _metrics(x_hat, x_bar)
    if roi_mask is None:
        return QualityMetrics(snr, nmse, mae)
    m = np.asarray(roi_mask, dtype=bool).ravel()
    if m.shape != x_bar.shape:
        raise ValueError("roi_mask length mismatch")
    rs, rn, rm = _metrics(x_hat[m], x_bar[m])
    return QualityMetrics(snr, nmse, mae, rs, rn, rm)


def input_snr(Lx_bar: np.ndarray, c: np.ndarray) -> float:
    """Measurement SNR ``20 log10(||L x_bar|| / ||L x_bar - c||)``."""
    Lx_bar = np.asarray(Lx_bar, dtype=float)
    noise = float(np.linalg.norm(Lx_bar - np.asarray(c, dtype=float)))
    if noise == 0:
        return SNR_CAP_DB
    return 20.0 * math.log10(float(np.linalg.norm(Lx_bar)) / noise)
