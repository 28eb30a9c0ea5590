"""Step-size rules and derived constants for MMFBHF and MMFDRF."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

from .linops import SpectralEstimates
from .operators import ProblemSpec, lipschitz_bounds, rho_hat

__all__ = [
    "ConstantsLedger",
    "chi",
    "gamma_fbhf",
    "fbhf_epsilon",
    "gamma_hat_fdrf",
    "gamma_fdrf",
    "in_gamma_set",
    "epsilons_fdrf",
    "theta1",
    "contraction_factors",
    "assemble_ledger",
    "FBHF_SAFETY",
    "FDRF_SAFETY",
]

# 3.99/4 reproduces the constant step 3.99 beta / (1 + sqrt(1 + 16 beta^2 kappa^2))
FBHF_SAFETY = 0.9975
FDRF_SAFETY = 0.999
BISECTION_TOL = 1e-12


def chi(beta: float, kappa: float, rho: float = 0.0) -> float:
    """Upper end of the MMFBHF step interval."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    if not kappa >= 0:
        raise ValueError("kappa must be nonnegative")
    c0 = 4.0 * beta / (1.0 + math.sqrt(1.0 + 16.0 * beta ** 2 * kappa ** 2))
    if rho < 0:
        return min(c0, -1.0 / rho)
    return c0


def gamma_fbhf(beta: float, kappa: float, rho: float = 0.0,
               safety: float = FBHF_SAFETY) -> tuple[float, float]:
    """Constant MMFBHF step ``safety * chi`` and the band half-width ``epsilon``.

    ``epsilon = min(gamma, chi - gamma) / 2`` so that ``eps <= gamma <= chi - eps``.
    """
    if not 0.0 < safety < 1.0:
        raise ValueError(f"safety must lie in (0, 1), got {safety}")
    x = chi(beta, kappa, rho)
    g = safety * x
    return g, fbhf_epsilon(g, x)


def fbhf_epsilon(gamma: float, chi_value: float) -> float:
    """Band half-width ``min(gamma, chi - gamma) / 2`` for a given step."""
    return 0.5 * min(gamma, chi_value - gamma)


def _gamma_set_lhs(gamma, beta, kappa):
    return kappa ** 2 * gamma ** 2 * (1.0 + gamma / (2.0 * beta))


def in_gamma_set(gamma: float, beta: float, kappa: float, rho: float = 0.0) -> bool:
    """Membership in the MMFDRF admissible set."""
    return gamma > 0 and _gamma_set_lhs(gamma, beta, kappa) < 1.0 and rho * gamma > -1.0


def gamma_hat_fdrf(beta: float, kappa: float) -> float:
    """Positive root of ``kappa^2 g^2 (1 + g/(2 beta)) = 1`` by bisection.

    The left side is increasing in ``g`` and exceeds 1 at ``g = 1/kappa``, so
    ``[0, 1/kappa]`` always brackets the root.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    lo, hi = 0.0, 1.0 / kappa
    while hi - lo > BISECTION_TOL * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if _gamma_set_lhs(mid, beta, kappa) < 1.0:
            lo = mid
        else:
            hi = mid
    return lo


def gamma_fdrf(beta: float, kappa: float, rho: float = 0.0, safety: float = FDRF_SAFETY) -> float:
    """Constant MMFDRF step ``safety * gamma_hat``, clamped so that ``rho gamma > -1``."""
    if not 0.0 < safety < 1.0:
        raise ValueError(f"safety must lie in (0, 1), got {safety}")
    g = safety * gamma_hat_fdrf(beta, kappa)
    if rho < 0:
        g = min(g, safety * (-1.0 / rho))
    if not (g > 0 and in_gamma_set(g, beta, kappa, rho)):
        raise ValueError(f"no admissible MMFDRF step for beta={beta}, kappa={kappa}, rho={rho}")
    return g


def epsilons_fdrf(gamma: float, beta: float, kappa: float) -> tuple[float, float]:
    """``(eps1, eps2)`` with ``eps2`` at half of its admissible supremum."""
    kg2 = kappa ** 2 * gamma ** 2
    if not (gamma > 0 and _gamma_set_lhs(gamma, beta, kappa) < 1.0):
        raise ValueError(f"gamma={gamma} is outside the admissible set")
    sup = (1.0 - kg2 * (1.0 + gamma / (2.0 * beta))) / (1.0 - kg2)
    eps2 = 0.5 * sup
    eps1 = 1.0 - kg2 * (1.0 + gamma / (2.0 * beta * (1.0 - eps2)))
    return eps1, eps2


def theta1(alpha: float, zeta: float, norm_L: float) -> float:
    if min(alpha, zeta, norm_L) < 0:
        raise ValueError("theta1 inputs must be nonnegative")
    return (alpha + zeta) * norm_L


def contraction_factors(kappa: float, epsilon: float, rho_hat: float, beta: float,
                        gamma: float, eps1: float, eps2: float) -> tuple[float, float]:
    """Per-step contraction factors ``(theta_fbhf, theta_fdrf)`` for ``rho_hat > 0``."""
    if not rho_hat > 0:
        raise ValueError("linear-rate factors need rho_hat > 0")
    t_fbhf = math.sqrt(1.0 - epsilon * min(kappa ** 2 * epsilon / 2.0, rho_hat))
    t_fdrf = math.sqrt(1.0 - min(2.0 * beta * eps2 / gamma, eps1, 2.0 * gamma * rho_hat) / 3.0)
    return t_fbhf, t_fdrf


@dataclass(frozen=True)
class ConstantsLedger:
    """Every scalar derived from an instance; serialises as a flat JSON object."""

    alpha: float
    beta: float
    zeta: float
    rho: float
    lambda_min: float
    kappa_K: float
    zeta_tilde_mismatch: float
    rho_hat: float
    chi: float
    gamma_fbhf: float
    gamma_hat: Optional[float]
    gamma_fdrf: Optional[float]
    eps1: Optional[float]
    eps2: Optional[float]
    theta1: float
    epsilon_fbhf: float = math.nan
    norm_L: float = math.nan
    norm_K: float = math.nan
    norm_KL: float = math.nan
    norm_mismatch: float = math.nan
    lambda_min_matched: float = math.nan
    theta_fbhf: Optional[float] = None
    theta_fdrf: Optional[float] = None

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            return v
        return {k: clean(v) for k, v in dataclasses.asdict(self).items()}

    @property
    def mismatch_severity(self) -> float:
        return self.norm_mismatch / self.norm_L if self.norm_L else math.nan


def assemble_ledger(spec: ProblemSpec, est: SpectralEstimates, safety_fbhf: float = FBHF_SAFETY,
                    safety_fdrf: float = FDRF_SAFETY) -> ConstantsLedger:
    """Derive every constant for ``spec`` from its spectral estimates."""
    norm_K = est.norm_K if math.isfinite(est.norm_K) else None
    norm_KL = est.norm_KL if math.isfinite(est.norm_KL) else None
    kappa, _ = lipschitz_bounds(spec.K, spec, est, norm_M=norm_K, norm_ML=norm_KL)
    zt_mis = spec.B.zeta * est.norm_mismatch * est.norm_L
    rh = rho_hat(spec, est, zt_mis)
    beta, rho = spec.C.beta, spec.A.rho
    g_fb, eps = gamma_fbhf(beta, kappa, rho, safety_fbhf)
    g_hat = g_dr = e1 = e2 = None
    if kappa > 0:
        g_hat = gamma_hat_fdrf(beta, kappa)
        g_dr = gamma_fdrf(beta, kappa, rho, safety_fdrf)
        e1, e2 = epsilons_fdrf(g_dr, beta, kappa)
    t_fb = t_dr = None
    if rh > 0 and g_dr is not None:
        t_fb, t_dr = contraction_factors(kappa, eps, rh, beta, g_dr, e1, e2)
    elif rh > 0:
        t_fb = math.sqrt(1.0 - eps * min(kappa ** 2 * eps / 2.0, rh))
    return ConstantsLedger(
        alpha=spec.alpha, beta=beta, zeta=spec.B.zeta, rho=rho,
        lambda_min=est.lambda_min, kappa_K=kappa, zeta_tilde_mismatch=zt_mis, rho_hat=rh,
        chi=chi(beta, kappa, rho), gamma_fbhf=g_fb, gamma_hat=g_hat, gamma_fdrf=g_dr,
        eps1=e1, eps2=e2, theta1=theta1(spec.alpha, spec.B.zeta, est.norm_L),
        epsilon_fbhf=eps, norm_L=est.norm_L, norm_K=est.norm_K, norm_KL=est.norm_KL,
        norm_mismatch=est.norm_mismatch, lambda_min_matched=est.lambda_min_matched,
        theta_fbhf=t_fb, theta_fdrf=t_dr,
    )
