"""Desk-scale parallel-beam tomography instance with a mismatched backprojector.

Image pixels have unit size and the image square is centred at the origin.
The ray of angle ``theta`` and detector offset ``s`` is the line
``{p : p . (cos theta, sin theta) = s}``. ``L`` weights each pixel by the
length of its intersection with the ray; ``K`` is the transpose of a strip
(pixel-area) projector of the same geometry, so ``K != L^T``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .linops import LinearMap, MismatchFamily, estimate_spectra, from_matrix, make_mismatch_family
from .operators import CocoerciveBlock, LipschitzBlock, ProblemSpec, ResolventBlock
from .proxlib import (AnscombeFidelity, BoxRidge, HuberTransform, anscombe_grad, anscombe_lipschitz,
                      grad_g, haar2_map, prox_box_ridge, prox_g)
from .stepsize import ConstantsLedger, assemble_ledger

__all__ = [
    "Geometry",
    "Sinogram",
    "CTPenalties",
    "fov_mask",
    "make_phantom",
    "line_intersections",
    "ray_driven_projector",
    "strip_projector_matrix",
    "mismatched_backprojector",
    "synthesize_data",
    "build_ct_problem",
    "export_array",
    "load_array",
]

_AXIS_EPS = 1e-12


@dataclass(frozen=True)
class Geometry:
    n_pixels_side: int = 32
    n_angles: int = 24
    n_bins: int = 48
    bin_upsampling: float = 1.0

    def __post_init__(self):
        for name in ("n_pixels_side", "n_angles", "n_bins"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.bin_upsampling > 0:
            raise ValueError("bin_upsampling must be positive")

    @property
    def n_pixels(self) -> int:
        return self.n_pixels_side ** 2

    @property
    def n_rays(self) -> int:
        return self.n_angles * self.n_bins

    @property
    def bin_width(self) -> float:
        return 1.0 / self.bin_upsampling

    def angles(self) -> np.ndarray:
        """``n_angles`` angles evenly covering ``[0, pi)``."""
        return np.arange(self.n_angles) * (math.pi / self.n_angles)

    def bin_centers(self) -> np.ndarray:
        return (np.arange(self.n_bins) - 0.5 * (self.n_bins - 1)) * self.bin_width

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Row-major ``(x, y)`` centres; pixel ``(i, j)`` has flat index ``i * n + j``."""
        n = self.n_pixels_side
        c = np.arange(n) - 0.5 * (n - 1)
        yy, xx = np.meshgrid(c, c, indexing="ij")
        return xx.ravel(), yy.ravel()


@dataclass(frozen=True, eq=False)
class Sinogram:
    values: np.ndarray
    geometry: Optional[Geometry]
    sigma: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(v)):
            raise ValueError("sinogram has non-finite entries")
        if self.geometry is not None and v.shape != (self.geometry.n_rays,):
            raise ValueError(f"sinogram length {v.size} != {self.geometry.n_rays} rays")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class CTPenalties:
    """Model weights; ``rho_policy`` is ``"recipe"`` or an explicit float."""

    weight: float = 150.0
    delta: float = 5.0
    alpha: float = 0.1
    x_max: float = 900.0
    rho_policy: object = "recipe"
    rho_margin: float = 1e-3
    haar_levels: int = 2


def fov_mask(geometry: Geometry) -> np.ndarray:
    """Pixels whose centre lies in the circle inscribed in the image square."""
    x, y = geometry.pixel_centers()
    r = 0.5 * geometry.n_pixels_side
    return x ** 2 + y ** 2 <= r ** 2


def make_phantom(geometry: Geometry, kind: str = "disks", seed: int = 0, x_max: float = 900.0) -> np.ndarray:
    """Piecewise-constant test image with values in ``[0, x_max]``, zero outside the field of view."""
    x, y = geometry.pixel_centers()
    r = 0.5 * geometry.n_pixels_side
    rng = np.random.default_rng(seed)
    img = np.zeros(geometry.n_pixels)
    if kind == "disks":
        img[x ** 2 + y ** 2 <= (0.85 * r) ** 2] = 0.35 * x_max
        for _ in range(6):
            rad = rng.uniform(0.08, 0.25) * r
            ang = rng.uniform(0.0, 2.0 * math.pi)
            dist = rng.uniform(0.0, 0.85 * r - rad)
            cx, cy = dist * math.cos(ang), dist * math.sin(ang)
            img[(x - cx) ** 2 + (y - cy) ** 2 <= rad ** 2] = rng.uniform(0.1, 1.0) * x_max
    elif kind == "checker":
        cell = max(1, geometry.n_pixels_side // 8)
        n = geometry.n_pixels_side
        i, j = np.divmod(np.arange(geometry.n_pixels), n)
        lo, hi = rng.uniform(0.1, 0.4), rng.uniform(0.6, 1.0)
        img = np.where(((i // cell) + (j // cell)) % 2 == 0, lo, hi) * x_max
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    img[~fov_mask(geometry)] = 0.0
    return img


def line_intersections(geometry: Geometry, theta: float, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Flat pixel indices and intersection lengths of one ray (Siddon traversal)."""
    n = geometry.n_pixels_side
    h = 0.5 * n
    c, si = math.cos(theta), math.sin(theta)
    p0 = np.array([s * c, s * si])
    d = np.array([-si, c])
    t_lo, t_hi = -math.inf, math.inf
    crossings = []
    for k in range(2):
        if abs(d[k]) < _AXIS_EPS:
            if not -h <= p0[k] < h:
                return np.empty(0, dtype=np.int64), np.empty(0)
            continue
        ta, tb = (-h - p0[k]) / d[k], (h - p0[k]) / d[k]
        t_lo, t_hi = max(t_lo, min(ta, tb)), min(t_hi, max(ta, tb))
        crossings.append((np.arange(-h, h + 1.0) - p0[k]) / d[k])
    if not t_hi > t_lo:
        return np.empty(0, dtype=np.int64), np.empty(0)
    t = np.concatenate(crossings + [np.array([t_lo, t_hi])])
    t = np.unique(t[(t >= t_lo) & (t <= t_hi)])
    seg = np.diff(t)
    keep = seg > 1e-12
    mid = 0.5 * (t[:-1] + t[1:])[keep]
    px = p0[0] + mid * d[0]
    py = p0[1] + mid * d[1]
    j = np.clip(np.floor(px + h).astype(np.int64), 0, n - 1)
    i = np.clip(np.floor(py + h).astype(np.int64), 0, n - 1)
    return i * n + j, seg[keep]


def ray_driven_projector(geometry: Geometry) -> LinearMap:
    """Line-length projector ``L`` with its exact sparse transpose."""
    rows, cols, vals = [], [], []
    s_all = geometry.bin_centers()
    for a, theta in enumerate(geometry.angles()):
        for b, s in enumerate(s_all):
            idx, w = line_intersections(geometry, theta, s)
            rows.append(np.full(idx.size, a * geometry.n_bins + b))
            cols.append(idx)
            vals.append(w)
    M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(geometry.n_rays, geometry.n_pixels))
    M.sum_duplicates()
    return from_matrix(M, name="L")


def _ramp2(t):
    return np.square(np.maximum(t, 0.0))


def _trapezoid_cdf(t, a, b):
    """CDF at ``t`` of ``U1 + U2`` with ``U1 ~ U[0, a]``, ``U2 ~ U[0, b]``."""
    if min(a, b) < _AXIS_EPS:
        w = max(a, b)
        return np.clip(t / w, 0.0, 1.0)
    return (_ramp2(t) - _ramp2(t - a) - _ramp2(t - b) + _ramp2(t - a - b)) / (2.0 * a * b)


def strip_projector_matrix(geometry: Geometry) -> sp.csr_matrix:
    """Strip projector: area of pixel inside each detector strip divided by the strip width.

    Uses the distribution of ``p . n`` for ``p`` uniform on a unit pixel, which is
    the trapezoid obtained by convolving two boxes of widths ``|cos|`` and ``|sin|``.
    """
    xc, yc = geometry.pixel_centers()
    s = geometry.bin_centers()
    w = geometry.bin_width
    rows, cols, vals = [], [], []
    for k, theta in enumerate(geometry.angles()):
        c, si = math.cos(theta), math.sin(theta)
        a, b = abs(c), abs(si)
        lo = xc * c + yc * si - 0.5 * (a + b)
        hi_edge = s[None, :] + 0.5 * w - lo[:, None]
        lo_edge = s[None, :] - 0.5 * w - lo[:, None]
        wts = (_trapezoid_cdf(hi_edge, a, b) - _trapezoid_cdf(lo_edge, a, b)) / w
        pix, bins = np.nonzero(wts > 1e-14)
        rows.append(k * geometry.n_bins + bins)
        cols.append(pix)
        vals.append(wts[pix, bins])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(geometry.n_rays, geometry.n_pixels))


def mismatched_backprojector(geometry: Geometry) -> LinearMap:
    """``K``: transpose of the strip projector, a backprojector ``sinogram -> image``."""
    return from_matrix(strip_projector_matrix(geometry).T.tocsr(), name="K")


def synthesize_data(L: LinearMap, x_bar: np.ndarray, sigma: float, seed: int = 0,
                    geometry: Optional[Geometry] = None) -> Sinogram:
    """Poisson counts of mean ``L x_bar`` plus N(0, sigma^2), cropped at ``-3/8 - sigma^2``."""
    if not sigma >= 0:
        raise ValueError("sigma must be nonnegative")
    mean = L(np.asarray(x_bar, dtype=float))
    # rounding in L x can leave tiny negatives for nonnegative images
    tiny = 1e-12 * max(1.0, float(np.max(np.abs(mean), initial=0.0)))
    if np.any(mean < -tiny):
        raise ValueError("Poisson mean L x_bar has negative entries")
    rng = np.random.default_rng(seed)
    counts = rng.poisson(np.maximum(mean, 0.0)).astype(float)
    noise = sigma * rng.standard_normal(mean.shape) if sigma > 0 else np.zeros_like(mean)
    c = np.maximum(counts + noise, -0.375 - sigma ** 2)
    return Sinogram(c, geometry, float(sigma))


def build_ct_problem(geometry: Geometry, penalties: CTPenalties, data: Sinogram,
                     mismatch: Optional[dict] = None, spectral_tol: float = 1e-10,
                     seed: int = 0) -> tuple[ProblemSpec, ConstantsLedger]:
    """Assemble ``0 in d f(x) + grad g(x) + a K(Lx - c) + K grad h(Lx)``.

    ``mismatch`` holds optional ``kind``, ``omega0``, ``eta_bar``, ``seed`` for an
    iteration-dependent perturbation of ``K``.
    """
    if data.geometry is not None and data.geometry != geometry:
        raise ValueError("sinogram geometry differs from the requested geometry")
    if data.values.shape != (geometry.n_rays,):
        raise ValueError(f"sinogram length {data.values.size} != {geometry.n_rays}")
    L = ray_driven_projector(geometry)
    K = mismatched_backprojector(geometry)
    est = estimate_spectra(L, K, tol=spectral_tol, seed=seed)

    fid = AnscombeFidelity(data.values, data.sigma)
    zeta = anscombe_lipschitz(fid)
    p = penalties
    if p.rho_policy == "recipe":
        rho = -p.alpha * est.lambda_min + zeta * est.norm_mismatch * est.norm_L + p.rho_margin
    else:
        rho = float(p.rho_policy)

    box = BoxRidge(p.x_max, rho)
    huber = HuberTransform(p.delta, haar2_map(geometry.n_pixels_side, p.haar_levels), p.weight)
    A = ResolventBlock(rho, lambda gamma, y: prox_box_ridge(box, gamma, y))
    C = CocoerciveBlock(huber.beta, lambda x: grad_g(huber, x), lambda gamma, y: prox_g(huber, gamma, y))
    B = LipschitzBlock(zeta, lambda y: anscombe_grad(fid, y))
    mm = dict(mismatch or {})
    family: MismatchFamily = make_mismatch_family(K, mm.get("kind", "constant"), mm.get("omega0", 0.0),
                                                  mm.get("eta_bar", 0.0), mm.get("seed", seed))
    spec = ProblemSpec(A, C, B, L, family, data.values, p.alpha)
    ledger = assemble_ledger(spec, est)
    if not ledger.rho_hat > 0:
        raise ValueError(f"assembled rho_hat = {ledger.rho_hat:.3g} <= 0")
    return spec, ledger


def export_array(stem, values: np.ndarray, shape: tuple, meta: Optional[dict] = None) -> dict:
    """Write ``stem.bin`` (little-endian float64), ``stem.json`` header and ``stem.csv``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(values, dtype="<f8").reshape(shape)
    arr.tofile(stem.with_suffix(".bin"))
    header = {"shape": list(shape), "dtype": "float64", "byte_order": "little", "order": "C"}
    if meta:
        header.update(meta)
    stem.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    np.savetxt(stem.with_suffix(".csv"), np.atleast_2d(arr), delimiter=",", fmt="%.17g")
    return header


def load_array(stem) -> tuple[np.ndarray, dict]:
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".json").read_text())
    arr = np.fromfile(stem.with_suffix(".bin"), dtype="<f8").reshape(header["shape"])
    return arr, header


def geometry_meta(geometry: Geometry) -> dict:
    return {"geometry": asdict(geometry)}
