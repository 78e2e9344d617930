"""Prior stochastic model of the plane-stress compliance field.

A realization is built in two stages:

1. a homogeneous normalized Gaussian germ with 6 independent channels and
   Gaussian autocorrelation ``r(tau) = exp(-pi |tau|^2 / (4 ell^2))``
   (normalized so the axis-wise integral of r equals ``ell``), sampled by a
   truncated spectral (cosine-sum) representation;
2. a pointwise nonlinear map turning the 6 germ values into a symmetric
   positive-definite 3x3 matrix with prescribed mean and dispersion.

All sampling is deterministic given ``(seed, grid, hyperparameters)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincinv, ndtr

from .errors import DomainError

#: Upper bound of the admissible dispersion range, sqrt(7/11).
DELTA_SUP = np.sqrt(7.0 / 11.0)

_N_CHANNELS = 6
_MATRIX_DIM = 3


def derive_rng(seed, *key):
    """Counter-derived generator: independent streams for (seed, key...)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


@dataclass(frozen=True)
class HyperParams:
    """Hyperparameter vector (dispersion, correlation length, mean moduli).

    delta is dimensionless, ell in meters, kappa and mu in Pa.
    """

    delta: float
    ell: float
    kappa: float
    mu: float

    def __post_init__(self):
        if not 0.0 < self.delta < DELTA_SUP:
            raise DomainError(
                f"delta must lie in (0, {DELTA_SUP:.4f}), got {self.delta}"
            )
        if self.ell <= 0.0:
            raise DomainError(f"correlation length must be positive, got {self.ell}")
        if self.kappa <= 0.0 or self.mu <= 0.0:
            raise DomainError("moduli must be positive")

    def as_array(self):
        return np.array([self.delta, self.ell, self.kappa, self.mu])

    @classmethod
    def from_array(cls, h):
        h = np.asarray(h, dtype=float)
        if h.shape != (4,):
            raise DomainError(f"hyperparameter vector must have 4 components, got {h.shape}")
        return cls(*h)


@dataclass(frozen=True)
class GridSpec:
    """Regular 2D lattice: nx-by-ny points with spacing (dx, dy), origin (x0, y0)."""

    nx: int
    ny: int
    dx: float
    dy: float
    x0: float = 0.0
    y0: float = 0.0

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise DomainError("grid must have at least 2 points per direction")
        if self.dx <= 0.0 or self.dy <= 0.0:
            raise DomainError("grid spacing must be positive")

    @property
    def xs(self):
        return self.x0 + self.dx * np.arange(self.nx)

    @property
    def ys(self):
        return self.y0 + self.dy * np.arange(self.ny)


@dataclass(frozen=True)
class GermField:
    """6 independent normalized Gaussian channels on a lattice, shape (6, nx, ny)."""

    grid: GridSpec
    values: np.ndarray


@dataclass(frozen=True)
class ComplianceFieldSample:
    """SPD 3x3 compliance matrix (Pa^-1, Voigt 11/22/12) per lattice point."""

    grid: GridSpec
    values: np.ndarray  # (nx, ny, 3, 3)


def mean_compliance(kappa, mu):
    """Plane-stress isotropic compliance matrix for 3D bulk/shear moduli.

    Uses E = 9*kappa*mu/(3*kappa + mu) and
    nu = (3*kappa - 2*mu)/(2*(3*kappa + mu)).
    """
    if kappa <= 0.0 or mu <= 0.0:
        raise DomainError("moduli must be positive")
    young = 9.0 * kappa * mu / (3.0 * kappa + mu)
    nu = (3.0 * kappa - 2.0 * mu) / (2.0 * (3.0 * kappa + mu))
    if not -1.0 < nu < 0.5:
        raise DomainError(f"derived Poisson ratio {nu} outside (-1, 0.5)")
    return np.array(
        [
            [1.0 / young, -nu / young, 0.0],
            [-nu / young, 1.0 / young, 0.0],
            [0.0, 0.0, 1.0 / mu],
        ]
    )


class GermSpectrum:
    """Frozen spectral content of one germ realization.

    Holds, per channel, jittered wavenumbers over the half-plane k1 > 0 and
    complex coefficients amp * exp(i*phi).  The realization is a continuous
    field; ``evaluate`` samples it on an arbitrary tensor-product grid, so one
    draw can be observed consistently at several resolutions.
    """

    def __init__(self, ell, k1, k2, coef):
        self.ell = ell
        self.k1 = k1      # (6, n_bins)
        self.k2 = k2      # (6, 2*n_bins)
        self.coef = coef  # (6, n_bins, 2*n_bins) complex

    def evaluate(self, xs, ys):
        """Evaluate all 6 channels on the grid xs x ys -> (6, len(xs), len(ys))."""
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        e1 = np.exp(1j * self.k1[:, :, None] * xs[None, None, :])  # (6, N1, nx)
        e2 = np.exp(1j * self.k2[:, :, None] * ys[None, None, :])  # (6, N2, ny)
        tmp = np.einsum("cnm,cnx->cmx", self.coef, e1, optimize=True)
        field = np.einsum("cmx,cmy->cxy", tmp, e2, optimize=True)
        return np.ascontiguousarray(field.real)


def draw_germ_spectrum(ell, seed, n_bins=64):
    """Draw the spectral content of one germ realization.

    The Gaussian spectral density is separable,
    ``S2(k) = S1(k1) S1(k2)`` with ``S1(k) = (ell/pi) exp(-ell^2 k^2 / pi)``.
    Cosine components live on a half-plane wavenumber grid (k1 > 0, k2 signed)
    truncated at ``k_c = 8*pi/ell`` with ``n_bins`` bins per axis, carrying
    amplitudes ``sqrt(2) * sqrt(2 S2 dk^2)`` and i.i.d. uniform phases.
    Wavenumbers are jittered uniformly inside their bins (per channel, per
    axis) so a realization is aperiodic; the ensemble autocorrelation is then
    an unbiased Monte Carlo quadrature of the spectral integral.
    """
    if ell <= 0.0:
        raise DomainError(f"correlation length must be positive, got {ell}")
    if n_bins < 2:
        raise DomainError("need at least 2 spectral bins per axis")
    rng = derive_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    kc = 8.0 * np.pi / ell
    dk = kc / n_bins
    n1, n2 = n_bins, 2 * n_bins
    j1 = np.arange(n1, dtype=float)
    j2 = np.arange(-n_bins, n_bins, dtype=float)
    k1 = (j1[None, :] + rng.random((_N_CHANNELS, n1))) * dk
    k2 = (j2[None, :] + rng.random((_N_CHANNELS, n2))) * dk
    phi = rng.random((_N_CHANNELS, n1, n2)) * (2.0 * np.pi)
    s1a = (ell / np.pi) * np.exp(-(ell ** 2) * k1 ** 2 / np.pi)
    s1b = (ell / np.pi) * np.exp(-(ell ** 2) * k2 ** 2 / np.pi)
    amp = np.sqrt(4.0 * dk * dk * s1a[:, :, None] * s1b[:, None, :])
    return GermSpectrum(ell, k1, k2, amp * np.exp(1j * phi))


def sample_germ_field(ell, grid, seed, n_bins=64):
    """One germ realization evaluated on ``grid`` (deterministic given seed)."""
    spectrum = draw_germ_spectrum(ell, seed, n_bins=n_bins)
    return GermField(grid=grid, values=spectrum.evaluate(grid.xs, grid.ys))


def triangular_factor_from_germ(u, dispersion):
    """Map germ values to upper-triangular factors of the SPD 3x3 ensemble.

    ``u`` has shape (..., 6); channels 0..2 feed the diagonal through the
    gamma quantile transform, channels 3..5 the off-diagonal entries.  The
    resulting G = L^T L has identity mean and ensemble dispersion
    ``sqrt(E||G - I||_F^2 / 3) = dispersion``.
    """
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != _N_CHANNELS:
        raise DomainError(f"expected {_N_CHANNELS} germ channels, got {u.shape[-1]}")
    if dispersion <= 0.0:
        raise DomainError(f"dispersion must be positive, got {dispersion}")
    n = _MATRIX_DIM
    sig = dispersion / np.sqrt(n + 1.0)
    # keep the gamma shapes positive: alpha_3 = (n+1)/(2 d^2) - 1 > 0
    if dispersion >= np.sqrt(2.0):
        raise DomainError(f"ensemble dispersion must be below sqrt(2), got {dispersion}")
    out = np.zeros(u.shape[:-1] + (n, n))
    # Phi(u) clipped away from {0, 1} so the quantile stays finite and positive
    p = np.clip(ndtr(u[..., :n]), 1e-300, 1.0 - 1e-16)
    for j in range(n):
        alpha = (n + 1.0) / (2.0 * dispersion ** 2) + (1.0 - (j + 1)) / 2.0
        out[..., j, j] = sig * np.sqrt(2.0 * gammaincinv(alpha, p[..., j]))
    out[..., 0, 1] = sig * u[..., 3]
    out[..., 0, 2] = sig * u[..., 4]
    out[..., 1, 2] = sig * u[..., 5]
    return out


def germ_matrix_dispersion(delta, mean_s):
    """Internal ensemble dispersion reproducing a field dispersion ``delta``.

    For S = Lbar^T G Lbar the fluctuation ratio E||S - Sbar||_F^2 / ||Sbar||_F^2
    equals (d_G^2/4) * (1 + (tr Sbar)^2 / tr(Sbar^2)); invert that relation so
    the sampled compliance field carries dispersion ``delta`` exactly.
    """
    tr = np.trace(mean_s)
    tr2 = np.trace(mean_s @ mean_s)
    return float(delta) * np.sqrt(4.0 * tr2 / (tr2 + tr ** 2))


def build_compliance_field(h, germ):
    """Turn a germ realization into a compliance-field sample with mean
    ``mean_compliance(h.kappa, h.mu)`` and dispersion ``h.delta``."""
    if not isinstance(h, HyperParams):
        h = HyperParams.from_array(h)
    values = np.asarray(germ.values, dtype=float)
    if values.ndim != 3 or values.shape[0] != _N_CHANNELS:
        raise DomainError(f"germ values must have shape (6, nx, ny), got {values.shape}")
    s_mean = mean_compliance(h.kappa, h.mu)
    l_mean = np.linalg.cholesky(s_mean).T  # upper factor, Sbar = L^T L
    d_g = germ_matrix_dispersion(h.delta, s_mean)
    u = np.moveaxis(values, 0, -1)  # (nx, ny, 6)
    l_g = triangular_factor_from_germ(u, d_g)
    # S(x) = Lbar^T (L_G^T L_G) Lbar = (L_G Lbar)^T (L_G Lbar)
    prod = l_g @ l_mean
    field = np.einsum("...ji,...jk->...ik", prod, prod)
    return ComplianceFieldSample(grid=germ.grid, values=field)


def sample_compliance_field(h, grid, seed, n_bins=64):
    """Convenience wrapper: germ draw plus nonlinear map in one call."""
    if not isinstance(h, HyperParams):
        h = HyperParams.from_array(h)
    germ = sample_germ_field(h.ell, grid, seed, n_bins=n_bins)
    return build_compliance_field(h, germ)
