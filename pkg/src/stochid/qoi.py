"""Quantities of interest extracted from window strains and effective compliance.

The 9-component observable vector is ordered as

    q1      strain dispersion coefficient (dimensionless)
    q2, q3  strain correlation lengths along x1 and x2 (meters)
    q4..q9  (log L11, L12, L13, log L22, L23, log L33) of the upper Cholesky
            factor of the effective compliance matrix
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError
from .fem import StrainField

#: indices of the log-scaled entries inside the 6-component Cholesky vector
LOG_ENTRIES = (0, 3, 5)


def _strain_values(strain):
    if isinstance(strain, StrainField):
        return strain.values, strain.dx, strain.dy
    values = np.asarray(strain, dtype=float)
    return values, 1.0, 1.0


def _tensor_sq_norm(voigt):
    """Squared Frobenius norm of the 2x2 strain tensor from (e11, e22, 2*e12)."""
    return voigt[..., 0] ** 2 + voigt[..., 1] ** 2 + 0.5 * voigt[..., 2] ** 2


def dispersion_coefficient(strain):
    """Spatial dispersion of the strain field around its spatial average.

    Uniform element areas make the area weighting a plain mean.
    """
    values, _, _ = _strain_values(strain)
    mean = values.mean(axis=(0, 1))
    norm_mean = np.sqrt(_tensor_sq_norm(mean))
    # division by the average is meaningless when it vanishes to roundoff
    scale = np.sqrt(_tensor_sq_norm(values).mean())
    if norm_mean <= 1e-12 * scale:
        raise DomainError("strain field has zero spatial average")
    fluct = _tensor_sq_norm(values - mean).mean()
    return float(np.sqrt(fluct) / norm_mean)


def _axis_correlation_length(fluct, spacing, axis):
    """Variance-weighted autocorrelation summed to the first nonpositive lag.

    ``fluct`` is the centered field (nx, ny, 3); correlations along ``axis``
    are averaged over the transverse axis and over the 3 components, each
    component weighted by its variance (i.e. covariances are pooled before
    normalization).
    """
    f = np.moveaxis(fluct, axis, 0)
    n = f.shape[0]
    cov = np.empty(n)
    for lag in range(n):
        cov[lag] = np.sum(f[: n - lag] * f[lag:], axis=(0, 1)).sum() / (
            (n - lag) * f.shape[1]
        )
    if cov[0] <= 0.0:
        raise DomainError("strain field is spatially constant along an axis")
    r = cov / cov[0]
    nonpos = np.nonzero(r <= 0.0)[0]
    stop = int(nonpos[0]) if nonpos.size else n
    return float(spacing * r[:stop].sum())


def correlation_lengths(strain):
    """Characteristic lengths of the strain fluctuations along both axes."""
    values, dx, dy = _strain_values(strain)
    if values.shape[0] < 8 or values.shape[1] < 8:
        raise DomainError("strain field must be at least 8 elements wide per axis")
    fluct = values - values.mean(axis=(0, 1))
    l1 = _axis_correlation_length(fluct, dx, axis=0)
    l2 = _axis_correlation_length(fluct, dy, axis=1)
    return l1, l2


def cholesky_logvec(s_eff):
    """Log-diagonal Cholesky coordinates of an SPD 3x3 matrix (S = L^T L)."""
    s = np.asarray(s_eff, dtype=float)
    if s.shape != (3, 3):
        raise DomainError(f"expected a 3x3 matrix, got {s.shape}")
    try:
        upper = np.linalg.cholesky(s).T
    except np.linalg.LinAlgError as exc:
        raise DomainError("matrix is not positive-definite") from exc
    return np.array(
        [
            np.log(upper[0, 0]),
            upper[0, 1],
            upper[0, 2],
            np.log(upper[1, 1]),
            upper[1, 2],
            np.log(upper[2, 2]),
        ]
    )


def reconstruct_from_logvec(vec):
    """Inverse of :func:`cholesky_logvec`."""
    v = np.asarray(vec, dtype=float)
    if v.shape != (6,):
        raise DomainError(f"expected 6 components, got {v.shape}")
    upper = np.array(
        [
            [np.exp(v[0]), v[1], v[2]],
            [0.0, np.exp(v[3]), v[4]],
            [0.0, 0.0, np.exp(v[5])],
        ]
    )
    return upper.T @ upper


def assemble_qoi(dispersion, l1, l2, logvec):
    """Concatenate the observables in their canonical order q1..q9."""
    parts = np.concatenate([[dispersion, l1, l2], np.asarray(logvec, dtype=float)])
    if parts.shape != (9,) or not np.all(np.isfinite(parts)):
        raise DomainError("quantities of interest must be 9 finite values")
    return parts
