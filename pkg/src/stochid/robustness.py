"""Probabilistic model of the observed quantities of interest and propagation
of its samples through the trained surrogate.

The observation vector splits into four mutually independent blocks: the
strain dispersion and the two correlation lengths are gamma variables with
prescribed means and coefficients of variation (s0, s1, s2); the six Cholesky
coordinates derive from a positive-definite random matrix with prescribed
mean effective compliance and dispersion s_eff, built with the same 3x3
ensemble generator as the compliance field.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ann import forward, kde_pdf, silverman_bandwidth_1d
from .errors import DomainError
from .qoi import cholesky_logvec, reconstruct_from_logvec
from .randfield import derive_rng, triangular_factor_from_germ


@dataclass(frozen=True)
class InputUncertaintyModel:
    """Mean observation plus dispersion parameters (s0, s1, s2, s_eff)."""

    q_obs: np.ndarray
    s: tuple  # (s0, s1, s2, s_eff), all >= 0; 0 means a point mass

    def __post_init__(self):
        q = np.asarray(self.q_obs, dtype=float)
        object.__setattr__(self, "q_obs", q)
        if q.shape != (9,) or not np.all(np.isfinite(q)):
            raise DomainError("observation must be 9 finite values")
        if len(self.s) != 4 or any(v < 0.0 for v in self.s):
            raise DomainError("dispersion parameters must be 4 nonnegative values")
        if np.any(q[:3] <= 0.0):
            raise DomainError("dispersion and correlation-length observations must be positive")
        mean_matrix = reconstruct_from_logvec(q[3:])
        if np.linalg.eigvalsh(mean_matrix).min() <= 0.0:
            raise DomainError("reconstructed mean effective compliance is not SPD")

    @classmethod
    def uniform_s(cls, q_obs, s):
        return cls(q_obs=np.asarray(q_obs, dtype=float), s=(s, s, s, s))


@dataclass
class OutputSummary:
    """Empirical mean, 95% interval and density curve per output component."""

    mean: np.ndarray           # (4,)
    ci95: np.ndarray           # (4, 2)
    pdfs: list = field(default_factory=list)  # per component: dict(grid, pdf) or None
    n_samples: int = 0


def sample_gamma(mean, cov, n, seed):
    """Gamma samples with prescribed mean and coefficient of variation.

    Shape 1/cov^2 and scale mean*cov^2; cov = 0 degenerates to a point mass.
    """
    if mean <= 0.0:
        raise DomainError("gamma mean must be positive")
    if cov < 0.0:
        raise DomainError("coefficient of variation must be nonnegative")
    if cov == 0.0:
        return np.full(n, float(mean))
    rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed)
    shape = 1.0 / cov ** 2
    scale = mean * cov ** 2
    return rng.gamma(shape, scale, size=n)


def sample_normalized_spd(dispersion, n, rng):
    """Identity-mean SPD 3x3 matrices G = L^T L with the given dispersion."""
    u = rng.standard_normal((n, 6))
    l_g = triangular_factor_from_germ(u, dispersion)
    return np.einsum("nji,njk->nik", l_g, l_g)


def sample_effective_compliance(mean_matrix, s_eff, n, seed):
    """SPD compliance samples with prescribed mean and dispersion s_eff."""
    mean_matrix = np.asarray(mean_matrix, dtype=float)
    try:
        l_mean = np.linalg.cholesky(mean_matrix).T
    except np.linalg.LinAlgError as exc:
        raise DomainError("mean effective compliance must be SPD") from exc
    if s_eff < 0.0:
        raise DomainError("s_eff must be nonnegative")
    if s_eff == 0.0:
        return np.broadcast_to(mean_matrix, (n, 3, 3)).copy()
    rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed)
    g = sample_normalized_spd(s_eff, n, rng)
    return np.einsum("ji,njk,kl->nil", l_mean, g, l_mean)


def sample_observed_qoi(model_in, n, seed):
    """n independent observation vectors from the input uncertainty model."""
    rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed)
    q = model_in.q_obs
    s0, s1, s2, s_eff = model_in.s
    out = np.empty((n, 9))
    out[:, 0] = sample_gamma(q[0], s0, n, rng)
    out[:, 1] = sample_gamma(q[1], s1, n, rng)
    out[:, 2] = sample_gamma(q[2], s2, n, rng)
    if s_eff == 0.0:
        out[:, 3:] = q[3:]
        return out
    mean_matrix = reconstruct_from_logvec(q[3:])
    matrices = sample_effective_compliance(mean_matrix, s_eff, n, rng)
    try:
        u = np.transpose(np.linalg.cholesky(matrices), (0, 2, 1))
    except np.linalg.LinAlgError:
        # fall back to row-wise factorization to report the offending sample
        for i in range(n):
            out[i, 3:] = cholesky_logvec(matrices[i])
        return out
    out[:, 3] = np.log(u[:, 0, 0])
    out[:, 4] = u[:, 0, 1]
    out[:, 5] = u[:, 0, 2]
    out[:, 6] = np.log(u[:, 1, 1])
    out[:, 7] = u[:, 1, 2]
    out[:, 8] = np.log(u[:, 2, 2])
    return out


def propagate(model, samples):
    """Elementwise surrogate evaluation; non-finite rows are skipped.

    Returns (outputs, n_skipped).
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    finite = np.all(np.isfinite(samples), axis=1)
    outputs = forward(model, samples[finite])
    return outputs, int((~finite).sum())


def summarize(samples_out, grid_points=256):
    """Empirical mean, 2.5%/97.5% quantiles and kernel density per component."""
    samples = np.atleast_2d(np.asarray(samples_out, dtype=float))
    if samples.shape[0] < 1:
        raise DomainError("no samples to summarize")
    mean = samples.mean(axis=0)
    ci = np.column_stack(
        [np.quantile(samples, 0.025, axis=0), np.quantile(samples, 0.975, axis=0)]
    )
    pdfs = []
    for j in range(samples.shape[1]):
        col = samples[:, j]
        if col.std(ddof=1) == 0.0:
            pdfs.append(None)
            continue
        b = silverman_bandwidth_1d(col)
        grid = np.linspace(col.min() - 5 * b, col.max() + 5 * b, grid_points)
        pdfs.append({"grid": grid, "pdf": kde_pdf(col, grid, b)})
    return OutputSummary(mean=mean, ci95=ci, pdfs=pdfs, n_samples=samples.shape[0])
