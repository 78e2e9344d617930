"""Simulation database: generation, kernel conditioning, persistence.

An initial database pairs each hyperparameter draw with one stochastic
forward-model evaluation of the 9 observables.  Conditioning replaces every
observable column by its kernel-regression conditional expectation given the
hyperparameters, which turns the noisy forward relation into an (almost)
deterministic one.

On disk a database is a directory with ``manifest.json`` and ``data.csv``
(header ``q1,...,q9,h1,h2,h3,h4``, full-precision scientific notation, LF).
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._version import __version__
from .errors import (
    ConfigError,
    DataFormatError,
    DomainError,
    KindMismatchError,
    SolverError,
)
from .fem import MacroProblem, run_macro_compression, effective_compliance_subc
from .qoi import assemble_qoi, cholesky_logvec, correlation_lengths, dispersion_coefficient
from .randfield import (
    DELTA_SUP,
    GermField,
    HyperParams,
    build_compliance_field,
    derive_rng,
    draw_germ_spectrum,
)

FORMAT_VERSION = "1"
CSV_HEADER = [f"q{i}" for i in range(1, 10)] + [f"h{i}" for i in range(1, 5)]

#: log-weight threshold below which a query is outside the data support
_UNDERFLOW_LOG = -700.0


@dataclass(frozen=True)
class AdmissibleSet:
    """Per-component closed intervals for (delta, ell, kappa, mu), SI units."""

    delta: tuple = (0.25, 0.65)
    ell: tuple = (20e-6, 250e-6)
    kappa: tuple = (8.5e9, 17.0e9)
    mu: tuple = (2.15e9, 5.0e9)

    def __post_init__(self):
        for name, (lo, hi) in self.items():
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
                raise ConfigError(f"empty or invalid interval for {name}: [{lo}, {hi}]")
            if lo <= 0.0:
                raise ConfigError(f"{name} lower bound must be positive")
        if self.delta[1] >= DELTA_SUP:
            raise ConfigError(f"delta upper bound must stay below {DELTA_SUP:.4f}")

    def items(self):
        return [("delta", self.delta), ("ell", self.ell), ("kappa", self.kappa), ("mu", self.mu)]

    def bounds(self):
        arr = np.array([self.delta, self.ell, self.kappa, self.mu], dtype=float)
        return arr[:, 0], arr[:, 1]

    def contains(self, h):
        lo, hi = self.bounds()
        h = np.asarray(h, dtype=float)
        return bool(np.all(h >= lo) and np.all(h <= hi))

    def to_dict(self):
        return {name: [float(lo), float(hi)] for name, (lo, hi) in self.items()}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(*(tuple(d[k]) for k in ("delta", "ell", "kappa", "mu")))
        except KeyError as exc:
            raise ConfigError(f"admissible set is missing interval {exc}") from exc


@dataclass(frozen=True)
class ForwardConfig:
    """Forward-model discretization (desk-scale defaults; full scale allowed)."""

    macro_nx: int = 100
    macro_side: float = 1e-2
    load: float = 5e5
    window_fraction: float = 0.1
    subc_nx: int = 32
    germ_bins: int = 64

    def macro_problem(self):
        return MacroProblem(
            side=self.macro_side,
            nx=self.macro_nx,
            load=self.load,
            window_fraction=self.window_fraction,
        )

    def to_dict(self):
        return {
            "macro_nx": self.macro_nx,
            "macro_side": self.macro_side,
            "load": self.load,
            "window_fraction": self.window_fraction,
            "subc_nx": self.subc_nx,
            "germ_bins": self.germ_bins,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class ConditioningConfig:
    """Bandwidths and quadrature grid of the conditional-expectation estimator."""

    grid_points: int = 512
    span: float = 4.0
    bandwidth_scale: float = 1.0

    def __post_init__(self):
        if self.grid_points < 64:
            raise ConfigError("integration grid needs at least 64 points")
        if self.span <= 0.0 or self.bandwidth_scale <= 0.0:
            raise ConfigError("span and bandwidth scale must be positive")


@dataclass
class Database:
    """Aligned observable/hyperparameter rows plus the generation manifest."""

    qoi: np.ndarray    # (n, 9)
    hyper: np.ndarray  # (n, 4)
    kind: str          # "initial" | "processed"
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.qoi = np.asarray(self.qoi, dtype=float)
        self.hyper = np.asarray(self.hyper, dtype=float)
        if self.qoi.ndim != 2 or self.qoi.shape[1] != 9:
            raise DataFormatError(f"qoi array must be (n, 9), got {self.qoi.shape}")
        if self.hyper.shape != (self.qoi.shape[0], 4):
            raise DataFormatError(f"hyper array must be (n, 4), got {self.hyper.shape}")
        if self.kind not in ("initial", "processed"):
            raise DataFormatError(f"unknown database kind {self.kind!r}")
        if not (np.all(np.isfinite(self.qoi)) and np.all(np.isfinite(self.hyper))):
            raise DataFormatError("database rows must be finite")

    @property
    def n(self):
        return self.qoi.shape[0]


def sample_hyperparams(admissible, n, seed):
    """n i.i.d. uniform hyperparameter vectors over the admissible box."""
    if n < 1:
        raise ConfigError("need at least one sample")
    lo, hi = admissible.bounds()
    rng = derive_rng(seed, 0)
    return lo + (hi - lo) * rng.random((n, 4))


def forward_qoi(h, cfg, germ_seed):
    """One forward evaluation h -> q (the stochastic map; germ drawn from seed).

    The same germ spectrum realization is observed at both resolutions: macro
    element centroids for the compression test, window sub-mesh centroids for
    the homogenization.
    """
    h = HyperParams.from_array(h) if not isinstance(h, HyperParams) else h
    spectrum = draw_germ_spectrum(h.ell, germ_seed, n_bins=cfg.germ_bins)
    problem = cfg.macro_problem()

    macro_grid = problem.mesh.centroid_grid()
    macro_germ = GermField(macro_grid, spectrum.evaluate(macro_grid.xs, macro_grid.ys))
    macro_field = build_compliance_field(h, macro_germ)
    strains = run_macro_compression(macro_field, problem)
    disp = dispersion_coefficient(strains)
    l1, l2 = correlation_lengths(strains)

    sub_grid = problem.window_grid(cfg.subc_nx)
    sub_germ = GermField(sub_grid, spectrum.evaluate(sub_grid.xs, sub_grid.ys))
    sub_field = build_compliance_field(h, sub_germ)
    s_eff = effective_compliance_subc(sub_field)
    return assemble_qoi(disp, l1, l2, cholesky_logvec(s_eff))


def _forward_row(args):
    """Worker: evaluate one database row, resampling h on forward failures."""
    index, h_first, admissible, cfg, seed, max_attempts = args
    h = np.asarray(h_first, dtype=float)
    for attempt in range(max_attempts):
        if attempt > 0:
            lo, hi = admissible.bounds()
            h = lo + (hi - lo) * derive_rng(seed, 1, index, attempt).random(4)
        try:
            q = forward_qoi(h, cfg, derive_rng(seed, 2, index, attempt))
            return index, q, h, attempt
        except (SolverError, DomainError):
            continue
    raise SolverError(f"row {index}: forward model failed {max_attempts} times")


def generate_initial(n, admissible=None, cfg=None, seed=0, threads=1, max_failure_rate=0.01):
    """Build the initial database of n (q, h) rows.

    Failed forward rows are logged and resampled with fresh hyperparameters;
    generation aborts if the overall failure rate exceeds ``max_failure_rate``.
    Row seeds derive from (seed, row index, attempt), so results do not depend
    on the worker count.
    """
    admissible = admissible or AdmissibleSet()
    cfg = cfg or ForwardConfig()
    hypers = sample_hyperparams(admissible, n, seed)
    max_attempts = max(8, int(np.ceil(3.0 * max_failure_rate * n)))
    tasks = [(i, hypers[i], admissible, cfg, seed, max_attempts) for i in range(n)]

    results = [None] * n
    failures = 0
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for index, q, h, attempts in pool.map(_forward_row, tasks, chunksize=8):
                results[index] = (q, h)
                failures += attempts
    else:
        for task in tasks:
            index, q, h, attempts = _forward_row(task)
            results[index] = (q, h)
            failures += attempts
    if failures > max_failure_rate * max(n, 100):
        raise SolverError(
            f"forward-model failure rate too high: {failures} failures over {n} rows"
        )

    qoi = np.array([r[0] for r in results])
    hyper = np.array([r[1] for r in results])
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "initial",
        "n": int(n),
        "seed": int(seed),
        "admissible_set": admissible.to_dict(),
        "forward": cfg.to_dict(),
        "failures": int(failures),
        "software_version": __version__,
    }
    return Database(qoi=qoi, hyper=hyper, kind="initial", manifest=manifest)


def robust_std(x):
    """Robust spread estimate: min(sample std, IQR/1.349)."""
    x = np.asarray(x, dtype=float)
    sd = x.std(ddof=1)
    q75, q25 = np.percentile(x, [75.0, 25.0])
    iqr = (q75 - q25) / 1.349
    candidates = [v for v in (sd, iqr) if v > 0.0]
    if not candidates:
        raise DomainError("column has zero spread")
    return float(min(candidates))


def silverman_bandwidth(sigma_hat, n_d, m=4):
    """Multidimensional rule-of-thumb bandwidth for joint dimension m + 1."""
    if sigma_hat <= 0.0:
        raise DomainError("sigma_hat must be positive")
    if n_d < 2:
        raise DomainError("need at least two samples")
    return float(sigma_hat * (4.0 / (n_d * (2.0 + m + 1.0))) ** (1.0 / (4.0 + m + 1.0)))


def compute_bandwidths(db, cfg=None):
    """Silverman bandwidths for every observable and hyperparameter column."""
    cfg = cfg or ConditioningConfig()
    n_d = db.n
    bq = np.array([silverman_bandwidth(robust_std(db.qoi[:, k]), n_d) for k in range(9)])
    bh = np.array([silverman_bandwidth(robust_std(db.hyper[:, j]), n_d) for j in range(4)])
    return bq * cfg.bandwidth_scale, bh * cfg.bandwidth_scale


def _log_weights(hyper, h_query, bh):
    """Log Gaussian product-kernel weights of every row for one query point."""
    z = (hyper - np.asarray(h_query, dtype=float)) / bh
    return -0.5 * np.einsum("ij,ij->i", z, z)


def _normalized_weights(hyper, h_query, bh):
    logw = _log_weights(hyper, h_query, bh)
    top = logw.max()
    if not np.isfinite(top) or top < _UNDERFLOW_LOG:
        raise DomainError("query point lies outside the data support (weights underflow)")
    w = np.exp(logw - top)
    return w / w.sum()


def conditional_expectation(k, h_query, db, cfg=None, bandwidths=None, method="weights"):
    """Kernel estimate of E{Q_k | H = h_query} from an initial database.

    ``method='weights'`` evaluates the closed Nadaraya-Watson form
    ``sum_i w_i q_k^(i) / sum_i w_i``; ``method='trapezoid'`` integrates
    q * p(q|h) over the quadrature grid of the kernel conditional density.
    Both agree to the grid resolution.
    """
    if db.n == 0:
        raise DomainError("database is empty")
    cfg = cfg or ConditioningConfig()
    bq, bh = bandwidths if bandwidths is not None else compute_bandwidths(db, cfg)
    w = _normalized_weights(db.hyper, h_query, bh)
    q = db.qoi[:, k]
    if method == "weights":
        return float(w @ q)
    if method == "trapezoid":
        b = bq[k]
        grid = np.linspace(q.min() - cfg.span * b, q.max() + cfg.span * b, cfg.grid_points)
        kde = np.exp(-0.5 * ((grid[:, None] - q[None, :]) / b) ** 2) / (b * np.sqrt(2.0 * np.pi))
        pdf = kde @ w
        return float(np.trapezoid(grid * pdf, grid))
    raise ConfigError(f"unknown conditional-expectation method {method!r}")


def condition_database(db, cfg=None, block=512):
    """Replace every observable row by its conditional expectation given h.

    Hyperparameter columns are copied unchanged; the result is deterministic
    for a given (database, config).
    """
    if db.kind != "initial":
        raise KindMismatchError(f"conditioning expects an initial database, got {db.kind!r}")
    cfg = cfg or ConditioningConfig()
    bq, bh = compute_bandwidths(db, cfg)
    n = db.n
    scaled = db.hyper / bh
    sq_norm = np.einsum("ij,ij->i", scaled, scaled)
    processed = np.empty_like(db.qoi)
    for start in range(0, n, block):
        stop = min(start + block, n)
        # pairwise squared kernel distances via the Gram expansion
        cross = scaled[start:stop] @ scaled.T
        logw = cross - 0.5 * sq_norm[None, :] - 0.5 * sq_norm[start:stop, None]
        top = logw.max(axis=1)
        if np.any(top < _UNDERFLOW_LOG):
            raise DomainError("conditioning weights underflow")
        w = np.exp(logw - top[:, None])
        w /= w.sum(axis=1)[:, None]
        processed[start:stop] = w @ db.qoi
    manifest = dict(db.manifest)
    manifest["kind"] = "processed"
    manifest["bandwidths"] = {
        "q": [float(v) for v in bq],
        "h": [float(v) for v in bh],
        "scale": cfg.bandwidth_scale,
    }
    manifest["parent_manifest_sha256"] = manifest_hash(db.manifest)
    return Database(qoi=processed, hyper=db.hyper.copy(), kind="processed", manifest=manifest)


def correlation_matrix(db):
    """Pearson correlation of each observable column against each hyper column."""
    if db.n < 2:
        raise DomainError("need at least two rows")
    cols = np.hstack([db.qoi, db.hyper])
    stds = cols.std(axis=0)
    if np.any(stds == 0.0):
        raise DomainError("correlation undefined for zero-variance columns")
    c = np.corrcoef(cols, rowvar=False)
    return c[:9, 9:]


def manifest_hash(manifest):
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(payload).hexdigest()


def save_database(db, path):
    """Write manifest.json and data.csv into the directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = dict(db.manifest)
    manifest.setdefault("format_version", FORMAT_VERSION)
    manifest["kind"] = db.kind
    manifest["n"] = int(db.n)
    (path / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    with open(path / "data.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for qrow, hrow in zip(db.qoi, db.hyper):
            fh.write(",".join(f"{v:.17e}" for v in np.concatenate([qrow, hrow])) + "\n")


def load_database(path, expect_kind=None):
    """Read a database directory back; lossless for round trips."""
    path = Path(path)
    manifest_file = path / "manifest.json"
    data_file = path / "data.csv"
    if not manifest_file.is_file() or not data_file.is_file():
        raise DataFormatError(f"{path} is not a database directory")
    try:
        manifest = json.loads(manifest_file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"manifest.json: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(
            f"unsupported database format version {manifest.get('format_version')!r}"
        )
    kind = manifest.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise KindMismatchError(f"expected a {expect_kind} database, got {kind!r}")

    rows = []
    with open(data_file, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise DataFormatError("data.csv: unexpected header row")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 13:
                raise DataFormatError(f"data.csv line {lineno}: expected 13 fields")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DataFormatError(f"data.csv line {lineno}: {exc}") from exc
    data = np.asarray(rows, dtype=float)
    if data.shape[0] != int(manifest.get("n", -1)):
        raise DataFormatError(
            f"data.csv holds {data.shape[0]} rows but manifest declares {manifest.get('n')}"
        )
    return Database(qoi=data[:, :9], hyper=data[:, 9:], kind=kind, manifest=manifest)
