"""Feedforward surrogate: tanh hidden layers, linear output, trained by the
scaled conjugate gradient method in full-batch mode with early stopping.

Inputs (9 observables) and targets (4 hyperparameters) are affinely mapped to
[-1, 1] using ranges fitted on the training split; outputs are mapped back to
physical units after inference.  Training minimizes the mean squared error on
the normalized scale so all four output components weigh equally.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, DomainError, SolverError
from .randfield import derive_rng

MODEL_FORMAT_VERSION = "1"


# ---------------------------------------------------------------------------
# model container and inference
# ---------------------------------------------------------------------------

@dataclass
class MlpModel:
    """Layer sizes, parameters and the normalization attached to them."""

    layer_sizes: list
    weights: list          # per layer, (n_out, n_in)
    biases: list           # per layer, (n_out,)
    input_norm: tuple      # (min, max) arrays over the 9 inputs
    output_norm: tuple     # (min, max) arrays over the 4 outputs
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ConfigError("need at least input and output layers")
        if self.layer_sizes[0] != 9 or self.layer_sizes[-1] != 4:
            raise ConfigError("surrogate maps 9 observables to 4 hyperparameters")

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def fit_normalization(columns):
    """Per-component (min, max) of a data matrix; rejects constant columns."""
    data = np.asarray(columns, dtype=float)
    lo = data.min(axis=0)
    hi = data.max(axis=0)
    if np.any(hi <= lo):
        raise ConfigError("cannot normalize a constant column")
    return lo, hi


def normalize(x, norm):
    lo, hi = norm
    return 2.0 * (np.asarray(x, dtype=float) - lo) / (hi - lo) - 1.0


def denormalize(x, norm):
    lo, hi = norm
    return (np.asarray(x, dtype=float) + 1.0) * (hi - lo) / 2.0 + lo


def init_nguyen_widrow(layer_sizes, seed):
    """Initial weights/biases: hidden rows rescaled to magnitude 0.7*n^(1/f),
    biases uniform in that range; small uniform values on the output layer."""
    rng = derive_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    weights, biases = [], []
    for layer in range(1, len(layer_sizes)):
        fan_in = layer_sizes[layer - 1]
        n_units = layer_sizes[layer]
        if layer < len(layer_sizes) - 1:
            beta = 0.7 * n_units ** (1.0 / fan_in)
            w = rng.uniform(-1.0, 1.0, size=(n_units, fan_in))
            w *= beta / np.linalg.norm(w, axis=1, keepdims=True)
            b = rng.uniform(-beta, beta, size=n_units)
        else:
            scale = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-scale, scale, size=(n_units, fan_in))
            b = rng.uniform(-scale, scale, size=n_units)
        weights.append(w)
        biases.append(b)
    return weights, biases


def _forward_normalized(weights, biases, xn):
    """Activations per layer for normalized input rows (N, 9)."""
    acts = [xn]
    a = xn
    last = len(weights) - 1
    for layer, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w.T + b
        a = z if layer == last else np.tanh(z)
        acts.append(a)
    return acts


def forward(model, x):
    """Physical-scale inference; accepts one 9-vector or a batch (N, 9)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.shape[-1] != 9:
        raise DomainError(f"input must have 9 components, got {batch.shape[-1]}")
    if not np.all(np.isfinite(batch)):
        raise DomainError("input contains non-finite values")
    xn = normalize(batch, model.input_norm)
    yn = _forward_normalized(model.weights, model.biases, xn)[-1]
    y = denormalize(yn, model.output_norm)
    return y[0] if single else y


# ---------------------------------------------------------------------------
# loss and gradient on the normalized scale
# ---------------------------------------------------------------------------

def _pack(weights, biases):
    return np.concatenate([a.ravel() for pair in zip(weights, biases) for a in pair])

def _unpack(theta, layer_sizes):
    weights, biases, pos = [], [], 0
    for layer in range(1, len(layer_sizes)):
        n_in, n_out = layer_sizes[layer - 1], layer_sizes[layer]
        weights.append(theta[pos:pos + n_in * n_out].reshape(n_out, n_in))
        pos += n_in * n_out
        biases.append(theta[pos:pos + n_out])
        pos += n_out
    return weights, biases


def _loss_and_grad(theta, layer_sizes, xn, yn):
    """Mean of squared normalized errors and its exact gradient."""
    weights, biases = _unpack(theta, layer_sizes)
    acts = _forward_normalized(weights, biases, xn)
    err = acts[-1] - yn
    n_total = err.size
    loss = float(np.einsum("ij,ij->", err, err) / n_total)
    delta = 2.0 * err / n_total
    grads = []
    for layer in range(len(weights) - 1, -1, -1):
        a_prev = acts[layer]
        grads.append((delta.T @ a_prev, delta.sum(axis=0)))
        if layer > 0:
            delta = (delta @ weights[layer]) * (1.0 - acts[layer] ** 2)
    grads.reverse()
    return loss, _pack([g[0] for g in grads], [g[1] for g in grads])


def batch_loss(model, x, targets):
    """Mean squared normalized-output error of a physical-scale batch."""
    xn = normalize(np.atleast_2d(x), model.input_norm)
    yn = normalize(np.atleast_2d(targets), model.output_norm)
    theta = _pack(model.weights, model.biases)
    return _loss_and_grad(theta, model.layer_sizes, xn, yn)[0]


def gradient(model, x, targets):
    """Exact gradient of the batch mse over all weights and biases (flat)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if x.shape[0] == 0:
        raise DomainError("batch must not be empty")
    xn = normalize(x, model.input_norm)
    yn = normalize(targets, model.output_norm)
    theta = _pack(model.weights, model.biases)
    return _loss_and_grad(theta, model.layer_sizes, xn, yn)[1]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def normalized_mse(outputs, targets):
    """Squared errors scaled by the target range of the evaluated set,
    averaged over samples and the 4 components."""
    out = np.atleast_2d(np.asarray(outputs, dtype=float))
    tgt = np.atleast_2d(np.asarray(targets, dtype=float))
    if out.shape != tgt.shape:
        raise DomainError("outputs and targets must have matching shapes")
    ranges = tgt.max(axis=0) - tgt.min(axis=0)
    if np.any(ranges <= 0.0):
        raise DomainError("target column with zero range")
    scaled = (out - tgt) / ranges
    return float(np.mean(scaled ** 2, axis=0).sum() / tgt.shape[1])


def regression_r(outputs, targets):
    """Pearson correlation between each output column and its target column."""
    out = np.atleast_2d(np.asarray(outputs, dtype=float))
    tgt = np.atleast_2d(np.asarray(targets, dtype=float))
    rs = []
    for j in range(out.shape[1]):
        so, st = out[:, j].std(), tgt[:, j].std()
        if so == 0.0 or st == 0.0:
            raise DomainError("zero-variance column in regression analysis")
        rs.append(float(np.corrcoef(out[:, j], tgt[:, j])[0, 1]))
    return np.array(rs)


def silverman_bandwidth_1d(samples):
    """Univariate rule-of-thumb bandwidth sigma * (4 / (3 n))^(1/5)."""
    samples = np.asarray(samples, dtype=float)
    sigma = samples.std(ddof=1)
    if sigma <= 0.0:
        raise DomainError("bandwidth undefined for constant samples")
    return float(sigma * (4.0 / (3.0 * samples.size)) ** 0.2)


def kde_pdf(samples, grid, bandwidth=None):
    """Gaussian kernel density estimate evaluated on ``grid``."""
    samples = np.asarray(samples, dtype=float)
    b = bandwidth if bandwidth is not None else silverman_bandwidth_1d(samples)
    z = (np.asarray(grid)[:, None] - samples[None, :]) / b
    return np.exp(-0.5 * z ** 2).sum(axis=1) / (samples.size * b * np.sqrt(2.0 * np.pi))


def output_pdf_comparison(model, db, grid_points=256):
    """Kernel density curves of each hyperparameter from network outputs and
    from targets, on a shared grid per component."""
    outputs = forward(model, db.qoi)
    curves = []
    for j in range(4):
        out_j, tgt_j = outputs[:, j], db.hyper[:, j]
        b_out = silverman_bandwidth_1d(out_j)
        b_tgt = silverman_bandwidth_1d(tgt_j)
        lo = min(out_j.min() - 5 * b_out, tgt_j.min() - 5 * b_tgt)
        hi = max(out_j.max() + 5 * b_out, tgt_j.max() + 5 * b_tgt)
        grid = np.linspace(lo, hi, grid_points)
        curves.append(
            {
                "grid": grid,
                "output_pdf": kde_pdf(out_j, grid, b_out),
                "target_pdf": kde_pdf(tgt_j, grid, b_tgt),
            }
        )
    return curves


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    max_iterations: int = 20000
    patience: int = 6
    restarts: int = 5
    split: tuple = (0.70, 0.15, 0.15)
    seed: int = 0
    sigma0: float = 5e-5
    lambda0: float = 5e-7

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-12 or len(self.split) != 3:
            raise ConfigError("split fractions must be three values summing to 1")
        if self.patience < 1 or self.restarts < 1 or self.max_iterations < 1:
            raise ConfigError("patience, restarts and max_iterations must be >= 1")


@dataclass
class TrainReport:
    curves: dict               # per-iteration normalized mse per split
    best_iteration: int
    final_mse: dict            # train / validation / test / all
    r_values: np.ndarray
    wall_time: float
    restart_index: int
    n_params: int


class EarlyStopper:
    """Stop once the monitored value has not improved for ``patience``
    consecutive iterations; remembers where the minimum occurred."""

    def __init__(self, patience):
        self.patience = patience
        self.best_value = np.inf
        self.best_iteration = -1
        self._since_best = 0

    def update(self, value, iteration):
        if value < self.best_value:
            self.best_value = value
            self.best_iteration = iteration
            self._since_best = 0
            return False
        self._since_best += 1
        return self._since_best >= self.patience


def split_indices(n, split, seed):
    """Deterministic shuffled partition: floor(0.70 n) / floor(0.15 n) / rest."""
    perm = derive_rng(seed, 100).permutation(n)
    n_train = int(np.floor(split[0] * n))
    n_val = int(np.floor(split[1] * n))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def _scg_minimize(theta0, fun, max_iterations, sigma0, lambda0, callback):
    """Moller's scaled conjugate gradient on a flat parameter vector.

    ``fun(theta)`` returns (loss, gradient).  ``callback(k, theta)`` runs after
    every iteration and may return True to stop (early stopping).  Returns the
    last iterate; snapshots are the callback's business.
    """
    theta = theta0.copy()
    n = theta.size
    loss, grad = fun(theta)
    if not np.isfinite(loss):
        raise SolverError("initial loss is not finite")
    r = -grad
    p = r.copy()
    success = True
    lam, lam_bar = lambda0, 0.0
    delta = 0.0
    s = np.zeros_like(theta)

    for k in range(1, max_iterations + 1):
        if success:
            p_norm2 = p @ p
            if p_norm2 == 0.0:
                break
            sigma = sigma0 / np.sqrt(p_norm2)
            _, grad_shift = fun(theta + sigma * p)
            s = (grad_shift - (-r)) / sigma
            delta = p @ s
        p_norm2 = p @ p
        delta = delta + (lam - lam_bar) * p_norm2
        if delta <= 0.0:
            lam_bar = 2.0 * (lam - delta / p_norm2)
            delta = -delta + lam * p_norm2
            lam = lam_bar
        mu = p @ r
        if mu == 0.0:
            break
        alpha = mu / delta
        loss_new, grad_new = fun(theta + alpha * p)
        if not np.isfinite(loss_new):
            raise SolverError("loss diverged during training")
        comparison = 2.0 * delta * (loss - loss_new) / mu ** 2

        if comparison >= 0.0:
            theta = theta + alpha * p
            loss = loss_new
            r_new = -grad_new
            lam_bar = 0.0
            success = True
            if k % n == 0:
                p = r_new.copy()
            else:
                beta = (r_new @ r_new - r_new @ r) / mu
                p = r_new + beta * p
            if comparison >= 0.75:
                lam = max(lam * 0.25, 1e-20)
            r = r_new
        else:
            lam_bar = lam
            success = False
        if comparison < 0.25:
            lam = lam + delta * (1.0 - comparison) / p_norm2
        if lam > 1e20:
            break
        if callback(k, theta):
            break
        if np.sqrt(r @ r) < 1e-14:
            break
    return theta


def _train_once(layer_sizes, data, cfg, restart):
    """One SCG run with early stopping; returns model params and curves."""
    xn_tr, yn_tr, sets = data
    weights, biases = init_nguyen_widrow(layer_sizes, derive_rng(cfg.seed, 200, restart))
    theta0 = _pack(weights, biases)
    fun = lambda th: _loss_and_grad(th, layer_sizes, xn_tr, yn_tr)

    stopper = EarlyStopper(cfg.patience)
    curves = {"train": [], "validation": [], "test": []}
    best = {"theta": theta0.copy(), "iteration": 0}

    def metrics_at(theta):
        weights_k, biases_k = _unpack(theta, layer_sizes)
        vals = {}
        for name, (xn, tgt, norm_out) in sets.items():
            yn = _forward_normalized(weights_k, biases_k, xn)[-1]
            vals[name] = normalized_mse(denormalize(yn, norm_out), tgt)
        return vals

    def callback(k, theta):
        vals = metrics_at(theta)
        for name in curves:
            curves[name].append(vals[name])
        improved = vals["validation"] < stopper.best_value
        stop = stopper.update(vals["validation"], k)
        if improved:
            best["theta"] = theta.copy()
            best["iteration"] = k
        return stop or k >= cfg.max_iterations

    _scg_minimize(theta0, fun, cfg.max_iterations, cfg.sigma0, cfg.lambda0, callback)
    return best["theta"], best["iteration"], curves, stopper.best_value


def train_scg(db, arch, cfg=None):
    """Train the surrogate on a database (initial or processed).

    Runs ``cfg.restarts`` independently initialized trainings and keeps the
    one with the lowest test normalized mse (ties broken by validation mse,
    then by restart order).  Returns (model, report).
    """
    cfg = cfg or TrainConfig()
    arch = [arch] if np.isscalar(arch) else list(arch)
    layer_sizes = [9] + [int(a) for a in arch] + [4]
    if any(a < 1 for a in layer_sizes):
        raise ConfigError("layer sizes must be positive")

    idx_tr, idx_val, idx_te = split_indices(db.n, cfg.split, cfg.seed)
    if min(idx_tr.size, idx_val.size, idx_te.size) < 2:
        raise ConfigError("database too small for the requested split")
    x, y = db.qoi, db.hyper
    in_norm = fit_normalization(x[idx_tr])
    out_norm = fit_normalization(y[idx_tr])
    xn_tr = normalize(x[idx_tr], in_norm)
    yn_tr = normalize(y[idx_tr], out_norm)
    sets = {
        "train": (xn_tr, y[idx_tr], out_norm),
        "validation": (normalize(x[idx_val], in_norm), y[idx_val], out_norm),
        "test": (normalize(x[idx_te], in_norm), y[idx_te], out_norm),
    }

    t0 = time.perf_counter()
    candidates = []
    errors = []
    for restart in range(cfg.restarts):
        try:
            theta, best_iter, curves, best_val = _train_once(
                layer_sizes, (xn_tr, yn_tr, sets), cfg, restart
            )
        except SolverError as exc:
            errors.append(f"restart {restart}: {exc}")
            continue
        weights, biases = _unpack(theta, layer_sizes)
        model = MlpModel(layer_sizes, weights, biases, in_norm, out_norm)
        test_mse = normalized_mse(forward(model, x[idx_te]), y[idx_te])
        candidates.append((test_mse, best_val, restart, model, best_iter, curves))
    if not candidates:
        raise SolverError("all restarts diverged: " + "; ".join(errors))

    candidates.sort(key=lambda c: (c[0], c[1], c[2]))
    test_mse, best_val, restart, model, best_iter, curves = candidates[0]
    outputs = forward(model, x)
    final_mse = {
        "train": normalized_mse(forward(model, x[idx_tr]), y[idx_tr]),
        "validation": normalized_mse(forward(model, x[idx_val]), y[idx_val]),
        "test": test_mse,
        "all": normalized_mse(outputs, y),
    }
    report = TrainReport(
        curves=curves,
        best_iteration=best_iter,
        final_mse=final_mse,
        r_values=regression_r(outputs, y),
        wall_time=time.perf_counter() - t0,
        restart_index=restart,
        n_params=model.n_params,
    )
    model.meta = {
        "architecture": arch,
        "restart": restart,
        "best_iteration": best_iter,
        "train_seed": cfg.seed,
        "training_manifest_hash": None,
    }
    return model, report


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_model(model, path):
    """Write the model as a single JSON document with deterministic order."""
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "layer_sizes": [int(v) for v in model.layer_sizes],
        "activations": ["tanh"] * (len(model.layer_sizes) - 2) + ["linear"],
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "input_norm": {
            "min": model.input_norm[0].tolist(),
            "max": model.input_norm[1].tolist(),
        },
        "output_norm": {
            "min": model.output_norm[0].tolist(),
            "max": model.output_norm[1].tolist(),
        },
        "meta": model.meta,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_model(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot read model file {path}: {exc}") from exc
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise DataFormatError(f"unsupported model format {doc.get('format_version')!r}")
    try:
        layer_sizes = [int(v) for v in doc["layer_sizes"]]
        weights = [np.asarray(w, dtype=float) for w in doc["weights"]]
        biases = [np.asarray(b, dtype=float) for b in doc["biases"]]
        in_norm = (
            np.asarray(doc["input_norm"]["min"], dtype=float),
            np.asarray(doc["input_norm"]["max"], dtype=float),
        )
        out_norm = (
            np.asarray(doc["output_norm"]["min"], dtype=float),
            np.asarray(doc["output_norm"]["max"], dtype=float),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"model file {path} is malformed: {exc}") from exc
    for layer in range(1, len(layer_sizes)):
        if weights[layer - 1].shape != (layer_sizes[layer], layer_sizes[layer - 1]):
            raise DataFormatError("weight shapes do not match the declared layer sizes")
        if biases[layer - 1].shape != (layer_sizes[layer],):
            raise DataFormatError("bias shapes do not match the declared layer sizes")
    return MlpModel(layer_sizes, weights, biases, in_norm, out_norm, meta=doc.get("meta", {}))
