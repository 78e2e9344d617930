"""Command-line interface orchestrating the pipeline end to end.

Subcommands: generate, condition, analyze, train, identify, robustness.
Configuration comes from an optional JSON file; flags override config fields.
Exit codes: 0 ok, 2 user/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ._version import __version__
from . import ann, database, robustness
from .errors import SolverError, StochidError


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.17e}" for v in row) + "\n")


def _load_config(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise StochidError(f"cannot read config file {path}: {exc}") from exc


def _load_observation(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise StochidError(f"cannot read observation file {path}: {exc}") from exc
    q = doc.get("q")
    if not isinstance(q, list) or len(q) != 9:
        raise StochidError("observation file must hold a field 'q' with 9 numbers")
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)):
        raise StochidError("observation contains non-finite values")
    return q


def _figure_setup():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "stochid"
    return plt


def _save_svg(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args):
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    n = args.n if args.n is not None else cfg.get("n_d", 500)
    threads = args.threads if args.threads is not None else cfg.get("threads", 1)
    admissible = database.AdmissibleSet.from_dict(cfg["admissible_set"]) \
        if "admissible_set" in cfg else database.AdmissibleSet()
    forward_cfg = database.ForwardConfig.from_dict(cfg["forward"]) \
        if "forward" in cfg else database.ForwardConfig()
    print(f"generating {n} rows (seed {seed}, threads {threads})")
    db = database.generate_initial(
        n, admissible=admissible, cfg=forward_cfg, seed=seed, threads=threads
    )
    out = Path(args.output)
    database.save_database(db, out)
    print(f"wrote {out} ({db.n} rows, {db.manifest['failures']} resampled failures)")
    return 0


def cmd_condition(args):
    cfg = _load_config(args.config)
    cond_kwargs = dict(cfg.get("conditioning", {}))
    if args.bandwidth_scale is not None:
        cond_kwargs["bandwidth_scale"] = args.bandwidth_scale
    cond = database.ConditioningConfig(**cond_kwargs)
    db = database.load_database(args.database, expect_kind="initial")
    processed = database.condition_database(db, cond)
    out = Path(args.output)
    database.save_database(processed, out)
    bw = processed.manifest["bandwidths"]
    print(f"wrote {out}; bandwidths q={['%.3e' % v for v in bw['q']]}")
    return 0


def cmd_analyze(args):
    db = database.load_database(args.database)
    corr = database.correlation_matrix(db)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "correlation.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",H1,H2,H3,H4\n")
        for k in range(9):
            fh.write(f"Q{k + 1}," + ",".join(f"{v:.17e}" for v in corr[k]) + "\n")
    plt = _figure_setup()
    fig, ax = plt.subplots(figsize=(4.2, 6))
    im = ax.imshow(corr, vmin=-1, vmax=1, cmap="jet", aspect="auto")
    ax.set_xticks(range(4), [f"H{j + 1}" for j in range(4)])
    ax.set_yticks(range(9), [f"Q{k + 1}" for k in range(9)])
    ax.set_xlabel("targets")
    ax.set_ylabel("inputs")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    _save_svg(fig, out / "correlation.svg")
    plt.close(fig)
    _write_json(out / "manifest.json", {
        "command": "analyze", "database": str(args.database),
        "database_kind": db.kind, "seed": db.manifest.get("seed"),
    })
    print(f"wrote {out}/correlation.csv and correlation.svg")
    return 0


def _parse_arch(text):
    try:
        arch = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise StochidError(f"invalid architecture {text!r}") from exc
    if not arch or any(a < 1 for a in arch):
        raise StochidError(f"invalid architecture {text!r}")
    return arch


DESK_SWEEP = ["4", "10", "25", "50", "10,4", "25,10", "50,20"]


def _train_one(db, arch, train_cfg, out, label=""):
    model, report = ann.train_scg(db, arch, train_cfg)
    model.meta["training_manifest_hash"] = database.manifest_hash(db.manifest)
    suffix = f"_{label}" if label else ""
    ann.save_model(model, out / f"model{suffix}.json")
    iters = range(1, len(report.curves["train"]) + 1)
    _write_csv(
        out / f"train_report{suffix}.csv",
        ["iteration", "train_mse", "validation_mse", "test_mse"],
        [
            (float(i), report.curves["train"][i - 1],
             report.curves["validation"][i - 1], report.curves["test"][i - 1])
            for i in iters
        ],
    )
    _write_json(out / f"metrics{suffix}.json", {
        "architecture": [int(a) for a in (arch if not np.isscalar(arch) else [arch])],
        "n_params": report.n_params,
        "best_iteration": report.best_iteration,
        "restart_index": report.restart_index,
        "final_mse": report.final_mse,
        "r_values": [float(v) for v in report.r_values],
    })
    return model, report


def cmd_train(args):
    cfg = _load_config(args.config)
    train_kwargs = dict(cfg.get("train", {}))
    config_arch = train_kwargs.pop("arch", None)
    arch_text = args.arch if args.arch is not None else (
        ",".join(str(v) for v in config_arch) if config_arch else "50"
    )
    if args.seed is not None:
        train_kwargs["seed"] = args.seed
    if args.max_iterations is not None:
        train_kwargs["max_iterations"] = args.max_iterations
    if args.restarts is not None:
        train_kwargs["restarts"] = args.restarts
    if "split" in train_kwargs:
        train_kwargs["split"] = tuple(train_kwargs["split"])
    try:
        train_cfg = ann.TrainConfig(**train_kwargs)
    except TypeError as exc:
        raise StochidError(f"invalid train config: {exc}") from exc
    db = database.load_database(args.database)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)

    if args.sweep:
        results = []
        for text in DESK_SWEEP:
            arch = _parse_arch(text)
            model, report = _train_one(db, arch, train_cfg, out, label=text.replace(",", "x"))
            results.append((text, report))
            print(f"arch {text}: test mse {report.final_mse['test']:.3e}")
        results.sort(key=lambda r: r[1].final_mse["test"])
        with open(out / "sweep.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("architecture,n_params,train_mse,validation_mse,test_mse\n")
            for text, report in results:
                fh.write(
                    f"\"{text}\",{report.n_params},"
                    f"{report.final_mse['train']:.17e},"
                    f"{report.final_mse['validation']:.17e},"
                    f"{report.final_mse['test']:.17e}\n"
                )
        best_text = results[0][0]
        print(f"best architecture: {best_text}")
        model, report = _train_one(db, _parse_arch(best_text), train_cfg, out)
    else:
        arch = _parse_arch(args.arch)
        model, report = _train_one(db, arch, train_cfg, out)
    _write_json(out / "manifest.json", {
        "command": "train", "database": str(args.database),
        "database_kind": db.kind, "seed": train_cfg.seed,
        "sweep": bool(args.sweep), "arch": None if args.sweep else args.arch,
    })
    print(
        f"best iteration {report.best_iteration}, "
        f"test mse {report.final_mse['test']:.3e}, "
        f"R values {[f'{v:.4f}' for v in report.r_values]}"
    )
    return 0


def cmd_identify(args):
    model = ann.load_model(args.model)
    q_obs = _load_observation(args.observation)
    h_out = ann.forward(model, q_obs)
    names = ["delta", "ell", "kappa", "mu"]
    for name, value in zip(names, h_out):
        print(f"{name} = {value:.6e}")
    _write_json(args.output, {
        "h_out": [float(v) for v in h_out],
        "model": str(args.model),
        "observation": str(args.observation),
    })
    return 0


def cmd_robustness(args):
    cfg = _load_config(args.config)
    rob_cfg = cfg.get("robustness", {})
    s_values = [float(v) for v in args.s.split(",")] if args.s else rob_cfg.get(
        "s", [0.0, 0.01, 0.02, 0.03, 0.04, 0.05]
    )
    n_s = args.n_s if args.n_s is not None else rob_cfg.get("n_s", 100000)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    model = ann.load_model(args.model)
    q_obs = _load_observation(args.observation)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)

    names = ["h1", "h2", "h3", "h4"]
    entries = []
    summaries = []
    for si, s in enumerate(s_values):
        if s < 0.0:
            raise StochidError("uncertainty levels must be nonnegative")
        model_in = robustness.InputUncertaintyModel.uniform_s(q_obs, s)
        if s == 0.0:
            h0 = ann.forward(model, q_obs)
            summary = robustness.OutputSummary(
                mean=h0, ci95=np.column_stack([h0, h0]), pdfs=[None] * 4, n_samples=1
            )
            skipped = 0
        else:
            samples = robustness.sample_observed_qoi(model_in, n_s, seed=(seed, si))
            outputs, skipped = robustness.propagate(model, samples)
            if outputs.shape[0] == 0:
                raise SolverError("all propagated samples were non-finite")
            summary = robustness.summarize(outputs)
        summaries.append(summary)
        entries.append({
            "s": s,
            "n_samples": summary.n_samples,
            "skipped": skipped,
            "mean": [float(v) for v in summary.mean],
            "ci95": [[float(a), float(b)] for a, b in summary.ci95],
        })
        for j, name in enumerate(names):
            if summary.pdfs[j] is None:
                continue
            _write_csv(
                out / f"pdf_{name}_{s:g}.csv",
                ["grid", "density"],
                np.column_stack([summary.pdfs[j]["grid"], summary.pdfs[j]["pdf"]]),
            )
        print(f"s={s:g}: mean={[f'{v:.5g}' for v in summary.mean]}")
    _write_json(out / "summary.json", {
        "seed": seed, "n_s": n_s, "model": str(args.model),
        "observation": str(args.observation), "results": entries,
    })

    plt = _figure_setup()
    fig, axes = plt.subplots(2, 2, figsize=(9, 7))
    s_arr = np.asarray(s_values)
    for j, (name, ax) in enumerate(zip(names, axes.ravel())):
        means = [e["mean"][j] for e in entries]
        lo = [e["ci95"][j][0] for e in entries]
        hi = [e["ci95"][j][1] for e in entries]
        ax.fill_between(s_arr, lo, hi, alpha=0.25, color="tab:blue")
        ax.plot(s_arr, means, color="tab:blue", lw=1.5)
        ax.set_xlabel("s")
        ax.set_ylabel(name)
    fig.tight_layout()
    _save_svg(fig, out / "robustness_ci.svg")
    plt.close(fig)

    fig, axes = plt.subplots(2, 2, figsize=(9, 7))
    for j, (name, ax) in enumerate(zip(names, axes.ravel())):
        for s, summary in zip(s_values, summaries):
            if summary.pdfs[j] is None:
                continue
            ax.plot(summary.pdfs[j]["grid"], summary.pdfs[j]["pdf"], label=f"s={s:g}")
        ax.set_xlabel(name)
        ax.set_ylabel("pdf")
        ax.legend(fontsize=7)
    fig.tight_layout()
    _save_svg(fig, out / "robustness_pdfs.svg")
    plt.close(fig)
    print(f"wrote {out}/summary.json and plots")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="stochid",
        description="Statistical inverse identification of random-field "
                    "elasticity hyperparameters",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate the initial database")
    p.add_argument("-c", "--config", default=None)
    p.add_argument("-n", type=int, default=None, help="number of rows")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("-o", "--output", default="out/db_initial")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("condition", help="condition an initial database")
    p.add_argument("database")
    p.add_argument("-c", "--config", default=None)
    p.add_argument("--bandwidth-scale", type=float, default=None)
    p.add_argument("-o", "--output", default="out/db_processed")
    p.set_defaults(func=cmd_condition)

    p = sub.add_parser("analyze", help="correlation analysis of a database")
    p.add_argument("database")
    p.add_argument("-o", "--output", default="out/analysis")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="train the surrogate network")
    p.add_argument("database")
    p.add_argument("-c", "--config", default=None)
    p.add_argument("--arch", default="50", help="hidden layer sizes, e.g. 50 or 25,10")
    p.add_argument("--sweep", action="store_true", help="train the architecture grid")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("-o", "--output", default="out/model")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("identify", help="evaluate the surrogate on an observation")
    p.add_argument("model")
    p.add_argument("observation")
    p.add_argument("-o", "--output", default="identify.json")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("robustness", help="propagate input uncertainty")
    p.add_argument("model")
    p.add_argument("observation")
    p.add_argument("-c", "--config", default=None)
    p.add_argument("--s", default=None, help="comma-separated uncertainty levels")
    p.add_argument("--n-s", type=int, default=None, help="samples per level")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-o", "--output", default="out/robustness")
    p.set_defaults(func=cmd_robustness)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except StochidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
