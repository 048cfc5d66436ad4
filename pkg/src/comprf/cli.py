"""Command line front end.

Subcommands: train, predict, evaluate, cv, bench, simulate. Every command
that writes artifacts also drops a JSON run manifest next to them with the
resolved settings, seeds, dataset fingerprints, and tool version, so a run
can be repeated exactly. Output files themselves are byte-identical across
reruns; manifests differ only in the `created` timestamp.

Exit codes: 0 success, 2 configuration or usage error, 3 data/oracle/model
file error (including missing files and fingerprint refusals), 4 anything
else.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
import time
import traceback

import numpy as np

from . import __version__
from . import dataset as ds_mod
from . import evaluation as ev
from . import forest as forest_mod
from . import theorysim
from .comptree import PAIR_SCHEMES, SUPERVISED, UNSUPERVISED, PivotPolicy
from .dataset import CLASSIFY, REGRESS, SplitSpec
from .errors import (
    ComprfError,
    ConfigError,
    DataError,
    FingerprintMismatchError,
    ModelFormatError,
    OracleError,
)

TASKS = (CLASSIFY, REGRESS)
POLICIES = (SUPERVISED, UNSUPERVISED)
ENGINES = ("auto", "fast", "generic")

# grid used by the canned cross-validated benchmarks
BENCH_GRID = "n0=1,4,16,64;trees=1,4,16,64,256"
KNN_K = 3


# ---------------------------------------------------------------------------
# shared plumbing

def _resolve_threads(requested):
    """Apply --threads / COMPRF_THREADS to numba's pool.

    The tree kernels are serial, so this caps background parallelism only;
    results never depend on it.
    """
    value = requested
    if value is None:
        raw = os.environ.get("COMPRF_THREADS", "").strip()
        if raw:
            try:
                value = int(raw)
            except ValueError:
                raise ConfigError(
                    f"COMPRF_THREADS must be an integer, got {raw!r}"
                ) from None
    if value is None:
        return None
    if value < 1:
        raise ConfigError(f"thread count must be >= 1, got {value}")
    try:
        import numba

        numba.set_num_threads(min(value, numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass
    return value


def _manifest(command: str, config: dict, fingerprints: dict, outputs, threads):
    return {
        "tool": "comprf",
        "version": __version__,
        "command": command,
        "config": config,
        "fingerprints": fingerprints,
        "outputs": [str(p) for p in outputs],
        "threads": "auto" if threads is None else threads,
        "created": datetime.datetime.now(datetime.timezone.utc)
        .isoformat(timespec="seconds"),
    }


def _write_manifest(path, payload: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _make_policy(kind, task: str, pair_scheme: str) -> PivotPolicy:
    if kind is None:
        kind = SUPERVISED if task == CLASSIFY else UNSUPERVISED
    return PivotPolicy(kind, pair_scheme)


def _load(args, task: str):
    return ev.load_table(
        args.data, args.fmt, task,
        label_column=args.label_column, labels_path=args.labels,
    )


def _float_cell(v) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    threads = _resolve_threads(args.threads)
    data, oracle, fp = _load(args, args.task)
    policy = _make_policy(args.policy, args.task, args.pair_scheme)
    params = forest_mod.ForestParams(
        M=args.trees, n0=args.n0, seed=args.seed, policy=policy,
        task=args.task, r=args.ratio, multiclass_rule=args.rule,
    )
    ids = np.arange(data.n, dtype=np.int64)
    fo = forest_mod.fit(ids, oracle, data.y, params,
                        fingerprint=fp, engine=args.engine)
    forest_mod.save(fo, args.out)
    total = sum(t.build_queries for t in fo.trees)
    config = {
        "data": str(args.data), "format": args.fmt, "task": args.task,
        "label_column": args.label_column,
        "labels": None if args.labels is None else str(args.labels),
        "policy": policy.kind, "pair_scheme": policy.pair_scheme,
        "n0": args.n0, "trees": args.trees, "ratio": args.ratio,
        "seed": args.seed, "rule": args.rule, "engine": args.engine,
    }
    _write_manifest(f"{args.out}.manifest.json",
                    _manifest("train", config, {"data": fp}, [args.out], threads))
    print(f"model written to {args.out}")
    print(f"triplet comparisons used: {total}")
    return 0


def cmd_predict(args) -> int:
    threads = _resolve_threads(args.threads)
    fo = forest_mod.load(args.model)
    task = fo.params.task
    data, oracle, fp = _load(args, task)
    if fo.fingerprint and fo.fingerprint != fp:
        raise FingerprintMismatchError(
            f"model {args.model} was fit on a dataset with fingerprint "
            f"{fo.fingerprint[:12]}.., but {args.data} has {fp[:12]}..; "
            "refusing to predict"
        )
    ids = np.arange(data.n, dtype=np.int64)
    preds = fo.predict_batch(ids, oracle, engine=args.engine)

    decode = None
    if task == CLASSIFY and data.label_map is not None:
        decode = {code: name for name, code in data.label_map.items()}
    lines = ["index,prediction,pooled_size,triplet_queries"]
    for i, p in enumerate(preds):
        if task == CLASSIFY:
            shown = decode[int(p.value)] if decode else str(int(p.value))
        else:
            shown = _float_cell(p.value)
        lines.append(f"{i},{shown},{p.pooled_size},{p.triplet_queries}")
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    config = {
        "model": str(args.model), "data": str(args.data), "format": args.fmt,
        "label_column": args.label_column,
        "labels": None if args.labels is None else str(args.labels),
        "engine": args.engine,
    }
    fps = {"data": fp, "model": fo.fingerprint}
    _write_manifest(f"{args.out}.manifest.json",
                    _manifest("predict", config, fps, [args.out], threads))
    total = sum(p.triplet_queries for p in preds)
    print(f"predictions written to {args.out}")
    print(f"triplet comparisons used: {total}")
    return 0


_EVAL_OVERRIDES = (
    ("data", "data"), ("fmt", "format"), ("task", "task"),
    ("policy", "policy"), ("pair_scheme", "pair_scheme"), ("n0", "n0"),
    ("trees", "trees"), ("ratio", "ratio"), ("seed", "seed"),
    ("repeats", "repeats"), ("folds", "folds"), ("grid", "grid"),
    ("train_fraction", "train_fraction"), ("subsample", "subsample"),
    ("label_column", "label_column"), ("labels", "labels"),
)


def cmd_evaluate(args) -> int:
    threads = _resolve_threads(args.threads)
    cfg: dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = ev.parse_config(fh.read())
    # flags beat the config file
    for attr, key in _EVAL_OVERRIDES:
        val = getattr(args, attr)
        if val is not None:
            cfg[key] = val
    if args.grid is not None and "cv" not in cfg:
        cfg["cv"] = True
    report = ev.run_experiment(cfg, out_dir=args.out, engine=args.engine)
    print(
        f"{report.metric}: mean={report.estimate:.6g} std={report.std:.6g} "
        f"over {len(report.per_repeat)} repeats"
    )
    print(f"triplet comparisons used: {report.triplet_queries}")
    if args.out:
        outs = [os.path.join(args.out, "report.json"),
                os.path.join(args.out, "repeats.csv")]
        fps = {"data": report.params["fingerprint"]}
        _write_manifest(
            os.path.join(args.out, "manifest.json"),
            _manifest("evaluate", dict(report.params), fps, outs, threads),
        )
        print(f"report written to {args.out}")
    return 0


def cmd_cv(args) -> int:
    threads = _resolve_threads(args.threads)
    data, oracle, fp = _load(args, args.task)
    axes = ev.parse_grid(args.grid)
    grid = ev.GridSpec(axes["n0"], axes["trees"],
                       folds=args.folds, seed=args.seed)
    policy = _make_policy(args.policy, args.task, args.pair_scheme)
    ids = np.arange(data.n, dtype=np.int64)
    res = ev.cross_validate(ids, oracle, data.y, grid, policy, args.task,
                            r=args.ratio, stratified=args.stratified,
                            engine=args.engine)

    os.makedirs(args.out, exist_ok=True)
    table_path = os.path.join(args.out, "grid.csv")
    rows = ["n0,trees,mean,std"]
    for a, n0 in enumerate(grid.n0_values):
        for b, m in enumerate(grid.m_values):
            cell = res.fold_metrics[:, a, b]
            rows.append(
                f"{n0},{m},{_float_cell(res.means[a, b])},{_float_cell(cell.std())}"
            )
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")

    summary = {
        "metric": res.metric,
        "folds": grid.folds,
        "grid_n0": list(grid.n0_values),
        "grid_trees": list(grid.m_values),
        "best_n0": res.best_n0,
        "best_trees": res.best_m,
        "best_mean": res.best_mean,
        "triplet_queries": res.triplet_queries,
    }
    summary_path = os.path.join(args.out, "summary.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    config = {
        "data": str(args.data), "format": args.fmt, "task": args.task,
        "label_column": args.label_column,
        "labels": None if args.labels is None else str(args.labels),
        "policy": policy.kind, "pair_scheme": policy.pair_scheme,
        "grid": args.grid, "folds": args.folds, "seed": args.seed,
        "ratio": args.ratio, "stratified": args.stratified,
        "engine": args.engine,
    }
    _write_manifest(
        os.path.join(args.out, "manifest.json"),
        _manifest("cv", config, {"data": fp}, [table_path, summary_path], threads),
    )
    print(
        f"best cell: n0={res.best_n0} trees={res.best_m} "
        f"{res.metric}={res.best_mean:.6g}"
    )
    print(f"grid table written to {table_path}")
    return 0


# ---------------------------------------------------------------------------
# canned benchmarks
#
# Each benchmark expects prepared files under --data-dir (see the README for
# the exact layout) and reproduces one of the desk-scale experiments.

def _bench_boston(d):
    return [("boston", {
        "task": REGRESS, "data": os.path.join(d, "boston.csv"),
        "policy": UNSUPERVISED, "repeats": 10, "seed": 0,
        "train_fraction": 0.9, "cv": True, "grid": BENCH_GRID, "folds": 10,
    })]


def _bench_gisette(d):
    return [("gisette", {
        "task": CLASSIFY,
        "train_data": os.path.join(d, "gisette_train.csv"),
        "test_data": os.path.join(d, "gisette_test.csv"),
        "policy": SUPERVISED, "repeats": 10, "seed": 0,
        "cv": True, "grid": BENCH_GRID, "folds": 10,
    })]


def _bench_gisette_subsample(d):
    (_, cfg), = _bench_gisette(d)
    cfg["subsample"] = 2000
    return [("gisette_subsample", cfg)]


def _bench_ucihar(d):
    base = {
        "task": CLASSIFY, "data": os.path.join(d, "ucihar.csv"),
        "subsample": 4000, "train_fraction": 0.9, "repeats": 10,
        "seed": 0, "n0": 1, "trees": 128,
    }
    return [
        ("ucihar_supervised", dict(base, policy=SUPERVISED)),
        ("ucihar_unsupervised", dict(base, policy=UNSUPERVISED)),
    ]


def _bench_mnist2(d):
    return [("mnist2", {
        "task": CLASSIFY, "data": os.path.join(d, "mnist2.csv"),
        "policy": SUPERVISED, "repeats": 10, "seed": 0,
        "train_fraction": 0.9, "n0": 1, "trees": 256,
    })]


BENCHES = {
    "boston": _bench_boston,
    "gisette": _bench_gisette,
    "gisette_subsample": _bench_gisette_subsample,
    "ucihar": _bench_ucihar,
    "mnist2": _bench_mnist2,
}

_BENCH_OVERRIDES = ("repeats", "seed", "folds", "grid", "subsample",
                    "trees", "n0", "train_fraction")


def _knn_companion(cfg, out_dir):
    """Exact KNN on the same file and the same per-repeat splits."""
    t0 = time.perf_counter()
    data, oracle, fp = ev.load_table(cfg["data"], "csv", CLASSIFY)
    repeats = int(cfg["repeats"])
    seed = int(cfg["seed"])
    frac = float(cfg["train_fraction"])
    errs = []
    for i in range(repeats):
        tr_ids, te_ids = ds_mod.split(data, SplitSpec(frac, seed + i, False))
        pred = ev.knn_predict(tr_ids, te_ids, oracle, data.y, KNN_K)
        errs.append(ev.error_rate(data.y[te_ids], pred))
    arr = np.array(errs)
    report = ev.EvalReport(
        metric="error_rate",
        estimate=float(arr.mean()),
        std=float(arr.std()),
        per_repeat=tuple(float(v) for v in errs),
        triplet_queries=0,
        wall_seconds=time.perf_counter() - t0,
        params={
            "method": "knn", "k": KNN_K, "data": str(cfg["data"]),
            "task": CLASSIFY, "repeats": repeats, "seed": seed,
            "train_fraction": frac, "fingerprint": fp,
        },
    )
    ev.write_report(report, out_dir)
    return report


def cmd_bench(args) -> int:
    threads = _resolve_threads(args.threads)
    runs = BENCHES[args.name](args.data_dir)
    overrides = {
        key: getattr(args, key)
        for key in _BENCH_OVERRIDES
        if getattr(args, key) is not None
    }
    outputs = []
    reports = {}
    for tag, cfg in runs:
        cfg.update(overrides)
        sub_out = os.path.join(args.out, tag)
        rep = ev.run_experiment(cfg, out_dir=sub_out, engine=args.engine)
        reports[tag] = rep
        outputs += [os.path.join(sub_out, "report.json"),
                    os.path.join(sub_out, "repeats.csv")]
        print(
            f"{tag}: {rep.metric} mean={rep.estimate:.6g} "
            f"std={rep.std:.6g} ({len(rep.per_repeat)} repeats)"
        )
    if args.name == "ucihar":
        sup = reports["ucihar_supervised"].estimate
        uns = reports["ucihar_unsupervised"].estimate
        print(f"supervised - unsupervised: {sup - uns:+.6g}")
    if args.name == "mnist2":
        (_, cfg), = runs
        knn_out = os.path.join(args.out, "mnist2_knn")
        knn_rep = _knn_companion(cfg, knn_out)
        reports["mnist2_knn"] = knn_rep
        outputs += [os.path.join(knn_out, "report.json"),
                    os.path.join(knn_out, "repeats.csv")]
        print(
            f"mnist2_knn: error_rate mean={knn_rep.estimate:.6g} "
            f"std={knn_rep.std:.6g} (k={KNN_K})"
        )
    fps = {
        tag: rep.params["fingerprint"]
        for tag, rep in reports.items()
        if "fingerprint" in rep.params
    }
    config = {"name": args.name, "data_dir": str(args.data_dir),
              "engine": args.engine, **overrides}
    _write_manifest(
        os.path.join(args.out, "manifest.json"),
        _manifest("bench", config, fps, outputs, threads),
    )
    return 0


def _trend_sweep(n: int):
    if n < 256:
        raise ConfigError(f"trend sweep needs --n >= 256, got {n}")
    out = []
    k = 8
    while 2 ** k <= n:
        out.append(2 ** k)
        k += 2
    return out


def cmd_simulate(args) -> int:
    threads = _resolve_threads(args.threads)
    config = theorysim.SimConfig(d=args.dim, alpha=args.alpha, n=args.n,
                                 seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    resolved = {
        "what": args.what, "dim": args.dim, "alpha": args.alpha,
        "n": args.n, "seed": args.seed, "kmax": args.kmax,
        "trials": args.trials, "eta": args.eta, "repeats": args.repeats,
        "test_n": args.test_n,
    }
    summary: dict = {"config": resolved}
    outputs = []
    if args.what in ("halving", "both"):
        curve = theorysim.diameter_halving_curve(config, k_max=args.kmax,
                                                 trials=args.trials)
        path = os.path.join(args.out, "halving.csv")
        curve.to_csv(path)
        outputs.append(path)
        summary["halving"] = curve.summary()
        print(
            f"halving: slope={curve.slope:.4f} "
            f"(stderr {curve.slope_stderr:.4f}, {args.trials} trials)"
        )
    if args.what in ("trend", "both"):
        sweep = _trend_sweep(args.n)
        trend = theorysim.consistency_trend(config, sweep, eta=args.eta,
                                            repeats=args.repeats,
                                            test_n=args.test_n)
        path = os.path.join(args.out, "trend.csv")
        trend.to_csv(path)
        outputs.append(path)
        summary["trend"] = trend.summary()
        last = trend.points[-1]
        print(
            f"trend: error {last.error:.4f} at n={last.n} "
            f"(noise rate {args.eta})"
        )
    summary_path = os.path.join(args.out, "summary.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs.append(summary_path)
    _write_manifest(
        os.path.join(args.out, "manifest.json"),
        _manifest("simulate", resolved, {}, outputs, threads),
    )
    print(f"simulation results written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_data_flags(p, include_task=True):
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--format", dest="fmt", default="csv", choices=ev.FORMATS,
                   help="input layout (default csv)")
    if include_task:
        p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--label-column", type=int, default=-1,
                   help="label column for csv input (default last)")
    p.add_argument("--labels", default=None,
                   help="label file for distmatrix/gram input")


def _add_run_flags(p):
    p.add_argument("--threads", type=int, default=None,
                   help="numba thread cap (env COMPRF_THREADS; results "
                        "never depend on it)")
    p.add_argument("--engine", default="auto", choices=ENGINES,
                   help="tree engine (default auto)")


def _add_model_flags(p):
    p.add_argument("--policy", choices=POLICIES, default=None,
                   help="pivot policy (default: supervised for classify, "
                        "unsupervised for regress)")
    p.add_argument("--pair-scheme", dest="pair_scheme",
                   choices=PAIR_SCHEMES, default="pairs",
                   help="supervised pivot sampling scheme")
    p.add_argument("--ratio", type=float, default=1.0,
                   help="per-tree subsample fraction (default 1.0)")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="comprf",
        description="Comparison-based random forests over triplet oracles.",
    )
    parser.add_argument("--version", action="version",
                        version=f"comprf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")

    t = sub.add_parser("train", help="fit a forest and save the model file")
    _add_data_flags(t)
    _add_model_flags(t)
    t.add_argument("--n0", type=int, default=1,
                   help="leaf size threshold (default 1)")
    t.add_argument("--trees", type=int, default=128,
                   help="number of trees (default 128)")
    t.add_argument("--rule", choices=("plurality", "one_vs_one"),
                   default="plurality", help="multiclass vote rule")
    t.add_argument("--out", required=True, help="model file to write")
    _add_run_flags(t)
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("predict",
                       help="predict every row of a dataset with a saved model")
    p.add_argument("--model", required=True, help="model file from train")
    _add_data_flags(p, include_task=False)
    p.add_argument("--out", required=True, help="prediction CSV to write")
    _add_run_flags(p)
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate",
                       help="run a configured experiment and report the metric")
    e.add_argument("--config", default=None,
                   help="key = value experiment file; flags below override it")
    e.add_argument("--data", default=None)
    e.add_argument("--format", dest="fmt", default=None, choices=ev.FORMATS)
    e.add_argument("--task", default=None, choices=TASKS)
    e.add_argument("--policy", default=None, choices=POLICIES)
    e.add_argument("--pair-scheme", dest="pair_scheme", default=None,
                   choices=PAIR_SCHEMES)
    e.add_argument("--n0", type=int, default=None)
    e.add_argument("--trees", type=int, default=None)
    e.add_argument("--ratio", type=float, default=None)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--repeats", type=int, default=None)
    e.add_argument("--folds", type=int, default=None)
    e.add_argument("--grid", default=None,
                   help='model-selection grid, e.g. "n0=1,4;trees=16,64" '
                        "(implies cv=true)")
    e.add_argument("--train-fraction", dest="train_fraction", type=float,
                   default=None)
    e.add_argument("--subsample", type=int, default=None)
    e.add_argument("--label-column", dest="label_column", type=int,
                   default=None)
    e.add_argument("--labels", default=None)
    e.add_argument("--out", default=None, help="report directory")
    _add_run_flags(e)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("cv", help="cross-validate a parameter grid")
    _add_data_flags(c)
    c.add_argument("--policy", choices=POLICIES, default=None)
    c.add_argument("--pair-scheme", dest="pair_scheme",
                   choices=PAIR_SCHEMES, default="pairs")
    c.add_argument("--grid", required=True,
                   help='e.g. "n0=1,4,16,64;trees=1,4,16,64,256"')
    c.add_argument("--folds", type=int, default=5)
    c.add_argument("--ratio", type=float, default=1.0)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--stratified", action="store_true")
    c.add_argument("--out", required=True, help="output directory")
    _add_run_flags(c)
    c.set_defaults(func=cmd_cv)

    b = sub.add_parser("bench",
                       help="run a canned benchmark from prepared data files")
    b.add_argument("name", choices=sorted(BENCHES))
    b.add_argument("--data-dir", dest="data_dir", required=True,
                   help="directory with the prepared dataset files")
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("--repeats", type=int, default=None)
    b.add_argument("--seed", type=int, default=None)
    b.add_argument("--folds", type=int, default=None)
    b.add_argument("--grid", default=None)
    b.add_argument("--subsample", type=int, default=None)
    b.add_argument("--trees", type=int, default=None)
    b.add_argument("--n0", type=int, default=None)
    b.add_argument("--train-fraction", dest="train_fraction", type=float,
                   default=None)
    _add_run_flags(b)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("simulate",
                       help="run the continuous-tree theory simulations")
    s.add_argument("--what", choices=("halving", "trend", "both"),
                   default="both")
    s.add_argument("--dim", type=int, default=2)
    s.add_argument("--alpha", type=float, default=0.9,
                   help="truncation depth coefficient, in (0, 1/log 2)")
    s.add_argument("--n", type=int, default=65536,
                   help="largest sample size in the trend sweep")
    s.add_argument("--trials", type=int, default=500,
                   help="trees per halving-curve estimate")
    s.add_argument("--kmax", type=int, default=8,
                   help="deepest level of the halving curve")
    s.add_argument("--eta", type=float, default=0.2,
                   help="label noise rate for the trend")
    s.add_argument("--repeats", type=int, default=6,
                   help="trees per trend point")
    s.add_argument("--test-n", dest="test_n", type=int, default=20000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--threads", type=int, default=None)
    s.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OracleError, ModelFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ComprfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except Exception:
        traceback.print_exc()
        return 4


if __name__ == "__main__":
    sys.exit(main())
