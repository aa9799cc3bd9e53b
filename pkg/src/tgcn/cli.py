"""Command-line entry point.

Exit codes: 0 success, 1 unexpected failure, 2 invalid input,
3 numerical failure, 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .data_io import load_dataset, load_graph, load_model, read_node_ids, save_graph
from .errors import FormatError, NumericError, TGCNError, ValidationError
from .experiment import (
    ExperimentSpec,
    read_report,
    report_exit_code,
    report_json,
    run_experiment,
    sweep_csv,
)
from .graph_builders import (
    RNG_NAME,
    RNG_VERSION,
    DitherConfig,
    correlation_graph,
    edge_dither,
    er_realizations,
    knn_graph,
)
from .graph_core import TensorGraph
from .metrics import accuracy, macro_f1
from .model import forward
from .training import GRADCHECK_TOLERANCE, finite_diff_check, tiny_gradcheck_problem


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


# -- train ----------------------------------------------------------------------

def cmd_train(args) -> int:
    spec = ExperimentSpec.read(args.spec)
    spec_path = Path(args.spec)
    out = Path(args.out) if args.out else spec_path.parent / (spec_path.stem + "_run")
    out.mkdir(parents=True, exist_ok=True)
    log = None if args.quiet else _err
    report = run_experiment(spec, out, log=log, save_data=args.save_data)
    (out / "report.json").write_text(report_json(report), encoding="utf-8")
    if spec.sweep_key:
        (out / "sweep.csv").write_text(sweep_csv(report), encoding="utf-8")
    _print_summary(report)
    print(f"wrote {out / 'report.json'}")
    code = report_exit_code(report)
    if code:
        _err("all runs failed")
    return code


def _print_summary(report: dict) -> None:
    key = report.get("sweep_key")
    for p in report["points"]:
        acc = p["summary"]["accuracy"]
        f1 = p["summary"]["macro_f1"]
        head = f"{key}={p['sweep_value']}: " if key else ""
        if acc["n"] == 0:
            print(f"{head}no successful runs")
            continue
        sd = lambda s: "" if s["std"] is None else f" +- {s['std']:.4f}"  # noqa: E731
        print(f"{head}accuracy {acc['mean']:.4f}{sd(acc)}  macro_f1 {f1['mean']:.4f}{sd(f1)}  (n={acc['n']})")


# -- eval -----------------------------------------------------------------------

def cmd_eval(args) -> int:
    ds, g = load_dataset(args.dataset, row_normalize=args.row_normalize)
    if args.graph:
        g = load_graph(args.graph)
    if g.n_nodes != ds.n_nodes:
        raise ValidationError(f"graph has {g.n_nodes} nodes, dataset has {ds.n_nodes}")
    X = np.eye(ds.n_nodes) if args.identity_features else ds.X
    params = load_model(args.model, {"nodes": ds.n_nodes, "relations": g.n_relations, "features": X.shape[1]})
    Y_hat = forward(X, g, params)
    if args.subset == "test":
        subset = ds.test & (ds.labels >= 0)
    elif args.subset == "val":
        subset = ds.val & (ds.labels >= 0)
    elif args.subset == "all":
        subset = ds.labels >= 0
    else:
        subset = read_node_ids(args.subset)
    result = {
        "nodes_evaluated": int(np.count_nonzero(subset)) if subset.dtype == bool else int(subset.size),
        "accuracy": accuracy(Y_hat, ds.labels, subset),
        "macro_f1": macro_f1(Y_hat, ds.labels, subset),
    }
    print(json.dumps(result, sort_keys=True))
    if args.predictions:
        np.savetxt(args.predictions, np.argmax(Y_hat, axis=1), fmt="%d")
    return 0


# -- build-graph ----------------------------------------------------------------

def _read_features(args) -> np.ndarray:
    if args.dataset:
        return load_dataset(args.dataset)[0].X
    if not args.features:
        raise ValidationError("need --features FILE or --dataset DIR")
    try:
        X = np.loadtxt(args.features, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"could not parse features: {exc}", args.features) from None
    return X


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t]
    except ValueError:
        raise ValidationError(f"expected comma-separated integers, got {text!r}") from None


def cmd_build_graph(args) -> int:
    echo = {"method": args.method, "rng": RNG_NAME, "rng_version": RNG_VERSION}
    if args.method == "knn":
        X = _read_features(args)
        kappas = _int_list(args.kappa)
        if not kappas:
            raise ValidationError("--kappa is required for knn")
        g = TensorGraph(tuple(knn_graph(X, k) for k in kappas), tuple(f"knn{k}" for k in kappas))
        echo["kappa"] = ",".join(map(str, kappas))
    elif args.method == "corr":
        if args.eta is None:
            raise ValidationError("--eta is required for corr")
        X = _read_features(args)
        g = TensorGraph((correlation_graph(X, args.eta),), (f"corr{args.eta:g}",))
        echo["eta"] = args.eta
    elif args.method == "dither":
        if not args.graph:
            raise ValidationError("--graph DIR is required for dither")
        base = load_graph(args.graph).slabs[0].copy()
        base.data[:] = 1.0
        cfg = DitherConfig(args.q1, args.q2, args.samples, args.seed)
        g = edge_dither(base, cfg)
        echo.update(source=str(args.graph), q1=cfg.q1, q2=cfg.q2, samples=cfg.n_samples, seed=cfg.seed)
    else:
        if args.nodes is None or args.p is None:
            raise ValidationError("--nodes and --p are required for er")
        g = er_realizations(args.nodes, args.p, args.samples, args.seed)
        echo.update(p=args.p, samples=args.samples, seed=args.seed)
    save_graph(args.out, g, {f"build_{k}": v for k, v in echo.items()})
    print(f"wrote {g.n_relations} relation(s) over {g.n_nodes} nodes to {args.out}")
    return 0


# -- gradcheck ------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    worst = 0.0
    for per_node in (False, True):
        for seed in range(args.seeds):
            X, g, Y, M, params, cfg = tiny_gradcheck_problem(seed, per_node)
            res = finite_diff_check(X, g, Y, M, params, cfg, eps=args.eps)
            worst = max(worst, res.max_rel_error)
            mode = "per-node" if per_node else "shared"
            print(f"{mode:8s} seed {seed:2d}: max rel error {res.max_rel_error:.2e} "
                  f"({res.n_checked} checked, {res.n_excluded} excluded; worst at {res.worst or '-'})")
            for coord in res.excluded:
                print(f"    excluded near a kink: {coord}")
    print(f"worst {worst:.2e} (tolerance {GRADCHECK_TOLERANCE:g}) in {time.perf_counter() - t0:.1f}s")
    if not worst < GRADCHECK_TOLERANCE:
        raise NumericError(f"gradient check failed: {worst:.2e} >= {GRADCHECK_TOLERANCE:g}")
    return 0


# -- report ---------------------------------------------------------------------

def cmd_report(args) -> int:
    report = read_report(args.input)
    text = sweep_csv(report)
    if args.csv:
        Path(args.csv).write_text(text, encoding="utf-8")
        _print_summary(report)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tgcn", description="Tensor graph convolutional networks for node classification.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run an experiment spec (train, evaluate, report)")
    t.add_argument("--spec", required=True, help="experiment spec (key=value file)")
    t.add_argument("--out", help="output directory (default: <spec>_run next to the spec)")
    t.add_argument("--quiet", action="store_true", help="no per-run progress lines on stderr")
    t.add_argument("--save-data", action="store_true",
                   help="also write each run's dataset directory (features, splits, built graph)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved model on a dataset directory")
    e.add_argument("--model", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--graph", help="graph directory overriding the dataset's own graph")
    e.add_argument("--subset", default="test", help="test, val, all, or a file of node ids")
    e.add_argument("--row-normalize", action="store_true")
    e.add_argument("--identity-features", action="store_true", help="use X = I_N")
    e.add_argument("--predictions", help="write predicted class per node to this file")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("build-graph", help="construct graphs and write a graph directory")
    b.add_argument("--method", required=True, choices=("knn", "corr", "dither", "er"))
    b.add_argument("--out", required=True, help="output graph directory")
    b.add_argument("--features", help="feature matrix text file (one node per line)")
    b.add_argument("--dataset", help="dataset directory to take features from")
    b.add_argument("--kappa", default="", help="neighbor counts, comma-separated (knn)")
    b.add_argument("--eta", type=float, help="correlation threshold (corr)")
    b.add_argument("--graph", help="nominal graph directory (dither)")
    b.add_argument("--q1", type=float, default=0.9)
    b.add_argument("--q2", type=float, default=1.0)
    b.add_argument("--samples", type=int, default=10, help="number of slabs (dither, er)")
    b.add_argument("--nodes", type=int, help="node count (er)")
    b.add_argument("--p", type=float, help="edge probability (er)")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_build_graph)

    g = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    g.add_argument("--size", choices=("tiny",), default="tiny")
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--eps", type=float, default=1e-5)
    g.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="turn a report JSON into a sweep CSV")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--csv", help="output CSV (default: stdout)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TGCNError as exc:
        _err(f"error: {exc}")
        return exc.exit_code
    except OSError as exc:
        _err(f"error: {exc}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
