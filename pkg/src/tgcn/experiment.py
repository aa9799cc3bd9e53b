"""Experiment specs, repeated runs and JSON/CSV reports.

An experiment spec is a key=value file. Keys carry a section prefix:

    dataset.path = DIR            # dataset directory, or
    dataset.synthetic = gaussian  # with dataset.nodes / dataset.features
    dataset.split_counts = 200,200,600    # or dataset.split_fractions
    dataset.row_normalize = 0
    dataset.identity_features = 0
    graph.builders = knn:5, knn:10        # see BUILDERS
    graph.insert_edges = 0                # random insertions into the loaded graph
    noise.snr = inf
    noise.target = features               # or edges
    model.<field> = ...                   # ModelConfig fields
    train.<field> = ...                   # TrainConfig fields (seed excluded)
    eval.subset = test_mask               # or attacked_nodes with eval.nodes_file
    repeats = 3
    seed_base = 0
    sweep.key = noise.snr                 # optional, any other spec key
    sweep.values = 0.2, 1, 5, 25

Repeat ``r`` of every sweep point runs with seed ``seed_base + r`` for
data generation, splitting, noise, perturbation and initialization.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .data_io import (
    Dataset,
    load_dataset,
    make_splits,
    read_key_values,
    read_node_ids,
    save_dataset,
    save_model,
    split_by_counts,
)
from .errors import FormatError, TGCNError, ValidationError
from .graph_builders import (
    RNG_NAME,
    RNG_VERSION,
    DitherConfig,
    NoiseConfig,
    add_noise,
    correlation_graph,
    edge_dither,
    er_realizations,
    knn_graph,
    perturb_insert_edges,
    synthetic_gaussian_dataset,
)
from .graph_core import TensorGraph
from .metrics import accuracy, macro_f1
from .model import ModelConfig, forward
from .training import TrainConfig, train

REPORT_VERSION = 1
METRICS = ("accuracy", "macro_f1")
BUILDERS = ("passthrough", "knn:K", "corr:ETA", "dither:I[:q1[:q2]]", "er:P[:COUNT]")


# -- typed config parsing ------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(text: str, like):
    if isinstance(like, bool):
        return _parse_bool(text)
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        items = [t for t in text.replace(",", " ").split()]
        kind = type(like[0]) if like else float
        return tuple(kind(t) for t in items)
    return text.strip()


def config_from_mapping(cls, values: Mapping[str, str], where: str = ""):
    """Build a frozen config dataclass from string values typed by its defaults."""
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, text in values.items():
        if key not in names:
            raise ValidationError(f"{where}unknown {cls.__name__} field {key!r}")
        try:
            kwargs[key] = _convert(text, getattr(defaults, key))
        except ValueError as exc:
            raise ValidationError(f"{where}bad value for {key!r}: {exc}") from None
    return cls(**kwargs)


def read_train_config(path) -> TrainConfig:
    """A flat key=value file of TrainConfig fields."""
    return config_from_mapping(TrainConfig, read_key_values(path), f"{path}: ")


# -- spec ------------------------------------------------------------------------

_TOP_KEYS = {"repeats", "seed_base", "sweep.key", "sweep.values"}
_DATASET_KEYS = {"dataset.path", "dataset.synthetic", "dataset.nodes", "dataset.features",
                 "dataset.split_counts", "dataset.split_fractions", "dataset.row_normalize",
                 "dataset.identity_features"}
_OTHER_KEYS = {"graph.builders", "graph.insert_edges", "noise.snr", "noise.target",
               "eval.subset", "eval.nodes_file"}


@dataclass(frozen=True)
class ExperimentSpec:
    values: tuple            # sorted (key, value) string pairs, sweep keys removed
    base_dir: str = "."
    repeats: int = 1
    seed_base: int = 0
    sweep_key: str = ""
    sweep_values: tuple = ()

    def __post_init__(self):
        if self.repeats < 1:
            raise ValidationError("repeats must be >= 1")
        if bool(self.sweep_key) != bool(self.sweep_values):
            raise ValidationError("sweep.key and sweep.values must be given together")
        if self.sweep_key in _TOP_KEYS:
            raise ValidationError(f"cannot sweep {self.sweep_key!r}")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], base_dir=".") -> "ExperimentSpec":
        vals = {k.strip(): str(v).strip() for k, v in values.items()}
        for key in vals:
            if key in _TOP_KEYS or key in _DATASET_KEYS or key in _OTHER_KEYS:
                continue
            if key.startswith("model.") or key.startswith("train."):
                continue
            raise ValidationError(f"unknown spec key {key!r}")
        if "train.seed" in vals:
            raise ValidationError("train.seed is set per repeat from seed_base; remove it")
        try:
            repeats = int(vals.pop("repeats", "1"))
            seed_base = int(vals.pop("seed_base", "0"))
        except ValueError as exc:
            raise ValidationError(f"bad integer: {exc}") from None
        sweep_key = vals.pop("sweep.key", "")
        raw = vals.pop("sweep.values", "")
        sweep_values = tuple(t for t in raw.replace(",", " ").split())
        spec = cls(tuple(sorted(vals.items())), str(base_dir), repeats, seed_base, sweep_key, sweep_values)
        # validate the static part early so typos fail before any training
        for v in spec.points():
            _resolve(spec, v)
        return spec

    @classmethod
    def read(cls, path) -> "ExperimentSpec":
        path = Path(path)
        return cls.from_mapping(read_key_values(path), path.parent)

    def points(self) -> list[Optional[str]]:
        return list(self.sweep_values) if self.sweep_key else [None]

    def point_values(self, sweep_value: Optional[str]) -> dict[str, str]:
        vals = dict(self.values)
        if self.sweep_key:
            vals[self.sweep_key] = sweep_value
        return vals

    def to_dict(self) -> dict:
        d = dict(self.values)
        d["repeats"] = self.repeats
        d["seed_base"] = self.seed_base
        if self.sweep_key:
            d["sweep.key"] = self.sweep_key
            d["sweep.values"] = list(self.sweep_values)
        return d


@dataclass(frozen=True)
class _Resolved:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    snr: float
    noise_target: str
    builders: tuple
    insert_edges: int
    subset: str
    nodes_file: Optional[Path]


def _section(vals: Mapping[str, str], prefix: str) -> dict[str, str]:
    return {k[len(prefix):]: v for k, v in vals.items() if k.startswith(prefix)}


def _parse_builders(text: str) -> tuple:
    out = []
    for item in text.replace(";", ",").split(","):
        item = item.strip()
        if not item:
            continue
        name, *args = item.split(":")
        try:
            if name == "passthrough" and not args:
                out.append(("passthrough",))
            elif name == "knn" and len(args) == 1:
                out.append(("knn", int(args[0])))
            elif name == "corr" and len(args) == 1:
                out.append(("corr", float(args[0])))
            elif name == "dither" and 1 <= len(args) <= 3:
                q = [float(a) for a in args[1:]] + [0.9, 1.0][len(args) - 1:]
                out.append(("dither", int(args[0]), q[0], q[1]))
            elif name == "er" and 1 <= len(args) <= 2:
                out.append(("er", float(args[0]), int(args[1]) if len(args) > 1 else 1))
            else:
                raise ValueError
        except ValueError:
            raise ValidationError(f"bad graph builder {item!r}; expected one of {', '.join(BUILDERS)}") from None
    if not out:
        raise ValidationError("graph.builders is empty")
    return tuple(out)


def _resolve(spec: ExperimentSpec, sweep_value: Optional[str], seed: int = 0) -> _Resolved:
    vals = spec.point_values(sweep_value)
    model_cfg = config_from_mapping(ModelConfig, _section(vals, "model."), "model: ")
    train_cfg = config_from_mapping(TrainConfig, dict(_section(vals, "train."), seed=str(seed)), "train: ")
    try:
        snr = float(vals.get("noise.snr", "inf"))
        insert = int(vals.get("graph.insert_edges", "0"))
    except ValueError as exc:
        raise ValidationError(f"bad number: {exc}") from None
    target = vals.get("noise.target", "features")
    if target not in ("features", "edges"):
        raise ValidationError("noise.target must be 'features' or 'edges'")
    if not math.isinf(snr):
        NoiseConfig(snr)  # range check
    if insert < 0:
        raise ValidationError("graph.insert_edges must be >= 0")
    has_path = "dataset.path" in vals
    if has_path == ("dataset.synthetic" in vals):
        raise ValidationError("give exactly one of dataset.path and dataset.synthetic")
    if "dataset.synthetic" in vals and vals["dataset.synthetic"] != "gaussian":
        raise ValidationError("dataset.synthetic supports only 'gaussian'")
    if "dataset.split_counts" in vals and "dataset.split_fractions" in vals:
        raise ValidationError("give at most one of dataset.split_counts and dataset.split_fractions")
    builders = _parse_builders(vals.get("graph.builders", "passthrough"))
    if not has_path and any(b[0] in ("passthrough", "dither") for b in builders):
        raise ValidationError("passthrough and dither builders need dataset.path")
    subset = vals.get("eval.subset", "test_mask")
    nodes_file = None
    if subset == "attacked_nodes":
        if "eval.nodes_file" not in vals:
            raise ValidationError("eval.subset=attacked_nodes needs eval.nodes_file")
        nodes_file = Path(spec.base_dir) / vals["eval.nodes_file"]
    elif subset != "test_mask":
        raise ValidationError("eval.subset must be 'test_mask' or 'attacked_nodes'")
    elif "eval.nodes_file" in vals:
        raise ValidationError("eval.nodes_file is only used with eval.subset=attacked_nodes")
    return _Resolved(model_cfg, train_cfg, snr, target, builders, insert, subset, nodes_file)


# -- one run -------------------------------------------------------------------------

def _load_data(vals: Mapping[str, str], base_dir: str, seed: int) -> tuple[Dataset, Optional[TensorGraph]]:
    try:
        if "dataset.path" in vals:
            ds, g = load_dataset(Path(base_dir) / vals["dataset.path"],
                                 row_normalize=_parse_bool(vals.get("dataset.row_normalize", "0")))
        else:
            ds = synthetic_gaussian_dataset(int(vals.get("dataset.nodes", "1000")),
                                            int(vals.get("dataset.features", "10")), seed)
            g = None
        if _parse_bool(vals.get("dataset.identity_features", "0")):
            ds = ds.with_features(np.eye(ds.n_nodes))
        if "dataset.split_counts" in vals:
            counts = [int(t) for t in vals["dataset.split_counts"].replace(",", " ").split()]
            if len(counts) != 3:
                raise ValidationError("dataset.split_counts needs three numbers")
            ds = split_by_counts(ds, *counts, seed=seed)
        elif "dataset.split_fractions" in vals:
            ds = make_splits(ds, [float(t) for t in vals["dataset.split_fractions"].replace(",", " ").split()], seed)
    except ValueError as exc:
        if isinstance(exc, TGCNError):
            raise
        raise ValidationError(f"bad dataset setting: {exc}") from None
    if not ds.train.any():
        raise ValidationError("training mask is empty; supply splits or dataset.split_*")
    return ds, g


def build_tensor(builders: tuple, X: np.ndarray, g: Optional[TensorGraph], seed: int) -> TensorGraph:
    slabs, names = [], []
    for k, b in enumerate(builders):
        if b[0] == "passthrough":
            slabs.extend(g.slabs)
            names.extend(g.names)
        elif b[0] == "knn":
            slabs.append(knn_graph(X, b[1]))
            names.append(f"knn{b[1]}")
        elif b[0] == "corr":
            slabs.append(correlation_graph(X, b[1]))
            names.append(f"corr{b[1]:g}")
        elif b[0] == "dither":
            base = g.slabs[0].copy()
            base.data[:] = 1.0
            ens = edge_dither(base, DitherConfig(b[2], b[3], b[1], seed + 7919 * k))
            slabs.extend(ens.slabs)
            names.extend(ens.names)
        elif b[0] == "er":
            ens = er_realizations(X.shape[0], b[1], b[2], seed + 7919 * k)
            slabs.extend(ens.slabs)
            names.extend(f"er{j}" for j in range(b[2]))
    return TensorGraph(tuple(slabs), tuple(names))


def run_once(spec: ExperimentSpec, sweep_value: Optional[str], repeat: int):
    """One repeat; returns (metrics dict, params, history, dataset, graph)."""
    seed = spec.seed_base + repeat
    vals = spec.point_values(sweep_value)
    res = _resolve(spec, sweep_value, seed)
    ds, g = _load_data(vals, spec.base_dir, seed)
    if res.insert_edges:
        if g is None:
            raise ValidationError("graph.insert_edges needs dataset.path")
        g = TensorGraph(tuple(perturb_insert_edges(s, res.insert_edges, seed + 104729 * i)
                              for i, s in enumerate(g.slabs)), g.names)
    noisy = not math.isinf(res.snr)
    if noisy and res.noise_target == "features":
        ds = ds.with_features(add_noise(ds.X, NoiseConfig(res.snr, seed, "features")))
    tensor = build_tensor(res.builders, ds.X, g, seed)
    if noisy and res.noise_target == "edges":
        tensor = add_noise(tensor, NoiseConfig(res.snr, seed, "edges"))
    if res.model_cfg.n_classes != ds.n_classes:
        raise ValidationError(f"model.widths must end in the class count {ds.n_classes}")
    params, hist = train(ds, tensor, res.model_cfg, res.train_cfg)
    Y_hat = forward(ds.X, tensor, params)
    if res.subset == "attacked_nodes":
        subset = read_node_ids(res.nodes_file)
    else:
        subset = ds.test & (ds.labels >= 0)
    metrics = {"accuracy": accuracy(Y_hat, ds.labels, subset), "macro_f1": macro_f1(Y_hat, ds.labels, subset)}
    return metrics, params, hist, ds, tensor


# -- report ------------------------------------------------------------------------

def summarize(values: list[float]) -> dict:
    n = len(values)
    if n == 0:
        return {"n": 0, "mean": None, "std": None}
    mean = math.fsum(values) / n
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1)) if n > 1 else None
    return {"n": n, "mean": mean, "std": std}


def run_experiment(spec: ExperimentSpec, out_dir=None, log=None, save_data: bool = False) -> dict:
    """Run every sweep point and repeat; returns the report dict.

    A failing repeat is recorded with its error and does not stop the
    others. With ``out_dir`` each run's model and history CSV are written
    there as ``p<point>_r<repeat>.model`` / ``.history.csv``; ``save_data``
    adds the run's dataset directory (final features, splits and the
    constructed graph) as ``p<point>_r<repeat>.data``.
    """
    points = []
    for j, value in enumerate(spec.points()):
        runs = []
        for r in range(spec.repeats):
            seed = spec.seed_base + r
            entry = {"repeat": r, "seed": seed}
            try:
                metrics, params, hist, ds, tensor = run_once(spec, value, r)
            except (TGCNError, OSError) as exc:
                code = exc.exit_code if isinstance(exc, TGCNError) else 4
                entry.update(status="error", error=type(exc).__name__, message=str(exc), exit_code=code)
            else:
                entry.update(status="ok", metrics=metrics, relations=tensor.n_relations,
                             epochs=len(hist), best_epoch=hist.best_epoch, stop_reason=hist.stop_reason)
                if out_dir is not None:
                    stem = Path(out_dir) / f"p{j}_r{r}"
                    save_model(params, str(stem) + ".model")
                    Path(str(stem) + ".history.csv").write_text(hist.to_csv(), encoding="utf-8")
                    if save_data:
                        save_dataset(str(stem) + ".data", ds, tensor)
            if log is not None:
                log(_run_line(spec, value, entry))
            runs.append(entry)
        ok = [e for e in runs if e["status"] == "ok"]
        summary = {m: summarize([e["metrics"][m] for e in ok]) for m in METRICS}
        points.append({"sweep_value": value, "runs": runs, "summary": summary})
    n_runs = sum(len(p["runs"]) for p in points)
    n_failed = sum(e["status"] != "ok" for p in points for e in p["runs"])
    return {
        "report_version": REPORT_VERSION,
        "rng": {"name": RNG_NAME, "version": RNG_VERSION},
        "spec": spec.to_dict(),
        "sweep_key": spec.sweep_key or None,
        "points": points,
        "n_runs": n_runs,
        "n_failed": n_failed,
    }


def _run_line(spec: ExperimentSpec, value, entry) -> str:
    head = f"{spec.sweep_key}={value} " if spec.sweep_key else ""
    if entry["status"] == "ok":
        m = entry["metrics"]
        return f"{head}repeat {entry['repeat']} seed {entry['seed']}: accuracy {m['accuracy']:.4f} macro_f1 {m['macro_f1']:.4f}"
    return f"{head}repeat {entry['repeat']} seed {entry['seed']}: {entry['error']}: {entry['message']}"


def report_json(report: dict) -> str:
    """Canonical serialization; identical reports give identical bytes."""
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


def read_report(path) -> dict:
    try:
        report = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid report JSON: {exc.msg}", path, exc.lineno) from None
    if not isinstance(report, dict) or report.get("report_version") != REPORT_VERSION or "points" not in report:
        raise FormatError("not a version-1 experiment report", path)
    return report


def sweep_csv(report: dict) -> str:
    """One row per sweep point with mean and sample std of each metric."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    key = report.get("sweep_key") or "point"
    header = [key, "n_ok", "n_failed"]
    for m in METRICS:
        header += [f"{m}_mean", f"{m}_std"]
    w.writerow(header)
    for j, p in enumerate(report["points"]):
        n_failed = sum(e["status"] != "ok" for e in p["runs"])
        row = [p["sweep_value"] if p["sweep_value"] is not None else j, p["summary"][METRICS[0]]["n"], n_failed]
        for m in METRICS:
            s = p["summary"][m]
            row += ["" if s["mean"] is None else repr(s["mean"]), "" if s["std"] is None else repr(s["std"])]
        w.writerow(row)
    return buf.getvalue()


def report_exit_code(report: dict) -> int:
    """0 unless every run failed; then the exit code of the first failure."""
    runs = [e for p in report["points"] for e in p["runs"]]
    if runs and all(e["status"] != "ok" for e in runs):
        return int(runs[0].get("exit_code", 1))
    return 0
