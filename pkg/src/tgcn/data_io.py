"""Datasets, splits and on-disk formats.

Dataset directory layout::

    manifest.txt     key=value lines: nodes, relations, features, classes,
                     format_version=1, optional relation_names=a,b,...
                     and directed=0|1 (default 0: edges are symmetrized)
    graph_<i>.txt    edge list of relation i: ``src dst [weight]`` per line
    features.txt     one node per line, whitespace-separated reals
    labels.txt       ``node_id class_id`` lines; absent nodes are unlabeled
    splits.txt       optional: train, validation and test node ids, one
                     line each

A graph-only directory (as written by ``tgcn build-graph``) has just the
manifest and the edge lists.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError, StructuralError, ValidationError
from .graph_core import SparseMatrix, TensorGraph, sparse_from_edges

FORMAT_VERSION = 1


@dataclass
class Dataset:
    """Node features, labels (``-1`` = unlabeled) and split masks."""

    X: np.ndarray
    labels: np.ndarray
    n_classes: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    names: tuple = field(default=())

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.X.shape[0]
        if self.labels.shape != (n,):
            raise StructuralError(f"labels has shape {self.labels.shape}, expected ({n},)")
        if self.labels.size and (self.labels.max() >= self.n_classes or self.labels.min() < -1):
            raise ValidationError("label ids must lie in [0, classes) or be -1")
        for name in ("train", "val", "test"):
            m = np.asarray(getattr(self, name), dtype=bool)
            if m.shape != (n,):
                raise StructuralError(f"{name} mask has shape {m.shape}, expected ({n},)")
            setattr(self, name, m)
        if (self.train & self.val).any() or (self.train & self.test).any() or (self.val & self.test).any():
            raise ValidationError("split masks overlap")

    @property
    def n_nodes(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def Y(self) -> np.ndarray:
        """One-hot labels; unlabeled rows are all zero."""
        Y = np.zeros((self.n_nodes, self.n_classes))
        lab = self.labels >= 0
        Y[np.flatnonzero(lab), self.labels[lab]] = 1.0
        return Y

    def with_features(self, X: np.ndarray) -> "Dataset":
        return replace(self, X=np.asarray(X, dtype=np.float64))


def make_splits(ds: Dataset, fractions=(0.3, 0.3, 0.4), seed: int = 0) -> Dataset:
    """Uniform random disjoint masks.

    Sizes are ``floor(fraction * N)`` for train and validation and the
    remainder goes to test.
    """
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f < 0 for f in fr):
        raise ValidationError("fractions must be three nonnegative numbers")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise ValidationError("fractions must sum to 1")
    n = ds.n_nodes
    n_train = int(np.floor(fr[0] * n + 1e-9))
    n_val = int(np.floor(fr[1] * n + 1e-9))
    return split_by_counts(ds, n_train, n_val, n - n_train - n_val, seed)


def split_by_counts(ds: Dataset, n_train: int, n_val: int, n_test: int, seed: int = 0) -> Dataset:
    n = ds.n_nodes
    if min(n_train, n_val, n_test) < 0 or n_train + n_val + n_test > n:
        raise ValidationError("split sizes must be nonnegative and fit in N")
    perm = np.random.default_rng(np.random.SeedSequence(seed)).permutation(n)
    masks = []
    start = 0
    for size in (n_train, n_val, n_test):
        m = np.zeros(n, dtype=bool)
        m[perm[start:start + size]] = True
        masks.append(m)
        start += size
    return replace(ds, train=masks[0], val=masks[1], test=masks[2])


# -- text formats -------------------------------------------------------------------

def _data_lines(path: Path):
    """Yield ``(line_number, tokens)`` skipping blanks and ``#`` comments."""
    with open(path, "r", encoding="utf-8") as fh:
        for no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield no, line.split()


def read_key_values(path) -> dict[str, str]:
    out = {}
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        for no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError("expected key=value", path, no)
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_key_values(path, values: Mapping[str, object]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in values.items():
            fh.write(f"{k}={v}\n")


def read_edge_list(path, n_nodes: int, symmetrize: bool = True) -> SparseMatrix:
    """Parse ``src dst [weight]`` lines (0-based ids) into an N x N matrix."""
    path = Path(path)
    edges = []
    for no, tok in _data_lines(path):
        if len(tok) not in (2, 3):
            raise FormatError("expected 'src dst [weight]'", path, no)
        try:
            u, v = int(tok[0]), int(tok[1])
            w = float(tok[2]) if len(tok) == 3 else 1.0
        except ValueError:
            raise FormatError("could not parse edge", path, no) from None
        if not (0 <= u < n_nodes and 0 <= v < n_nodes):
            raise FormatError(f"node id out of range for N={n_nodes}", path, no)
        if not np.isfinite(w):
            raise FormatError("non-finite edge weight", path, no)
        edges.append((u, v, w))
    return sparse_from_edges(edges, n_nodes, n_nodes, symmetrize=symmetrize)


def write_edge_list(path, m: SparseMatrix) -> None:
    coo = m.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as fh:
        for r, c, w in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{int(r)} {int(c)} {float(w)!r}\n")


def _manifest_int(man: dict, key: str, path) -> int:
    if key not in man:
        raise FormatError(f"manifest lacks '{key}'", path)
    try:
        return int(man[key])
    except ValueError:
        raise FormatError(f"manifest key '{key}' is not an integer", path) from None


def _check_version(man: dict, path) -> None:
    version = man.get("format_version", str(FORMAT_VERSION))
    if version != str(FORMAT_VERSION):
        raise FormatError(f"unsupported format_version {version}", path)


def load_graph(path) -> TensorGraph:
    path = Path(path)
    mpath = path / "manifest.txt"
    man = read_key_values(mpath)
    _check_version(man, mpath)
    n = _manifest_int(man, "nodes", mpath)
    n_rel = _manifest_int(man, "relations", mpath)
    directed = man.get("directed", "0") == "1"
    names = tuple(x for x in man.get("relation_names", "").split(",") if x)
    if names and len(names) != n_rel:
        raise FormatError("relation_names count differs from relations", mpath)
    slabs = tuple(read_edge_list(path / f"graph_{i}.txt", n, symmetrize=not directed) for i in range(n_rel))
    return TensorGraph(slabs, names)


def save_graph(path, g: TensorGraph, extra: Mapping[str, object] | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    man = {
        "format_version": FORMAT_VERSION,
        "nodes": g.n_nodes,
        "relations": g.n_relations,
        "relation_names": ",".join(g.names),
        "directed": 0 if all((abs(s - s.T)).nnz == 0 for s in g.slabs) else 1,
    }
    man.update(extra or {})
    write_key_values(path / "manifest.txt", man)
    for i, s in enumerate(g.slabs):
        write_edge_list(path / f"graph_{i}.txt", s)


def load_dataset(path, row_normalize: bool = False) -> tuple[Dataset, TensorGraph]:
    """Read a dataset directory; returns the dataset and its tensor graph."""
    path = Path(path)
    mpath = path / "manifest.txt"
    man = read_key_values(mpath)
    g = load_graph(path)
    n = g.n_nodes
    n_feat = _manifest_int(man, "features", mpath)
    n_cls = _manifest_int(man, "classes", mpath)

    fpath = path / "features.txt"
    rows = []
    for no, tok in _data_lines(fpath):
        if len(tok) != n_feat:
            raise FormatError(f"expected {n_feat} features, got {len(tok)}", fpath, no)
        try:
            rows.append([float(t) for t in tok])
        except ValueError:
            raise FormatError("could not parse feature value", fpath, no) from None
    if len(rows) != n:
        raise FormatError(f"expected {n} feature rows, got {len(rows)}", fpath)
    X = np.array(rows, dtype=np.float64).reshape(n, n_feat)
    if row_normalize:
        s = X.sum(axis=1, keepdims=True)
        X = np.divide(X, s, out=np.zeros_like(X), where=s != 0)

    lpath = path / "labels.txt"
    labels = np.full(n, -1, dtype=np.int64)
    for no, tok in _data_lines(lpath):
        if len(tok) != 2:
            raise FormatError("expected 'node_id class_id'", lpath, no)
        try:
            node, cls = int(tok[0]), int(tok[1])
        except ValueError:
            raise FormatError("could not parse label", lpath, no) from None
        if not 0 <= node < n:
            raise FormatError(f"node id {node} out of range for N={n}", lpath, no)
        if not 0 <= cls < n_cls:
            raise FormatError(f"class id {cls} out of range for K={n_cls}", lpath, no)
        labels[node] = cls

    masks = [np.zeros(n, dtype=bool) for _ in range(3)]
    spath = path / "splits.txt"
    if spath.exists():
        with open(spath, "r", encoding="utf-8") as fh:
            lines = [ln.split("#", 1)[0] for ln in fh.read().splitlines()]
        lines = (lines + ["", "", ""])[:3]
        for k, line in enumerate(lines):
            try:
                ids = [int(t) for t in line.replace(",", " ").split()]
            except ValueError:
                raise FormatError("could not parse node id", spath, k + 1) from None
            for node in ids:
                if not 0 <= node < n:
                    raise FormatError(f"node id {node} out of range for N={n}", spath, k + 1)
            masks[k][ids] = True
    names = ()
    npath = path / "names.txt"
    if npath.exists():
        names = tuple(npath.read_text(encoding="utf-8").split())
    try:
        ds = Dataset(X, labels, n_cls, masks[0], masks[1], masks[2], names)
    except ValidationError as exc:
        raise FormatError(str(exc), spath) from None
    return ds, g


def save_dataset(path, ds: Dataset, g: TensorGraph) -> None:
    path = Path(path)
    save_graph(path, g, {"features": ds.n_features, "classes": ds.n_classes})
    np.savetxt(path / "features.txt", ds.X, fmt="%.17g")
    with open(path / "labels.txt", "w", encoding="utf-8") as fh:
        for node in np.flatnonzero(ds.labels >= 0):
            fh.write(f"{node} {ds.labels[node]}\n")
    with open(path / "splits.txt", "w", encoding="utf-8") as fh:
        for m in (ds.train, ds.val, ds.test):
            fh.write(" ".join(str(i) for i in np.flatnonzero(m)) + "\n")
    if ds.names:
        (path / "names.txt").write_text("\n".join(ds.names) + "\n", encoding="utf-8")


def read_node_ids(path) -> np.ndarray:
    ids = []
    for no, tok in _data_lines(Path(path)):
        try:
            ids.extend(int(t) for t in tok)
        except ValueError:
            raise FormatError("could not parse node id", path, no) from None
    return np.array(ids, dtype=np.int64)


# -- model container --------------------------------------------------------------
#
# layout: b"TGCNMDL\0" | u32 header length | header JSON (utf-8) |
#         float64 LE arrays in header order | u32 crc32 of everything before

MAGIC = b"TGCNMDL\0"
MODEL_VERSION = 1


def save_model(params, path) -> None:
    from .model import ModelParams  # noqa: F401  (type only)

    header = {
        "version": MODEL_VERSION,
        "config": params.cfg.to_dict(),
        "dims": {"nodes": params.n_nodes, "relations": params.n_relations, "features": params.n_features},
        "arrays": [[name, list(a.shape)] for name, a in params.arrays.items()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<I", len(hbytes))
    body += hbytes
    for a in params.arrays.values():
        body += np.ascontiguousarray(a, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(bytes(body))
    os.replace(tmp, path)


def load_model(path, expected=None):
    """Read a model container.

    ``expected`` may be a ModelConfig (or a dict of its fields plus
    ``nodes``/``relations``/``features``) to validate against; a mismatch
    raises StructuralError naming the field.
    """
    from .model import ModelConfig, ModelParams

    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise FormatError("not a model file", path)
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise FormatError("checksum mismatch (corrupt or truncated file)", path)
    (hlen,) = struct.unpack("<I", raw[len(MAGIC): len(MAGIC) + 4])
    off = len(MAGIC) + 4
    try:
        header = json.loads(raw[off: off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("unreadable header", path) from None
    if header.get("version") != MODEL_VERSION:
        raise FormatError(f"unsupported model version {header.get('version')}", path)
    off += hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if off + nbytes > len(raw) - 4:
            raise FormatError("truncated array data", path)
        arrays[name] = np.frombuffer(raw[off: off + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        off += nbytes
    if off != len(raw) - 4:
        raise FormatError("trailing bytes after arrays", path)
    cfg = ModelConfig.from_dict(header["config"])
    dims = header["dims"]
    if expected is not None:
        exp = expected.to_dict() if isinstance(expected, ModelConfig) else dict(expected)
        got = dict(cfg.to_dict(), **dims)
        for key, value in exp.items():
            if key in got and _norm(got[key]) != _norm(value):
                raise StructuralError(f"model field '{key}' is {got[key]!r}, expected {value!r}")
    return ModelParams(cfg, dims["nodes"], dims["relations"], dims["features"], arrays)


def _norm(v):
    return list(v) if isinstance(v, tuple) else v
