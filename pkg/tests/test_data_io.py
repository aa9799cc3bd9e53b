import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tgcn.data_io import (
    Dataset,
    load_dataset,
    load_graph,
    load_model,
    make_splits,
    read_key_values,
    read_node_ids,
    save_dataset,
    save_graph,
    save_model,
    split_by_counts,
)
from tgcn.errors import FormatError, StructuralError, ValidationError
from tgcn.graph_core import TensorGraph, sparse_from_edges
from tgcn.model import ModelConfig, init_params
from tgcn.training import TrainConfig, train


def write_bundle(path: Path, manifest: str, graphs: list[str], features: str, labels: str, splits: str | None = None):
    path.mkdir(parents=True, exist_ok=True)
    (path / "manifest.txt").write_text(manifest)
    for i, text in enumerate(graphs):
        (path / f"graph_{i}.txt").write_text(text)
    (path / "features.txt").write_text(features)
    (path / "labels.txt").write_text(labels)
    if splits is not None:
        (path / "splits.txt").write_text(splits)
    return path


def three_node(path: Path):
    return write_bundle(
        path,
        "nodes=3\nrelations=2\nfeatures=2\nclasses=2\nformat_version=1\nrelation_names=a,b\n",
        ["0 1\n1 2 0.5\n", "# comment line\n0 2 2.0\n"],
        "1.0 0.0\n0.25 -3\n1e-3 7\n",
        "0 1\n2 0\n",
        "0\n2\n1\n",
    )


def empty_dataset(n, k=2):
    z = np.zeros(n, bool)
    return Dataset(np.zeros((n, 1)), np.zeros(n, int), k, z, z, z)


# -- load / save ------------------------------------------------------------------

def test_three_node_fixture(tmp_path):
    ds, g = load_dataset(three_node(tmp_path / "d"))
    assert (ds.n_nodes, ds.n_features, ds.n_classes, g.n_relations) == (3, 2, 2, 2)
    assert g.names == ("a", "b")
    np.testing.assert_array_equal(ds.X, [[1.0, 0.0], [0.25, -3.0], [1e-3, 7.0]])
    np.testing.assert_array_equal(ds.labels, [1, -1, 0])
    np.testing.assert_array_equal(ds.Y, [[0, 1], [0, 0], [1, 0]])
    assert ds.train.tolist() == [True, False, False]
    assert ds.val.tolist() == [False, False, True]
    assert ds.test.tolist() == [False, True, False]
    np.testing.assert_array_equal(g.slabs[0].toarray(), [[0, 1, 0], [1, 0, 0.5], [0, 0.5, 0]])
    np.testing.assert_array_equal(g.slabs[1].toarray(), [[0, 0, 2], [0, 0, 0], [2, 0, 0]])


def test_three_node_round_trip_is_exact(tmp_path):
    ds, g = load_dataset(three_node(tmp_path / "d"))
    save_dataset(tmp_path / "e", ds, g)
    ds2, g2 = load_dataset(tmp_path / "e")
    for name in ("X", "labels", "train", "val", "test"):
        np.testing.assert_array_equal(getattr(ds2, name), getattr(ds, name))
    assert ds2.n_classes == ds.n_classes and g2.names == g.names
    for a, b in zip(g.slabs, g2.slabs):
        assert (a != b).nnz == 0


@given(st.integers(1, 12), st.integers(0, 2**31))
def test_random_round_trip_is_bitwise(n, seed):
    import tempfile

    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3)) * 10.0 ** rng.integers(-300, 300, size=(n, 3))
    labels = rng.integers(-1, 3, n)
    ds = make_splits(Dataset(X, labels, 3, *(np.zeros(n, bool),) * 3), (0.5, 0.25, 0.25), seed)
    edges = [(int(a), int(b), float(rng.uniform(0.1, 3))) for a, b in rng.integers(0, n, size=(2 * n, 2)) if a != b]
    g = TensorGraph((sparse_from_edges(edges, n, n, symmetrize=True), sparse_from_edges([], n, n)))
    with tempfile.TemporaryDirectory() as d:
        save_dataset(d, ds, g)
        ds2, g2 = load_dataset(d)
    assert np.array_equal(ds2.X, ds.X) and np.array_equal(ds2.labels, ds.labels)
    assert all(np.array_equal(getattr(ds2, m), getattr(ds, m)) for m in ("train", "val", "test"))
    assert all((a != b).nnz == 0 for a, b in zip(g.slabs, g2.slabs))


def test_directed_manifest_keeps_direction(tmp_path):
    d = write_bundle(tmp_path / "d", "nodes=2\nrelations=1\nfeatures=1\nclasses=1\ndirected=1\n",
                     ["0 1 3\n"], "0\n0\n", "")
    _, g = load_dataset(d)
    np.testing.assert_array_equal(g.slabs[0].toarray(), [[0, 3], [0, 0]])
    save_graph(tmp_path / "g", g)
    assert read_key_values(tmp_path / "g" / "manifest.txt")["directed"] == "1"
    assert (load_graph(tmp_path / "g").slabs[0] != g.slabs[0]).nnz == 0


def test_row_normalize_flag(tmp_path):
    ds, _ = load_dataset(three_node(tmp_path / "d"), row_normalize=True)
    np.testing.assert_allclose(ds.X[0], [1.0, 0.0])
    np.testing.assert_allclose(ds.X.sum(axis=1), 1.0)


@pytest.mark.parametrize("target, content, line", [
    ("graph_0.txt", "0 1\n1 3\n", 2),
    ("graph_1.txt", "\n# c\n0 2\n5 0\n", 4),
    ("labels.txt", "0 1\n3 0\n", 2),
    ("splits.txt", "0\n1 9\n2\n", 2),
])
def test_node_ids_beyond_n_are_rejected_with_line(tmp_path, target, content, line):
    d = three_node(tmp_path / "d")
    (d / target).write_text(content)
    with pytest.raises(FormatError) as exc:
        load_dataset(d)
    assert exc.value.line == line
    assert f"{target}:{line}" in str(exc.value)


@pytest.mark.parametrize("target, content, line", [
    ("features.txt", "1 0\n0.25\n1 1\n", 2),
    ("features.txt", "1 0\n0.25 x\n1 1\n", 2),
    ("labels.txt", "0 1 2\n", 1),
    ("labels.txt", "0 5\n", 1),
    ("graph_0.txt", "0 1 nan\n", 1),
    ("graph_0.txt", "0\n", 1),
    ("manifest.txt", "nodes=3\nrelations\n", 2),
])
def test_malformed_lines(tmp_path, target, content, line):
    d = three_node(tmp_path / "d")
    (d / target).write_text(content)
    with pytest.raises(FormatError) as exc:
        load_dataset(d)
    assert exc.value.line == line


def test_dimension_mismatch_against_manifest(tmp_path):
    d = three_node(tmp_path / "d")
    (d / "features.txt").write_text("1 0\n0 1\n")
    with pytest.raises(FormatError, match="expected 3 feature rows"):
        load_dataset(d)
    d = three_node(tmp_path / "e")
    (d / "manifest.txt").write_text("nodes=3\nrelations=1\nfeatures=2\nclasses=2\nformat_version=2\n")
    with pytest.raises(FormatError, match="format_version"):
        load_dataset(d)


def test_overlapping_splits_are_rejected(tmp_path):
    d = three_node(tmp_path / "d")
    (d / "splits.txt").write_text("0 1\n1\n2\n")
    with pytest.raises(FormatError, match="overlap"):
        load_dataset(d)


def test_missing_files_raise_os_errors(tmp_path):
    d = three_node(tmp_path / "d")
    (d / "graph_1.txt").unlink()
    with pytest.raises(OSError):
        load_dataset(d)


def test_node_id_file(tmp_path):
    p = tmp_path / "ids.txt"
    p.write_text("3 1\n# skip\n4\n")
    assert read_node_ids(p).tolist() == [3, 1, 4]


# -- dataset invariants -----------------------------------------------------------

@given(st.integers(1, 30), st.integers(1, 5), st.integers(0, 2**31))
def test_one_hot_invariant(n, k, seed):
    labels = np.random.default_rng(seed).integers(-1, k, n)
    ds = empty_dataset(n, k)
    ds = Dataset(ds.X, labels, k, ds.train, ds.val, ds.test)
    Y = ds.Y
    assert np.all(Y.sum(axis=1) == (labels >= 0))
    assert np.all((Y == 0) | (Y == 1))
    lab = labels >= 0
    assert np.array_equal(Y[lab].argmax(axis=1), labels[lab])


def test_dataset_rejects_bad_labels_and_overlap():
    z = np.zeros(3, bool)
    with pytest.raises(ValidationError):
        Dataset(np.zeros((3, 1)), [0, 2, 0], 2, z, z, z)
    with pytest.raises(StructuralError):
        Dataset(np.zeros((3, 1)), [0, 1], 2, z, z, z)
    with pytest.raises(ValidationError):
        Dataset(np.zeros((3, 1)), [0, 1, 0], 2, np.array([1, 0, 0], bool), np.array([1, 0, 0], bool), z)


# -- splits -----------------------------------------------------------------------

def sizes(ds):
    return int(ds.train.sum()), int(ds.val.sum()), int(ds.test.sum())


def test_split_examples():
    assert sizes(make_splits(empty_dataset(100), (0.3, 0.3, 0.4), 0)) == (30, 30, 40)
    assert sizes(make_splits(empty_dataset(7), (1, 0, 0), 0)) == (7, 0, 0)
    assert sizes(make_splits(empty_dataset(10), (0.25, 0.25, 0.5), 0)) == (2, 2, 6)


def test_split_errors():
    with pytest.raises(ValidationError):
        make_splits(empty_dataset(10), (-0.1, 0.6, 0.5))
    with pytest.raises(ValidationError):
        make_splits(empty_dataset(10), (0.3, 0.3, 0.3))
    with pytest.raises(ValidationError):
        split_by_counts(empty_dataset(10), 5, 5, 1)


@given(st.integers(1, 200), st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**31))
def test_splits_partition_disjointly_and_deterministically(n, a, b, seed):
    f_train, f_val = a, (1 - a) * b
    fr = (f_train, f_val, 1 - f_train - f_val)
    ds = make_splits(empty_dataset(n), fr, seed)
    assert not (ds.train & ds.val).any() and not (ds.train & ds.test).any() and not (ds.val & ds.test).any()
    assert sum(sizes(ds)) == n
    assert sizes(ds)[:2] == (int(np.floor(fr[0] * n + 1e-9)), int(np.floor(fr[1] * n + 1e-9)))
    again = make_splits(empty_dataset(n), fr, seed)
    assert np.array_equal(again.train, ds.train) and np.array_equal(again.val, ds.val)


# -- model container --------------------------------------------------------------

def trained_params():
    cfg = ModelConfig(hops=2, widths=(4, 2), share_W_across_nodes=False)
    p = init_params(cfg, 5, 2, 3, seed=3)
    rng = np.random.default_rng(0)
    return p.with_arrays({k: rng.normal(size=v.shape) * 1e-200 ** rng.integers(0, 2) for k, v in p.arrays.items()})


def test_model_round_trip_is_bitwise(tmp_path):
    p = trained_params()
    save_model(p, tmp_path / "m")
    q = load_model(tmp_path / "m")
    assert q.cfg == p.cfg
    assert (q.n_nodes, q.n_relations, q.n_features) == (5, 2, 3)
    assert list(q.arrays) == list(p.arrays)
    for k in p.arrays:
        assert q[k].tobytes() == p[k].tobytes()
    assert not (tmp_path / "m.tmp").exists()


def test_corrupted_header_byte_is_format_error(tmp_path):
    save_model(trained_params(), tmp_path / "m")
    raw = bytearray((tmp_path / "m").read_bytes())
    raw[20] ^= 0x01
    (tmp_path / "bad").write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_model(tmp_path / "bad")


@pytest.mark.parametrize("cut", [1, 9, 100])
def test_truncated_model_is_format_error(tmp_path, cut):
    save_model(trained_params(), tmp_path / "m")
    raw = (tmp_path / "m").read_bytes()
    (tmp_path / "bad").write_bytes(raw[:-cut])
    with pytest.raises(FormatError):
        load_model(tmp_path / "bad")


def test_not_a_model(tmp_path):
    (tmp_path / "x").write_text("hello")
    with pytest.raises(FormatError, match="not a model"):
        load_model(tmp_path / "x")


def test_mismatched_config_names_the_field(tmp_path):
    save_model(trained_params(), tmp_path / "m")
    with pytest.raises(StructuralError, match="'widths'"):
        load_model(tmp_path / "m", ModelConfig(hops=2, widths=(4, 4, 2), share_W_across_nodes=False))
    with pytest.raises(StructuralError, match="'relations'"):
        load_model(tmp_path / "m", {"relations": 3})
    load_model(tmp_path / "m", {"nodes": 5, "relations": 2, "features": 3})


def test_trained_model_survives_round_trip(tmp_path):
    from tgcn.graph_builders import knn_graph, synthetic_gaussian_dataset
    from tgcn.model import forward

    ds = split_by_counts(synthetic_gaussian_dataset(60, 4, 1), 20, 20, 20, 1)
    g = TensorGraph((knn_graph(ds.X, 5),))
    p, _ = train(ds, g, ModelConfig(hops=2, widths=(4, 2)), TrainConfig(max_epochs=5, patience=5))
    save_model(p, tmp_path / "m")
    assert np.array_equal(forward(ds.X, g, load_model(tmp_path / "m")), forward(ds.X, g, p))


# -- published bundles (only when a converted copy is available) ------------------

@pytest.mark.skipif("TGCN_CORA_DIR" not in os.environ, reason="set TGCN_CORA_DIR to a converted Cora bundle")
def test_cora_bundle_dimensions():
    ds, g = load_dataset(os.environ["TGCN_CORA_DIR"])
    assert (ds.n_nodes, ds.n_classes, g.n_relations) == (2708, 7, 1)


@pytest.mark.skipif("TGCN_BRAIN_DIR" not in os.environ, reason="set TGCN_BRAIN_DIR to a converted brain-cells bundle")
def test_brain_bundle_dimensions():
    ds, g = load_dataset(os.environ["TGCN_BRAIN_DIR"])
    assert (ds.n_nodes, ds.n_features, g.n_relations) == (2702, 81, 9)
