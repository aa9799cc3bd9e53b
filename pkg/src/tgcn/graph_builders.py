"""Graph construction and perturbation.

All randomness flows through ``numpy.random.Generator`` objects seeded
from a ``SeedSequence``; multi-slab builders spawn one child stream per
slab so each slab can be regenerated independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import StructuralError, ValidationError
from .graph_core import SparseMatrix, TensorGraph, canonical, is_symmetric, symmetrize_matrix

# Recorded in manifests so seeded outputs can be traced to a generator.
RNG_NAME = "numpy.PCG64/SeedSequence.spawn"
RNG_VERSION = 1


# Each builder draws from its own keyed stream so equal user seeds never
# give correlated draws across builders (e.g. data and noise).
_STREAM_KEYS = {"synthetic": 1, "noise": 2, "dither": 3, "insert": 4, "er": 5}


def rng_streams(seed: int, count: int, purpose: str) -> list[np.random.Generator]:
    root = np.random.SeedSequence([int(seed), _STREAM_KEYS[purpose]])
    return [np.random.Generator(np.random.PCG64(c)) for c in root.spawn(count)]


@dataclass(frozen=True)
class DitherConfig:
    q1: float = 0.9
    q2: float = 1.0
    n_samples: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("q1", "q2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if self.n_samples < 1:
            raise ValidationError("n_samples must be >= 1")


@dataclass(frozen=True)
class NoiseConfig:
    snr: float
    seed: int = 0
    target: str = "features"

    def __post_init__(self):
        if not self.snr > 0:
            raise ValidationError(f"snr must be positive, got {self.snr}")
        if self.target not in ("features", "edges"):
            raise ValidationError(f"unknown noise target {self.target!r}")


# -- upper-triangle index helpers -------------------------------------------

def _n_pairs(n: int) -> int:
    return n * (n - 1) // 2


def _row_starts(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.int64)
    return i * n - i * (i + 1) // 2


def _pairs_to_linear(n: int, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return _row_starts(n)[rows] + (cols - rows - 1)


def _linear_to_pairs(n: int, k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    starts = _row_starts(n)
    rows = np.searchsorted(starts, k, side="right") - 1
    cols = k - starts[rows] + rows + 1
    return rows, cols


def _upper_edges(a: SparseMatrix) -> np.ndarray:
    """Sorted linear indices of the strict-upper-triangle nonzeros."""
    up = sp.triu(a, k=1).tocoo()
    return np.sort(_pairs_to_linear(a.shape[0], up.row.astype(np.int64), up.col.astype(np.int64)))


def _sample_absent(n: int, present: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` distinct upper-triangle positions not in ``present``, uniformly."""
    n_absent = _n_pairs(n) - present.size
    if count == 0:
        return np.empty(0, dtype=np.int64)
    ranks = np.sort(rng.choice(n_absent, size=count, replace=False)).astype(np.int64)
    # rank among absent pairs -> linear index: skip every present index <= target
    shifted = present - np.arange(present.size, dtype=np.int64)
    return ranks + np.searchsorted(shifted, ranks, side="right")


def _undirected_from_linear(n: int, k: np.ndarray, weights=None) -> SparseMatrix:
    """Symmetric CSR from distinct upper-triangle positions.

    The positions are distinct, so the canonical arrays are assembled
    directly; this sits in the inner loop of the ensemble samplers.
    """
    rows, cols = _linear_to_pairs(n, np.asarray(k, dtype=np.int64))
    w = np.ones(rows.size) if weights is None else np.asarray(weights, dtype=np.float64)
    r = np.concatenate([rows, cols])
    c = np.concatenate([cols, rows])
    data = np.concatenate([w, w])
    keep = data != 0
    r, c, data = r[keep], c[keep], data[keep]
    order = np.lexsort((c, r))
    indptr = np.zeros(n + 1, dtype=np.int32)
    np.cumsum(np.bincount(r, minlength=n), out=indptr[1:])
    m = sp.csr_matrix((data[order], c[order].astype(np.int32), indptr), shape=(n, n))
    m.has_canonical_format = True
    return m


# -- graph learning -------------------------------------------------------------

def pairwise_sq_distances(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    sq = np.einsum("ij,ij->i", X, X)
    d = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def knn_out_neighbors(X: np.ndarray, kappa: int) -> np.ndarray:
    """N x kappa array of each node's nearest other nodes.

    Ranking uses squared Euclidean distance with ties going to the smaller
    node index.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= kappa < n:
        raise ValidationError(f"kappa must satisfy 1 <= kappa < N={n}, got {kappa}")
    if np.isnan(X).any():
        raise ValidationError("features contain NaN")
    d = pairwise_sq_distances(X)
    np.fill_diagonal(d, np.inf)
    # stable sort keeps index order among equal distances
    order = np.argsort(d, axis=1, kind="stable")
    return order[:, :kappa]


def knn_graph(X: np.ndarray, kappa: int, metric: str = "euclidean_sq") -> SparseMatrix:
    """Union-symmetrized kappa-NN graph with unit weights."""
    if metric != "euclidean_sq":
        raise ValidationError(f"unsupported metric {metric!r}")
    nbrs = knn_out_neighbors(X, kappa)
    n = nbrs.shape[0]
    rows = np.repeat(np.arange(n), kappa)
    a = sp.coo_matrix((np.ones(rows.size), (rows, nbrs.ravel())), shape=(n, n)).tocsr()
    a = a + a.T
    a.data[:] = 1.0
    return canonical(a)


def correlation_graph(X: np.ndarray, eta: float) -> SparseMatrix:
    """Edges where the |Pearson correlation| of two nodes' features exceeds eta.

    Nodes whose feature vector has zero variance stay isolated.
    """
    X = np.asarray(X, dtype=np.float64)
    if not eta >= 0:
        raise ValidationError("eta must be nonnegative")
    n = X.shape[0]
    centered = X - X.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", centered, centered))
    ok = norms > 0
    unit = np.zeros_like(centered)
    unit[ok] = centered[ok] / norms[ok, None]
    rho = unit @ unit.T
    rho = 0.5 * (rho + rho.T)
    np.clip(rho, -1.0, 1.0, out=rho)
    np.fill_diagonal(rho, 0.0)
    rho[~ok, :] = 0.0
    rho[:, ~ok] = 0.0
    rho[np.abs(rho) <= eta] = 0.0
    return canonical(sp.csr_matrix(rho, shape=(n, n)))


# -- perturbation -----------------------------------------------------------------

def _check_binary_square(a: SparseMatrix) -> None:
    if a.shape[0] != a.shape[1]:
        raise StructuralError("expected a square adjacency")
    if a.nnz and not np.all(a.data == 1.0):
        raise ValidationError("expected a binary (0/1) adjacency")


def _dither_positions(n: int, present: np.ndarray, q1: float, q2: float, rng: np.random.Generator) -> np.ndarray:
    """Upper-triangle positions of one dithered sample."""
    keep = rng.random(present.size) < q1
    kept = present[keep]
    n_absent = _n_pairs(n) - present.size
    if q2 < 1.0 and n_absent:
        # iid Bernoulli(1 - q2) over absent pairs == binomial count + uniform subset
        count = int(rng.binomial(n_absent, 1.0 - q2))
        return np.concatenate([kept, _sample_absent(n, present, count, rng)])
    return kept


def dither_once(a: SparseMatrix, present: np.ndarray, q1: float, q2: float, rng: np.random.Generator) -> SparseMatrix:
    return _undirected_from_linear(a.shape[0], _dither_positions(a.shape[0], present, q1, q2, rng))


def edge_dither(a_bar: SparseMatrix, cfg: DitherConfig) -> TensorGraph:
    """Edge-dithered ensemble of an undirected binary graph.

    Each existing edge survives with probability ``q1`` and each absent pair
    is inserted with probability ``1 - q2``, independently per slab. The
    upper triangle is sampled and mirrored.
    """
    _check_binary_square(a_bar)
    present = _upper_edges(a_bar)
    streams = rng_streams(cfg.seed, cfg.n_samples, "dither")
    slabs = tuple(dither_once(a_bar, present, cfg.q1, cfg.q2, rng) for rng in streams)
    return TensorGraph.trusted(slabs, tuple(f"dither{i}" for i in range(cfg.n_samples)))


def perturb_insert_edges(a: SparseMatrix, count: int, seed: int) -> SparseMatrix:
    """Add ``count`` distinct absent undirected edges chosen uniformly (weight 1)."""
    if a.shape[0] != a.shape[1]:
        raise StructuralError("expected a square adjacency")
    n = a.shape[0]
    sym = symmetrize_matrix(a) if not is_symmetric(a) else a
    present = _upper_edges(sym)
    n_absent = _n_pairs(n) - present.size
    if count < 0 or count > n_absent:
        raise ValidationError(f"cannot insert {count} edges; only {n_absent} pairs are absent")
    rng = rng_streams(seed, 1, "insert")[0]
    new = _sample_absent(n, present, count, rng)
    return canonical(a + _undirected_from_linear(n, new))


def _noise_std(values: np.ndarray, snr: float) -> float:
    if values.size == 0 or math.isinf(snr):
        return 0.0
    power = float(np.mean(values * values))
    return math.sqrt(power / snr)


def add_noise(data, cfg: NoiseConfig):
    """Additive zero-mean Gaussian noise at the requested SNR.

    Per-element variance is the mean squared signal value divided by
    ``snr``. For a TensorGraph only existing nonzero weights are perturbed
    (the sparsity pattern is kept) and symmetric slabs stay symmetric.
    """
    if isinstance(data, TensorGraph):
        streams = rng_streams(cfg.seed, data.n_relations, "noise")
        return TensorGraph(
            tuple(_noisy_slab(s, cfg.snr, rng) for s, rng in zip(data.slabs, streams)),
            data.names,
        )
    X = np.asarray(data, dtype=np.float64)
    std = _noise_std(X, cfg.snr)
    if std == 0.0:
        return X.copy()
    rng = rng_streams(cfg.seed, 1, "noise")[0]
    return X + rng.normal(0.0, std, size=X.shape)


def _noisy_slab(s: SparseMatrix, snr: float, rng: np.random.Generator) -> SparseMatrix:
    std = _noise_std(s.data, snr)
    if std == 0.0:
        return s.copy()
    if is_symmetric(s):
        up = sp.triu(s, k=0).tocoo()
        w = up.data + rng.normal(0.0, std, size=up.nnz)
        off = up.row != up.col
        r = np.concatenate([up.row, up.col[off]])
        c = np.concatenate([up.col, up.row[off]])
        w = np.concatenate([w, w[off]])
        out = sp.csr_matrix((w, (r, c)), shape=s.shape)
    else:
        out = s.copy()
        out.data = out.data + rng.normal(0.0, std, size=out.nnz)
    # a noisy weight landing exactly on 0.0 (probability zero) would drop its edge
    out.sort_indices()
    return out


# -- random and synthetic data ------------------------------------------------------

def er_realizations(n: int, p: float, n_graphs: int, seed: int) -> TensorGraph:
    """``n_graphs`` independent undirected Erdos-Renyi(n, p) graphs."""
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"p must lie in [0, 1], got {p}")
    if n_graphs < 1:
        raise ValidationError("need at least one realization")
    total = _n_pairs(n)
    empty = np.empty(0, dtype=np.int64)
    slabs = []
    for rng in rng_streams(seed, n_graphs, "er"):
        count = int(rng.binomial(total, p)) if total else 0
        slabs.append(_undirected_from_linear(n, _sample_absent(n, empty, count, rng)))
    return TensorGraph.trusted(tuple(slabs), tuple(f"er{i}" for i in range(n_graphs)))


def synthetic_gaussian(n: int, f: int, seed: int, variance: float = 0.4) -> tuple[np.ndarray, np.ndarray]:
    """Two balanced Gaussian classes with means 0 and 1 and covariance ``variance * I``.

    Returns ``(X, labels)``; the first half of the nodes is class 0.
    """
    if n % 2:
        raise ValidationError("n must be even")
    rng = rng_streams(seed, 1, "synthetic")[0]
    labels = np.repeat(np.array([0, 1]), n // 2)
    X = rng.normal(0.0, math.sqrt(variance), size=(n, f)) + labels[:, None].astype(np.float64)
    return X, labels


def synthetic_gaussian_dataset(n: int = 1000, f: int = 10, seed: int = 0):
    """:func:`synthetic_gaussian` wrapped as an unsplit Dataset (K = 2)."""
    from .data_io import Dataset

    X, labels = synthetic_gaussian(n, f, seed)
    empty = np.zeros(n, dtype=bool)
    return Dataset(X, labels, 2, empty, empty.copy(), empty.copy())
