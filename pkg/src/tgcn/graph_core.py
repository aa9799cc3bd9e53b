"""Sparse adjacency storage, neighborhoods, matrix powers and normalization.

Slabs are ``scipy.sparse.csr_matrix`` objects kept in canonical form:
duplicates summed, explicit zeros dropped and column indices sorted
within each row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import StructuralError, ValidationError

SparseMatrix = sp.csr_matrix

NORMALIZE_MODES = ("none", "symmetric", "row")

# Powers up to this hop count are materialized; beyond it they are applied
# as repeated products to bound memory.
MAX_MATERIALIZED_HOPS = 4


def canonical(m) -> SparseMatrix:
    """Return ``m`` as a float64 CSR matrix in canonical form."""
    m = sp.csr_matrix(m, dtype=np.float64, copy=True)
    m.sum_duplicates()
    m.eliminate_zeros()
    m.sort_indices()
    return m


def sparse_from_edges(
    edges: Iterable[tuple[int, int, float]],
    n_rows: int,
    n_cols: int,
    symmetrize: bool = False,
) -> SparseMatrix:
    """Build a CSR matrix from ``(row, col, weight)`` triples.

    Duplicate pairs are summed. With ``symmetrize`` the pattern becomes the
    union of ``A`` and ``A.T``; a pair present in both directions gets the
    average of the two weights, a pair present in one direction keeps it.
    """
    arr = np.asarray(list(edges), dtype=np.float64).reshape(-1, 3)
    rows = arr[:, 0]
    cols = arr[:, 1]
    w = arr[:, 2]
    if np.any(np.isnan(w)) or not np.all(np.isfinite(w)):
        raise ValidationError("edge weights must be finite")
    if np.any(rows != np.floor(rows)) or np.any(cols != np.floor(cols)):
        raise StructuralError("edge indices must be integers")
    rows = rows.astype(np.int64)
    cols = cols.astype(np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= n_rows):
        raise StructuralError(f"row index out of range for {n_rows} rows")
    if cols.size and (cols.min() < 0 or cols.max() >= n_cols):
        raise StructuralError(f"column index out of range for {n_cols} columns")
    m = canonical(sp.coo_matrix((w, (rows, cols)), shape=(n_rows, n_cols)))
    if symmetrize:
        m = symmetrize_matrix(m)
    return m


def symmetrize_matrix(m: SparseMatrix) -> SparseMatrix:
    if m.shape[0] != m.shape[1]:
        raise StructuralError("only square matrices can be symmetrized")
    pattern = (m != 0).astype(np.float64)
    count = pattern + pattern.T
    total = m + m.T
    # count is 1 or 2 on the union pattern
    out = total.multiply(count.power(-1.0))
    return canonical(out)


def is_symmetric(m: SparseMatrix, tol: float = 0.0) -> bool:
    if m.shape[0] != m.shape[1]:
        return False
    diff = abs(m - m.T)
    return diff.nnz == 0 or diff.max() <= tol


@dataclass(frozen=True)
class TensorGraph:
    """N x N x I adjacency tensor stored as ``I`` sparse slabs."""

    slabs: tuple
    names: tuple = field(default=())

    def __post_init__(self):
        slabs = tuple(canonical(s) for s in self.slabs)
        if not slabs:
            raise StructuralError("a tensor graph needs at least one slab")
        n = slabs[0].shape[0]
        for i, s in enumerate(slabs):
            if s.shape != (n, n):
                raise StructuralError(f"slab {i} has shape {s.shape}, expected {(n, n)}")
            if s.nnz and not np.all(np.isfinite(s.data)):
                raise ValidationError(f"slab {i} has non-finite weights")
        names = tuple(self.names) if self.names else tuple(f"rel{i}" for i in range(len(slabs)))
        if len(names) != len(slabs):
            raise StructuralError("number of relation names differs from slab count")
        object.__setattr__(self, "slabs", slabs)
        object.__setattr__(self, "names", names)

    @classmethod
    def trusted(cls, slabs: tuple, names: tuple) -> "TensorGraph":
        """Wrap freshly built canonical float64 CSR slabs without copying them."""
        g = object.__new__(cls)
        object.__setattr__(g, "slabs", tuple(slabs))
        object.__setattr__(g, "names", tuple(names))
        return g

    @property
    def n_nodes(self) -> int:
        return self.slabs[0].shape[0]

    @property
    def n_relations(self) -> int:
        return len(self.slabs)

    def __getitem__(self, i: int) -> SparseMatrix:
        return self.slabs[i]

    def map_slabs(self, fn) -> "TensorGraph":
        return TensorGraph(tuple(fn(s) for s in self.slabs), self.names)


def neighborhood(g: TensorGraph, n: int, i: int) -> set[int]:
    """Nodes ``n'`` with a nonzero weight ``S[n, n', i]``."""
    if not 0 <= i < g.n_relations:
        raise StructuralError(f"relation {i} out of range (I={g.n_relations})")
    if not 0 <= n < g.n_nodes:
        raise StructuralError(f"node {n} out of range (N={g.n_nodes})")
    s = g.slabs[i]
    lo, hi = s.indptr[n], s.indptr[n + 1]
    return {int(c) for c, w in zip(s.indices[lo:hi], s.data[lo:hi]) if w != 0}


def apply(m: SparseMatrix, Z: np.ndarray) -> np.ndarray:
    """Sparse-dense product ``m @ Z`` returned as a dense array."""
    Z = np.asarray(Z, dtype=np.float64)
    if m.shape[1] != Z.shape[0]:
        raise StructuralError(f"cannot apply a {m.shape} matrix to {Z.shape[0]} rows")
    return np.asarray(m @ Z)


def laplacian(m: SparseMatrix) -> SparseMatrix:
    """Combinatorial Laplacian ``D - S`` with ``D`` the row sums."""
    if m.shape[0] != m.shape[1]:
        raise StructuralError("laplacian needs a square matrix")
    if m.nnz and m.data.min() < 0:
        raise ValidationError("laplacian needs nonnegative weights")
    deg = np.asarray(m.sum(axis=1)).ravel()
    return canonical(sp.diags(deg) - m)


def normalize(m: SparseMatrix, mode: str = "symmetric") -> SparseMatrix:
    """Degree-normalize a square adjacency.

    ``symmetric`` gives ``D^-1/2 S D^-1/2`` and ``row`` gives ``D^-1 S``.
    Degrees are sums of absolute weights so signed correlation graphs stay
    bounded; zero-degree rows stay zero.
    """
    if mode not in NORMALIZE_MODES:
        raise ValidationError(f"unknown normalization mode {mode!r}")
    if mode == "none":
        return canonical(m)
    deg = np.asarray(abs(m).sum(axis=1)).ravel()
    with np.errstate(divide="ignore"):
        if mode == "row":
            inv = np.where(deg > 0, 1.0 / deg, 0.0)
            return canonical(sp.diags(inv) @ m)
        inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    d = sp.diags(inv_sqrt)
    return canonical(d @ m @ d)


def add_self_loops(m: SparseMatrix, weight: float = 1.0) -> SparseMatrix:
    return canonical(m + weight * sp.identity(m.shape[0], format="csr"))


class PropagationSet:
    """Per-relation hop operators ``S_i^r`` for ``r = 1..hops``.

    ``powers[i][r]`` holds ``S_i^(r+1)`` when ``hops`` is small enough to
    materialize; otherwise ``powers`` is ``None`` and products are taken by
    repeated application of the base slab.
    """

    def __init__(self, g: TensorGraph, hops: int):
        if hops < 1:
            raise ValidationError("hops must be >= 1")
        self.hops = hops
        self.n_nodes = g.n_nodes
        self.n_relations = g.n_relations
        self.base = g.slabs
        self._base_t = tuple(canonical(s.T) for s in g.slabs)
        self.powers = None
        self._powers_t = None
        if hops <= MAX_MATERIALIZED_HOPS:
            powers = []
            for s in g.slabs:
                row = [s]
                for _ in range(1, hops):
                    row.append(canonical(row[-1] @ s))
                powers.append(tuple(row))
            self.powers = tuple(powers)
            self._powers_t = tuple(tuple(canonical(p.T) for p in row) for row in powers)

    def power(self, i: int, r: int) -> SparseMatrix:
        """``S_i^(r+1)``; built on demand when powers are not materialized."""
        if self.powers is not None:
            return self.powers[i][r]
        p = self.base[i]
        for _ in range(r):
            p = canonical(p @ self.base[i])
        return p

    def diffuse(self, i: int, Z: np.ndarray) -> np.ndarray:
        """Stack ``[S_i Z, S_i^2 Z, ..., S_i^R Z]`` of shape (R, N, P) for one relation."""
        if Z.shape[0] != self.n_nodes:
            raise StructuralError(f"expected {self.n_nodes} rows, got {Z.shape[0]}")
        out = np.empty((self.hops,) + Z.shape)
        if self.powers is not None:
            for r, p in enumerate(self.powers[i]):
                out[r] = p @ Z
            return out
        out[0] = self.base[i] @ Z
        for r in range(1, self.hops):
            out[r] = self.base[i] @ out[r - 1]
        return out

    def adjoint(self, i: int, coeffs: Sequence[float], dH: np.ndarray) -> np.ndarray:
        """``sum_r coeffs[r] * (S_i^(r+1)).T @ dH`` (backward of ``diffuse``)."""
        if self._powers_t is not None:
            out = np.zeros_like(dH)
            for c, pt in zip(coeffs, self._powers_t[i]):
                if c != 0.0:
                    out += c * np.asarray(pt @ dH)
            return out
        st = self._base_t[i]
        acc = coeffs[-1] * dH
        for c in reversed(coeffs[:-1]):
            acc = np.asarray(st @ acc) + c * dH
        return np.asarray(st @ acc)


def build_propagation_set(g: TensorGraph, hops: int) -> PropagationSet:
    return PropagationSet(g, hops)
