"""Tensor-graph convolutional network: forward map and its reverse-mode gradient.

Activations are ``(N, I, P)`` arrays: node, relation, feature. Each layer
computes

    Z_l = relu( FAM(GAM(NAM(Z_{l-1}))) + FAM_x(GAM_x(NAM_x(X))) )

where NAM diffuses every relation slab over ``1..R`` hops with learned hop
coefficients, GAM mixes relations and FAM mixes feature channels. The
output head collapses relations with learned weights and applies a
softmax.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import NumericError, StructuralError, ValidationError
from .graph_core import (
    NORMALIZE_MODES,
    PropagationSet,
    TensorGraph,
    add_self_loops,
    normalize,
)


@dataclass(frozen=True)
class ModelConfig:
    hops: int = 2
    widths: tuple = (64, 8, 2)
    share_R_across_nodes: bool = True
    share_W_across_nodes: bool = True
    activation: str = "relu"
    dropout_rate: float = 0.0
    normalize_mode: str = "symmetric"
    self_loops: bool = False
    # ReLU on the last layer before the head; off gives a plain GCN-style head
    output_activation: bool = True
    # feed X into every layer through its own (C, R, W); off drops those parameters
    residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths:
            raise ValidationError("need at least one layer")
        if any(w < 1 for w in self.widths):
            raise ValidationError("layer widths must be positive")
        if self.hops < 1:
            raise ValidationError("hops must be >= 1")
        if self.activation != "relu":
            raise ValidationError(f"unsupported activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must lie in [0, 1)")
        if self.normalize_mode not in NORMALIZE_MODES:
            raise ValidationError(f"unknown normalize_mode {self.normalize_mode!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths)

    @property
    def n_classes(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["n_layers"] = self.n_layers
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        n_layers = d.pop("n_layers", None)
        cfg = cls(**d)
        if n_layers is not None and n_layers != cfg.n_layers:
            raise StructuralError(f"n_layers={n_layers} disagrees with {len(cfg.widths)} widths")
        return cfg


def param_shapes(cfg: ModelConfig, n_nodes: int, n_relations: int, n_features: int) -> dict:
    """Array names and shapes in declaration (serialization) order."""
    nr = 1 if cfg.share_R_across_nodes else n_nodes
    nw = 1 if cfg.share_W_across_nodes else n_nodes
    I, R = n_relations, cfg.hops
    shapes = {}
    p_in = n_features
    for l, p in enumerate(cfg.widths):
        shapes[f"layer{l}.z.C"] = (R, I)
        shapes[f"layer{l}.z.R"] = (I, I, nr)
        shapes[f"layer{l}.z.W"] = (nw, I, p, p_in)
        if cfg.residual:
            shapes[f"layer{l}.x.C"] = (R, I)
            shapes[f"layer{l}.x.R"] = (I, I, nr)
            shapes[f"layer{l}.x.W"] = (nw, I, p, n_features)
        p_in = p
    shapes["head.w"] = (I,)
    shapes["head.b"] = (cfg.n_classes,)
    return shapes


class ModelParams:
    """Named parameter arrays plus the dimensions they were built for."""

    def __init__(self, cfg: ModelConfig, n_nodes: int, n_relations: int, n_features: int, arrays: dict):
        self.cfg = cfg
        self.n_nodes = int(n_nodes)
        self.n_relations = int(n_relations)
        self.n_features = int(n_features)
        shapes = param_shapes(cfg, n_nodes, n_relations, n_features)
        if list(arrays) != list(shapes):
            missing = set(shapes) ^ set(arrays)
            raise StructuralError(f"parameter names do not match the configuration: {sorted(missing) or 'order'}")
        self.arrays = {}
        for name, shape in shapes.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != tuple(shape):
                raise StructuralError(f"parameter '{name}' has shape {a.shape}, expected {tuple(shape)}")
            self.arrays[name] = a

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, self.n_nodes, self.n_relations, self.n_features,
                           {k: v.copy() for k, v in self.arrays.items()})

    def with_arrays(self, arrays: dict) -> "ModelParams":
        return ModelParams(self.cfg, self.n_nodes, self.n_relations, self.n_features, arrays)

    def replaced(self, name: str, array: np.ndarray) -> "ModelParams":
        """Copy with one array swapped (same shape; not re-validated)."""
        out = object.__new__(ModelParams)
        out.__dict__.update(self.__dict__)
        out.arrays = dict(self.arrays)
        out.arrays[name] = array
        return out

    def path(self, layer: int, which: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pre = f"layer{layer}.{which}."
        return self.arrays[pre + "C"], self.arrays[pre + "R"], self.arrays[pre + "W"]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())


def init_params(cfg: ModelConfig, n_nodes: int, n_relations: int, n_features: int, seed: int = 0) -> ModelParams:
    """Hop weights ``1/R``, identity relation mixing, Glorot-uniform feature
    weights, head weights ``1/I`` and zero bias."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    arrays = {}
    for name, shape in param_shapes(cfg, n_nodes, n_relations, n_features).items():
        kind = name.rsplit(".", 1)[-1]
        if kind == "C":
            arrays[name] = np.full(shape, 1.0 / cfg.hops)
        elif kind == "R":
            arrays[name] = np.repeat(np.eye(n_relations)[:, :, None], shape[2], axis=2)
        elif kind == "W":
            p, q = shape[2], shape[3]
            a = math.sqrt(6.0 / (p + q))
            arrays[name] = rng.uniform(-a, a, size=shape)
        elif name == "head.w":
            arrays[name] = np.full(shape, 1.0 / n_relations)
        else:
            arrays[name] = np.zeros(shape)
    return ModelParams(cfg, n_nodes, n_relations, n_features, arrays)


# -- graph preparation ----------------------------------------------------------------

class PreparedGraph:
    """Normalized propagation operators plus cached diffusions of the input X."""

    def __init__(self, g: TensorGraph, cfg: ModelConfig, X: Optional[np.ndarray] = None):
        def prep(s):
            if cfg.self_loops:
                s = add_self_loops(s)
            return normalize(s, cfg.normalize_mode)

        self.graph = g
        self.prop = PropagationSet(g.map_slabs(prep), cfg.hops)
        self._x = None
        self._x_diff = None
        if X is not None and cfg.residual:
            self.x_diffusions(X)

    def x_diffusions(self, X: np.ndarray) -> np.ndarray:
        if self._x is not X:
            self._x = X
            self._x_diff = np.stack([self.prop.diffuse(i, X) for i in range(self.prop.n_relations)])
        return self._x_diff


def prepare(g, cfg: ModelConfig, X: Optional[np.ndarray] = None) -> PreparedGraph:
    if isinstance(g, PreparedGraph):
        return g
    return PreparedGraph(g, cfg, X)


# -- the three linear modules -------------------------------------------------------

def input_layer(X: np.ndarray, n_relations: int) -> np.ndarray:
    """Replicate ``X`` (N x F) into every relation slab: (N, I, F)."""
    X = np.asarray(X, dtype=np.float64)
    return np.repeat(X[:, None, :], n_relations, axis=1)


def diffuse_all(prop: PropagationSet, Zin: np.ndarray) -> np.ndarray:
    """(I, R, N, P) stack of ``S_i^(r+1) Zin[:, i]``."""
    return np.stack([prop.diffuse(i, Zin[:, i, :]) for i in range(prop.n_relations)])


def _nam_from_diffusions(diffs: np.ndarray, C: np.ndarray) -> np.ndarray:
    return np.einsum("ri,irnp->nip", C, diffs)


def nam(Zin: np.ndarray, prop: PropagationSet, C: np.ndarray) -> np.ndarray:
    """Neighborhood aggregation: slab i -> sum_r C[r, i] S_i^(r+1) Zin[:, i]."""
    C = np.asarray(C, dtype=np.float64)
    if C.shape != (prop.hops, prop.n_relations):
        raise StructuralError(f"C has shape {C.shape}, expected {(prop.hops, prop.n_relations)}")
    if Zin.ndim != 3 or Zin.shape[1] != prop.n_relations:
        raise StructuralError(f"input has shape {Zin.shape}, expected (N, {prop.n_relations}, P)")
    return _nam_from_diffusions(diffuse_all(prop, Zin), C)


def gam(H: np.ndarray, Rmix: np.ndarray) -> np.ndarray:
    """Relation mixing: g[n, i] = sum_j Rmix[i, j, n] h[n, j] (one mix per node or shared)."""
    n, I, _ = H.shape
    if Rmix.ndim != 3 or Rmix.shape[:2] != (I, I) or Rmix.shape[2] not in (1, n):
        raise StructuralError(f"Rmix has shape {Rmix.shape}, expected ({I}, {I}, 1 or {n})")
    if Rmix.shape[2] == 1:
        return np.einsum("ij,njp->nip", Rmix[:, :, 0], H)
    return np.einsum("ijn,njp->nip", Rmix, H)


def fam(G: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Feature mixing: z[n, i] = W[n or 0, i] @ g[n, i]."""
    n, I, q = G.shape
    if W.ndim != 4 or W.shape[1] != I or W.shape[3] != q or W.shape[0] not in (1, n):
        raise StructuralError(f"W has shape {W.shape}, incompatible with input {G.shape}")
    if W.shape[0] == 1:
        return np.einsum("ipq,niq->nip", W[0], G)
    return np.einsum("nipq,niq->nip", W, G)


def _path_forward(diffs, C, Rmix, W):
    H = _nam_from_diffusions(diffs, C)
    G = gam(H, Rmix)
    return fam(G, W), (diffs, H, G)


def _path_backward(dZ, cache, C, Rmix, W, prop, need_input: bool):
    diffs, H, G = cache
    if W.shape[0] == 1:
        dW = np.einsum("nip,niq->ipq", dZ, G)[None]
        dG = np.einsum("ipq,nip->niq", W[0], dZ)
    else:
        dW = np.einsum("nip,niq->nipq", dZ, G)
        dG = np.einsum("nipq,nip->niq", W, dZ)
    if Rmix.shape[2] == 1:
        dR = np.einsum("nip,njp->ij", dG, H)[:, :, None]
        dH = np.einsum("ij,nip->njp", Rmix[:, :, 0], dG)
    else:
        dR = np.einsum("nip,njp->ijn", dG, H)
        dH = np.einsum("ijn,nip->njp", Rmix, dG)
    I = C.shape[1]
    dC = np.einsum("nip,irnp->ri", dH, diffs)
    dZin = None
    if need_input:
        dZin = np.empty((dH.shape[0], I, diffs.shape[3]))
        for i in range(I):
            dZin[:, i, :] = prop.adjoint(i, C[:, i], dH[:, i, :])
    return dC, dR, dW, dZin


def layer_forward(Zprev, X, params: ModelParams, layer: int, prepared: PreparedGraph,
                  train: bool = False, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """One residual layer; returns the (N, I, P) output."""
    out, _ = _layer(Zprev, X, params, layer, prepared, train, rng)
    return out


def _layer(Zprev, X, params, layer, prepared, train, rng):
    cfg = params.cfg
    prop = prepared.prop
    Cz, Rz, Wz = params.path(layer, "z")
    pre, cache_z = _path_forward(diffuse_all(prop, Zprev), Cz, Rz, Wz)
    cache_x = None
    if cfg.residual:
        Cx, Rx, Wx = params.path(layer, "x")
        Zx, cache_x = _path_forward(prepared.x_diffusions(X), Cx, Rx, Wx)
        pre = pre + Zx
    last = layer == cfg.n_layers - 1
    act = not last or cfg.output_activation
    out = np.maximum(pre, 0.0) if act else pre
    mask = None
    if train and cfg.dropout_rate > 0.0:
        if rng is None:
            raise ValidationError("dropout in train mode needs an rng")
        keep = 1.0 - cfg.dropout_rate
        mask = (rng.random(out.shape) < keep) / keep
        out = out * mask
    return out, (cache_z, cache_x, pre, act, mask)


def output_head(ZL: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-stochastic N x K predictions from the last layer's output."""
    logits = head_logits(ZL, w, b)
    return softmax(logits)


def head_logits(ZL: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if ZL.shape[1] != w.shape[0] or ZL.shape[2] != b.shape[0]:
        raise StructuralError(f"head ({w.shape}, {b.shape}) incompatible with input {ZL.shape}")
    logits = np.einsum("i,nik->nk", w, ZL) + b
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@dataclass
class ForwardCache:
    X: np.ndarray
    inputs: list = field(default_factory=list)
    layers: list = field(default_factory=list)
    ZL: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None
    Y_hat: Optional[np.ndarray] = None

    def kink_signature(self) -> np.ndarray:
        """Sign pattern of every ReLU pre-activation (for finite-difference checks)."""
        return np.concatenate([(c[2] > 0).ravel() for c in self.layers if c[3]] or [np.zeros(0, bool)])


def forward_with_cache(X, graph, params: ModelParams, mode: str = "eval",
                       rng: Optional[np.random.Generator] = None, resume=None) -> ForwardCache:
    """Forward pass keeping what :func:`backward` needs.

    ``resume=(layer, Z)`` starts at ``layer`` with input ``Z``; the returned
    cache then only covers layers from ``layer`` on.
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = params.cfg
    X = np.asarray(X, dtype=np.float64)
    prepared = prepare(graph, cfg, X)
    prop = prepared.prop
    if X.shape != (params.n_nodes, params.n_features):
        raise StructuralError(f"X has shape {X.shape}, expected {(params.n_nodes, params.n_features)}")
    if (prop.n_nodes, prop.n_relations) != (params.n_nodes, params.n_relations):
        raise StructuralError(
            f"graph is N={prop.n_nodes}, I={prop.n_relations}; parameters expect "
            f"N={params.n_nodes}, I={params.n_relations}"
        )
    if prop.hops != cfg.hops:
        raise StructuralError(f"prepared graph has {prop.hops} hops, model expects {cfg.hops}")
    cache = ForwardCache(X)
    start, Z = resume if resume is not None else (0, input_layer(X, prop.n_relations))
    for l in range(start, cfg.n_layers):
        cache.inputs.append(Z)
        Z, lc = _layer(Z, X, params, l, prepared, mode == "train", rng)
        cache.layers.append(lc)
    cache.ZL = Z
    cache.logits = head_logits(Z, params["head.w"], params["head.b"])
    cache.Y_hat = softmax(cache.logits)
    return cache


def forward(X, graph, params: ModelParams, mode: str = "eval",
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Predicted class probabilities (N x K).

    ``graph`` is a TensorGraph or a PreparedGraph from :func:`prepare`.
    """
    return forward_with_cache(X, graph, params, mode, rng).Y_hat


def backward(cache: ForwardCache, dlogits: np.ndarray, graph, params: ModelParams) -> dict:
    """Gradients of a scalar loss w.r.t. every parameter given dLoss/dlogits."""
    cfg = params.cfg
    prepared = prepare(graph, cfg)
    prop = prepared.prop
    grads = {}
    grads["head.b"] = dlogits.sum(axis=0)
    grads["head.w"] = np.einsum("nk,nik->i", dlogits, cache.ZL)
    dZ = np.einsum("i,nk->nik", params["head.w"], dlogits)
    for l in reversed(range(cfg.n_layers)):
        cache_z, cache_x, pre, act, mask = cache.layers[l]
        if mask is not None:
            dZ = dZ * mask
        if act:
            dZ = dZ * (pre > 0)
        Cz, Rz, Wz = params.path(l, "z")
        dC, dR, dW, dZin = _path_backward(dZ, cache_z, Cz, Rz, Wz, prop, need_input=l > 0)
        grads[f"layer{l}.z.C"], grads[f"layer{l}.z.R"], grads[f"layer{l}.z.W"] = dC, dR, dW
        if cfg.residual:
            Cx, Rx, Wx = params.path(l, "x")
            dC, dR, dW, _ = _path_backward(dZ, cache_x, Cx, Rx, Wx, prop, need_input=False)
            grads[f"layer{l}.x.C"], grads[f"layer{l}.x.R"], grads[f"layer{l}.x.W"] = dC, dR, dW
        dZ = dZin
    return {name: grads[name] for name in params.arrays}
