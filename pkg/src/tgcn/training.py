"""Training objective, exact gradients, ADAM and early-stopped training.

The objective is

    CE(Y_hat, Y) + mu1 * sum_i tr(Y_hat' L_i Y_hat) + mu2 * ||theta||^2 + lam * sum_l ||R_l||_1

with ``L_i`` the Laplacian of ``|S_i|`` (so the smoothness term is
nonnegative and rewards agreement across edges), ``theta`` every
parameter except the head bias, and the l1 norm taken over the relation
mixing tensors of both paths of every layer.

``gradients`` returns the exact gradient with ``lam * sign(R)`` for the l1
term. Training by default applies that term as a proximal soft-threshold
after each ADAM step instead, which lets unused mixing weights reach
exact zero rather than chattering around it.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .errors import NumericError, ValidationError
from .graph_core import TensorGraph, laplacian
from .model import (
    ModelConfig,
    ModelParams,
    PreparedGraph,
    backward,
    forward_with_cache,
    init_params,
    prepare,
)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    mu1: float = 1e-6
    mu2: float = 5e-4
    lam: float = 1e-6
    learning_rate: float = 0.005
    max_epochs: int = 300
    patience: int = 60
    seed: int = 0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    # "proximal": soft-threshold the mixing tensors after each ADAM step;
    # "subgradient": feed sign(R) into ADAM with the smooth gradient.
    l1_mode: str = "proximal"

    def __post_init__(self):
        if self.l1_mode not in ("proximal", "subgradient"):
            raise ValidationError(f"unknown l1_mode {self.l1_mode!r}")
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        for name in ("mu1", "mu2", "lam", "learning_rate", "adam_eps"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        if self.max_epochs < 1:
            raise ValidationError("max_epochs must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ValidationError(f"patience ({self.patience}) must lie in [0, max_epochs={self.max_epochs}]")
        if len(self.adam_betas) != 2 or not all(0 <= b < 1 for b in self.adam_betas):
            raise ValidationError("adam_betas must be two numbers in [0, 1)")


def _index(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype == bool:
        return np.flatnonzero(m)
    return m.astype(np.int64)


# -- objective terms --------------------------------------------------------------------

def cross_entropy(Y_hat: np.ndarray, Y: np.ndarray, labeled) -> float:
    """Summed negative log-likelihood over the labeled rows."""
    idx = _index(labeled)
    if idx.size == 0:
        raise ValidationError("the labeled set is empty")
    p = np.maximum(Y_hat[idx], PROB_FLOOR)
    return float(-np.sum(Y[idx] * np.log(p)))


def smoothness_operator(g: TensorGraph) -> sp.csr_matrix:
    """Sum over relations of the Laplacians of ``|S_i|``.

    Directed slabs are averaged with their transpose first: ``D - S`` with
    out-degrees is not positive semidefinite, the symmetrized one is. For
    symmetric slabs this changes nothing.
    """
    total = None
    for s in g.slabs:
        a = abs(s)
        lap = laplacian(0.5 * (a + a.T))
        total = lap if total is None else total + lap
    return sp.csr_matrix(total)


def smoothness_reg(Y_hat: np.ndarray, g) -> float:
    """``sum_i tr(Y_hat' L_i Y_hat)``; ``g`` may also be a precomputed operator.

    Evaluated as ``sum_{a<b} w_ab |y_a - y_b|^2`` so the result is exactly
    nonnegative and exactly zero when rows agree across every edge.
    """
    L = g if sp.issparse(g) else smoothness_operator(g)
    c = L.tocoo()
    upper = c.row < c.col
    diff = Y_hat[c.row[upper]] - Y_hat[c.col[upper]]
    return float(np.sum(-c.data[upper] * np.sum(diff * diff, axis=1)))


def l2_reg(params: ModelParams) -> float:
    return float(sum(np.sum(a * a) for k, a in params.arrays.items() if k != "head.b"))


def l1_reg(params: ModelParams) -> float:
    return float(sum(np.sum(np.abs(a)) for k, a in params.arrays.items() if k.endswith(".R")))


class Problem:
    """Fixed data of a training problem: features, graph, targets and labeled set.

    Precomputes the propagation operators, the diffused features and the
    smoothness operator so repeated objective/gradient calls are cheap.
    """

    def __init__(self, X, g: TensorGraph, Y, labeled, model_cfg: ModelConfig):
        self.X = np.asarray(X, dtype=np.float64)
        self.graph = g
        self.Y = np.asarray(Y, dtype=np.float64)
        self.labeled = _index(labeled)
        if self.labeled.size == 0:
            raise ValidationError("the labeled set is empty")
        self.prepared: PreparedGraph = prepare(g, model_cfg, self.X)
        self.L = smoothness_operator(g)


def _problem(X, g, Y, M, params) -> Problem:
    if isinstance(g, Problem):
        return g
    return Problem(X, g, Y, M, params.cfg)


def objective_terms(X, g, Y, M, params: ModelParams, cfg: TrainConfig) -> dict:
    pb = _problem(X, g, Y, M, params)
    Y_hat = forward_with_cache(pb.X, pb.prepared, params, "eval").Y_hat
    return {
        "cross_entropy": cross_entropy(Y_hat, pb.Y, pb.labeled),
        "smoothness": smoothness_reg(Y_hat, pb.L),
        "l2": l2_reg(params),
        "l1": l1_reg(params),
    }


def objective(X, g, Y, M, params: ModelParams, cfg: TrainConfig) -> float:
    """Full training objective evaluated with dropout disabled.

    ``g`` is a TensorGraph, or a :class:`Problem` (then X, Y, M are ignored).
    """
    t = objective_terms(X, g, Y, M, params, cfg)
    return t["cross_entropy"] + cfg.mu1 * t["smoothness"] + cfg.mu2 * t["l2"] + cfg.lam * t["l1"]


def _value_and_grad(pb: Problem, params: ModelParams, cfg: TrainConfig, mode="eval", rng=None,
                    l1_grad: bool = True):
    cache = forward_with_cache(pb.X, pb.prepared, params, mode, rng)
    Y_hat = cache.Y_hat
    idx = pb.labeled
    Yl = pb.Y[idx]
    p = Y_hat[idx]
    ce = float(-np.sum(Yl * np.log(np.maximum(p, PROB_FLOOR))))
    smooth = smoothness_reg(Y_hat, pb.L)
    l2 = l2_reg(params)
    l1 = l1_reg(params)
    value = ce + cfg.mu1 * smooth + cfg.mu2 * l2 + cfg.lam * l1

    # d(-log p_k)/dlogits = p - e_k, zero where the probability floor is active
    active = (p > PROB_FLOOR) & (Yl != 0)
    dlogits = np.zeros_like(Y_hat)
    dlogits[idx] = p * (Yl * active).sum(axis=1, keepdims=True) - Yl * active
    if cfg.mu1:
        dY = 2.0 * cfg.mu1 * (pb.L @ Y_hat)
        dlogits += Y_hat * (dY - np.sum(dY * Y_hat, axis=1, keepdims=True))
    grads = backward(cache, dlogits, pb.prepared, params)
    for name, a in params.arrays.items():
        if name != "head.b" and cfg.mu2:
            grads[name] = grads[name] + 2.0 * cfg.mu2 * a
        if name.endswith(".R") and cfg.lam and l1_grad:
            grads[name] = grads[name] + cfg.lam * np.sign(a)
    for name, gval in grads.items():
        if not np.all(np.isfinite(gval)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
    return value, grads, cache


def gradients(X, g, Y, M, params: ModelParams, cfg: TrainConfig) -> dict:
    """Exact gradient of :func:`objective` for every parameter array.

    The l1 term contributes ``sign(x)`` with ``sign(0) = 0`` and the ReLU
    derivative at 0 is taken as 0.
    """
    return _value_and_grad(_problem(X, g, Y, M, params), params, cfg)[1]


# -- optimizer -----------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(arrays: dict, grads: dict, state: AdamState, cfg: TrainConfig,
              prox_keys=()) -> tuple[dict, AdamState]:
    """One bias-corrected ADAM update; returns new arrays and a new state.

    Arrays named in ``prox_keys`` then get the l1 proximal map in ADAM's
    diagonal metric: soft-thresholding at ``lr * lam / (sqrt(v_hat) + eps)``.
    ``grads`` must then exclude the l1 term for those arrays.
    """
    b1, b2 = cfg.adam_betas
    t = state.step + 1
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new, m_new, v_new = {}, {}, {}
    for k, a in arrays.items():
        g = grads[k]
        m = state.m.get(k, np.zeros_like(a))
        v = state.v.get(k, np.zeros_like(a))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        denom = np.sqrt(v / bc2) + cfg.adam_eps
        step = a - cfg.learning_rate * (m / bc1) / denom
        if k in prox_keys:
            thr = cfg.learning_rate * cfg.lam / denom
            step = np.sign(step) * np.maximum(np.abs(step) - thr, 0.0)
        new[k] = step
        m_new[k], v_new[k] = m, v
    return new, AdamState(t, m_new, v_new)


# -- training loop -------------------------------------------------------------------------

@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    def __len__(self):
        return len(self.train_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
        for e, row in enumerate(zip(self.train_loss, self.val_loss, self.val_acc)):
            w.writerow([e] + [repr(float(x)) for x in row])
        return buf.getvalue()


def _argmax_accuracy(Y_hat: np.ndarray, labels: np.ndarray, idx: np.ndarray) -> float:
    return float(np.mean(np.argmax(Y_hat[idx], axis=1) == labels[idx]))


def train(dataset, g: TensorGraph, model_cfg: ModelConfig, train_cfg: TrainConfig,
          callback: Optional[Callable[[int, TrainHistory], None]] = None) -> tuple[ModelParams, TrainHistory]:
    """Full-batch training with validation-loss early stopping.

    Returns the parameters of the epoch with the lowest validation loss
    (strict improvement only). Without a validation split the training
    objective is monitored instead.
    """
    if dataset.n_classes != model_cfg.n_classes:
        raise ValidationError(f"last width {model_cfg.n_classes} != number of classes {dataset.n_classes}")
    if g.n_nodes != dataset.n_nodes:
        raise ValidationError(f"graph has {g.n_nodes} nodes, dataset has {dataset.n_nodes}")
    Y = dataset.Y
    train_idx = np.flatnonzero(dataset.train & (dataset.labels >= 0))
    val_idx = np.flatnonzero(dataset.val & (dataset.labels >= 0))
    pb = Problem(dataset.X, g, Y, train_idx, model_cfg)
    params = init_params(model_cfg, dataset.n_nodes, g.n_relations, dataset.n_features, seed=train_cfg.seed)
    drop_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 1]))
    use_dropout = model_cfg.dropout_rate > 0.0

    hist = TrainHistory()
    state = AdamState()
    best = math.inf
    best_arrays = {k: v.copy() for k, v in params.arrays.items()}
    since_best = 0
    prox = train_cfg.l1_mode == "proximal" and train_cfg.lam > 0
    prox_keys = frozenset(k for k in params.arrays if k.endswith(".R")) if prox else frozenset()
    for epoch in range(train_cfg.max_epochs):
        try:
            value, grads, cache = _value_and_grad(pb, params, train_cfg, l1_grad=not prox)
            if use_dropout:
                _, grads, _ = _value_and_grad(pb, params, train_cfg, "train", drop_rng, l1_grad=not prox)
        except NumericError as exc:
            raise NumericError(f"epoch {epoch}: {exc}") from None
        Y_hat = cache.Y_hat
        if val_idx.size:
            vloss = cross_entropy(Y_hat, Y, val_idx)
            vacc = _argmax_accuracy(Y_hat, dataset.labels, val_idx)
        else:
            vloss, vacc = value, float("nan")
        if not (math.isfinite(value) and math.isfinite(vloss)):
            raise NumericError(f"loss became non-finite at epoch {epoch}")
        hist.train_loss.append(value)
        hist.val_loss.append(vloss)
        hist.val_acc.append(vacc)
        if vloss < best:
            best = vloss
            hist.best_epoch = epoch
            best_arrays = {k: v.copy() for k, v in params.arrays.items()}
            since_best = 0
        else:
            since_best += 1
        if callback is not None:
            callback(epoch, hist)
        if since_best >= train_cfg.patience and train_cfg.patience < train_cfg.max_epochs:
            hist.stop_reason = "patience"
            break
        arrays, state = adam_step(params.arrays, grads, state, train_cfg, prox_keys)
        params = params.with_arrays(arrays)
    else:
        hist.stop_reason = "max_epochs"
    return params.with_arrays(best_arrays), hist


# -- finite-difference verification ------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    excluded: list
    worst: str = ""

    @property
    def n_excluded(self) -> int:
        return len(self.excluded)


def _probe(pb: Problem, params: ModelParams, cfg: TrainConfig, resume=None) -> tuple[float, np.ndarray]:
    """Objective value and the kink signature (ReLU and l1 sign pattern) at ``params``.

    With ``resume`` only layers from the resume point contribute ReLU signs.
    """
    cache = forward_with_cache(pb.X, pb.prepared, params, "eval", resume=resume)
    Y_hat = cache.Y_hat
    value = (cross_entropy(Y_hat, pb.Y, pb.labeled) + cfg.mu1 * smoothness_reg(Y_hat, pb.L)
             + cfg.mu2 * l2_reg(params) + cfg.lam * l1_reg(params))
    parts = [cache.kink_signature().astype(np.float64)]
    if cfg.lam > 0:
        parts += [np.sign(a).ravel() for k, a in params.arrays.items() if k.endswith(".R")]
    return value, np.concatenate(parts)


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(X, g, Y, M, params: ModelParams, cfg: TrainConfig, eps: float = 1e-5,
                      floor: float = 1e-5) -> GradCheckResult:
    """Compare analytic gradients to central differences coordinate by coordinate.

    A coordinate is excluded (and listed) when perturbing it by ``+-eps``
    flips the sign of any ReLU pre-activation or of any l1-penalized entry,
    i.e. when a kink lies within reach of the difference stencil.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    roundoff in the difference quotient (about 1e-10 absolute) from
    dominating on near-zero gradients.
    """
    if not eps > 0:
        raise ValidationError("eps must be positive")
    pb = _problem(X, g, Y, M, params)
    grads = _value_and_grad(pb, params, cfg)[1]
    base = forward_with_cache(pb.X, pb.prepared, params, "eval")
    n_layers = params.cfg.n_layers
    tails = {}
    for start in range(n_layers + 1):
        Z = base.inputs[start] if start < n_layers else base.ZL
        tails[start] = ((start, Z), _probe(pb, params, cfg, (start, Z))[1])
    worst, worst_name = 0.0, ""
    excluded = []
    checked = 0
    for name, a in params.arrays.items():
        start = int(name[5:name.index(".")]) if name.startswith("layer") else n_layers
        resume, base_sig = tails[start]
        for flat_i in range(a.size):
            vals = []
            kink = False
            for sgn in (1.0, -1.0):
                b = a.copy()
                b.flat[flat_i] += sgn * eps
                value, sig = _probe(pb, params.replaced(name, b), cfg, resume)
                vals.append(value)
                if not np.array_equal(sig, base_sig):
                    kink = True
            coord = f"{name}[{','.join(str(int(j)) for j in np.unravel_index(flat_i, a.shape))}]"
            if kink:
                excluded.append(coord)
                continue
            numeric = (vals[0] - vals[1]) / (2.0 * eps)
            err = relative_error(float(grads[name].flat[flat_i]), numeric, floor)
            checked += 1
            if err > worst:
                worst, worst_name = err, coord
    return GradCheckResult(worst, checked, excluded, worst_name)


GRADCHECK_TOLERANCE = 1e-4


def tiny_gradcheck_problem(seed: int, per_node: bool):
    """A 12-node, 3-relation, 2-hop, 2-layer problem with random parameters.

    Returns ``(X, g, Y, M, params, train_cfg)``. Parameters are drawn at
    random rather than taken from ``init_params`` so that every path, the
    per-node mixing included, carries a generic nonzero gradient.
    """
    from .graph_builders import er_realizations

    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    N, I, F, K = 12, 3, 3, 2
    er = er_realizations(N, 0.3, I, seed)
    slabs = []
    for s in er.slabs:
        w = rng.uniform(0.5, 1.5, size=(N, N))
        slabs.append(sp.csr_matrix(s.multiply(w + w.T)))
    g = TensorGraph(tuple(slabs))
    X = rng.normal(size=(N, F))
    Y = np.eye(K)[rng.integers(0, K, N)]
    M = np.sort(rng.choice(N, 6, replace=False))
    cfg = ModelConfig(hops=2, widths=(4, K), share_R_across_nodes=not per_node,
                      share_W_across_nodes=not per_node)
    p = init_params(cfg, N, I, F, seed)
    params = p.with_arrays({k: rng.normal(scale=0.5, size=v.shape) for k, v in p.arrays.items()})
    return X, g, Y, M, params, TrainConfig(mu1=0.1, mu2=0.01, lam=0.05)
