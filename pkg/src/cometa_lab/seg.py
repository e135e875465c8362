"""Shift-embedding generator and its meta-training loop.

Row-vector convention throughout: a representation is a ``1 x d`` row and a
learnable map is applied as ``x @ W``.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffgraph import AdamState, Graph, Node, adam_step, grad, sgd_step
from .recmodel import ModelParams, SampleBatch, item_attr_key, param_nodes, predict_nodes

logger = logging.getLogger(__name__)


class EmptyUserSetError(ValueError):
    pass


@dataclass
class SegTrainConfig:
    eta: float = 1e-3
    beta: float = 0.1
    m: int = 20
    lr: float = 1e-3
    epochs: int = 5
    first_order: bool = False
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.m < 1:
            raise ValueError("m must be >= 1")


@dataclass
class SegParams:
    tensors: dict[str, np.ndarray]
    dim: int
    n_item_fields: int

    def copy(self) -> "SegParams":
        return SegParams({k: v.copy() for k, v in self.tensors.items()}, self.dim, self.n_item_fields)

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(self.tensors[k].tobytes())
        return h.hexdigest()

    @property
    def n_layers(self) -> int:
        return sum(1 for k in self.tensors if k.startswith("g") and k.endswith(".W"))


def init_seg(dim: int, n_item_fields: int, hidden: Sequence[int] = (64, 64), seed: int = 0,
             out_scale: float = 0.01) -> SegParams:
    rng = np.random.default_rng(seed)
    t = {
        "W_u": rng.uniform(-1, 1, (dim, dim)) / np.sqrt(dim),
        "W_f": rng.uniform(-1, 1, (max(n_item_fields, 1) * dim, dim)) / np.sqrt(max(n_item_fields, 1) * dim),
    }
    width = 2 * dim
    sizes = list(hidden) + [dim]
    for i, h in enumerate(sizes):
        bound = 1.0 / np.sqrt(width)
        if i == len(sizes) - 1:
            bound *= out_scale   # keep generated shifts near trained-embedding magnitude
        t[f"g{i}.W"] = rng.uniform(-bound, bound, (width, h))
        t[f"g{i}.b"] = np.zeros((1, h))
        width = h
    return SegParams(t, dim, n_item_fields)


def mean_user_embedding(users: Sequence[int], user_table: np.ndarray) -> np.ndarray:
    users = np.asarray(list(users), dtype=np.int64)
    if users.size == 0:
        raise EmptyUserSetError("no interacted users; use the global user average instead")
    return user_table[np.sort(users)].mean(axis=0, keepdims=True)


def item_attr_vector(model: ModelParams, item_attr_values: Sequence) -> np.ndarray:
    """Concatenated attribute embeddings of one item (``1 x m*d``).

    Each value is an index, or a pooling row for multi-valued fields.
    """
    parts = []
    for f, a in zip(model.schema.item_fields, item_attr_values):
        table = model.tensors[item_attr_key(f)]
        a = np.asarray(a)
        parts.append(table[int(a)] if a.ndim == 0 else a @ table)
    if not parts:
        return np.zeros((1, model.schema.dim))
    return np.concatenate(parts).reshape(1, -1)


# graph builders ------------------------------------------------------------

def refined_user_node(g: Graph, S: dict[str, Node], mean_vec: Node) -> Node:
    return g.matmul(mean_vec, S["W_u"])


def refined_attr_node(g: Graph, S: dict[str, Node], attrs: Node) -> Node:
    return g.matmul(attrs, S["W_f"])


def generator_node(g: Graph, S: dict[str, Node], h_u: Node, h_f: Node) -> Node:
    h = g.concat([h_u, h_f], axis=1)
    n = sum(1 for k in S if k.startswith("g") and k.endswith(".W"))
    for i in range(n):
        h = g.add(g.matmul(h, S[f"g{i}.W"]), S[f"g{i}.b"])
        if i < n - 1:
            h = g.relu(h)
    return h


def shift_node(g: Graph, S: dict[str, Node], mean_vec: Node, attrs: Node) -> Node:
    return generator_node(g, S, refined_user_node(g, S, mean_vec), refined_attr_node(g, S, attrs))


def _seg_nodes(g: Graph, seg: SegParams, trainable: bool) -> dict[str, Node]:
    return {k: g.input(v, requires_grad=trainable, name=k) for k, v in seg.tensors.items()}


# numeric wrappers ----------------------------------------------------------

def refined_user_repr(mean_vec: np.ndarray, seg: SegParams) -> np.ndarray:
    mean_vec = np.atleast_2d(mean_vec)
    if mean_vec.shape != (1, seg.dim):
        raise ValueError(f"mean vector must be (1, {seg.dim}), got {mean_vec.shape}")
    return mean_vec @ seg.tensors["W_u"]


def refined_attr_repr(attrs: np.ndarray, seg: SegParams) -> np.ndarray:
    attrs = np.atleast_2d(attrs)
    if attrs.shape[1] != seg.tensors["W_f"].shape[0]:
        raise ValueError(f"expected {seg.tensors['W_f'].shape[0]} attribute columns, got {attrs.shape[1]}")
    return attrs @ seg.tensors["W_f"]


def shift_embedding(h_u: np.ndarray, h_f: np.ndarray, seg: SegParams) -> np.ndarray:
    g = Graph()
    S = _seg_nodes(g, seg, False)
    return generator_node(g, S, g.const(h_u), g.const(h_f)).value


def generate_shift(mean_vec: np.ndarray, attrs: np.ndarray, seg: SegParams) -> np.ndarray:
    return shift_embedding(refined_user_repr(mean_vec, seg), refined_attr_repr(attrs, seg), seg)


# episodes ------------------------------------------------------------------

@dataclass
class Episode:
    item: int
    batch_a: SampleBatch
    batch_b: SampleBatch
    v_beg: np.ndarray          # 1 x d, treated as a constant
    mean_user: np.ndarray      # 1 x d
    attrs: np.ndarray          # 1 x m*d
    ids_a: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    ids_b: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __post_init__(self):
        if len(self.batch_a) == 0 or len(self.batch_b) == 0:
            raise ValueError("episode minibatches must be non-empty")
        if len(np.intersect1d(self.ids_a, self.ids_b)):
            raise ValueError("D_a and D_b overlap")


@dataclass
class EpisodeResult:
    loss: float
    loss_a: float
    loss_b: float
    grads: dict[str, np.ndarray]
    v_seg: np.ndarray
    v_seg_adapted: np.ndarray


def episode_loss(episode: Episode, model: ModelParams, seg: SegParams, config: SegTrainConfig,
                 want_grads: bool = True) -> EpisodeResult:
    """beta * loss_a + (1 - beta) * loss_b with one inner step on the shift."""
    g = Graph()
    P = param_nodes(g, model)                 # backbone enters as constants
    S = _seg_nodes(g, seg, want_grads)
    schema = model.schema
    v_seg = shift_node(g, S, g.const(episode.mean_user), g.const(episode.attrs))
    v_beg = g.const(episode.v_beg)

    ya = episode.batch_a.labels.reshape(-1, 1)
    loss_a = g.bce(predict_nodes(g, P, schema, episode.batch_a, g.add(v_beg, v_seg)), ya)
    if config.eta == 0.0:
        adapted = v_seg
    else:
        (d_v,) = grad(loss_a, [v_seg], create_graph=not config.first_order)
        adapted = sgd_step(v_seg, d_v, config.eta)
    yb = episode.batch_b.labels.reshape(-1, 1)
    loss_b = g.bce(predict_nodes(g, P, schema, episode.batch_b, g.add(v_beg, adapted)), yb)
    total = g.add(g.scale(loss_a, config.beta), g.scale(loss_b, 1.0 - config.beta))

    grads = {}
    if want_grads:
        keys = list(S)
        grads = dict(zip(keys, grad(total, [S[k] for k in keys])))
    return EpisodeResult(float(total.value[0, 0]), float(loss_a.value[0, 0]), float(loss_b.value[0, 0]),
                         grads, v_seg.value.copy(), adapted.value.copy())


EpisodeSource = Callable[[int, np.random.Generator], list[Episode]]


@dataclass
class SegHistory:
    epochs: list[dict] = field(default_factory=list)


def train_seg(episodes: EpisodeSource, model: ModelParams, config: SegTrainConfig, seed: int = 0,
              seg: SegParams | None = None) -> tuple[SegParams, SegHistory]:
    """Adam on the generator parameters, one step per episode.

    ``episodes(epoch, rng)`` yields that epoch's episodes. The backbone is only
    ever read.
    """
    if seg is None:
        seg = init_seg(model.schema.dim, len(model.schema.item_fields), config.hidden, seed)
    seg = seg.copy()
    history = SegHistory()
    if config.epochs <= 0:
        return seg, history
    rng = np.random.default_rng(seed)
    state = AdamState(lr=config.lr)
    before = model.digest()
    for epoch in range(config.epochs):
        eps = episodes(epoch, rng)
        if not eps:
            raise ValueError("no eligible old items for episodes")
        la = lb = tot = 0.0
        for k in rng.permutation(len(eps)):
            res = episode_loss(eps[k], model, seg, config)
            adam_step(seg.tensors, res.grads, state)
            la += res.loss_a
            lb += res.loss_b
            tot += res.loss
        n = len(eps)
        row = {"epoch": epoch + 1, "loss_a": la / n, "loss_b": lb / n, "loss_seg": tot / n}
        history.epochs.append(row)
        logger.info("seg epoch %d loss_seg %.6f loss_a %.6f loss_b %.6f",
                    epoch + 1, row["loss_seg"], row["loss_a"], row["loss_b"])
    assert model.digest() == before, "backbone changed during generator training"
    return seg, history


def mean_episode_losses(eps: Sequence[Episode], model: ModelParams, seg: SegParams,
                        config: SegTrainConfig) -> dict[str, float]:
    res = [episode_loss(e, model, seg, config, want_grads=False) for e in eps]
    return {"loss_a": float(np.mean([r.loss_a for r in res])),
            "loss_b": float(np.mean([r.loss_b for r in res])),
            "loss_seg": float(np.mean([r.loss for r in res]))}
