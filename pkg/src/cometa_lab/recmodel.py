"""Embedding + MLP CTR backbone and its training loops."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .dataio import AttrField, InteractionLog
from .diffgraph import AdamState, Graph, Node, adam_step, grad

logger = logging.getLogger(__name__)

CLAMP = 1e-12


class VocabularyError(IndexError):
    pass


@dataclass(frozen=True)
class FeatureSchema:
    n_users: int
    n_items: int
    user_fields: tuple[AttrField, ...] = ()
    item_fields: tuple[AttrField, ...] = ()
    dim: int = 16
    hidden: tuple[int, ...] = (64, 64, 64)

    def __post_init__(self):
        if self.n_users < 1 or self.n_items < 1 or self.dim < 1:
            raise ValueError("vocabulary sizes and dim must be >= 1")
        if any(f.vocab < 1 for f in self.user_fields + self.item_fields):
            raise ValueError("attribute vocabularies must be >= 1")
        for side in (self.user_fields, self.item_fields):
            names = [f.name for f in side]
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate field names in {names}")

    @classmethod
    def from_log(cls, log: InteractionLog, dim: int = 16, hidden=(64, 64, 64)) -> "FeatureSchema":
        return cls(log.n_users, log.n_items, tuple(log.user_fields), tuple(log.item_fields),
                   dim, tuple(hidden))

    @property
    def input_width(self) -> int:
        return (len(self.user_fields) + len(self.item_fields) + 2) * self.dim

    def to_dict(self) -> dict:
        return {
            "n_users": self.n_users, "n_items": self.n_items, "dim": self.dim,
            "hidden": list(self.hidden),
            "user_fields": [[f.name, f.vocab, f.multi] for f in self.user_fields],
            "item_fields": [[f.name, f.vocab, f.multi] for f in self.item_fields],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(d["n_users"], d["n_items"],
                   tuple(AttrField(*f) for f in d["user_fields"]),
                   tuple(AttrField(*f) for f in d["item_fields"]),
                   d["dim"], tuple(d["hidden"]))


@dataclass
class ModelParams:
    schema: FeatureSchema
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.schema, {k: v.copy() for k, v in self.tensors.items()})

    def digest(self, keys: Iterable[str] | None = None) -> str:
        h = hashlib.sha256()
        for k in sorted(keys if keys is not None else self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k]).tobytes())
        return h.hexdigest()

    def layer_names(self) -> list[tuple[str, str]]:
        return [(f"mlp{i}.W", f"mlp{i}.b") for i in range(len(self.schema.hidden))] + [("out.W", "out.b")]


def user_attr_key(f: AttrField) -> str:
    return f"user_attr.{f.name}"


def item_attr_key(f: AttrField) -> str:
    return f"item_attr.{f.name}"


def init_params(schema: FeatureSchema, seed: int = 0) -> ModelParams:
    """Embeddings ~ U(-0.01, 0.01); dense weights ~ U(+-1/sqrt(fan_in)); biases 0."""
    rng = np.random.default_rng(seed)
    d = schema.dim
    t: dict[str, np.ndarray] = {
        "user_id": rng.uniform(-0.01, 0.01, (schema.n_users, d)),
        "item_id": rng.uniform(-0.01, 0.01, (schema.n_items, d)),
    }
    for f in schema.user_fields:
        t[user_attr_key(f)] = rng.uniform(-0.01, 0.01, (f.vocab, d))
    for f in schema.item_fields:
        t[item_attr_key(f)] = rng.uniform(-0.01, 0.01, (f.vocab, d))
    width = schema.input_width
    for i, h in enumerate(list(schema.hidden) + [1]):
        bound = 1.0 / np.sqrt(width)
        name = f"mlp{i}" if i < len(schema.hidden) else "out"
        t[f"{name}.W"] = rng.uniform(-bound, bound, (width, h))
        t[f"{name}.b"] = np.zeros((1, h))
        width = h
    return ModelParams(schema, t)


def random_item_rows(schema: FeatureSchema, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-0.01, 0.01, (n, schema.dim))


@dataclass
class SampleBatch:
    """Per-sample lookups. Attribute entries are index arrays or pooling rows."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    user_attrs: list[np.ndarray] = field(default_factory=list)
    item_attrs: list[np.ndarray] = field(default_factory=list)
    item_override: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.users)

    @classmethod
    def from_log(cls, log: InteractionLog, index: np.ndarray | None = None,
                 item_override: np.ndarray | None = None) -> "SampleBatch":
        idx = np.arange(len(log)) if index is None else np.asarray(index, dtype=np.int64)
        u, i = log.users[idx], log.items[idx]
        return cls(u, i, log.labels[idx].astype(np.float64),
                   [a[u] for a in log.user_attrs], [a[i] for a in log.item_attrs], item_override)

    def check(self, schema: FeatureSchema) -> None:
        n = len(self.users)
        if len(self.items) != n or len(self.labels) != n:
            raise ValueError("batch columns differ in length")
        if self.item_override is not None and self.item_override.shape != (n, schema.dim):
            raise ValueError(f"override must be {(n, schema.dim)}, got {self.item_override.shape}")
        _check_vocab("user_id", self.users, schema.n_users)
        _check_vocab("item_id", self.items, schema.n_items)
        for fields, attrs in ((schema.user_fields, self.user_attrs), (schema.item_fields, self.item_attrs)):
            if len(fields) != len(attrs):
                raise ValueError("batch attribute arity does not match the schema")
            for f, a in zip(fields, attrs):
                if a.ndim == 1:
                    _check_vocab(f.name, a, f.vocab)
                elif a.shape[1] != f.vocab:
                    raise VocabularyError(f"field {f.name!r}: pooling width {a.shape[1]} != vocab {f.vocab}")


def _check_vocab(name: str, idx: np.ndarray, vocab: int) -> None:
    if len(idx) and (idx.min() < 0 or idx.max() >= vocab):
        bad = idx[(idx < 0) | (idx >= vocab)][0]
        raise VocabularyError(f"field {name!r}: index {int(bad)} outside vocabulary of size {vocab}")


def param_nodes(g: Graph, params: ModelParams, trainable: Iterable[str] | bool = False) -> dict[str, Node]:
    if trainable is True:
        trainable = set(params.tensors)
    elif trainable is False:
        trainable = set()
    else:
        trainable = set(trainable)
    return {k: g.input(v, requires_grad=k in trainable, name=k) for k, v in params.tensors.items()}


def _lookup(g: Graph, table: Node, values: np.ndarray) -> Node:
    if values.ndim == 1:
        return g.take(table, values)
    return g.matmul(g.const(values), table)


def embed_nodes(g: Graph, P: dict[str, Node], schema: FeatureSchema, batch: SampleBatch,
                item_vec: Node | None = None) -> Node:
    """[u, Z_user, v, Z_item] per sample.

    ``item_vec`` (a node of shape batch x d or 1 x d) replaces the item-ID
    lookup; the batch's numeric override is used when no node is given.
    """
    parts = [g.take(P["user_id"], batch.users)]
    parts += [_lookup(g, P[user_attr_key(f)], a) for f, a in zip(schema.user_fields, batch.user_attrs)]
    if item_vec is None and batch.item_override is not None:
        item_vec = g.const(batch.item_override)
    if item_vec is None:
        parts.append(g.take(P["item_id"], batch.items))
    else:
        parts.append(g.broadcast_to(item_vec, (len(batch), schema.dim)))
    parts += [_lookup(g, P[item_attr_key(f)], a) for f, a in zip(schema.item_fields, batch.item_attrs)]
    return g.concat(parts, axis=1)


def predict_nodes(g: Graph, P: dict[str, Node], schema: FeatureSchema, batch: SampleBatch,
                  item_vec: Node | None = None) -> Node:
    h = embed_nodes(g, P, schema, batch, item_vec)
    for i in range(len(schema.hidden)):
        h = g.relu(g.add(g.matmul(h, P[f"mlp{i}.W"]), P[f"mlp{i}.b"]))
    return g.sigmoid(g.add(g.matmul(h, P["out.W"]), P["out.b"]))


def embed_batch(params: ModelParams, batch: SampleBatch) -> np.ndarray:
    batch.check(params.schema)
    g = Graph()
    return embed_nodes(g, param_nodes(g, params), params.schema, batch).value


def predict(params: ModelParams, batch: SampleBatch) -> np.ndarray:
    """Click probabilities, shape (batch, 1)."""
    batch.check(params.schema)
    g = Graph()
    return predict_nodes(g, param_nodes(g, params), params.schema, batch).value


def bce_loss(predictions, labels) -> float:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("bce_loss of an empty batch")
    if p.size != y.size:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    p = np.clip(p, CLAMP, 1.0 - CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def batch_loss_and_grads(params: ModelParams, batch: SampleBatch,
                         trainable: Sequence[str]) -> tuple[float, dict[str, np.ndarray]]:
    g = Graph()
    P = param_nodes(g, params, trainable)
    loss = g.bce(predict_nodes(g, P, params.schema, batch), batch.labels.reshape(-1, 1))
    keys = list(trainable)
    grads = grad(loss, [P[k] for k in keys])
    return float(loss.value[0, 0]), dict(zip(keys, grads))


def _minibatches(n: int, size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[s:s + size] for s in range(0, n, size)]


def mean_loss(params: ModelParams, log: InteractionLog, index: np.ndarray) -> float:
    return bce_loss(predict(params, SampleBatch.from_log(log, index)), log.labels[index])


def pretrain(params: ModelParams, log: InteractionLog, index: np.ndarray, epochs: int = 1,
             lr: float = 1e-3, seed: int = 0, batch_size: int = 256,
             on_epoch: Callable[[int, float], None] | None = None) -> ModelParams:
    """Adam over every parameter on shuffled minibatches of ``log[index]``."""
    index = np.asarray(index, dtype=np.int64)
    if len(index) == 0:
        raise ValueError("empty training set")
    params = params.copy()
    if epochs <= 0:
        return params
    rng = np.random.default_rng(seed)
    state = AdamState(lr=lr)
    keys = list(params.tensors)
    for epoch in range(epochs):
        total = 0.0
        for chunk in _minibatches(len(index), batch_size, rng):
            batch = SampleBatch.from_log(log, index[chunk])
            loss, grads = batch_loss_and_grads(params, batch, keys)
            adam_step(params.tensors, grads, state)
            total += loss * len(chunk)
        avg = total / len(index)
        logger.info("pretrain epoch %d loss %.6f", epoch + 1, avg)
        if on_epoch is not None:
            on_epoch(epoch + 1, avg)
    return params


def update_item_embeddings_only(params: ModelParams, log: InteractionLog, index: np.ndarray,
                                items: Sequence[int], epochs: int = 1, lr: float = 1e-3,
                                seed: int = 0, batch_size: int = 256) -> ModelParams:
    """Fine-tune only the item-ID rows listed in ``items``.

    The trainable rows live in their own array, so no other parameter can
    receive an update; this is asserted on every step as well.
    """
    index = np.asarray(index, dtype=np.int64)
    if len(index) == 0:
        raise ValueError("empty training set")
    params = params.copy()
    if epochs <= 0:
        return params
    rows = np.asarray(sorted(set(int(i) for i in items)), dtype=np.int64)
    if np.isin(log.items[index], rows, invert=True).any():
        raise ValueError("warm samples reference items outside the trainable set")
    slot = {int(r): k for k, r in enumerate(rows)}
    local = {"rows": params.tensors["item_id"][rows].copy()}
    schema = params.schema
    rng = np.random.default_rng(seed)
    state = AdamState(lr=lr)
    for _ in range(epochs):
        for chunk in _minibatches(len(index), batch_size, rng):
            batch = SampleBatch.from_log(log, index[chunk])
            g = Graph()
            P = param_nodes(g, params)
            table = g.param(local["rows"], name="rows")
            vec = g.take(table, [slot[int(i)] for i in batch.items])
            loss = g.bce(predict_nodes(g, P, schema, batch, item_vec=vec), batch.labels.reshape(-1, 1))
            (g_rows,) = grad(loss, [table])
            assert not any(n.requires_grad for n in P.values()), "frozen parameter entered the graph"
            adam_step(local, {"rows": g_rows}, state)
    params.tensors["item_id"][rows] = local["rows"]
    return params
