"""Meta-embedding initialisers for new items and the episodes that train them."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import beg
from .dataio import InteractionLog, SplitResult
from .recmodel import ModelParams, SampleBatch, random_item_rows
from .seg import (Episode, EpisodeSource, SegHistory, SegParams, SegTrainConfig, generate_shift,
                  item_attr_vector, mean_user_embedding, train_seg)

logger = logging.getLogger(__name__)

KINDS = ("random", "global_average", "attribute_only", "cometa", "cometa_no_beg", "cometa_no_seg")
# kinds that regenerate from warm interactions before fine-tuning
REGENERATING = ("cometa", "cometa_no_beg", "cometa_no_seg")
# which trained generator each kind uses
GENERATOR_FOR = {"cometa": "full", "cometa_no_beg": "no_beg", "attribute_only": "attr"}
USES_BASE = ("cometa", "cometa_no_seg")


class UntrainedGeneratorError(RuntimeError):
    pass


def check_kinds(kinds: Iterable[str]) -> list[str]:
    kinds = list(kinds)
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise ValueError(f"unknown initializer kind(s) {bad}; choose from {list(KINDS)}")
    if not kinds:
        raise ValueError("at least one initializer kind is required")
    return kinds


@dataclass
class GlobalAverages:
    item: np.ndarray   # 1 x d, mean over old-item rows
    user: np.ndarray   # 1 x d, mean over all user rows

    @classmethod
    def from_model(cls, model: ModelParams, old_items: Sequence[int]) -> "GlobalAverages":
        old = np.asarray(sorted(old_items), dtype=np.int64)
        return cls(model.tensors["item_id"][old].mean(axis=0, keepdims=True),
                   model.tensors["user_id"].mean(axis=0, keepdims=True))


@dataclass
class Context:
    """Read-only state shared by every generation call."""

    model: ModelParams
    log: InteractionLog
    old_items: frozenset[int]
    index: beg.CooccurrenceIndex
    averages: GlobalAverages
    k: int = beg.DEFAULT_K
    positive_only: bool = True

    def attrs(self, item: int) -> np.ndarray:
        return item_attr_vector(self.model, [a[item] for a in self.log.item_attrs])

    def conditioning_users(self, index: np.ndarray) -> dict[int, set[int]]:
        """Per-item user sets from a set of records (positives only by default)."""
        out: dict[int, set[int]] = {}
        for r in np.asarray(index, dtype=np.int64):
            if self.positive_only and self.log.labels[r] != 1:
                continue
            out.setdefault(int(self.log.items[r]), set()).add(int(self.log.users[r]))
        return out

    def base(self, item: int, users: set[int] | None) -> tuple[np.ndarray, beg.NeighborList]:
        nl = beg.NeighborList(item)
        if users:
            nl = beg.top_k_from_users(self.index, item, users, self.old_items - {item}, self.k)
        v = beg.base_embedding(nl, self.model.tensors["item_id"])
        return (self.averages.item.copy() if v is None else v.reshape(1, -1)), nl

    def mean_user(self, users: set[int] | None) -> np.ndarray:
        if not users:
            return self.averages.user.copy()
        return mean_user_embedding(users, self.model.tensors["user_id"])


def build_context(model: ModelParams, log: InteractionLog, split: SplitResult, k: int = beg.DEFAULT_K,
                  positive_only: bool = True) -> Context:
    old_idx = np.concatenate([split.pretrain, split.coldstart])
    index = beg.build_index(log.users[old_idx], log.items[old_idx], log.labels[old_idx], positive_only)
    return Context(model, log, frozenset(split.old_items.tolist()), index,
                   GlobalAverages.from_model(model, split.old_items), k, positive_only)


def meta_embedding(ctx: Context, item: int, users: set[int] | None, kind: str,
                   generators: dict[str, SegParams] | None = None,
                   rng: np.random.Generator | None = None, parts: dict | None = None) -> np.ndarray:
    """Initial ID embedding of ``item`` given the users observed with it.

    ``users`` empty or ``None`` means the cold phase: global averages stand in
    for both the base embedding and the interacted-user mean.
    """
    d = ctx.model.schema.dim
    if kind == "random":
        rng = rng if rng is not None else np.random.default_rng()
        return random_item_rows(ctx.model.schema, 1, rng)
    if kind == "global_average":
        return ctx.averages.item.copy()
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")

    v_beg = np.zeros((1, d))
    if kind in USES_BASE:
        v_beg, nl = ctx.base(item, users)
        if parts is not None:
            parts["neighbors"] = nl
    v_seg = np.zeros((1, d))
    if kind in GENERATOR_FOR:
        seg = (generators or {}).get(GENERATOR_FOR[kind])
        if seg is None:
            raise UntrainedGeneratorError(f"kind {kind!r} needs the trained {GENERATOR_FOR[kind]!r} generator")
        mean_u = ctx.averages.user if kind == "attribute_only" else ctx.mean_user(users)
        v_seg = generate_shift(mean_u, ctx.attrs(item), seg)
    if parts is not None:
        parts["v_beg"], parts["v_seg"] = v_beg, v_seg
    return v_beg + v_seg


def initialize_cold(ctx: Context, model: ModelParams, items: Sequence[int], kind: str,
                    generators: dict[str, SegParams] | None = None, seed: int = 0) -> ModelParams:
    """New-item rows for the cold phase; everything else is copied unchanged."""
    out = model.copy()
    rng = np.random.default_rng(seed)
    items = sorted(int(i) for i in items)
    if kind == "random":
        out.tensors["item_id"][items] = random_item_rows(model.schema, len(items), rng)
        return out
    rows = [meta_embedding(ctx, i, None, kind, generators, rng) for i in items]
    if rows:
        out.tensors["item_id"][items] = np.vstack(rows)
    return out


def warm_context(ctx: Context, warm_index: np.ndarray) -> Context:
    """Copy of ``ctx`` whose index also links new items to their warm users."""
    log = ctx.log
    idx = np.asarray(warm_index, dtype=np.int64)
    if ctx.positive_only:
        idx = idx[log.labels[idx] == 1]
    index = ctx.index.copy().add(zip(log.users[idx].tolist(), log.items[idx].tolist()))
    return Context(ctx.model, log, ctx.old_items, index, ctx.averages, ctx.k, ctx.positive_only)


def regenerate_warm(ctx: Context, model: ModelParams, items: Sequence[int], warm_index: np.ndarray,
                    kind: str, generators: dict[str, SegParams] | None = None) -> ModelParams:
    """Replace new-item rows with embeddings generated from warm interactions.

    Items without (usable) warm interactions keep their current row. Only
    old items are neighbor candidates.
    """
    wctx = warm_context(ctx, warm_index)
    users = wctx.conditioning_users(warm_index)
    out = model.copy()
    updates = {}
    for i in sorted(int(x) for x in items):
        if i in ctx.old_items:
            raise ValueError(f"item {i} is an old item")
        if users.get(i):
            updates[i] = meta_embedding(wctx, i, users[i], kind, generators)
    for i, row in updates.items():   # single commit after all rows are computed
        out.tensors["item_id"][i] = row.ravel()
    return out


# training episodes ----------------------------------------------------------

def coldstart_pools(split: SplitResult, log: InteractionLog, min_size: int) -> dict[int, np.ndarray]:
    pools: dict[int, list[int]] = {}
    for r in split.coldstart.tolist():
        pools.setdefault(int(log.items[r]), []).append(r)
    return {i: np.asarray(v) for i, v in sorted(pools.items()) if len(v) >= min_size}


def make_episode(ctx: Context, item: int, ids_a: np.ndarray, ids_b: np.ndarray, variant: str) -> Episode:
    log = ctx.log
    users = ctx.conditioning_users(ids_a).get(item, set())
    d = ctx.model.schema.dim
    if variant == "full":
        v_beg, _ = ctx.base(item, users)
    else:
        v_beg = np.zeros((1, d))
    mean_u = ctx.averages.user.copy() if variant == "attr" else ctx.mean_user(users)
    return Episode(item, SampleBatch.from_log(log, ids_a), SampleBatch.from_log(log, ids_b),
                   v_beg, mean_u, ctx.attrs(item), np.sort(ids_a), np.sort(ids_b))


def old_item_episodes(ctx: Context, split: SplitResult, m: int, variant: str = "full") -> EpisodeSource:
    """One episode per eligible old item per epoch, D_a and D_b drawn afresh.

    The interacted-user set that conditions the generator comes from D_a only,
    mirroring deployment where a new item is seen through its warm fold.
    """
    if variant not in ("full", "no_beg", "attr"):
        raise ValueError(f"unknown generator variant {variant!r}")
    pools = coldstart_pools(split, ctx.log, 2 * m)
    if not pools:
        raise ValueError(f"no old item has {2 * m} cold-start samples for episodes")

    def source(epoch: int, rng: np.random.Generator) -> list[Episode]:
        eps = []
        for item, pool in pools.items():
            pick = rng.permutation(pool)[: 2 * m]
            eps.append(make_episode(ctx, item, pick[:m], pick[m:], variant))
        return eps

    return source


def train_generators(ctx: Context, split: SplitResult, config: SegTrainConfig, seed: int,
                     variants: Iterable[str] = ("full",)) -> dict[str, tuple[SegParams, SegHistory]]:
    out = {}
    for n, variant in enumerate(variants):
        logger.info("training %s generator", variant)
        source = old_item_episodes(ctx, split, config.m, variant)
        out[variant] = train_seg(source, ctx.model, config, seed=seed * 1000 + n)
    return out


def needed_generators(kinds: Iterable[str]) -> list[str]:
    need = {GENERATOR_FOR[k] for k in kinds if k in GENERATOR_FOR}
    return [v for v in ("full", "no_beg", "attr") if v in need]
