"""Base embeddings from co-occurrence similarity with old items."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_K = 8


class UnindexedItemError(KeyError):
    pass


@dataclass
class CooccurrenceIndex:
    item_users: dict[int, set[int]] = field(default_factory=dict)   # U(i)
    user_items: dict[int, set[int]] = field(default_factory=dict)   # I(a)
    n_records: int = 0

    def users_of(self, item: int) -> set[int]:
        try:
            return self.item_users[item]
        except KeyError:
            raise UnindexedItemError(f"item {item} is not in the index") from None

    def copy(self) -> "CooccurrenceIndex":
        return CooccurrenceIndex({k: set(v) for k, v in self.item_users.items()},
                                 {k: set(v) for k, v in self.user_items.items()}, self.n_records)

    def add(self, pairs: Iterable[tuple[int, int]]) -> "CooccurrenceIndex":
        for a, i in pairs:
            self.item_users.setdefault(int(i), set()).add(int(a))
            self.user_items.setdefault(int(a), set()).add(int(i))
            self.n_records += 1
        return self


def build_index(users: Sequence[int], items: Sequence[int], labels: Sequence[int] | None = None,
                positive_only: bool = True) -> CooccurrenceIndex:
    """User/item incidence sets; repeated pairs count once."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if positive_only and labels is not None:
        keep = np.asarray(labels) == 1
        users, items = users[keep], items[keep]
    return CooccurrenceIndex().add(zip(users.tolist(), items.tolist()))


def user_weight(index: CooccurrenceIndex, user: int, log=math.log) -> float:
    """A shared user's contribution, damped by how many items the user touched."""
    return 1.0 / log(1.0 + len(index.user_items[user]))


def similarity(index: CooccurrenceIndex, i: int, j: int, log=math.log) -> float:
    ui, uj = index.users_of(i), index.users_of(j)
    if not ui or not uj:
        return 0.0
    small, big = (ui, uj) if len(ui) <= len(uj) else (uj, ui)
    total = sum(user_weight(index, a, log) for a in small if a in big)
    return total / math.sqrt(len(ui) * len(uj))


@dataclass
class NeighborList:
    item: int
    neighbors: list[int] = field(default_factory=list)
    sims: list[float] = field(default_factory=list)
    alphas: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.neighbors)

    def to_line(self) -> str:
        body = ",".join(f"{k}:{s:.12g}:{a:.12g}" for k, s, a in zip(self.neighbors, self.sims, self.alphas))
        return f"{self.item}\t{body}"


def scores_for_users(index: CooccurrenceIndex, users: Iterable[int], candidates: set[int] | None,
                     exclude: int | None = None, log=math.log) -> dict[int, float]:
    """Unnormalised shared-user sums for a query item given only its user set."""
    acc: dict[int, float] = {}
    for a in users:
        items = index.user_items.get(a)
        if not items:
            continue
        w = 1.0 / log(1.0 + len(items))
        for k in items:
            if k == exclude or (candidates is not None and k not in candidates):
                continue
            acc[k] = acc.get(k, 0.0) + w
    return acc


def top_k_from_users(index: CooccurrenceIndex, item: int, users: set[int], candidates: set[int] | None,
                     k: int = DEFAULT_K, log=math.log) -> NeighborList:
    """Neighbors of ``item`` when its user set is ``users``.

    Candidates' own user sets come from the index; the query item is never
    its own neighbor.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    out = NeighborList(item)
    if not users:
        return out
    acc = scores_for_users(index, users, candidates, exclude=item, log=log)
    n_i = len(users)
    scored = [(total / math.sqrt(n_i * len(index.item_users[j])), j) for j, total in acc.items()]
    scored = [(s, j) for s, j in scored if s > 0]
    # rank on 12 significant digits so float noise cannot outvote the id tie-break
    scored.sort(key=lambda t: (-float(f"{t[0]:.12g}"), t[1]))
    scored = scored[:k]
    if not scored:
        return out
    z = sum(s for s, _ in scored)
    out.neighbors = [j for _, j in scored]
    out.sims = [s for s, _ in scored]
    out.alphas = [s / z for s, _ in scored]
    return out


def top_k_neighbors(index: CooccurrenceIndex, item: int, old_items: Iterable[int],
                    k: int = DEFAULT_K, log=math.log) -> NeighborList:
    return top_k_from_users(index, item, index.users_of(item), set(old_items), k, log)


def base_embedding(neighbors: NeighborList, item_table: np.ndarray) -> np.ndarray | None:
    """Weighted sum of neighbor rows; ``None`` when there are no neighbors."""
    if not len(neighbors):
        return None
    idx = np.asarray(neighbors.neighbors, dtype=np.int64)
    if idx.min() < 0 or idx.max() >= item_table.shape[0]:
        raise IndexError(f"neighbor row outside item table of {item_table.shape[0]} rows")
    return np.asarray(neighbors.alphas) @ item_table[idx]


def dump_neighbors(lists: Iterable[NeighborList], path) -> None:
    Path(path).write_text("".join(nl.to_line() + "\n" for nl in lists))


def read_neighbors(path) -> list[NeighborList]:
    out = []
    for line in Path(path).read_text().splitlines():
        item, _, body = line.partition("\t")
        nl = NeighborList(int(item))
        for entry in filter(None, body.split(",")):
            k, s, a = entry.split(":")
            nl.neighbors.append(int(k))
            nl.sims.append(float(s))
            nl.alphas.append(float(a))
        out.append(nl)
    return out
