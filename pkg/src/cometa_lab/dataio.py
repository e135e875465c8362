"""Interaction logs, loaders, the old/new item split and a synthetic generator."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class DataError(Exception):
    pass


class Encoder:
    """Dictionary encoding in first-seen order."""

    def __init__(self, values: Iterable[Hashable] = ()):
        self.index: dict[Hashable, int] = {}
        self.values: list[Hashable] = []
        for v in values:
            self.encode(v)

    def encode(self, value: Hashable) -> int:
        code = self.index.get(value)
        if code is None:
            code = len(self.values)
            self.index[value] = code
            self.values.append(value)
        return code

    def decode(self, code: int) -> Hashable:
        return self.values[code]

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class AttrField:
    name: str
    vocab: int
    multi: bool = False


@dataclass
class InteractionLog:
    """Records plus per-entity attribute tables.

    Single-valued attributes are stored as an int array over entities;
    multi-valued ones as a row-normalised weight matrix (entities x vocab), so
    mean pooling becomes a matrix product.
    """

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    timestamps: np.ndarray
    n_users: int
    n_items: int
    user_fields: list[AttrField] = field(default_factory=list)
    item_fields: list[AttrField] = field(default_factory=list)
    user_attrs: list[np.ndarray] = field(default_factory=list)
    item_attrs: list[np.ndarray] = field(default_factory=list)
    user_encoder: Encoder | None = None
    item_encoder: Encoder | None = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        n = len(self.users)
        if not (len(self.items) == len(self.labels) == len(self.timestamps) == n):
            raise DataError("record columns differ in length")
        if n and not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be binary")
        if n and (self.users.max() >= self.n_users or self.items.max() >= self.n_items
                  or self.users.min() < 0 or self.items.min() < 0):
            raise DataError("record references an id missing from the feature tables")
        for fields, attrs, count in ((self.user_fields, self.user_attrs, self.n_users),
                                     (self.item_fields, self.item_attrs, self.n_items)):
            if len(fields) != len(attrs):
                raise DataError("attribute fields and tables differ in count")
            for f, a in zip(fields, attrs):
                if a.shape[0] != count:
                    raise DataError(f"attribute {f.name!r} has {a.shape[0]} rows, expected {count}")

    def __len__(self) -> int:
        return len(self.users)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.users, self.items, self.labels, self.timestamps):
            h.update(np.ascontiguousarray(arr).tobytes())
        for arr in self.user_attrs + self.item_attrs:
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def _pool_rows(bags: Sequence[Sequence[int]], vocab: int) -> np.ndarray:
    out = np.zeros((len(bags), vocab))
    for r, bag in enumerate(bags):
        if bag:
            for v in bag:
                out[r, v] += 1.0 / len(bag)
    return out


# ---------------------------------------------------------------------------
# MovieLens-1M

def _read_dat(path: Path, n_fields: int) -> list[list[str]]:
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    rows = []
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != n_fields:
                raise DataError(f"{path}:{lineno}: expected {n_fields} '::' fields, got {len(parts)}")
            rows.append(parts)
    return rows


def parse_rating_line(line: str, lineno: int = 1) -> tuple[str, str, int, int]:
    parts = line.strip().split("::")
    if len(parts) != 4:
        raise DataError(f"line {lineno}: malformed rating record {line!r}")
    user, item, rating, ts = parts
    try:
        label = 1 if int(rating) >= 4 else 0
        return user, item, label, int(ts)
    except ValueError:
        raise DataError(f"line {lineno}: non-integer rating or timestamp in {line!r}") from None


def load_movielens(ratings_path, users_path, movies_path) -> InteractionLog:
    """MovieLens-1M with ratings >= 4 mapped to 1, everything else to 0."""
    ratings_path, users_path, movies_path = map(Path, (ratings_path, users_path, movies_path))
    if not ratings_path.exists():
        raise FileNotFoundError(f"missing file: {ratings_path}")
    user_rows = _read_dat(users_path, 5)
    movie_rows = _read_dat(movies_path, 3)

    uenc, ienc = Encoder(), Encoder()
    age, gender, occ = Encoder(), Encoder(), Encoder()
    u_age, u_gender, u_occ = [], [], []
    for uid, g, a, o, _zip in user_rows:
        uenc.encode(uid)
        u_gender.append(gender.encode(g))
        u_age.append(age.encode(a))
        u_occ.append(occ.encode(o))

    genre, decade = Encoder(), Encoder()
    m_genres, m_decade = [], []
    for mid, title, genres in movie_rows:
        ienc.encode(mid)
        m_genres.append([genre.encode(x) for x in genres.split("|") if x])
        year = title.strip()[-5:-1]
        dec = f"{year[:3]}0s" if year.isdigit() else "unknown"
        m_decade.append(decade.encode(dec))

    users, items, labels, stamps = [], [], [], []
    with open(ratings_path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            u, i, y, ts = parse_rating_line(line, lineno)
            if u not in uenc.index or i not in ienc.index:
                raise DataError(f"{ratings_path}:{lineno}: unknown user or movie id")
            users.append(uenc.index[u])
            items.append(ienc.index[i])
            labels.append(y)
            stamps.append(ts)

    return InteractionLog(
        users, items, labels, stamps, len(uenc), len(ienc),
        user_fields=[AttrField("gender", len(gender)), AttrField("age", len(age)),
                     AttrField("occupation", len(occ))],
        item_fields=[AttrField("genre", len(genre), multi=True), AttrField("decade", len(decade))],
        user_attrs=[np.array(u_gender), np.array(u_age), np.array(u_occ)],
        item_attrs=[_pool_rows(m_genres, len(genre)), np.array(m_decade)],
        user_encoder=uenc, item_encoder=ienc,
    )


# ---------------------------------------------------------------------------
# Generic CSV

ROLES = ("user_id", "item_id", "label", "timestamp", "user_attr", "item_attr")


def load_csv(path, schema: Mapping[str, str], multi_sep: str | None = None) -> InteractionLog:
    """Load a headered CSV whose columns map to roles via ``schema``.

    ``schema`` maps column name -> role (one of ``ROLES``). Attribute columns
    may carry several values joined by ``multi_sep``; those fields are pooled.
    Entity attributes are taken from the first row that mentions the entity.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    for col, role in schema.items():
        if role not in ROLES:
            raise DataError(f"column {col!r}: unknown role {role!r}")
    for role in ROLES[:4]:
        if role not in schema.values():
            raise DataError(f"schema has no {role!r} column")

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row expected") from None
        seen = set()
        for col in header:
            if col in seen:
                raise DataError(f"duplicate header column {col!r}")
            seen.add(col)
        for col in schema:
            if col not in seen:
                raise DataError(f"schema column {col!r} not in header")
        for col in header:
            if col not in schema:
                raise DataError(f"unknown column {col!r}")
        rows = list(reader)

    pos = {c: k for k, c in enumerate(header)}
    col_of = {role: c for c, role in schema.items() if role in ROLES[:4]}
    uattr_cols = [c for c in header if schema[c] == "user_attr"]
    iattr_cols = [c for c in header if schema[c] == "item_attr"]

    uenc, ienc = Encoder(), Encoder()
    uvals = {c: Encoder() for c in uattr_cols}
    ivals = {c: Encoder() for c in iattr_cols}
    ubags: dict[str, list] = {c: [] for c in uattr_cols}
    ibags: dict[str, list] = {c: [] for c in iattr_cols}
    users, items, labels, stamps = [], [], [], []

    def bag(raw: str, enc: Encoder) -> list[int]:
        parts = raw.split(multi_sep) if multi_sep else [raw]
        return [enc.encode(p) for p in parts if p != ""]

    for lineno, row in enumerate(rows, 2):
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        u_raw, i_raw = row[pos[col_of["user_id"]]], row[pos[col_of["item_id"]]]
        new_u, new_i = u_raw not in uenc.index, i_raw not in ienc.index
        u, i = uenc.encode(u_raw), ienc.encode(i_raw)
        if new_u:
            for c in uattr_cols:
                ubags[c].append(bag(row[pos[c]], uvals[c]))
        if new_i:
            for c in iattr_cols:
                ibags[c].append(bag(row[pos[c]], ivals[c]))
        y = row[pos[col_of["label"]]].strip()
        if y not in ("0", "1"):
            raise DataError(f"{path}:{lineno}: non-binary label {y!r}")
        users.append(u)
        items.append(i)
        labels.append(int(y))
        stamps.append(int(float(row[pos[col_of["timestamp"]]])))

    def tables(cols, bags, encs):
        fields, arrs = [], []
        for c in cols:
            multi = any(len(b) != 1 for b in bags[c])
            vocab = max(len(encs[c]), 1)
            fields.append(AttrField(c, vocab, multi))
            if multi:
                arrs.append(_pool_rows(bags[c], vocab))
            else:
                arrs.append(np.array([b[0] for b in bags[c]], dtype=np.int64))
        return fields, arrs

    uf, ua = tables(uattr_cols, ubags, uvals)
    itf, ia = tables(iattr_cols, ibags, ivals)
    return InteractionLog(users, items, labels, stamps, len(uenc), len(ienc),
                          uf, itf, ua, ia, uenc, ienc)


# ---------------------------------------------------------------------------
# Split

@dataclass(frozen=True)
class SplitSpec:
    n_old: int = 200
    n_new: int = 80
    k_fold: int = 20
    holdout: int = 40  # most recent samples per old item kept for the cold-start pool

    def __post_init__(self):
        if not (self.n_old > self.n_new >= 3 * self.k_fold):
            raise ValueError(f"need n_old > n_new >= 3*k_fold, got {self}")
        if self.k_fold < 1 or self.holdout < 0:
            raise ValueError("k_fold must be >= 1 and holdout >= 0")


@dataclass
class SplitResult:
    old_items: np.ndarray
    new_items: np.ndarray
    pretrain: np.ndarray        # record indices
    coldstart: np.ndarray       # record indices, old items only
    warm_a: dict[int, np.ndarray]
    warm_b: dict[int, np.ndarray]
    warm_c: dict[int, np.ndarray]
    test: dict[int, np.ndarray]

    def fold(self, name: str) -> np.ndarray:
        parts = getattr(self, name.replace("-", "_"))
        return np.concatenate([parts[i] for i in self.new_items]) if len(self.new_items) else np.zeros(0, np.int64)

    @property
    def test_indices(self) -> np.ndarray:
        return self.fold("test")

    def manifest(self, log: InteractionLog, spec: SplitSpec) -> dict:
        ts = log.timestamps
        per_item = {}
        for i in self.new_items.tolist():
            per_item[str(i)] = {
                name: {"count": int(len(idx)),
                       "first_ts": int(ts[idx].min()) if len(idx) else None,
                       "last_ts": int(ts[idx].max()) if len(idx) else None}
                for name, idx in (("warm_a", self.warm_a[i]), ("warm_b", self.warm_b[i]),
                                  ("warm_c", self.warm_c[i]), ("test", self.test[i]))
            }
        return {
            "schema_version": 1,
            "log_fingerprint": log.fingerprint(),
            "spec": {"n_old": spec.n_old, "n_new": spec.n_new, "k_fold": spec.k_fold,
                     "holdout": spec.holdout},
            "counts": {"old_items": int(len(self.old_items)), "new_items": int(len(self.new_items)),
                       "pretrain_samples": int(len(self.pretrain)),
                       "coldstart_samples": int(len(self.coldstart)),
                       "warm_samples": int(sum(len(self.fold(f)) for f in ("warm_a", "warm_b", "warm_c"))),
                       "test_samples": int(len(self.test_indices))},
            "old_items": self.old_items.tolist(),
            "new_items": per_item,
        }


def _by_time(log: InteractionLog, idx: np.ndarray) -> np.ndarray:
    return idx[np.argsort(log.timestamps[idx], kind="stable")]


def split(log: InteractionLog, spec: SplitSpec) -> SplitResult:
    """Group items by sample count and cut each new item's timeline into folds.

    Old: count > n_old. New: n_new < count < n_old (strict both ends). Items at
    exactly n_old or at most n_new are dropped.
    """
    order = np.argsort(log.items, kind="stable")
    counts = np.bincount(log.items, minlength=log.n_items)
    starts = np.concatenate([[0], np.cumsum(counts)])
    old = np.flatnonzero(counts > spec.n_old)
    new = np.flatnonzero((counts > spec.n_new) & (counts < spec.n_old))
    if len(old) == 0:
        raise DataError(f"no item has more than n_old={spec.n_old} samples")
    if len(new) == 0:
        raise DataError(f"no item has between n_new={spec.n_new} and n_old={spec.n_old} samples")

    pre, cold = [], []
    for i in old:
        idx = _by_time(log, order[starts[i]:starts[i + 1]])
        cut = len(idx) - spec.holdout
        pre.append(idx[:cut])
        cold.append(idx[cut:])

    k = spec.k_fold
    wa, wb, wc, test = {}, {}, {}, {}
    for i in new.tolist():
        idx = _by_time(log, order[starts[i]:starts[i + 1]])
        wa[i], wb[i], wc[i], test[i] = idx[:k], idx[k:2 * k], idx[2 * k:3 * k], idx[3 * k:]
    return SplitResult(old, new, np.concatenate(pre), np.concatenate(cold), wa, wb, wc, test)


def write_manifest(path, log: InteractionLog, result: SplitResult, spec: SplitSpec) -> dict:
    manifest = result.manifest(log, spec)
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# Synthetic data

@dataclass(frozen=True)
class SyntheticConfig:
    n_users: int = 2000
    n_old: int = 300
    n_new: int = 100
    latent_dim: int = 8
    n_clusters: int = 8
    spread: float = 0.5         # within-cluster latent scatter, relative to centroid scale
    exposure: float = 1.0       # how strongly affinity drives who interacts with an item
    attr_noise: float = 0.3     # chance an attribute reports a random cluster
    old_count: tuple[int, int] = (201, 300)   # inclusive range of samples per old item
    new_count: tuple[int, int] = (81, 199)
    noise: float = 0.1
    item_bias: float = 1.0
    user_bias: float = 0.5

    def __post_init__(self):
        if min(self.n_users, self.n_old, self.latent_dim, self.n_clusters) < 1 or self.n_new < 0:
            raise ValueError("user, old-item, latent and cluster counts must be positive")
        for name in ("old_count", "new_count"):
            if name == "new_count" and self.n_new == 0:
                continue
            lo, hi = getattr(self, name)
            if not (1 <= lo <= hi <= self.n_users):
                raise ValueError(f"{name} {(lo, hi)} must lie in [1, n_users]")
        if not 0.0 <= self.noise <= 0.5:
            raise ValueError("noise must lie in [0, 0.5]")
        if not 0.0 <= self.attr_noise <= 1.0:
            raise ValueError("attr_noise must lie in [0, 1]")


def _noisy_code(truth: np.ndarray, vocab: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    swap = rng.random(len(truth)) < rate
    return np.where(swap, rng.integers(0, vocab, len(truth)), truth).astype(np.int64)


def synthesize(config: SyntheticConfig = SyntheticConfig(), seed: int = 0,
               return_latents: bool = False):
    """Planted-structure CTR log.

    Users and items sit around shared taste centroids. A sample's clean label
    is ``p_u . q_i + b_u + b_i > 0``; it is then flipped with probability
    ``noise``. Who interacts with an item is tilted towards users with high
    affinity, so co-occurrence carries collaborative signal. Attributes are
    quantised latents: the (noisily reported) taste cluster on both sides and
    a coarse bias tier for items, so they explain part of the labels and the
    ID embeddings are needed for the rest.
    """
    rng = np.random.default_rng(seed)
    k, c = config.latent_dim, config.n_clusters
    n_items = config.n_old + config.n_new
    centroids = rng.normal(size=(c, k))
    cu = rng.integers(0, c, config.n_users)
    ci = rng.integers(0, c, n_items)
    p = centroids[cu] + config.spread * rng.normal(size=(config.n_users, k))
    q = centroids[ci] + config.spread * rng.normal(size=(n_items, k))
    p /= np.sqrt(k)
    q /= np.sqrt(k) / 2.0
    bu = rng.normal(scale=config.user_bias, size=config.n_users)
    bi = rng.normal(scale=config.item_bias, size=n_items)

    counts = np.concatenate([
        rng.integers(config.old_count[0], config.old_count[1] + 1, size=config.n_old),
        rng.integers(config.new_count[0], config.new_count[1] + 1, size=config.n_new),
    ])
    counts = counts[rng.permutation(n_items)]   # old/new status is not tied to the id

    users, items = [], []
    for i in range(n_items):
        # Gumbel top-k: weighted sampling without replacement, weights exp(exposure * affinity)
        keys = config.exposure * (p @ q[i]) + rng.gumbel(size=config.n_users)
        us = np.sort(np.argpartition(-keys, counts[i] - 1)[: counts[i]])
        users.append(us)
        items.append(np.full(counts[i], i))
    users = np.concatenate(users)
    items = np.concatenate(items)
    score = (p[users] * q[items]).sum(axis=1) + bu[users] + bi[items]
    clean = (score > 0).astype(np.int64)
    flip = rng.random(len(users)) < config.noise
    labels = np.where(flip, 1 - clean, clean)
    stamps = rng.permutation(len(users)).astype(np.int64) + 1_000_000

    n_tiers = 4
    tier = np.digitize(bi, np.quantile(bi, [0.25, 0.5, 0.75])).astype(np.int64)
    log = InteractionLog(
        users, items, labels, stamps, config.n_users, n_items,
        user_fields=[AttrField("taste", c)],
        item_fields=[AttrField("genre", c), AttrField("tier", n_tiers)],
        user_attrs=[_noisy_code(cu, c, config.attr_noise, rng)],
        item_attrs=[_noisy_code(ci, c, config.attr_noise, rng), tier],
        user_encoder=Encoder(range(config.n_users)),
        item_encoder=Encoder(range(n_items)),
    )
    if return_latents:
        return log, {"p": p, "q": q, "bu": bu, "bi": bi, "cu": cu, "ci": ci,
                     "score": score, "clean": clean}
    return log
