"""AUC / Logloss and the cold -> warm-c evaluation protocol."""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import cometa
from .dataio import InteractionLog, SplitResult
from .recmodel import (FeatureSchema, ModelParams, SampleBatch, bce_loss, init_params, predict,
                       pretrain, update_item_embeddings_only)
from .seg import SegHistory, SegParams, SegTrainConfig

logger = logging.getLogger(__name__)

PHASES = ("cold", "warm-a", "warm-b", "warm-c")


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with half credit for ties."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.size != y.size:
        raise ValueError("scores and labels differ in length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    order = np.argsort(s, kind="mergesort")
    s_sorted = s[order]
    # average ranks over tie groups
    ranks = np.empty(s.size)
    starts = np.flatnonzero(np.r_[True, s_sorted[1:] != s_sorted[:-1]])
    ends = np.r_[starts[1:], s.size]
    for lo, hi in zip(starts, ends):
        ranks[lo:hi] = 0.5 * (lo + hi - 1) + 1.0
    pos_rank_sum = ranks[y[order] == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(scores, labels) -> float:
    return bce_loss(scores, labels)


@dataclass
class ProtocolConfig:
    dim: int = 16
    hidden: tuple[int, ...] = (64, 64, 64)
    lr: float = 1e-3
    batch_size: int = 256
    pretrain_epochs: int = 10
    warm_epochs: int = 1
    warm_lr: float = 1e-3
    k: int = 8
    positive_only: bool = True
    seg: SegTrainConfig = field(default_factory=SegTrainConfig)


@dataclass
class PhaseReport:
    method: str
    seed: int
    metrics: dict[str, dict[str, float]]
    wall_time: float = 0.0

    def __post_init__(self):
        for ph, m in self.metrics.items():
            if not 0.0 <= m["auc"] <= 1.0 or m["logloss"] < 0:
                raise ValueError(f"metric out of range in phase {ph}: {m}")


def evaluate(model: ModelParams, log: InteractionLog, index: np.ndarray) -> dict[str, float]:
    p = predict(model, SampleBatch.from_log(log, index)).ravel()
    y = log.labels[index]
    return {"auc": auc(p, y), "logloss": logloss(p, y)}


def index_hash(index: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(index, dtype=np.int64).tobytes()).hexdigest()[:16]


@dataclass
class SeedArtifacts:
    """What steps 1-2 produce for one seed."""

    model: ModelParams
    generators: dict[str, SegParams]
    histories: dict[str, SegHistory] = field(default_factory=dict)
    pretrain_losses: list[float] = field(default_factory=list)


def pretrain_backbone(log: InteractionLog, split: SplitResult, cfg: ProtocolConfig, seed: int,
                      on_epoch: Callable[[int, float], None] | None = None) -> tuple[ModelParams, list[float]]:
    schema = FeatureSchema.from_log(log, cfg.dim, cfg.hidden)
    losses: list[float] = []

    def hook(epoch, loss):
        losses.append(loss)
        if on_epoch:
            on_epoch(epoch, loss)

    model = pretrain(init_params(schema, seed), log, split.pretrain, cfg.pretrain_epochs,
                     cfg.lr, seed, cfg.batch_size, hook)
    return model, losses


def prepare_seed(log: InteractionLog, split: SplitResult, cfg: ProtocolConfig, seed: int,
                 kinds: Sequence[str], model: ModelParams | None = None,
                 generators: dict[str, SegParams] | None = None) -> SeedArtifacts:
    losses: list[float] = []
    if model is None:
        model, losses = pretrain_backbone(log, split, cfg, seed)
    generators = dict(generators or {})
    histories = {}
    missing = [v for v in cometa.needed_generators(kinds) if v not in generators]
    if missing:
        ctx = cometa.build_context(model, log, split, cfg.k, cfg.positive_only)
        for variant, (seg, hist) in cometa.train_generators(ctx, split, cfg.seg, seed, missing).items():
            generators[variant] = seg
            histories[variant] = hist
    return SeedArtifacts(model, generators, histories, losses)


def run_method(log: InteractionLog, split: SplitResult, cfg: ProtocolConfig, art: SeedArtifacts,
               kind: str, seed: int, phases: Sequence[str] = PHASES) -> PhaseReport:
    """Steps 3-7 for one initializer, starting from a fresh copy of the backbone."""
    t0 = time.perf_counter()
    start = art.model.copy()
    start_digest = start.digest()
    ctx = cometa.build_context(start, log, split, cfg.k, cfg.positive_only)
    new_items = split.new_items.tolist()
    test = split.test_indices
    test_hash = index_hash(test)
    frozen_keys = [k for k in start.tensors if k != "item_id"]
    frozen_digest = start.digest(frozen_keys)
    old_rows = start.tensors["item_id"][split.old_items].copy()

    def check(model: ModelParams) -> None:
        assert model.digest(frozen_keys) == frozen_digest, "non-embedding parameter changed"
        assert np.array_equal(model.tensors["item_id"][split.old_items], old_rows), "old-item row changed"
        assert index_hash(split.test_indices) == test_hash, "test set changed"

    metrics = {}
    kind_seed = seed * 100 + cometa.KINDS.index(kind)
    model = cometa.initialize_cold(ctx, start, new_items, kind, art.generators, seed=kind_seed)
    check(model)
    metrics["cold"] = evaluate(model, log, test)
    if any(p != "cold" for p in phases):
        warm_a = split.fold("warm_a")
        if kind in cometa.REGENERATING:
            model = cometa.regenerate_warm(ctx, model, new_items, warm_a, kind, art.generators)
            check(model)
        for phase, fold in (("warm-a", "warm_a"), ("warm-b", "warm_b"), ("warm-c", "warm_c")):
            model = update_item_embeddings_only(model, log, split.fold(fold), new_items,
                                                cfg.warm_epochs, cfg.warm_lr, kind_seed, cfg.batch_size)
            check(model)
            metrics[phase] = evaluate(model, log, test)
    assert art.model.digest() == start_digest
    metrics = {p: metrics[p] for p in PHASES if p in metrics and p in phases}
    return PhaseReport(kind, seed, metrics, time.perf_counter() - t0)


def run_protocol(log: InteractionLog, split: SplitResult, cfg: ProtocolConfig, kinds: Sequence[str],
                 seeds: Sequence[int], phases: Sequence[str] = PHASES,
                 artifacts: dict[int, SeedArtifacts] | None = None) -> list[PhaseReport]:
    kinds = cometa.check_kinds(kinds)
    reports = []
    for seed in seeds:
        art = (artifacts or {}).get(seed) or prepare_seed(log, split, cfg, seed, kinds)
        for kind in kinds:
            rep = run_method(log, split, cfg, art, kind, seed, phases)
            logger.info("seed %d %-15s %s", seed, kind,
                        " ".join(f"{p}:{m['auc']:.4f}/{m['logloss']:.4f}" for p, m in rep.metrics.items()))
            reports.append(rep)
    return reports


def summarize(reports: Sequence[PhaseReport]) -> dict[str, dict[str, dict[str, float]]]:
    """Mean metric per method and phase, methods in first-seen order."""
    out: dict[str, dict[str, dict[str, list[float]]]] = {}
    for r in reports:
        for ph, m in r.metrics.items():
            cell = out.setdefault(r.method, {}).setdefault(ph, {"auc": [], "logloss": []})
            cell["auc"].append(m["auc"])
            cell["logloss"].append(m["logloss"])
    return {meth: {ph: {k: float(np.mean(v)) for k, v in cell.items()} for ph, cell in phs.items()}
            for meth, phs in out.items()}


def phase_trend_warnings(reports: Sequence[PhaseReport]) -> list[str]:
    """Diagnostic: flag methods whose mean AUC drops between consecutive phases."""
    warn = []
    for method, phs in summarize(reports).items():
        seq = [(p, phs[p]["auc"]) for p in PHASES if p in phs]
        for (p0, a0), (p1, a1) in zip(seq, seq[1:]):
            if a1 < a0:
                warn.append(f"{method}: mean AUC fell from {p0} ({a0:.4f}) to {p1} ({a1:.4f})")
    for w in warn:
        logger.warning(w)
    return warn
