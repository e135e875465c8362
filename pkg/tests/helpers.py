import numpy as np

from cometa_lab import cometa
from cometa_lab.recmodel import ModelParams


def lively(model: ModelParams, seed: int = 0, scale: float = 0.5) -> ModelParams:
    """Same schema, random O(1) weights, so gradients are not vanishingly small."""
    r = np.random.default_rng(seed)
    return ModelParams(model.schema, {k: r.normal(scale=scale, size=v.shape) for k, v in model.tensors.items()})


def tiny_episode(ctx, split, m=2, variant="full", seed=0):
    pools = cometa.coldstart_pools(split, ctx.log, 2 * m)
    item = sorted(pools)[0]
    pick = np.random.default_rng(seed).permutation(pools[item])[: 2 * m]
    return cometa.make_episode(ctx, item, pick[:m], pick[m:], variant)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.abs(a) + np.abs(b))))
