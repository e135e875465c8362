import numpy as np
import pytest

from cometa_lab import cometa
from cometa_lab.diffgraph import finite_difference
from cometa_lab.seg import (EmptyUserSetError, Episode, SegParams, SegTrainConfig, episode_loss,
                            generate_shift, init_seg, mean_user_embedding, refined_attr_repr,
                            refined_user_repr, shift_embedding, train_seg)

from helpers import lively, rel_err, tiny_episode


@pytest.fixture(scope="module")
def world(small_log, small_split, small_model):
    model = lively(small_model)
    ctx = cometa.build_context(model, small_log, small_split, k=4)
    seg = init_seg(model.schema.dim, len(model.schema.item_fields), (8, 8), seed=2, out_scale=1.0)
    return model, ctx, seg


def test_mean_user_embedding_examples():
    table = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
    np.testing.assert_array_equal(mean_user_embedding([2], table), [[2.0, 2.0]])
    np.testing.assert_array_equal(mean_user_embedding([0, 1], table), [[0.5, 0.5]])
    np.testing.assert_array_equal(mean_user_embedding([0, 0, 0], np.tile([[3.0, 1.0]], (1, 1))), [[3.0, 1.0]])
    with pytest.raises(EmptyUserSetError):
        mean_user_embedding([], table)


def test_refinement_examples():
    seg = init_seg(3, 1, (4,), seed=0)
    seg.tensors["W_u"] = np.eye(3)
    seg.tensors["W_f"] = np.eye(3)
    v = np.array([[0.1, -0.2, 0.3]])
    np.testing.assert_array_equal(refined_user_repr(v, seg), v)
    np.testing.assert_array_equal(refined_attr_repr(v, seg), v)
    seg.tensors["W_u"] = np.zeros((3, 3))
    seg.tensors["W_f"] = np.zeros((3, 3))
    assert not refined_user_repr(v, seg).any() and not refined_attr_repr(v, seg).any()


def test_zero_generator_outputs_zero():
    seg = init_seg(4, 2, (8, 8), seed=0)
    zero = SegParams({k: np.zeros_like(v) for k, v in seg.tensors.items()}, 4, 2)
    assert not shift_embedding(np.ones((1, 4)), np.ones((1, 4)), zero).any()


def test_generator_is_deterministic():
    seg = init_seg(4, 2, (8, 8), seed=0, out_scale=1.0)
    r = np.random.default_rng(0)
    m, a = r.normal(size=(1, 4)), r.normal(size=(1, 8))
    assert np.array_equal(generate_shift(m, a, seg), generate_shift(m, a, seg))


@pytest.fixture(scope="module")
def ep(world, small_split):
    return tiny_episode(world[1], small_split, m=2)


def test_beta_one_equals_loss_a(world, ep):
    model, _, seg = world
    res = episode_loss(ep, model, seg, SegTrainConfig(beta=1.0, eta=0.1, m=2))
    assert res.loss == res.loss_a


def test_eta_zero_keeps_shift_bitwise(world, ep):
    model, _, seg = world
    res = episode_loss(ep, model, seg, SegTrainConfig(beta=0.1, eta=0.0, m=2))
    assert np.array_equal(res.v_seg, res.v_seg_adapted)
    # loss_b is then the D_b loss at the unadapted shift
    alt = episode_loss(Episode(ep.item, ep.batch_b, ep.batch_a, ep.v_beg, ep.mean_user, ep.attrs,
                               ep.ids_b, ep.ids_a), model, seg, SegTrainConfig(beta=1.0, eta=0.0, m=2))
    assert res.loss_b == alt.loss_a


def test_combined_loss_arithmetic():
    beta, la, lb = 0.1, 1.0, 0.5
    assert beta * la + (1 - beta) * lb == pytest.approx(0.55, abs=1e-15)


def test_combined_loss_matches_parts(world, ep):
    model, _, seg = world
    res = episode_loss(ep, model, seg, SegTrainConfig(beta=0.1, eta=0.1, m=2))
    assert res.loss == pytest.approx(0.1 * res.loss_a + 0.9 * res.loss_b, abs=1e-15)


@pytest.mark.parametrize("eta", [1e-3, 0.5])
def test_episode_gradients_match_finite_differences(world, ep, eta):
    model, _, seg = world
    cfg = SegTrainConfig(beta=0.1, eta=eta, m=2)
    res = episode_loss(ep, model, seg, cfg)
    for key, value in seg.tensors.items():
        def f(v, key=key):
            trial = seg.copy()
            trial.tensors[key] = v
            return episode_loss(ep, model, trial, cfg, want_grads=False).loss
        assert rel_err(res.grads[key], finite_difference(f, value), floor=1e-7) < 1e-4, key


def test_first_order_flag_differs_from_full(world, ep):
    model, _, seg = world
    full = episode_loss(ep, model, seg, SegTrainConfig(eta=0.5, m=2))
    fo = episode_loss(ep, model, seg, SegTrainConfig(eta=0.5, m=2, first_order=True))
    assert full.loss == fo.loss
    assert not np.allclose(full.grads["W_u"], fo.grads["W_u"], rtol=0, atol=1e-14)


def test_inner_step_does_not_increase_loss_a(world, small_split):
    model, ctx, seg = world
    for s in range(10):
        e = tiny_episode(ctx, small_split, m=4, seed=s)
        res = episode_loss(e, model, seg, SegTrainConfig(eta=1e-2, m=4), want_grads=False)
        again = Episode(e.item, e.batch_a, e.batch_b, e.v_beg + res.v_seg_adapted - res.v_seg,
                        e.mean_user, e.attrs, e.ids_a, e.ids_b)
        after = episode_loss(again, model, seg, SegTrainConfig(eta=0.0, m=4), want_grads=False).loss_a
        assert after <= res.loss_a + 1e-9


def test_overlapping_batches_rejected(ep):
    with pytest.raises(ValueError):
        Episode(ep.item, ep.batch_a, ep.batch_a, ep.v_beg, ep.mean_user, ep.attrs, ep.ids_a, ep.ids_a)


def test_episode_batches_disjoint_and_base_constant(world, small_split):
    model, ctx, seg = world
    e = tiny_episode(ctx, small_split, m=3)
    assert not np.intersect1d(e.ids_a, e.ids_b).size
    before = e.v_beg.copy()
    res = episode_loss(e, model, seg, SegTrainConfig(m=3))
    assert np.array_equal(e.v_beg, before)
    assert set(res.grads) == set(seg.tensors)


def test_train_seg_zero_epochs_returns_init(world, small_split):
    model, ctx, _ = world
    src = cometa.old_item_episodes(ctx, small_split, 4)
    init = init_seg(model.schema.dim, 2, (8, 8), seed=11)
    out, hist = train_seg(src, model, SegTrainConfig(epochs=0, m=4, hidden=(8, 8)), seed=11)
    assert out.digest() == init.digest() and hist.epochs == []


def test_train_seg_lowers_loss_and_leaves_backbone(world, small_split):
    model, ctx, _ = world
    src = cometa.old_item_episodes(ctx, small_split, 4)
    before = model.digest()
    cfg = SegTrainConfig(epochs=6, m=4, lr=1e-2, hidden=(8, 8))
    _, hist = train_seg(src, model, cfg, seed=0)
    assert model.digest() == before
    assert hist.epochs[-1]["loss_seg"] < hist.epochs[0]["loss_seg"]


def test_config_validation():
    with pytest.raises(ValueError):
        SegTrainConfig(beta=1.5)
    with pytest.raises(ValueError):
        SegTrainConfig(eta=-1.0)
