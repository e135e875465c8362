import math

import numpy as np
import pytest

from cometa_lab.dataio import AttrField, SyntheticConfig, synthesize
from cometa_lab.recmodel import (FeatureSchema, ModelParams, SampleBatch, VocabularyError, bce_loss,
                                 embed_batch, init_params, mean_loss, predict, pretrain,
                                 update_item_embeddings_only)


def one_field_schema(dim=16):
    return FeatureSchema(5, 7, (AttrField("age", 3),), (AttrField("genre", 4),), dim)


def test_input_width_one_field_each_side():
    assert one_field_schema(16).input_width == 64


def test_zero_network_predicts_half(small_log, small_model):
    zero = ModelParams(small_model.schema, {k: np.zeros_like(v) for k, v in small_model.tensors.items()})
    p = predict(zero, SampleBatch.from_log(small_log, np.arange(20)))
    np.testing.assert_array_equal(p, np.full((20, 1), 0.5))


def test_zero_tables_embed_to_zero(small_log, small_model):
    zero = ModelParams(small_model.schema, {k: np.zeros_like(v) for k, v in small_model.tensors.items()})
    assert not embed_batch(zero, SampleBatch.from_log(small_log, np.arange(10))).any()


def test_identical_samples_identical_predictions(small_log, small_model):
    p = predict(small_model, SampleBatch.from_log(small_log, np.array([4, 4, 4])))
    assert p[0, 0] == p[1, 0] == p[2, 0]


def test_override_with_stored_row_is_identity(small_log, small_model):
    idx = np.arange(30)
    plain = SampleBatch.from_log(small_log, idx)
    rows = small_model.tensors["item_id"][small_log.items[idx]]
    over = SampleBatch.from_log(small_log, idx, item_override=rows.copy())
    np.testing.assert_array_equal(predict(small_model, plain), predict(small_model, over))


def test_prediction_does_not_depend_on_batch_order(small_log, small_model):
    idx = np.arange(40)
    perm = np.random.default_rng(0).permutation(40)
    a = predict(small_model, SampleBatch.from_log(small_log, idx))
    b = predict(small_model, SampleBatch.from_log(small_log, idx[perm]))
    np.testing.assert_array_equal(a[perm], b)


def test_vocabulary_violation(small_log, small_model):
    batch = SampleBatch.from_log(small_log, np.arange(3))
    batch.users = batch.users.copy()
    batch.users[1] = small_model.schema.n_users
    with pytest.raises(VocabularyError):
        predict(small_model, batch)


def test_bce_examples():
    assert bce_loss([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2), abs=1e-15)
    assert bce_loss([1 - 1e-12], [1]) == pytest.approx(0.0, abs=1e-11)
    # hand evaluation: -(ln .9 + ln .8 + ln .7) / 3
    assert bce_loss([0.9, 0.2, 0.7], [1, 0, 1]) == pytest.approx(0.228393, abs=1e-6)
    assert round(bce_loss([0.9, 0.2, 0.7], [1, 0, 1]), 4) == 0.2284


def test_bce_errors():
    with pytest.raises(ValueError):
        bce_loss([], [])
    with pytest.raises(ValueError):
        bce_loss([0.5, 0.5], [1])


def _separable():
    log = synthesize(SyntheticConfig(n_users=100, n_old=4, n_new=0, old_count=(50, 50), noise=0.0), seed=5)
    return log, np.arange(200)


def test_pretrain_zero_epochs_is_identity():
    log, idx = _separable()
    p0 = init_params(FeatureSchema.from_log(log, 4, (8, 8, 8)), seed=0)
    assert pretrain(p0, log, idx, epochs=0).digest() == p0.digest()


def test_pretrain_one_epoch_lowers_training_loss():
    log, idx = _separable()
    p0 = init_params(FeatureSchema.from_log(log, 4, (8, 8, 8)), seed=0)
    p1 = pretrain(p0, log, idx, epochs=1, lr=1e-2, seed=0, batch_size=16)
    assert mean_loss(p1, log, idx) < mean_loss(p0, log, idx)


def test_pretrain_is_deterministic():
    log, idx = _separable()
    p0 = init_params(FeatureSchema.from_log(log, 4, (8, 8, 8)), seed=0)
    a = pretrain(p0, log, idx, epochs=2, seed=7, batch_size=32)
    b = pretrain(p0, log, idx, epochs=2, seed=7, batch_size=32)
    assert a.digest() == b.digest()


def test_item_only_update_freezes_everything_else(small_log, small_split, small_model):
    new = small_split.new_items.tolist()
    fold = small_split.fold("warm_a")
    out = update_item_embeddings_only(small_model, small_log, fold, new, epochs=1, lr=1e-2, seed=0)
    frozen = [k for k in small_model.tensors if k != "item_id"]
    assert out.digest(frozen) == small_model.digest(frozen)
    before, after = small_model.tensors["item_id"], out.tensors["item_id"]
    np.testing.assert_array_equal(before[small_split.old_items], after[small_split.old_items])
    assert not np.array_equal(before[new], after[new])


def test_item_without_interactions_keeps_its_row(small_log, small_split, small_model):
    new = small_split.new_items.tolist()
    quiet = new[0]
    fold = np.concatenate([small_split.warm_a[i] for i in new[1:]])
    out = update_item_embeddings_only(small_model, small_log, fold, new, epochs=1, lr=1e-2, seed=0)
    np.testing.assert_array_equal(out.tensors["item_id"][quiet], small_model.tensors["item_id"][quiet])


def test_item_only_update_rejects_foreign_samples(small_log, small_split, small_model):
    with pytest.raises(ValueError):
        update_item_embeddings_only(small_model, small_log, small_split.pretrain[:10],
                                    small_split.new_items.tolist())
