import numpy as np
import pytest
from scipy import stats

from moofair.model import (
    FactorModel,
    TripletBatch,
    attach_negatives,
    bpr_grad,
    bpr_loss,
    init_model,
    load_checkpoint,
    sample_negatives,
    save_checkpoint,
    score,
)
from moofair.numerics import SeededRng, sigmoid
from conftest import finite_difference_gradient, max_relative_error


def tiny_model(user_rows, item_rows, reg=0.0):
    return FactorModel(np.asarray(user_rows, dtype=float),
                       np.asarray(item_rows, dtype=float), reg)


class TestFactorModel:
    def test_flatten_round_trip(self):
        rng = np.random.default_rng(0)
        model = init_model(4, 6, 3, 0.1, rng)
        theta = model.flatten()
        other = init_model(4, 6, 3, 0.1, np.random.default_rng(99))
        other.set_flat(theta)
        assert np.array_equal(other.user_embeddings, model.user_embeddings)
        assert np.array_equal(other.item_embeddings, model.item_embeddings)
        assert theta.shape == (model.num_parameters,)

    def test_rejects_dim_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            tiny_model([[1.0, 0.0]], [[1.0, 0.0, 0.0]])

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            tiny_model([[np.nan]], [[1.0]])

    def test_init_statistics(self):
        model = init_model(200, 200, 25, 0.0, SeededRng(5))
        flat = model.flatten()
        assert abs(flat.mean()) < 1e-3
        assert flat.std() == pytest.approx(0.01, rel=0.05)


class TestScore:
    def test_unit_inner_product(self):
        model = tiny_model([[1.0, 0.0]], [[1.0, 0.0]])
        np.testing.assert_array_equal(score(model, 0, [0]), [1.0])

    def test_zero_user(self):
        model = tiny_model([[0.0, 0.0]], [[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(score(model, 0, [0, 1]), [0.0, 0.0])

    def test_known_value(self):
        model = tiny_model([[1.0, 2.0]], [[3.0, 4.0]])
        np.testing.assert_array_equal(score(model, 0, [0]), [11.0])

    def test_out_of_range(self):
        model = tiny_model([[1.0]], [[1.0]])
        with pytest.raises(IndexError):
            score(model, 3, [0])
        with pytest.raises(IndexError):
            score(model, 0, [5])

    def test_bilinear_in_user(self):
        rng = np.random.default_rng(1)
        model = init_model(3, 8, 4, 0.0, rng)
        base = score(model, 1, np.arange(8))
        model.user_embeddings[1] *= 2.5
        np.testing.assert_allclose(score(model, 1, np.arange(8)), 2.5 * base)


def batch(users, pos, neg):
    return TripletBatch(np.asarray(users, dtype=np.int64),
                        np.asarray(pos, dtype=np.int64),
                        np.asarray(neg, dtype=np.int64))


class TestBprLoss:
    def test_zero_margins(self):
        model = tiny_model(np.zeros((3, 2)), np.zeros((4, 2)))
        b = batch([0, 1, 2], [0, 1, 2], [3, 3, 3])
        assert bpr_loss(model, b) == pytest.approx(3 * np.log(2.0))

    def test_saturated_margin_leaves_reg_only(self):
        model = tiny_model([[100.0]], [[1.0], [-1.0]], reg=0.5)
        b = batch([0], [0], [1])
        expected_reg = 0.5 * (100.0**2 + 1.0 + 1.0)
        assert bpr_loss(model, b) == pytest.approx(expected_reg, rel=1e-12)

    def test_single_triple(self):
        model = tiny_model([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]])
        b = batch([0], [0], [1])
        assert bpr_loss(model, b) == pytest.approx(-np.log(sigmoid(1.0)), abs=1e-12)
        assert bpr_loss(model, b) == pytest.approx(0.3132616875182228, abs=1e-12)

    def test_positive_unless_saturated(self):
        rng = np.random.default_rng(2)
        model = init_model(5, 7, 3, 0.0, rng)
        b = batch([0, 1], [2, 3], [4, 5])
        assert bpr_loss(model, b) > 0.0

    def test_touched_regularizer_counts_each_embedding_once(self):
        model = tiny_model(np.ones((2, 1)), np.ones((3, 1)), reg=1.0)
        b = batch([0, 0], [1, 1], [2, 2])  # same embeddings twice
        margins_term = 2 * np.logaddexp(0.0, 0.0)
        reg_term = 1.0 * (1.0 + 1.0 + 1.0)  # user 0, items 1 and 2
        assert bpr_loss(model, b) == pytest.approx(margins_term + reg_term)

    def test_empty_batch_rejected(self):
        model = tiny_model([[1.0]], [[1.0]])
        with pytest.raises(ValueError):
            bpr_loss(model, batch([], [], []))


class TestBprGrad:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        model = init_model(5, 6, 3, 0.01, rng, init_std=0.5)
        b = batch([0, 1, 2, 3, 4, 0], [0, 1, 2, 3, 4, 5],
                  [1, 2, 3, 4, 5, 0])
        result = bpr_grad(model, b)

        def loss_at(theta):
            probe = model.copy()
            probe.set_flat(theta)
            return bpr_loss(probe, b)

        numeric = finite_difference_gradient(loss_at, model.flatten(), step=1e-6)
        assert max_relative_error(result.grad, numeric) <= 1e-5

    def test_saturated_gradient_vanishes(self):
        model = tiny_model([[50.0]], [[1.0], [-1.0]])
        result = bpr_grad(model, batch([0], [0], [1]))
        np.testing.assert_allclose(result.grad, 0.0, atol=1e-12)

    def test_item_block_antisymmetric(self):
        model = tiny_model([[0.3, -0.2]], [[0.5, 0.1], [0.4, 0.2]])
        result = bpr_grad(model, batch([0], [0], [1]))
        item_block = result.grad[2:].reshape(2, 2)
        np.testing.assert_allclose(item_block[0], -item_block[1], atol=1e-15)

    def test_untouched_entries_zero(self):
        rng = np.random.default_rng(4)
        model = init_model(4, 9, 2, 0.1, rng)
        result = bpr_grad(model, batch([1], [2], [3]))
        grad_items = result.grad[4 * 2:].reshape(9, 2)
        touched = {2, 3}
        for item in range(9):
            if item not in touched:
                np.testing.assert_array_equal(grad_items[item], 0.0)

    def test_loss_value_matches_bpr_loss(self):
        rng = np.random.default_rng(5)
        model = init_model(4, 5, 3, 0.2, rng, init_std=0.3)
        b = batch([0, 1], [1, 2], [3, 4])
        assert bpr_grad(model, b).loss == pytest.approx(bpr_loss(model, b), rel=1e-12)


class TestNegativeSampling:
    def test_forced_outcome(self, synthetic_dataset):
        ds = synthetic_dataset
        # craft a user whose train positives cover all items but one
        sets = ds.train_item_sets()
        target_user = 0
        missing = next(i for i in range(ds.num_items) if i not in sets[target_user])
        ds_patched = type(ds)(**{k: v for k, v in ds.__dict__.items()
                                 if not k.startswith("_train")})
        membership = ds_patched.train_membership()
        membership[target_user, :] = True
        membership[target_user, missing] = False
        out = attach_negatives(ds_patched, SeededRng(0),
                               np.array([target_user]), np.array([0]))
        assert out.neg_items[0] == missing

    def test_saturated_user_skipped_with_warning(self, synthetic_dataset, caplog):
        import logging

        ds = synthetic_dataset
        ds_patched = type(ds)(**{k: v for k, v in ds.__dict__.items()
                                 if not k.startswith("_train")})
        membership = ds_patched.train_membership()
        membership[1, :] = True
        with caplog.at_level(logging.WARNING):
            out = attach_negatives(ds_patched, SeededRng(0),
                                   np.array([1, 2]), np.array([0, 0]))
        assert "no unobserved items" in caplog.text
        assert out.size == 1
        assert out.users[0] == 2

    def test_deterministic(self, synthetic_dataset):
        users = np.arange(10)
        a = sample_negatives(synthetic_dataset, SeededRng(3), users)
        b = sample_negatives(synthetic_dataset, SeededRng(3), users)
        assert np.array_equal(a.pos_items, b.pos_items)
        assert np.array_equal(a.neg_items, b.neg_items)

    def test_negatives_not_positives(self, synthetic_dataset):
        out = sample_negatives(synthetic_dataset, SeededRng(4),
                               np.arange(synthetic_dataset.num_users))
        sets = synthetic_dataset.train_item_sets()
        for u, j in zip(out.users, out.neg_items):
            assert int(j) not in sets[u]

    def test_negatives_uniform_over_non_positives(self, synthetic_dataset):
        ds = synthetic_dataset
        user = 0
        positives = ds.train_item_sets()[user]
        complement = sorted(set(range(ds.num_items)) - positives)
        out = attach_negatives(ds, SeededRng(5),
                               np.full(10**5, user), np.zeros(10**5, dtype=np.int64))
        counts = np.bincount(out.neg_items, minlength=ds.num_items)[complement]
        result = stats.chisquare(counts)
        assert result.pvalue > 0.01


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        model = init_model(4, 5, 3, 0.01, SeededRng(6))
        save_checkpoint(model, str(tmp_path / "ckpt"), {"seed": 6, "epoch": 2})
        loaded, meta = load_checkpoint(str(tmp_path / "ckpt"))
        assert np.array_equal(loaded.user_embeddings, model.user_embeddings)
        assert np.array_equal(loaded.item_embeddings, model.item_embeddings)
        assert loaded.reg == model.reg
        assert meta["seed"] == "6"
        assert meta["epoch"] == "2"

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(str(tmp_path / "nope"))
