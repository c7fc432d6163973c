import numpy as np
import pytest

from jezsl.compat import (
    AttributeTable,
    CompatibilityModel,
    LabeledEmbeddings,
    infer,
    infer_batch,
    load_model,
    ranking_loss,
    ranking_loss_grad,
    save_model,
    train_compatibility,
)
from jezsl.errors import DataError
from jezsl.linalg import make_rng


def simple_table(n_seen=3, n_unseen=2, d_attr=4, seed=0):
    rng = make_rng(seed)
    C = n_seen + n_unseen
    return AttributeTable(
        class_ids=list(range(C)),
        attributes=rng.standard_normal((C, d_attr)),
        seen_ids=set(range(n_seen)),
        unseen_ids=set(range(n_seen, C)),
    )


def brute_force_ranking_loss(w, data, table, margin):
    """Scalar loop oracle over samples and wrong seen classes."""
    total = 0.0
    seen = sorted(table.seen_ids)
    for x, y in zip(data.embeddings, data.labels):
        s_true = float(x @ w @ table.attribute(int(y)))
        for c in seen:
            if c == int(y):
                continue
            s = float(x @ w @ table.attribute(c))
            total += max(0.0, margin + s - s_true)
    return total


class TestAttributeTable:
    def test_overlapping_split_rejected(self):
        rng = make_rng(0)
        with pytest.raises(DataError):
            AttributeTable([0, 1], rng.standard_normal((2, 3)), {0, 1}, {1})

    def test_missing_attribute_row_rejected(self):
        rng = make_rng(0)
        with pytest.raises(DataError):
            AttributeTable([0, 1], rng.standard_normal((2, 3)), {0}, {1, 2})

    def test_duplicate_ids_rejected(self):
        rng = make_rng(0)
        with pytest.raises(ValueError):
            AttributeTable([0, 0], rng.standard_normal((2, 3)), {0}, set())

    def test_lookup(self):
        table = simple_table()
        np.testing.assert_array_equal(table.attribute(2), table.attributes[2])
        np.testing.assert_array_equal(
            table.rows_for([1, 0]), table.attributes[[1, 0]]
        )


class TestRankingLoss:
    def test_matches_brute_force(self):
        rng = make_rng(3)
        for _ in range(20):
            table = simple_table(
                n_seen=int(rng.integers(2, 5)), d_attr=3, seed=int(rng.integers(1000))
            )
            n = int(rng.integers(2, 8))
            data = LabeledEmbeddings(
                rng.standard_normal((n, 5)),
                rng.integers(0, len(table.seen_ids), size=n),
            )
            w = rng.standard_normal((5, 3))
            margin = float(rng.uniform(0.05, 0.5))
            got = ranking_loss(w, data, table, margin)
            ref = brute_force_ranking_loss(w, data, table, margin)
            assert abs(got - ref) <= 1e-9

    def test_zero_weights_loss_value(self):
        # With W = 0 every score is 0, so each wrong class contributes margin.
        table = simple_table(n_seen=3)
        data = LabeledEmbeddings(np.ones((4, 5)), np.array([0, 1, 2, 0]))
        w = np.zeros((5, table.d_attr))
        assert ranking_loss(w, data, table, 0.2) == pytest.approx(4 * 2 * 0.2)

    def test_gradient_finite_difference(self):
        rng = make_rng(9)
        table = simple_table(n_seen=4, d_attr=3, seed=5)
        data = LabeledEmbeddings(
            rng.standard_normal((6, 4)), rng.integers(0, 4, size=6)
        )
        w = rng.standard_normal((4, 3))
        margin = 0.37  # away from hinge boundaries for this draw
        analytic = ranking_loss_grad(w, data, table, margin)
        fd = np.zeros_like(w)
        h = 1e-6
        flat, fdflat = w.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = ranking_loss(w, data, table, margin)
            flat[i] = orig - h
            lo = ranking_loss(w, data, table, margin)
            flat[i] = orig
            fdflat[i] = (hi - lo) / (2 * h)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(fd), 1e-8)
        assert np.linalg.norm(analytic - fd) / denom <= 1e-4


class TestTraining:
    def test_separable_data_fits_seen_classes(self):
        # one orthogonal direction per class in both spaces
        rng = make_rng(4)
        n_seen, d = 4, 8
        table = AttributeTable(
            class_ids=list(range(5)),
            attributes=np.eye(5, 4),
            seen_ids=set(range(4)),
            unseen_ids={4},
        )
        labels = np.repeat(np.arange(n_seen), 10)
        emb = np.eye(n_seen, d)[labels] + 0.05 * rng.standard_normal((40, d))
        data = LabeledEmbeddings(emb, labels)
        model = train_compatibility(data, table, epochs=50, seed=0)
        preds = infer_batch(model, emb, table, "gzsl")
        assert np.mean(preds == labels) == 1.0

    def test_single_seen_class_leaves_w_zero(self):
        table = AttributeTable(
            class_ids=[0, 1],
            attributes=np.eye(2),
            seen_ids={0},
            unseen_ids={1},
        )
        data = LabeledEmbeddings(np.ones((3, 4)), np.zeros(3, int))
        model = train_compatibility(data, table, epochs=10)
        assert np.all(model.w == 0.0)

    def test_deterministic(self):
        rng = make_rng(6)
        table = simple_table(seed=6)
        data = LabeledEmbeddings(
            rng.standard_normal((12, 5)), rng.integers(0, 3, size=12)
        )
        m1 = train_compatibility(data, table, epochs=20, seed=3)
        m2 = train_compatibility(data, table, epochs=20, seed=3)
        np.testing.assert_array_equal(m1.w, m2.w)

    def test_labels_outside_seen_rejected(self):
        table = simple_table()
        data = LabeledEmbeddings(np.ones((2, 5)), np.array([0, 4]))
        with pytest.raises(ValueError):
            train_compatibility(data, table)

    def test_empty_data_rejected(self):
        table = simple_table()
        with pytest.raises(ValueError):
            train_compatibility(
                LabeledEmbeddings(np.zeros((0, 5)), np.zeros(0, int)), table
            )


class TestInference:
    def test_zsl_never_returns_seen_class(self):
        rng = make_rng(7)
        table = simple_table(n_seen=3, n_unseen=2, seed=7)
        model = CompatibilityModel(w=rng.standard_normal((5, table.d_attr)))
        preds = infer_batch(model, rng.standard_normal((30, 5)), table, "zsl")
        assert set(int(p) for p in preds) <= table.unseen_ids

    def test_gzsl_covers_all_classes(self):
        table = simple_table()
        model = CompatibilityModel(w=np.zeros((5, table.d_attr)))
        p = infer(model, np.ones(5), table, "gzsl")
        assert p in table.seen_ids | table.unseen_ids

    def test_tie_breaks_to_lowest_class_id(self):
        # W = 0 scores every class identically
        table = simple_table(n_seen=3, n_unseen=2)
        model = CompatibilityModel(w=np.zeros((5, table.d_attr)))
        assert infer(model, np.ones(5), table, "gzsl") == 0
        assert infer(model, np.ones(5), table, "zsl") == 3

    def test_score_scale_invariant_prediction(self):
        rng = make_rng(8)
        table = simple_table(seed=8)
        w = rng.standard_normal((5, table.d_attr))
        x = rng.standard_normal((10, 5))
        p1 = infer_batch(CompatibilityModel(w=w), x, table, "gzsl")
        p2 = infer_batch(CompatibilityModel(w=3.0 * w), x, table, "gzsl")
        np.testing.assert_array_equal(p1, p2)

    def test_unknown_regime(self):
        table = simple_table()
        model = CompatibilityModel(w=np.zeros((5, table.d_attr)))
        with pytest.raises(ValueError):
            infer(model, np.ones(5), table, "both")

    def test_width_mismatch(self):
        table = simple_table()
        model = CompatibilityModel(w=np.zeros((5, table.d_attr)))
        with pytest.raises(ValueError):
            infer(model, np.ones(6), table, "zsl")


class TestModelIo:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = make_rng(10)
        model = CompatibilityModel(w=rng.standard_normal((6, 4)))
        path = str(tmp_path / "m.jec")
        save_model(model, path)
        loaded = load_model(path)
        np.testing.assert_array_equal(loaded.w, model.w)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.jec"
        path.write_bytes(b"ZZZZ" + b"\x00" * 20)
        with pytest.raises(DataError):
            load_model(str(path))

    def test_truncation_reports_byte_counts(self, tmp_path):
        model = CompatibilityModel(w=np.ones((3, 3)))
        path = tmp_path / "m.jec"
        save_model(model, str(path))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(DataError, match="bytes"):
            load_model(str(path))
