import numpy as np
import pytest

from jezsl.errors import DataError, NumericalError
from jezsl.heads import (
    EmbeddingHead,
    backward,
    forward,
    init_head,
    load_head,
    save_head,
)
from jezsl.linalg import make_rng


def identity_head(d):
    return EmbeddingHead(
        w1=np.eye(d),
        b1=np.zeros(d),
        w2=np.eye(d),
        b2=np.zeros(d),
        bn_gamma=np.ones(d),
        bn_beta=np.zeros(d),
        bn_running_mean=np.zeros(d),
        bn_running_var=np.ones(d),
        bn_epsilon=0.0,
    )


def reference_forward(head, batch, train):
    """Independent scalar-loop forward used as an oracle."""
    b, d_in = batch.shape
    d_hidden, d_out = head.d_hidden, head.d_out
    hidden = np.zeros((b, d_hidden))
    for n in range(b):
        for i in range(d_hidden):
            acc = head.b1[i]
            for j in range(d_in):
                acc += head.w1[i, j] * batch[n, j]
            hidden[n, i] = acc if acc > 0 else 0.0
    pre_bn = np.zeros((b, d_out))
    for n in range(b):
        for i in range(d_out):
            acc = head.b2[i]
            for j in range(d_hidden):
                acc += head.w2[i, j] * hidden[n, j]
            pre_bn[n, i] = acc
    out = np.zeros((b, d_out))
    for i in range(d_out):
        if train:
            mean = sum(pre_bn[n, i] for n in range(b)) / b
            var = sum((pre_bn[n, i] - mean) ** 2 for n in range(b)) / b
        else:
            mean = head.bn_running_mean[i]
            var = head.bn_running_var[i]
        for n in range(b):
            xhat = (pre_bn[n, i] - mean) / np.sqrt(var + head.bn_epsilon)
            out[n, i] = head.bn_gamma[i] * xhat + head.bn_beta[i]
    for n in range(b):
        norm = np.sqrt(sum(out[n, i] ** 2 for i in range(d_out)))
        out[n] = out[n] / norm
    return out


class TestForward:
    def test_identity_eval_three_four(self):
        head = identity_head(2)
        out, _ = forward(head, np.array([[3.0, 4.0]]), train=False)
        np.testing.assert_allclose(out, [[0.6, 0.8]], atol=1e-12)

    def test_relu_zeroes_negative_input(self):
        head = identity_head(2)
        with pytest.raises(NumericalError):
            forward(head, np.array([[-3.0, -4.0]]), train=False)

    def test_matches_scalar_reference(self):
        rng = make_rng(5)
        head = init_head(6, 5, 4, rng)
        batch = rng.standard_normal((3, 6))
        for train in (True, False):
            out, _ = forward(head.copy(), batch, train=train)
            ref = reference_forward(head, batch, train)
            assert np.max(np.abs(out - ref)) <= 1e-10

    def test_unit_norm_rows_both_modes(self):
        rng = make_rng(11)
        head = init_head(8, 6, 5, rng)
        batch = rng.standard_normal((7, 8))
        for train in (True, False):
            out, _ = forward(head, batch, train=train)
            norms = np.linalg.norm(out, axis=1)
            assert np.all(np.abs(norms - 1.0) <= 1e-9)

    def test_train_mode_requires_batch_of_two(self):
        head = init_head(3, 3, 3, make_rng(0))
        with pytest.raises(ValueError):
            forward(head, np.ones((1, 3)), train=True)

    def test_dimension_mismatch(self):
        head = init_head(3, 3, 3, make_rng(0))
        with pytest.raises(ValueError):
            forward(head, np.ones((2, 4)), train=True)

    def test_eval_mode_pure_and_repeatable(self):
        rng = make_rng(2)
        head = init_head(4, 4, 4, rng)
        before = {k: v.copy() for k, v in vars(head).items() if isinstance(v, np.ndarray)}
        batch = rng.standard_normal((3, 4))
        out1, _ = forward(head, batch, train=False)
        out2, _ = forward(head, batch, train=False)
        np.testing.assert_array_equal(out1, out2)
        for k, v in before.items():
            np.testing.assert_array_equal(getattr(head, k), v)

    def test_running_stats_exact_update(self):
        rng = make_rng(3)
        head = init_head(4, 4, 4, rng)
        old_mean = head.bn_running_mean.copy()
        old_var = head.bn_running_var.copy()
        batch = rng.standard_normal((5, 4))
        _, trace = forward(head, batch, train=True)
        mom = head.bn_momentum
        np.testing.assert_array_equal(
            head.bn_running_mean, (1 - mom) * old_mean + mom * trace.batch_mean
        )
        unbiased = trace.batch_var * 5 / 4
        np.testing.assert_array_equal(
            head.bn_running_var, (1 - mom) * old_var + mom * unbiased
        )

    def test_zero_variance_column_is_not_an_error(self):
        # A constant pre-BN column must be absorbed by bn_epsilon.
        head = identity_head(2)
        head.bn_epsilon = 1e-5
        batch = np.array([[1.0, 1.0], [1.0, 2.0]])
        out, _ = forward(head, batch, train=True)
        assert np.all(np.isfinite(out))


class TestBackward:
    def test_zero_upstream_gives_zero_gradients(self):
        rng = make_rng(4)
        head = init_head(5, 4, 3, rng)
        batch = rng.standard_normal((3, 5))
        _, trace = forward(head, batch, train=True)
        grads, d_input = backward(head, trace, np.zeros((3, 3)))
        for g in grads.as_dict().values():
            assert np.all(g == 0.0)
        assert np.all(d_input == 0.0)

    def test_doubling_upstream_doubles_gradients(self):
        rng = make_rng(6)
        head = init_head(5, 4, 3, rng)
        batch = rng.standard_normal((4, 5))
        _, trace = forward(head, batch, train=True, update_running_stats=False)
        up = rng.standard_normal((4, 3))
        g1, d1 = backward(head, trace, up)
        g2, d2 = backward(head, trace, 2.0 * up)
        for a, b in zip(g1.as_dict().values(), g2.as_dict().values()):
            np.testing.assert_array_equal(2.0 * a, b)
        np.testing.assert_array_equal(2.0 * d1, d2)

    def test_eval_trace_rejected(self):
        rng = make_rng(7)
        head = init_head(3, 3, 3, rng)
        _, trace = forward(head, rng.standard_normal((2, 3)), train=False)
        with pytest.raises(ValueError):
            backward(head, trace, np.zeros((2, 3)))

    def test_shape_mismatch_rejected(self):
        rng = make_rng(8)
        head = init_head(3, 3, 3, rng)
        _, trace = forward(head, rng.standard_normal((2, 3)), train=True)
        with pytest.raises(ValueError):
            backward(head, trace, np.zeros((3, 3)))

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_difference_check(self, seed):
        rng = make_rng(100 + seed)
        d_in = int(rng.integers(2, 9))
        d_hidden = int(rng.integers(2, 9))
        d_out = int(rng.integers(2, 9))
        b = int(rng.integers(2, 5))
        head = init_head(d_in, d_hidden, d_out, rng)
        up = rng.standard_normal((b, d_out))
        # redraw degenerate instances: ReLU pre-activations inside the
        # finite-difference stencil, or zero-norm embedding rows
        while True:
            batch = rng.standard_normal((b, d_in))
            if np.min(np.abs(batch @ head.w1.T + head.b1)) < 1e-4:
                continue
            try:
                _, trace = forward(head, batch, train=True, update_running_stats=False)
            except NumericalError:
                continue
            break
        grads, _ = backward(head, trace, up)

        def loss():
            out, _ = forward(head, batch, train=True, update_running_stats=False)
            return float(np.sum(out * up))

        h = 1e-5
        for name, arr in head.learnable().items():
            analytic = grads.as_dict()[name]
            fd = np.zeros_like(arr)
            flat, fdflat = arr.reshape(-1), fd.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = loss()
                flat[i] = orig - h
                lo = loss()
                flat[i] = orig
                fdflat[i] = (hi - lo) / (2 * h)
            na, nf = np.linalg.norm(analytic), np.linalg.norm(fd)
            if max(na, nf) < 1e-8:
                continue  # both numerically zero; FD returns roundoff noise
            denom = max(na, nf, 1e-6 * (1 + abs(loss())))
            assert np.linalg.norm(analytic - fd) / denom <= 1e-4, name


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = make_rng(9)
        head = init_head(6, 5, 4, rng)
        head.bn_running_mean[:] = rng.standard_normal(4)
        head.bn_running_var[:] = rng.random(4) + 0.5
        path = str(tmp_path / "head.jeh")
        save_head(head, path)
        loaded = load_head(path)
        for k, v in vars(head).items():
            if isinstance(v, np.ndarray):
                np.testing.assert_array_equal(getattr(loaded, k), v)
            else:
                assert getattr(loaded, k) == v

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.jeh"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(DataError):
            load_head(str(path))

    def test_truncation(self, tmp_path):
        rng = make_rng(10)
        head = init_head(3, 3, 3, rng)
        path = str(tmp_path / "head.jeh")
        save_head(head, path)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-8])
        with pytest.raises(DataError):
            load_head(path)
