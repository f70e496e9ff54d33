import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octfpn import autodiff as ad
from octfpn.gradcheck import _PRIMITIVE_CASES, primitive_case


def naive_conv(x, k, padding="same"):
    """Direct sliding-window cross-correlation, (n, h, w, c) x (k, k, c, o)."""
    n, h, w, c = x.shape
    kk = k.shape[0]
    if padding == "same":
        lo = (kk - 1) // 2
        hi = kk - 1 - lo
        x = np.pad(x, ((0, 0), (lo, hi), (lo, hi), (0, 0)))
        oh, ow = h, w
    else:
        oh, ow = h - kk + 1, w - kk + 1
    out = np.zeros((n, oh, ow, k.shape[3]))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                patch = x[b, i:i + kk, j:j + kk, :]
                for o in range(k.shape[3]):
                    out[b, i, j, o] = np.sum(patch * k[:, :, :, o])
    return out


def naive_pool(x):
    n, h, w, c = x.shape
    out = np.zeros((n, h // 2, w // 2, c))
    for i in range(h // 2):
        for j in range(w // 2):
            out[:, i, j, :] = x[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2, :].max(axis=(1, 2))
    return out


def one_op(op_builder, *values):
    tape = ad.Tape()
    ids = [tape.input(f"x{j}", np.shape(v)) for j, v in enumerate(values)]
    out = op_builder(tape, *ids)
    with ad.precision(64):
        return ad.run(tape, {f"x{j}": v for j, v in enumerate(values)}, {}).values[out]


class TestForward:
    def test_identity_node(self):
        assert one_op(lambda t, x: t.identity(x), np.array([1.0, 2.0, 3.0])).tolist() == [1, 2, 3]

    def test_square(self):
        assert float(one_op(lambda t, x: t.multiply(x, x), np.array(3.0))) == 9.0

    @pytest.mark.parametrize("padding", ["same", "valid"])
    @pytest.mark.parametrize("k", [1, 3])
    def test_conv_matches_naive_loop(self, padding, k):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 6, 5, 3))
        w = rng.normal(size=(k, k, 3, 4))
        got = one_op(lambda t, a, b: t.conv2d(a, b, padding), x, w)
        np.testing.assert_allclose(got, naive_conv(x, w, padding), atol=1e-12)

    def test_max_pool_matches_naive(self):
        x = np.random.default_rng(2).normal(size=(2, 6, 4, 3))
        np.testing.assert_array_equal(one_op(lambda t, a: t.max_pool(a), x), naive_pool(x))

    def test_max_pool_rejects_odd_size(self):
        tape = ad.Tape()
        x = tape.input("x", (None, 5, 4, 1))
        with pytest.raises(ad.GraphError):
            tape.max_pool(x)

    def test_upsample_blocks(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        out = one_op(lambda t, a: t.upsample(a), x)[0, :, :, 0]
        assert out.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]

    def test_softmax_rows_sum_to_one_and_stable(self):
        z = np.array([[1000.0, 1000.0, 1000.0], [-5.0, 0.0, 5.0]])
        p = one_op(lambda t, a: t.softmax(a), z)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)
        np.testing.assert_allclose(p[0], 1 / 3)
        assert np.all(p > 0)

    def test_log_clamps_at_floor(self):
        out = one_op(lambda t, a: t.log(a, floor=1e-12), np.array([0.0, 1.0]))
        assert out[0] == pytest.approx(np.log(1e-12))
        assert out[1] == 0.0

    def test_broadcast_add(self):
        a = np.ones((2, 3, 4))
        b = np.arange(4.0)
        np.testing.assert_array_equal(one_op(lambda t, x, y: t.add(x, y), a, b), a + b)

    def test_incompatible_broadcast_raises(self):
        tape = ad.Tape()
        a = tape.input("a", (2, 3))
        b = tape.input("b", (4,))
        with pytest.raises(ad.GraphError):
            tape.add(a, b)

    def test_concat_and_reshape(self):
        a = np.arange(6.0).reshape(2, 3)
        b = np.arange(4.0).reshape(2, 2)
        np.testing.assert_array_equal(one_op(lambda t, x, y: t.concat([x, y]), a, b), np.concatenate([a, b], 1))
        x = np.arange(24.0).reshape(2, 2, 2, 3)
        np.testing.assert_array_equal(one_op(lambda t, v: t.reshape(v, (12,)), x), x.reshape(2, 12))

    def test_unbound_input_named_in_error(self):
        tape = ad.Tape()
        x = tape.input("image", (None, 2))
        tape.relu(x)
        with pytest.raises(ad.GraphError, match="image"):
            ad.run(tape, {}, {})

    def test_wrong_input_shape(self):
        tape = ad.Tape()
        x = tape.input("image", (None, 2))
        tape.relu(x)
        with pytest.raises(ad.GraphError, match="expected shape"):
            ad.run(tape, {"image": np.zeros((3, 4))}, {})

    def test_precision_switch(self):
        tape = ad.Tape()
        x = tape.input("x", (2,))
        y = tape.scale(x, 2.0)
        with ad.precision(32):
            assert ad.run(tape, {"x": np.ones(2)}, {}).values[y].dtype == np.float32
        with ad.precision(64):
            assert ad.run(tape, {"x": np.ones(2)}, {}).values[y].dtype == np.float64


class TestDropout:
    def _tape(self, rate):
        tape = ad.Tape()
        x = tape.input("x", (None, 1000))
        return tape, tape.dropout(x, rate, name="drop")

    def test_inference_is_identity(self):
        tape, d = self._tape(0.5)
        x = np.random.default_rng(0).normal(size=(4, 1000))
        with ad.precision(64):
            np.testing.assert_array_equal(ad.run(tape, {"x": x}, {}).values[d], x)

    def test_training_is_inverted_scaling(self):
        tape, d = self._tape(0.5)
        x = np.ones((4, 1000))
        out = ad.run(tape, {"x": x}, {}, training=True).values[d]
        assert set(np.unique(out)) <= {0.0, 2.0}
        assert abs(out.mean() - 1.0) < 0.1

    def test_same_key_same_mask(self):
        tape, d = self._tape(0.3)
        x = np.ones((2, 1000))
        a = ad.run(tape, {"x": x}, {}, training=True, rng_key=(5, "b", 1)).values[d]
        b = ad.run(tape, {"x": x}, {}, training=True, rng_key=(5, "b", 1)).values[d]
        c = ad.run(tape, {"x": x}, {}, training=True, rng_key=(5, "b", 2)).values[d]
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_rate_validated(self):
        tape = ad.Tape()
        x = tape.input("x", (None, 3))
        with pytest.raises(ValueError):
            tape.dropout(x, 1.0)


class TestReverse:
    def test_square_derivative(self):
        tape = ad.Tape()
        x = tape.parameter("x", ())
        y = tape.multiply(x, x)
        with ad.precision(64):
            g = ad.backward(tape, y, {}, {"x": np.array(3.0)})
        assert float(g["x"]) == 6.0

    def test_softmax_cross_entropy_gradient_is_p_minus_y(self):
        tape = ad.Tape()
        z = tape.parameter("z", (1, 4))
        y = tape.input("y", (None, 4))
        loss = tape.scale(tape.sum(tape.multiply(y, tape.log(tape.softmax(z)))), -1.0)
        logits = np.array([[0.3, -1.2, 2.0, 0.1]])
        onehot = np.array([[0.0, 0.0, 1.0, 0.0]])
        with ad.precision(64):
            g = ad.backward(tape, loss, {"y": onehot}, {"z": logits})["z"]
        e = np.exp(logits - logits.max())
        np.testing.assert_allclose(g, e / e.sum() - onehot, atol=1e-12)
        assert ad.grad_check(tape, loss, {"y": onehot}, {"z": logits}) < 1e-8

    def test_unused_parameter_gets_zero_gradient(self):
        tape = ad.Tape()
        a = tape.parameter("a", (2,))
        tape.parameter("unused", (3,))
        loss = tape.sum(a)
        g = ad.backward(tape, loss, {}, {"a": np.ones(2), "unused": np.ones(3)})
        np.testing.assert_array_equal(g["unused"], np.zeros(3))

    def test_fan_out_accumulates(self):
        tape = ad.Tape()
        x = tape.parameter("x", (3,))
        loss = tape.sum(tape.add(tape.multiply(x, x), x))
        with ad.precision(64):
            g = ad.backward(tape, loss, {}, {"x": np.array([1.0, -2.0, 0.5])})["x"]
        np.testing.assert_allclose(g, 2 * np.array([1.0, -2.0, 0.5]) + 1)

    def test_non_scalar_loss_rejected(self):
        tape = ad.Tape()
        x = tape.parameter("x", (3,))
        with pytest.raises(ad.GraphError):
            ad.backward(tape, tape.relu(x), {}, {"x": np.ones(3)})

    def test_frozen_parameter_has_no_gradient(self):
        tape = ad.Tape()
        a = tape.parameter("a", (2,))
        b = tape.parameter("b", (2,), trainable=False)
        loss = tape.sum(tape.multiply(a, b))
        g = ad.backward(tape, loss, {}, {"a": np.ones(2), "b": np.ones(2)})
        assert set(g) == {"a"}

    def test_max_pool_tie_goes_to_first(self):
        tape = ad.Tape()
        x = tape.parameter("x", (1, 2, 2, 1))
        loss = tape.sum(tape.max_pool(x))
        g = ad.backward(tape, loss, {}, {"x": np.ones((1, 2, 2, 1))})["x"]
        assert g[0, :, :, 0].tolist() == [[1, 0], [0, 0]]


class TestGradCheck:
    @pytest.mark.parametrize("name,shapes,build", _PRIMITIVE_CASES, ids=[c[0] for c in _PRIMITIVE_CASES])
    def test_primitive(self, name, shapes, build):
        with ad.precision(64):
            tape, loss, params = primitive_case(name, shapes, build)
            assert ad.grad_check(tape, loss, {}, params) < 1e-6

    def test_linear_layer_is_exact(self):
        rng = np.random.default_rng(3)
        tape = ad.Tape()
        x = tape.input("x", (None, 5))
        w = tape.parameter("w", (5, 3))
        loss = tape.sum(tape.matmul(x, w))
        assert ad.grad_check(tape, loss, {"x": rng.normal(size=(4, 5))}, {"w": rng.normal(size=(5, 3))}) < 1e-8

    def test_step_validated(self):
        tape = ad.Tape()
        x = tape.parameter("x", ())
        with pytest.raises(ValueError):
            ad.grad_check(tape, tape.multiply(x, x), {}, {"x": np.array(1.0)}, step=0.1)

    def test_detects_a_wrong_gradient(self, monkeypatch):
        broken = dataclasses.replace(ad.PRIMITIVES["relu"], backward=lambda g, xs, out, attrs, ctx: [2 * g])
        monkeypatch.setitem(ad.PRIMITIVES, "relu", broken)
        tape = ad.Tape()
        x = tape.parameter("x", (4,))
        loss = tape.sum(tape.relu(x))
        assert ad.grad_check(tape, loss, {}, {"x": np.array([1.0, 2.0, 3.0, 4.0])}) > 0.1


@settings(max_examples=25, deadline=None)
@given(h=st.integers(2, 6), w=st.integers(2, 6), cin=st.integers(1, 3), cout=st.integers(1, 3),
       k=st.sampled_from([1, 3]), seed=st.integers(0, 10_000))
def test_conv_gradient_property(h, w, cin, cout, k, seed):
    rng = np.random.default_rng(seed)
    tape = ad.Tape()
    x = tape.parameter("x", (1, h, w, cin))
    kern = tape.parameter("k", (k, k, cin, cout))
    proj = tape.parameter("p", (1, h, w, cout), trainable=False)
    loss = tape.sum(tape.multiply(tape.conv2d(x, kern), proj))
    params = {"x": rng.normal(size=(1, h, w, cin)), "k": rng.normal(size=(k, k, cin, cout)),
              "p": rng.normal(size=(1, h, w, cout))}
    # conv is bilinear, so central differences are exact up to rounding; the
    # rounding (~1e-10 absolute) dominates for near-zero gradient entries
    assert ad.grad_check(tape, loss, {}, params) < 1e-5


@settings(max_examples=25, deadline=None)
@given(shape=st.lists(st.integers(1, 4), min_size=1, max_size=3), seed=st.integers(0, 10_000))
def test_broadcast_gradient_sums_over_expanded_axes(shape, seed):
    rng = np.random.default_rng(seed)
    full = (2,) + tuple(shape)
    tape = ad.Tape()
    a = tape.parameter("a", full)
    b = tape.parameter("b", (shape[-1],))
    loss = tape.sum(tape.multiply(tape.add(a, b), tape.add(a, b)))
    va, vb = rng.normal(size=full), rng.normal(size=shape[-1])
    with ad.precision(64):
        g = ad.backward(tape, loss, {}, {"a": va, "b": vb})
    np.testing.assert_allclose(g["b"], (2 * (va + vb)).reshape(-1, shape[-1]).sum(axis=0), atol=1e-10)
