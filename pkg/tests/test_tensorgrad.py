import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pcmnet import tensorgrad as tg
from pcmnet.tensorgrad import Tensor


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _check(loss_fn, params, **kw):
    return tg.check_gradients(loss_fn, params, fd_dtype=np.longdouble, **kw)


class TestMaskedSoftmax:
    def test_uniform_pair(self):
        out = tg.masked_softmax(np.array([1.0, 1.0]), np.array([True, True]))
        np.testing.assert_array_equal(out.data, [0.5, 0.5])

    def test_masked_entry_exactly_zero(self):
        out = tg.masked_softmax(np.array([5.0, -2.0, 7.0]), np.array([True, False, True])).data
        assert out[1] == 0.0
        assert out[0] + out[2] == pytest.approx(1.0, abs=1e-15)

    def test_all_masked_row_rejected(self):
        with pytest.raises(ValueError):
            tg.masked_softmax(np.zeros((2, 3)), np.array([[True, False, False], [False] * 3]))

    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                      elements=st.floats(-30, 30)),
           st.data())
    def test_distribution_over_support(self, x, data):
        mask = data.draw(hnp.arrays(bool, x.shape))
        mask[:, 0] = True
        out = tg.masked_softmax(x, mask).data
        assert np.all(out >= 0)
        assert np.all(out[~mask] == 0.0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


class TestMatmul:
    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4))
        ref = np.zeros((2, 4))
        for i in range(2):
            for j in range(4):
                for k in range(3):
                    ref[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(tg.matmul(a, b).data, ref, atol=1e-12, rtol=0)

    def test_inner_dim_mismatch(self):
        with pytest.raises(ValueError):
            tg.matmul(np.ones((2, 3)), np.ones((4, 2)))

    @pytest.mark.parametrize("sa,sb", [((5, 3), (3, 4)), ((2, 5, 3), (3, 4)), ((2, 5, 3), (2, 3, 4)),
                                       ((2, 2, 5, 3), (2, 2, 3, 4))])
    def test_extended_precision_matches(self, sa, sb):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=sa), rng.normal(size=sb)
        out = tg.matmul(a.astype(np.longdouble), b.astype(np.longdouble)).data
        assert out.dtype == np.longdouble
        np.testing.assert_allclose(out.astype(np.float64), np.matmul(a, b), atol=1e-13, rtol=0)


class TestBackward:
    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        grads = tg.backward(tg.tsum(x * x), {"x": x})
        assert grads["x"][0] == 6.0

    def test_unused_parameter_has_zero_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        grads = tg.backward(tg.tsum(x * x), {"x": x, "w": w})
        assert np.all(grads["w"] == 0.0)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            tg.backward(x * x)

    def test_cycle_detected(self):
        a = Tensor([1.0], requires_grad=True)
        b = a * a
        c = tg.tsum(b * b)
        a._parents = (c,)
        with pytest.raises(ValueError):
            tg.topological_order(c)

    def test_shared_node_visited_once(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        loss = tg.tsum(y + y)
        order = tg.topological_order(loss)
        assert len(order) == len({id(n) for n in order})
        assert tg.backward(loss, {"x": x})["x"][0] == 8.0

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        w = _param(rng, 4, 3)
        x = rng.normal(size=(5, 4))

        def run():
            tg.zero_grad([w])
            return tg.backward(tg.tsum(tg.sigmoid(tg.matmul(x, w))), {"w": w})["w"]

        np.testing.assert_array_equal(run(), run())

    def test_no_grad_records_nothing(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with tg.no_grad():
            out = w * w
        assert not out.requires_grad


class TestFiniteness:
    def test_overflow_raises(self):
        with pytest.raises(FloatingPointError):
            tg.exp(np.array([1000.0]))

    def test_log_clamped(self):
        assert np.isfinite(tg.log(np.array([0.0])).data).all()


class TestPrimitiveGradients:
    """Each adjoint against central differences on 10 seeds."""

    SEEDS = range(10)

    def _run(self, build):
        for seed in self.SEEDS:
            rng = np.random.default_rng(seed)
            loss_fn, params = build(rng)
            assert _check(loss_fn, params) < 1e-5, seed

    def test_add_mul_broadcast(self):
        def build(rng):
            a, b = _param(rng, 3, 4), _param(rng, 4)
            return lambda: tg.tsum(tg.mul(tg.add(a, b), a)), {"a": a, "b": b}
        self._run(build)

    def test_matmul_batched(self):
        def build(rng):
            a, b = _param(rng, 2, 3, 4), _param(rng, 4, 5)
            return lambda: tg.tsum(tg.sigmoid(tg.matmul(a, b))), {"a": a, "b": b}
        self._run(build)

    def test_matmul_both_batched(self):
        def build(rng):
            a, b = _param(rng, 2, 3, 4), _param(rng, 2, 4, 3)
            return lambda: tg.tsum(tg.sigmoid(tg.matmul(a, b))), {"a": a, "b": b}
        self._run(build)

    @pytest.mark.parametrize("k", [1, 3])
    def test_conv1d(self, k):
        def build(rng):
            x, w, b = _param(rng, 6, 3), _param(rng, k, 3, 2), _param(rng, 2)
            return lambda: tg.tsum(tg.sigmoid(tg.conv1d(x, w, b))), {"x": x, "w": w, "b": b}
        self._run(build)

    def test_concat_reshape_transpose(self):
        def build(rng):
            a, b = _param(rng, 3, 2), _param(rng, 3, 4)
            fn = lambda: tg.tsum(tg.sigmoid(tg.reshape(
                tg.transpose(tg.concat([a, b], axis=-1), (1, 0)), (2, 9))) * np.arange(18.0).reshape(2, 9))
            return fn, {"a": a, "b": b}
        self._run(build)

    def test_relu_away_from_kink(self):
        def build(rng):
            x = Tensor(rng.uniform(0.1, 1.0, 8) * rng.choice([-1, 1], 8), requires_grad=True)
            return lambda: tg.tsum(tg.relu(x) * np.arange(8.0)), {"x": x}
        self._run(build)

    def test_exp_log_neg(self):
        def build(rng):
            x = Tensor(rng.uniform(0.2, 2.0, 5), requires_grad=True)
            return lambda: tg.tsum(tg.log(x) + tg.neg(tg.exp(x * 0.3))), {"x": x}
        self._run(build)

    def test_masked_softmax(self):
        def build(rng):
            x = _param(rng, 4, 5)
            mask = rng.random((4, 5)) < 0.6
            mask[:, 2] = True
            wts = rng.normal(size=(4, 5))
            return lambda: tg.tsum(tg.masked_softmax(x, mask) * wts), {"x": x}
        self._run(build)

    def test_mean_sum_axes(self):
        def build(rng):
            x = _param(rng, 3, 4)
            return lambda: tg.tsum(tg.sigmoid(tg.mean(x, axis=0))) + tg.mean(tg.tsum(x * x, axis=1)), {"x": x}
        self._run(build)

    def test_interp_gather(self):
        def build(rng):
            x = _param(rng, 5, 2)
            pos = rng.uniform(0, 4, size=(3, 4))
            return lambda: tg.tsum(tg.sigmoid(tg.interp_gather(x, pos))), {"x": x}
        self._run(build)

    def test_three_layer_graph(self):
        def build(rng):
            w1, w2, w3 = _param(rng, 4, 6), _param(rng, 6, 5), _param(rng, 5, 1)
            x = rng.normal(size=(7, 4))
            fn = lambda: tg.mean(tg.sigmoid(tg.matmul(tg.sigmoid(tg.matmul(tg.sigmoid(tg.matmul(x, w1)), w2)), w3)))
            return fn, {"w1": w1, "w2": w2, "w3": w3}
        self._run(build)


class TestCheckGradients:
    def test_quadratic_is_exact(self):
        rng = np.random.default_rng(0)
        x = _param(rng, 5)
        A = rng.normal(size=(5, 5))
        err = tg.check_gradients(lambda: tg.tsum(x * tg.matmul(tg.reshape(x, (1, 5)), A)), {"x": x})
        assert err < 1e-9

    def test_float64_default_step(self):
        rng = np.random.default_rng(3)
        w = _param(rng, 3, 3)
        assert tg.check_gradients(lambda: tg.tsum(tg.sigmoid(tg.matmul(w, w))), {"w": w}) < 1e-5

    def test_detects_wrong_adjoint(self):
        x = Tensor(np.array([0.3, -0.7]), requires_grad=True)

        def bad_square():
            out = tg._make(x.data ** 2, (x,), lambda g: (g * x.data,), "bad")
            return tg.tsum(out)

        assert tg.check_gradients(bad_square, {"x": x}) > 0.1

    def test_parameters_restored(self):
        rng = np.random.default_rng(0)
        w = _param(rng, 2, 2)
        before = w.data.copy()
        tg.check_gradients(lambda: tg.tsum(w * w), {"w": w}, fd_dtype=np.longdouble, order=4)
        np.testing.assert_array_equal(w.data, before)
        assert w.data.dtype == np.float64

    def test_rejects_bad_arguments(self):
        w = Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            tg.check_gradients(lambda: tg.tsum(w), {"w": w}, step=0)
        with pytest.raises(ValueError):
            tg.check_gradients(lambda: tg.tsum(w), {"w": w}, order=3)

    def test_non_finite_perturbed_loss(self):
        w = Tensor([0.0], requires_grad=True)

        def loss():
            if w.data[0] > 0:
                return Tensor(np.array(np.inf))
            return tg.tsum(w * w)

        with pytest.raises(FloatingPointError):
            tg.check_gradients(loss, {"w": w})


class TestAdam:
    def test_first_step_is_lr_sign(self):
        w = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        opt = tg.Adam({"w": w}, lr=0.1)
        opt.step({"w": np.array([2.0, -3.0])})
        np.testing.assert_allclose(w.data, [0.9, -0.9], atol=1e-7)

    def test_decoupled_weight_decay(self):
        w = Tensor(np.array([2.0]), requires_grad=True)
        opt = tg.Adam({"w": w}, lr=0.1, weight_decay=0.5)
        opt.step({"w": np.array([0.0])})
        assert w.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_minimises_quadratic(self):
        w = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        opt = tg.Adam({"w": w}, lr=0.05)
        for _ in range(400):
            tg.zero_grad([w])
            opt.step(tg.backward(tg.tsum(w * w), {"w": w}))
        assert np.abs(w.data).max() < 1e-2


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        params = {"a.w": Tensor(rng.normal(size=(3, 4)).astype(np.float32)),
                  "b": Tensor(rng.normal(size=(5,)).astype(np.float32)),
                  "conv": Tensor(rng.normal(size=(3, 2, 2)).astype(np.float32))}
        path = tmp_path / "m.pcmw"
        tg.save_checkpoint(path, params)
        back = tg.load_checkpoint(path)
        assert list(back) == list(params)
        for k, p in params.items():
            assert back[k].tobytes() == p.data.tobytes()

    def test_layout(self, tmp_path):
        path = tmp_path / "m.pcmw"
        tg.save_checkpoint(path, {"w": Tensor(np.array([[1.5, -2.0]], np.float32))})
        raw = path.read_bytes()
        expected = (b"PCMW" + (1).to_bytes(4, "little") + (1).to_bytes(2, "little") + b"w"
                    + bytes([2]) + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                    + np.array([1.5, -2.0], "<f4").tobytes())
        assert raw == expected

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"XXXX")
        with pytest.raises(ValueError):
            tg.load_checkpoint(path)

    def test_rejects_trailing_bytes(self, tmp_path):
        path = tmp_path / "m.pcmw"
        tg.save_checkpoint(path, {"w": Tensor(np.ones(2, np.float32))})
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(ValueError):
            tg.load_checkpoint(path)
