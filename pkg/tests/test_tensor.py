import numpy as np
import numpy.testing as npt
import pytest

from lcmkit import tensor as T
from lcmkit._kernels import conv_numba, conv_numpy

import oracles


def _pb(arr, name="p", bound=None):
    return T.ParamBlock(name, np.asarray(arr, dtype=T.default_dtype()), bound=bound)


def _tm(arr):
    return T.TensorMap(np.asarray(arr, dtype=T.default_dtype()))


class TestTensorMap:
    def test_order_limit(self):
        with pytest.raises(T.ShapeError):
            T.TensorMap(np.zeros((1, 1, 1, 1, 1)))

    def test_empty_extent_rejected(self):
        with pytest.raises(T.ShapeError):
            T.TensorMap(np.zeros((2, 0, 3)))

    def test_scalar_ok(self):
        t = T.TensorMap(np.float32(3.0))
        assert t.item() == 3.0


class TestParamBlock:
    def test_grad_matches_value_shape(self):
        p = _pb(np.ones((2, 3)))
        assert p.grad.shape == p.value.shape

    def test_project_clamps_into_box(self):
        p = _pb([0.5, -0.5, 0.005], bound=0.01)
        p.project()
        assert np.abs(p.value.data).max() <= 0.01
        npt.assert_allclose(p.value.data, [0.01, -0.01, 0.005])


class TestConv2d:
    def test_sum_kernel(self):
        x = _tm([[[[1, 2], [3, 4]]]])
        w = _pb(np.ones((1, 1, 2, 2)))
        out = T.conv2d(x, w)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == pytest.approx(10.0)

    def test_identity_kernel(self, rng):
        x = _tm(rng.standard_normal((2, 1, 4, 5)))
        w = _pb(np.ones((1, 1, 1, 1)))
        b = _pb(np.zeros(1))
        out = T.conv2d(x, w, b)
        npt.assert_allclose(out.data, x.data)

    def test_matches_loop_oracle(self, f64, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = T.conv2d(_tm(x), _pb(w), _pb(b))
        npt.assert_allclose(out.data, oracles.conv2d_loops(x, w, b), rtol=1e-10)

    def test_strided_padded_matches_oracle(self, f64, rng):
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        out = T.conv2d(_tm(x), _pb(w), stride=2, padding=1)
        npt.assert_allclose(out.data, oracles.conv2d_loops(x, w, None, 2, 1), rtol=1e-10)

    def test_channel_mismatch(self, rng):
        with pytest.raises(T.ShapeError, match="channels"):
            T.conv2d(_tm(rng.standard_normal((1, 2, 4, 4))),
                     _pb(rng.standard_normal((1, 3, 3, 3))))

    def test_empty_output_geometry(self, rng):
        with pytest.raises(T.GeometryError):
            T.conv2d(_tm(rng.standard_normal((1, 1, 2, 2))),
                     _pb(rng.standard_normal((1, 1, 5, 5))))

    def test_backends_agree(self, f64, rng):
        for _ in range(10):
            stride = int(rng.integers(1, 3))
            padding = int(rng.integers(0, 2))
            k = int(rng.integers(1, 4))
            h = int(rng.integers(k, 8))
            x = rng.standard_normal((2, 2, h, h))
            w = rng.standard_normal((3, 2, k, k))
            a = conv_numpy.conv2d_forward(x, w, stride, padding)
            b = conv_numba.conv2d_forward(x, w, stride, padding)
            npt.assert_allclose(a, b, rtol=1e-12)
            g = rng.standard_normal(a.shape)
            npt.assert_allclose(
                conv_numpy.conv2d_backward_dx(g, w, stride, padding, h, h),
                conv_numba.conv2d_backward_dx(g, w, stride, padding, h, h), rtol=1e-12)
            npt.assert_allclose(
                conv_numpy.conv2d_backward_dw(x, g, stride, padding, k, k),
                conv_numba.conv2d_backward_dw(x, g, stride, padding, k, k), rtol=1e-12)


class TestUpsample:
    def test_constant_replication(self):
        out = T.upsample_conv(_tm([[[[3.5]]]]), _pb(np.ones((1, 1, 1, 1))),
                              _pb(np.zeros(1)), scale=2)
        npt.assert_allclose(out.data, np.full((1, 1, 2, 2), 3.5))

    def test_block_duplication(self):
        x = _tm([[[[1, 2], [3, 4]]]])
        out = T.nearest_upsample(x, 2)
        expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        npt.assert_allclose(out.data[0, 0], expected)

    def test_matches_loop_oracle(self, f64, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        w = rng.standard_normal((2, 2, 3, 3))
        b = rng.standard_normal(2)
        out = T.upsample_conv(_tm(x), _pb(w), _pb(b), scale=2)
        npt.assert_allclose(out.data, oracles.upsample_conv_loops(x, w, b, 2),
                            rtol=1e-10)

    def test_scale_below_two_rejected(self, rng):
        with pytest.raises(T.ContractError):
            T.upsample_conv(_tm(rng.standard_normal((1, 1, 2, 2))),
                            _pb(rng.standard_normal((1, 1, 3, 3))), None, scale=1)


class TestLeakyRelu:
    def test_basic_values(self):
        out = T.leaky_relu(_tm([[-1.0, 0.0, 2.0]]), 0.2)
        npt.assert_allclose(out.data, [[-0.2, 0.0, 2.0]])

    def test_slope_zero_is_rectifier(self):
        out = T.leaky_relu(_tm([[-5.0, 3.0]]), 0.0)
        npt.assert_allclose(out.data, [[0.0, 3.0]])

    def test_piecewise_gradient(self):
        x = _pb([[-1.0, 2.0]])
        tape = T.Tape()
        out = T.leaky_relu(T.as_tensor(x, tape=tape), 0.2, tape=tape)
        T.backward(tape, T.sum_all(out, tape=tape))
        npt.assert_allclose(x.grad.data, [[0.2, 1.0]])

    def test_rectifier_idempotent(self, rng):
        x = _tm(rng.standard_normal((1, 2, 4, 4)))
        once = T.leaky_relu(x, 0.0)
        twice = T.leaky_relu(once, 0.0)
        npt.assert_array_equal(once.data, twice.data)

    def test_bad_slope(self):
        with pytest.raises(T.ContractError):
            T.leaky_relu(_tm([1.0]), 1.0)


class TestChannelNorm:
    def test_train_normalizes_batch(self, rng):
        x = _tm(rng.standard_normal((4, 2, 5, 5)) * 2 + 5)
        gain, shift = _pb(np.ones(2)), _pb(np.zeros(2))
        out = T.channel_norm(x, gain, shift, T.NormStats.create(2), mode="train")
        npt.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-5)
        npt.assert_allclose(out.data.var(axis=(0, 2, 3)), 1, atol=1e-3)

    def test_eval_identity_under_unit_stats(self, rng):
        x = _tm(rng.standard_normal((2, 3, 4, 4)))
        out = T.channel_norm(x, _pb(np.ones(3)), _pb(np.zeros(3)),
                             T.NormStats.create(3), mode="eval")
        npt.assert_allclose(out.data, x.data, atol=1e-4)

    def test_running_stats_update(self, rng):
        x = _tm(rng.standard_normal((8, 1, 6, 6)) + 10)
        stats = T.NormStats.create(1)
        T.channel_norm(x, _pb(np.ones(1)), _pb(np.zeros(1)), stats, mode="train")
        npt.assert_allclose(stats.mean, 0.9 * 0 + 0.1 * x.data.mean(), rtol=1e-5)

    def test_channel_mismatch(self, rng):
        with pytest.raises(T.ShapeError):
            T.channel_norm(_tm(rng.standard_normal((1, 2, 3, 3))),
                           _pb(np.ones(3)), _pb(np.zeros(3)), T.NormStats.create(3))


class TestBackward:
    def test_quadratic(self):
        w = _pb([1.0, 2.0])
        tape = T.Tape()
        loss = T.sum_all(T.square(T.as_tensor(w, tape=tape), tape=tape), tape=tape)
        T.backward(tape, loss)
        npt.assert_allclose(w.grad.data, [2.0, 4.0])

    def test_unused_param_gets_zero_grad(self, rng):
        used = _pb([3.0])
        unused = _pb([5.0])
        tape = T.Tape()
        loss = T.sum_all(T.square(T.as_tensor(used, tape=tape), tape=tape), tape=tape)
        T.as_tensor(unused, tape=tape)
        T.backward(tape, loss)
        npt.assert_array_equal(unused.grad.data, [0.0])

    def test_non_scalar_loss_rejected(self, rng):
        x = _pb(rng.standard_normal((2, 2)))
        tape = T.Tape()
        out = T.square(T.as_tensor(x, tape=tape), tape=tape)
        with pytest.raises(T.ContractError):
            T.backward(tape, out)

    def test_fanout_accumulates(self):
        w = _pb([2.0])
        tape = T.Tape()
        wt = T.as_tensor(w, tape=tape)
        # w*w + w*w uses wt twice on two paths
        loss = T.sum_all(T.add(T.square(wt, tape=tape), T.square(wt, tape=tape),
                               tape=tape), tape=tape)
        T.backward(tape, loss)
        npt.assert_allclose(w.grad.data, [8.0])

    def test_frozen_param_skipped(self, rng):
        w = _pb(rng.standard_normal((1, 1, 2, 2)))
        w.frozen = True
        x = _tm(rng.standard_normal((1, 1, 4, 4)))
        tape = T.Tape()
        out = T.conv2d(x, w, tape=tape)
        T.backward(tape, T.mean_all(out, tape=tape))
        npt.assert_array_equal(w.grad.data, np.zeros((1, 1, 2, 2)))

    def test_replay_deterministic(self, rng):
        def run():
            r = np.random.default_rng(7)
            x = _tm(r.standard_normal((2, 2, 6, 6)))
            w = _pb(r.standard_normal((3, 2, 3, 3)))
            b = _pb(r.standard_normal(3))
            tape = T.Tape()
            out = T.leaky_relu(T.conv2d(x, w, b, padding=1, tape=tape), 0.2, tape=tape)
            loss = T.mean_all(T.square(out, tape=tape), tape=tape)
            T.backward(tape, loss)
            return loss.item(), w.grad.data.copy(), b.grad.data.copy()

        l1, gw1, gb1 = run()
        l2, gw2, gb2 = run()
        assert l1 == l2
        npt.assert_array_equal(gw1, gw2)
        npt.assert_array_equal(gb1, gb2)


class TestStructureOps:
    def test_concat_channels_split_gradient(self, rng):
        a = _pb(rng.standard_normal((1, 2, 3, 3)))
        b = _pb(rng.standard_normal((1, 1, 3, 3)))
        r = _tm(rng.standard_normal((1, 3, 3, 3)))
        tape = T.Tape()
        cat = T.concat_channels(T.as_tensor(a, tape=tape), T.as_tensor(b, tape=tape),
                                tape=tape)
        T.backward(tape, T.sum_all(T.mul(cat, r, tape=tape), tape=tape))
        npt.assert_allclose(a.grad.data, r.data[:, :2])
        npt.assert_allclose(b.grad.data, r.data[:, 2:])

    def test_concat_batch_roundtrip(self, rng):
        parts = [_tm(rng.standard_normal((2, 1, 2, 2))),
                 _tm(rng.standard_normal((3, 1, 2, 2)))]
        cat = T.concat_batch(parts)
        assert cat.shape == (5, 1, 2, 2)
        npt.assert_array_equal(cat.data[:2], parts[0].data)

    def test_linear_gradients(self, f64, rng):
        x = _tm(rng.standard_normal((3, 4)))
        w = _pb(rng.standard_normal((2, 4)))
        b = _pb(rng.standard_normal(2))
        r = _tm(rng.standard_normal((3, 2)))
        tape = T.Tape()
        out = T.linear(x, w, b, tape=tape)
        npt.assert_allclose(out.data, x.data @ w.value.data.T + b.value.data)
        T.backward(tape, T.sum_all(T.mul(out, r, tape=tape), tape=tape))
        npt.assert_allclose(w.grad.data, r.data.T @ x.data)
        npt.assert_allclose(b.grad.data, r.data.sum(0))

    def test_separable_resample_is_matrix_product(self, f64, rng):
        x = _tm(rng.standard_normal((1, 1, 4, 5)))
        mr = rng.standard_normal((2, 4))
        mc = rng.standard_normal((3, 5))
        out = T.separable_resample(x, mr, mc)
        npt.assert_allclose(out.data[0, 0], mr @ x.data[0, 0] @ mc.T, rtol=1e-12)
