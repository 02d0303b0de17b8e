import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dronefuse import tensor as T
from dronefuse.errors import ParameterError

from gradcases import OP_CASES, TOLERANCE, run_case
from reference import conv, dwconv, shuffle


def t(a, grad=False):
    return T.tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_central_differences(name):
    errs = [run_case(name, seed) for seed in range(10)]
    assert max(errs) < TOLERANCE, errs


class TestGradCheck:
    def test_needs_float64(self):
        with T.precision("train"):
            x = T.tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ParameterError):
            T.grad_check(lambda x: T.sum(x * x), [x])

    def test_detects_a_wrong_gradient(self):
        x = t(np.linspace(0.5, 2.0, 6), grad=True)

        def bad_square(x):
            # forward x^2, backward claims x
            return T.sum(T._make(x.data ** 2, (x,), lambda g: (g * x.data,)))

        assert T.grad_check(bad_square, [x]) > 0.1

    def test_square_derivative(self):
        x = t(3.0, grad=True)
        (x * x).backward()
        assert abs(x.grad - 6.0) < 1e-7


class TestElementwise:
    def test_relu_hswish_values(self):
        assert np.array_equal(T.relu(t([-1.0, 2.0])).data, [0.0, 2.0])
        assert np.allclose(T.hswish(t([3.0, -3.0, 0.0])).data, [3.0, 0.0, 0.0])

    def test_softmax_symmetric(self):
        assert np.allclose(T.softmax(t([[0.0, 0.0]])).data, [[0.5, 0.5]])

    @given(hnp.arrays(np.float64, (5, 7), elements=st.floats(-50, 50)))
    @settings(max_examples=40, deadline=None)
    def test_softmax_rows_are_distributions(self, a):
        s = T.softmax(t(a), axis=-1).data
        assert np.all(s >= 0)
        assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-6)

    def test_sigmoid_saturates_without_overflow(self):
        with np.errstate(over="raise"):
            s = T.sigmoid(t([-1000.0, 0.0, 1000.0])).data
        assert np.allclose(s, [0.0, 0.5, 1.0])

    def test_cross_entropy_gradient_identity(self):
        rng = np.random.default_rng(0)
        z = t(rng.standard_normal((4, 5)), grad=True)
        labels = np.array([0, 3, 4, 1])
        T.cross_entropy(z, labels).backward()
        p = T.softmax(t(z.data)).data
        onehot = np.eye(5)[labels]
        assert np.max(np.abs(z.grad - (p - onehot) / 4)) < 1e-7

    def test_cross_entropy_rejects_bad_labels(self):
        with pytest.raises(ParameterError):
            T.cross_entropy(t(np.zeros((2, 3))), [0, 3])

    @pytest.mark.parametrize("b_shape", [(1, 1, 1, 8), (2, 4, 4, 1), (1, 4, 4, 8)])
    def test_allowed_broadcasts(self, b_shape):
        a, b = np.ones((2, 4, 4, 8)), np.full(b_shape, 2.0)
        assert np.array_equal((t(a) * t(b)).data, a * b)

    @pytest.mark.parametrize("b_shape", [(8,), (4, 4, 8), (2, 4, 4, 3)])
    def test_other_broadcasts_rejected(self, b_shape):
        with pytest.raises(ParameterError):
            t(np.ones((2, 4, 4, 8))) + t(np.ones(b_shape))


class TestLinearAlgebra:
    def test_identity_conv(self):
        x = t(np.array([[[[2.5]]]]))
        assert np.array_equal(T.conv2d(x, t(np.ones((1, 1, 1, 1)))).data, x.data)

    def test_ones_kernel_counts_overlaps(self):
        out = T.conv2d(t(np.ones((1, 4, 4, 1))), t(np.ones((3, 3, 1, 1))), padding=1).data[0, :, :, 0]
        assert out[1, 1] == 9 and out[2, 2] == 9
        assert out[0, 0] == 4 and out[3, 3] == 4 and out[0, 3] == 4
        assert out[0, 1] == 6

    @pytest.mark.parametrize("stride,k", [(1, 3), (2, 3), (1, 1), (2, 1)])
    def test_conv_matches_loop(self, stride, k):
        rng = np.random.default_rng(stride * 10 + k)
        x, w, b = rng.standard_normal((2, 5, 6, 3)), rng.standard_normal((k, k, 3, 4)), rng.standard_normal(4)
        out = T.conv2d(t(x), t(w), t(b), stride, k // 2).data
        for n in range(2):
            assert np.allclose(out[n], conv(x[n], w, b, stride, k // 2), atol=1e-12)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_depthwise_matches_loop(self, stride):
        rng = np.random.default_rng(stride)
        x, w = rng.standard_normal((2, 5, 5, 4)), rng.standard_normal((3, 3, 4))
        out = T.depthwise_conv2d(t(x), t(w), None, stride, 1).data
        for n in range(2):
            assert np.allclose(out[n], dwconv(x[n], w, stride), atol=1e-12)

    def test_conv_shape_mismatch(self):
        with pytest.raises(ParameterError):
            T.conv2d(t(np.ones((1, 4, 4, 2))), t(np.ones((3, 3, 3, 1))))

    def test_matmul_identity(self):
        a = np.random.default_rng(0).standard_normal((4, 3))
        assert np.array_equal(T.matmul(t(np.eye(4)), t(a)).data, a)
        with pytest.raises(ParameterError):
            T.matmul(t(np.eye(4)), t(np.ones((3, 3))))


class TestPooling:
    def test_constant(self):
        x = t(np.full((1, 3, 3, 2), 1.5))
        assert np.all(T.gap(x).data == 1.5) and np.all(T.gmp(x).data == 1.5)

    def test_gap_mean(self):
        x = t(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2, 1))
        assert T.gap(x).data.item() == 2.5

    def test_spatial_pooling_matches_loop(self):
        x = np.random.default_rng(0).standard_normal((1, 4, 4, 8))
        mx, av = T.gmp_spatial(t(x)).data, T.gap_spatial(t(x)).data
        for i in range(4):
            for j in range(4):
                assert mx[0, i, j, 0] == max(x[0, i, j])
                assert av[0, i, j, 0] == pytest.approx(sum(x[0, i, j]) / 8)

    def test_empty_axis(self):
        with pytest.raises(ParameterError):
            T.gap(t(np.ones((1, 0, 2, 2))))


class TestDataMovement:
    def test_shuffle_identity_and_example(self):
        x = t(np.arange(4.0).reshape(1, 1, 1, 4))
        assert np.array_equal(T.channel_shuffle(x, 1).data, x.data)
        assert np.array_equal(T.channel_shuffle(x, 2).data.ravel(), [0, 2, 1, 3])

    @pytest.mark.parametrize("C,g", [(4, 2), (12, 3), (12, 4), (16, 8), (6, 1)])
    def test_shuffle_round_trip_and_reference(self, C, g):
        x = t(np.random.default_rng(C).standard_normal((2, 3, 3, C)))
        once = T.channel_shuffle(x, g)
        assert np.array_equal(once.data, shuffle(x.data, g))
        assert np.array_equal(T.channel_shuffle(once, C // g).data, x.data)

    def test_shuffle_divisibility(self):
        with pytest.raises(ParameterError):
            T.channel_shuffle(t(np.ones((1, 1, 1, 6))), 4)

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 9), st.integers(1, 9))
    @settings(max_examples=30, deadline=None)
    def test_movement_preserves_values(self, h, w, H, W):
        x = np.random.default_rng(h * 7 + w).standard_normal((1, h, w, 4))
        up = T.upsample_nn(t(x), H, W).data
        assert set(np.unique(up)) <= set(np.unique(x))
        if H >= h and W >= w:
            assert set(np.unique(up)) == set(np.unique(x))
        assert np.array_equal(np.sort(T.reshape(t(x), (h * w, 4)).data, None), np.sort(x, None))
        cat = T.concat([t(x), t(x[..., :2])]).data
        assert np.array_equal(np.sort(cat, None), np.sort(np.concatenate([x.ravel(), x[..., :2].ravel()])))

    def test_upsample_example(self):
        x = t(np.arange(4.0).reshape(1, 2, 2, 1))
        up = T.upsample_nn(x, 4, 4).data[0, :, :, 0]
        assert np.array_equal(up, [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])

    def test_reshape_mismatch(self):
        with pytest.raises(ParameterError):
            T.reshape(t(np.ones((2, 3))), (4, 2))


class TestBatchNorm:
    def test_train_mode_normalizes(self):
        x = t(np.random.default_rng(0).standard_normal((4, 3, 3, 5)) * 3 + 7)
        rm, rv = np.zeros(5), np.ones(5)
        out = T.batch_norm(x, t(np.ones(5)), t(np.zeros(5)), rm, rv, training=True).data
        assert np.all(np.abs(out.mean(axis=(0, 1, 2))) < 1e-6)
        # eps = 1e-5 shrinks the variance by var / (var + eps)
        assert np.all(np.abs(out.var(axis=(0, 1, 2)) - 1.0) < 1e-5)

    def test_eval_identity(self):
        x = t(np.random.default_rng(1).standard_normal((2, 2, 2, 3)))
        out = T.batch_norm(x, t(np.ones(3)), t(np.zeros(3)), np.zeros(3), np.ones(3), training=False).data
        assert np.allclose(out, x.data / np.sqrt(1 + T.BN_EPS), atol=1e-12)
        assert np.allclose(out, x.data, atol=1e-5)

    def test_running_stats_ema(self):
        rng = np.random.default_rng(2)
        rm, rv = np.zeros(2), np.ones(2)
        exp_m, exp_v = np.zeros(2), np.ones(2)
        for _ in range(3):
            x = rng.standard_normal((3, 2, 2, 2)) + 1.0
            T.batch_norm(t(x), t(np.ones(2)), t(np.zeros(2)), rm, rv, training=True)
            for c in range(2):
                vals = x[..., c].ravel()
                mu = sum(vals) / vals.size
                exp_m[c] = 0.9 * exp_m[c] + 0.1 * mu
                exp_v[c] = 0.9 * exp_v[c] + 0.1 * sum((v - mu) ** 2 for v in vals) / vals.size
        assert np.allclose(rm, exp_m, atol=1e-12) and np.allclose(rv, exp_v, atol=1e-12)

    def test_empty_batch(self):
        with pytest.raises(ParameterError):
            T.batch_norm(t(np.ones((0, 2, 2, 2))), t(np.ones(2)), t(np.zeros(2)), np.zeros(2), np.ones(2), True)


class TestModes:
    def test_precision_modes(self):
        with T.precision("train"):
            assert T.tensor([1.0]).data.dtype == np.float32
        with T.precision("test"):
            assert T.tensor([1.0]).data.dtype == np.float64
        with pytest.raises(ParameterError):
            T.set_mode("half")

    def test_forward_deterministic(self):
        rng = np.random.default_rng(5)
        x, w = rng.standard_normal((2, 6, 6, 4)), rng.standard_normal((3, 3, 4, 5))
        a = T.conv2d(t(x), t(w), padding=1).data
        b = T.conv2d(t(x), t(w), padding=1).data
        assert np.array_equal(a, b)

    def test_backward_without_graph(self):
        from dronefuse.errors import DiagnosticError
        with pytest.raises(DiagnosticError):
            T.backward(t(2.0))
