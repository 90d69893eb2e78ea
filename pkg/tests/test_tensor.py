import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iadccn import tensor as T
from iadccn.errors import ConfigurationError, DimensionError, GraphError
from iadccn.gradcheck import OP_TOL, op_cases, run_op_checks


@pytest.fixture(autouse=True)
def f64():
    with T.precision(64):
        yield


def conv_oracle(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for i in range(n):
        for f in range(o):
            for r in range(oh):
                for s in range(ow):
                    acc = b[f]
                    for ch in range(c):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[i, ch, r * stride + u, s * stride + v] * w[f, ch, u, v]
                    out[i, f, r, s] = acc
    return out


def pool_oracle(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2))
    for i in range(n):
        for ch in range(c):
            for r in range(h // 2):
                for s in range(w // 2):
                    out[i, ch, r, s] = max(x[i, ch, 2 * r:2 * r + 2, 2 * s:2 * s + 2].ravel())
    return out


def bilinear_oracle(x, factor):
    # half-pixel centres: output pixel j samples source coordinate (j + 0.5) / factor - 0.5
    n, c, h, w = x.shape
    out = np.empty((n, c, h * factor, w * factor))

    def tap(j, size):
        s = min(max((j + 0.5) / factor - 0.5, 0.0), size - 1)
        lo = int(np.floor(s))
        hi = min(lo + 1, size - 1)
        return lo, hi, s - lo

    for r in range(h * factor):
        r0, r1, ty = tap(r, h)
        for q in range(w * factor):
            c0, c1, tx = tap(q, w)
            top = x[:, :, r0, c0] * (1 - tx) + x[:, :, r0, c1] * tx
            bot = x[:, :, r1, c0] * (1 - tx) + x[:, :, r1, c1] * tx
            out[:, :, r, q] = top * (1 - ty) + bot * ty
    return out


class TestConv2d:
    def test_all_ones(self):
        y = T.conv2d(T.Tensor(np.ones((1, 1, 3, 3))), T.Tensor(np.ones((1, 1, 3, 3))), T.Tensor([0.0]))
        assert y.shape == (1, 1, 1, 1)
        assert y.item() == 9.0

    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 5, 4))
        y = T.conv2d(T.Tensor(x), T.Tensor(np.ones((1, 1, 1, 1))), T.Tensor([0.0]))
        np.testing.assert_array_equal(y.data, x)

    @pytest.mark.parametrize("stride,pad,size", [(1, 0, 6), (1, 1, 5), (2, 1, 7), (1, 2, 4)])
    def test_matches_loop_oracle(self, stride, pad, size):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.normal(size=(2, 3, size, size + 2 * stride))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        y = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=stride, pad=pad)
        np.testing.assert_allclose(y.data, conv_oracle(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)

    def test_five_by_five_kernel(self):
        rng = np.random.default_rng(3)
        x, w, b = rng.normal(size=(1, 2, 7, 7)), rng.normal(size=(2, 2, 5, 5)), rng.normal(size=2)
        y = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), pad=2)
        np.testing.assert_allclose(y.data, conv_oracle(x, w, b, 1, 2), rtol=1e-12, atol=1e-12)

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(DimensionError, match=r"axis \(1\)"):
            T.conv2d(T.Tensor(np.ones((1, 2, 4, 4))), T.Tensor(np.ones((1, 3, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigurationError):
            T.conv2d(T.Tensor(np.ones((1, 1, 4, 4))), T.Tensor(np.ones((1, 1, 2, 2))))

    def test_non_integer_extent(self):
        with pytest.raises(ConfigurationError):
            T.conv2d(T.Tensor(np.ones((1, 1, 6, 6))), T.Tensor(np.ones((1, 1, 3, 3))), stride=2, pad=1)

    def test_conv_output_size(self):
        assert T.conv_output_size(224, 3, 1, 1) == 224
        assert T.conv_output_size(7, 3, 2, 1) == 4


class TestActivations:
    def test_relu_values(self):
        np.testing.assert_array_equal(T.relu(T.Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_relu_grad(self):
        x = T.Tensor([3.0], requires_grad=True)
        T.reduce_sum(T.relu(x)).backward()
        assert x.grad[0] == 1.0

    def test_relu_grad_at_zero_is_zero(self):
        x = T.Tensor([0.0, -1.0], requires_grad=True)
        T.reduce_sum(T.relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_sigmoid_zero(self):
        assert T.sigmoid(T.Tensor([0.0])).data[0] == 0.5

    @given(st.lists(st.floats(-500, 500), min_size=1, max_size=20))
    def test_sigmoid_symmetry_and_stability(self, xs):
        x = np.array(xs)
        s = T.sigmoid(T.Tensor(x)).data
        assert np.all(np.isfinite(s))
        assert np.all((s >= 0) & (s <= 1))
        np.testing.assert_allclose(s, 1 - T.sigmoid(T.Tensor(-x)).data, atol=1e-15)


class TestMaxPool:
    def test_basic(self):
        y = T.maxpool2d(T.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        np.testing.assert_array_equal(y.data, [[[[4.0]]]])

    def test_constant(self):
        y = T.maxpool2d(T.Tensor(np.full((1, 2, 6, 4), 1.5)))
        np.testing.assert_array_equal(y.data, np.full((1, 2, 3, 2), 1.5))

    def test_matches_window_oracle(self):
        x = np.random.default_rng(1).normal(size=(2, 3, 8, 6))
        np.testing.assert_array_equal(T.maxpool2d(T.Tensor(x)).data, pool_oracle(x))

    def test_tie_routes_to_first(self):
        x = T.Tensor(np.full((1, 1, 2, 2), 7.0), requires_grad=True)
        T.reduce_sum(T.maxpool2d(x)).backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_odd_extent(self):
        with pytest.raises(ConfigurationError):
            T.maxpool2d(T.Tensor(np.ones((1, 1, 5, 4))))


class TestUpsample:
    @pytest.mark.parametrize("factor", [1, 2, 3, 4])
    def test_constant_stays_constant(self, factor):
        y = T.upsample_bilinear(T.Tensor(np.full((1, 2, 3, 5), 0.3)), factor)
        assert y.shape == (1, 2, 3 * factor, 5 * factor)
        assert np.all(y.data == 0.3)

    def test_single_pixel(self):
        y = T.upsample_bilinear(T.Tensor(np.full((1, 1, 1, 1), 2.5)), 4)
        np.testing.assert_array_equal(y.data, np.full((1, 1, 4, 4), 2.5))

    @pytest.mark.parametrize("factor", [2, 4])
    def test_matches_oracle(self, factor):
        x = np.random.default_rng(factor).normal(size=(1, 2, 3, 4))
        np.testing.assert_allclose(T.upsample_bilinear(T.Tensor(x), factor).data, bilinear_oracle(x, factor), atol=1e-12)

    def test_bad_factor(self):
        with pytest.raises(ConfigurationError):
            T.upsample_bilinear(T.Tensor(np.ones((1, 1, 2, 2))), 0)


class TestElementwise:
    def test_mul_zero(self):
        f = np.random.default_rng(0).normal(size=(1, 2, 3, 3))
        assert np.all(T.mul(T.Tensor(f), 0.0).data == 0.0)

    def test_sub_zero(self):
        f = np.random.default_rng(0).normal(size=(1, 2, 3, 3))
        np.testing.assert_array_equal(T.sub(T.Tensor(f), 0.0).data, f)

    def test_broadcast_gradient_sums_channels(self):
        a = T.Tensor(np.ones((1, 3, 2, 2)), requires_grad=True)
        b = T.Tensor(np.full((1, 1, 2, 2), 2.0), requires_grad=True)
        T.reduce_sum(T.mul(a, b)).backward()
        np.testing.assert_array_equal(b.grad, np.full((1, 1, 2, 2), 3.0))
        np.testing.assert_array_equal(a.grad, np.full((1, 3, 2, 2), 2.0))

    def test_incompatible(self):
        with pytest.raises(DimensionError):
            T.add(T.Tensor(np.ones((1, 3, 2, 2))), T.Tensor(np.ones((1, 2, 2, 2))))

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            T.elementwise(T.Tensor([1.0]), T.Tensor([1.0]), "div")


class TestReduce:
    def test_sum(self):
        assert T.reduce_sum(T.Tensor([1.0, 2.0, 3.0])).item() == 6.0

    def test_mean_constant(self):
        assert T.reduce_mean(T.Tensor(np.full((3, 4), 1.25))).item() == 1.25

    def test_crop_keeps_top_left(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(T.crop(T.Tensor(x), 2, 3).data, x[:, :, :2, :3])


class TestBackward:
    def test_linear_weight_grad(self):
        x = np.random.default_rng(0).normal(size=(2, 3))
        w = T.Tensor(np.ones((2, 3)), requires_grad=True)
        T.reduce_sum(T.mul(w, T.Tensor(x))).backward()
        np.testing.assert_array_equal(w.grad, x)

    def test_dead_relu(self):
        x = T.Tensor(np.array([0.5, 1.0, 2.0]), requires_grad=True)
        T.reduce_sum(T.relu(T.mul(x, -1.0))).backward()
        np.testing.assert_array_equal(x.grad, np.zeros(3))

    def test_fan_out_accumulates(self):
        x = T.Tensor([2.0], requires_grad=True)
        T.reduce_sum(T.add(T.mul(x, x), x)).backward()
        assert x.grad[0] == 5.0

    def test_non_scalar(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            T.mul(x, 2.0).backward()

    def test_repeat_call(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        loss = T.reduce_sum(x)
        loss.backward()
        with pytest.raises(GraphError):
            loss.backward()

    def test_detached(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            T.reduce_sum(x).detach().backward()

    def test_no_grad_records_nothing(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            loss = T.reduce_sum(x)
        with pytest.raises(GraphError):
            loss.backward()


class TestPrecision:
    def test_switch(self):
        with T.precision(32):
            assert T.Tensor([1.0]).data.dtype == np.float32
        assert T.Tensor([1.0]).data.dtype == np.float64

    def test_bad_bits(self):
        with pytest.raises(ConfigurationError):
            T.set_precision(16)


class TestGradCheck:
    def test_linear_is_exact(self):
        w = np.random.default_rng(0).normal(size=(3, 4))
        x = T.Tensor(np.random.default_rng(1).normal(size=(3, 4)))
        err = T.grad_check(lambda x: T.reduce_sum(T.mul(x, T.Tensor(w))), [x])
        assert err <= 1e-9

    def test_requires_64_bit(self):
        with T.precision(32):
            with pytest.raises(ConfigurationError):
                T.grad_check(lambda x: T.reduce_sum(x), [T.Tensor([1.0])])

    def test_catches_wrong_gradient(self):
        def bad_square(x):
            return T.custom_op(x.data ** 2, [x], lambda g: [g * x.data], "bad_square")

        x = T.Tensor(np.array([1.0, 2.0]))
        assert T.grad_check(lambda x: T.reduce_sum(bad_square(x)), [x]) > 0.1

    @pytest.mark.parametrize("name", [c[0] for c in op_cases(0)])
    def test_each_op(self, name):
        case = {c[0]: c for c in op_cases(0)}[name]
        assert T.grad_check(case[1], case[2]) <= OP_TOL

    def test_run_op_checks_seeded(self):
        results = run_op_checks(seed=5)
        assert all(r.passed for r in results), [(r.name, r.error) for r in results if not r.passed]


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 2),
    c=st.integers(1, 3),
    o=st.integers(1, 3),
    h=st.integers(3, 7),
    w=st.integers(3, 7),
    pad=st.integers(0, 1),
    seed=st.integers(0, 2 ** 16),
)
def test_conv_property_against_oracle(n, c, o, h, w, pad, seed):
    with T.precision(64):
        rng = np.random.default_rng(seed)
        x, wt, b = rng.normal(size=(n, c, h, w)), rng.normal(size=(o, c, 3, 3)), rng.normal(size=o)
        y = T.conv2d(T.Tensor(x), T.Tensor(wt), T.Tensor(b), pad=pad)
        np.testing.assert_allclose(y.data, conv_oracle(x, wt, b, 1, pad), rtol=1e-10, atol=1e-10)
