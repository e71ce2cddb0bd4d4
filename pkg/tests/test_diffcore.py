import math

import numpy as np
import pytest

from efps.diffcore import (
    Adam,
    AdamState,
    BatchNorm2d,
    Conv2d,
    DiffError,
    Linear,
    Tensor,
    adam_step,
    batch_norm,
    cat,
    conv2d,
    cosine_lr,
    downsample2x,
    no_grad,
    upsample2x,
)
from gradcheck import check_gradients, numeric_grad, rand_tensor


def conv2d_reference(x, w, b, stride=1, padding=0):
    """Nested-loop cross-correlation oracle."""
    n, c, h, width = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (width + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for fi in range(f):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (
                                    xp[ni, ci, oi * stride + ki, oj * stride + kj]
                                    * w[fi, ci, ki, kj]
                                )
                    out[ni, fi, oi, oj] = acc + b[fi]
    return out


class TestConvForward:
    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 5, 5)))
        w = np.zeros((3, 3, 1, 1))
        for i in range(3):
            w[i, i, 0, 0] = 1.0
        out = conv2d(x, Tensor(w), Tensor(np.zeros(3)))
        assert np.allclose(out.data, x.data)

    def test_zero_weights(self):
        x = Tensor(np.ones((1, 2, 4, 4)))
        out = conv2d(x, Tensor(np.zeros((5, 2, 3, 3))), Tensor(np.zeros(5)))
        assert not out.data.any()

    def test_ones_summation(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert out.data.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    def test_matches_nested_loop_reference(self):
        rng = np.random.default_rng(1)
        cases = [
            (1, 1, 3, 3, 1, 1, 1, 0),
            (2, 3, 5, 5, 4, 3, 1, 1),
            (2, 4, 9, 9, 3, 3, 2, 1),
            (1, 2, 8, 8, 2, 5, 2, 2),
            (2, 4, 9, 9, 5, 1, 1, 0),
            (1, 3, 7, 6, 2, 3, 2, 0),
        ]
        for n, c, h, w, f, k, stride, pad in cases:
            x = rng.normal(size=(n, c, h, w))
            wt = rng.normal(size=(f, c, k, k))
            b = rng.normal(size=f)
            out = conv2d(Tensor(x), Tensor(wt), Tensor(b), stride=stride, padding=pad)
            ref = conv2d_reference(x, wt, b, stride=stride, padding=pad)
            assert np.max(np.abs(out.data - ref)) < 1e-12

    def test_channel_mismatch_error(self):
        x = Tensor(np.ones((1, 2, 4, 4)))
        with pytest.raises(DiffError, match="channels"):
            conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), None)

    def test_kernel_too_large(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        with pytest.raises(DiffError, match="fit"):
            conv2d(x, Tensor(np.zeros((1, 1, 5, 5))), None)

    def test_output_size_formula(self):
        x = Tensor(np.zeros((1, 1, 16, 16)))
        out = conv2d(x, Tensor(np.zeros((1, 1, 5, 5))), None, stride=2, padding=2)
        assert out.data.shape == (1, 1, 8, 8)


class TestActivationValues:
    def test_relu(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]))
        assert x.relu().data.tolist() == [0.0, 0.0, 2.0]

    def test_sigmoid_zero(self):
        assert Tensor(np.array([0.0])).sigmoid().data[0] == 0.5

    def test_leaky_slope(self):
        x = Tensor(np.array([-2.0, 3.0]))
        out = x.leaky_relu(0.1)
        assert np.allclose(out.data, [-0.2, 3.0])

    def test_tanh_matches_reference(self):
        x = np.linspace(-3, 3, 11)
        assert np.allclose(Tensor(x).tanh().data, np.tanh(x))


class TestGradients:
    """Central finite differences, 64-bit, perturbation 1e-5, rel err < 1e-4."""

    def _shapes(self, rng, count, max_side=7):
        out = []
        for _ in range(count):
            n = int(rng.integers(1, 4))
            c = int(rng.integers(1, 5))
            h = int(rng.integers(3, max_side + 1))
            w = int(rng.integers(3, max_side + 1))
            out.append((n, c, h, w))
        return out

    def test_conv2d_many_shapes(self):
        rng = np.random.default_rng(2)
        checked = 0
        for k in (1, 3, 5):
            for stride in (1, 2):
                for n, c, h, w in self._shapes(rng, 4):
                    if h < k or w < k:
                        continue
                    pad = k // 2
                    f = int(rng.integers(1, 4))
                    x = rand_tensor(rng, (n, c, h, w))
                    wt = rand_tensor(rng, (f, c, k, k), scale=0.5)
                    b = rand_tensor(rng, (f,))
                    err = check_gradients(
                        lambda: conv2d(x, wt, b, stride=stride, padding=pad)
                        .square()
                        .mean(),
                        [x, wt, b],
                    )
                    assert err < 1e-4, (k, stride, (n, c, h, w), err)
                    checked += 1
        assert checked >= 20

    def test_batchnorm_train_mode(self):
        # probe with a random weighted sum: a symmetric loss annihilates most
        # of the input Jacobian (normalization invariance), leaving gradients
        # near zero where finite differences are pure roundoff
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = int(rng.integers(2, 5))
            c = int(rng.integers(1, 4))
            h = int(rng.integers(2, 6))
            w = int(rng.integers(2, 6))
            x = rand_tensor(rng, (n, c, h, w))
            gamma = rand_tensor(rng, (c,))
            beta = rand_tensor(rng, (c,))
            probe = Tensor(rng.normal(size=(n, c, h, w)))

            def build():
                rm = np.zeros(c)
                rv = np.ones(c)
                return (
                    batch_norm(x, gamma, beta, rm, rv, training=True) * probe
                ).sum()

            err = check_gradients(build, [x, gamma, beta])
            assert err < 1e-4, ((n, c, h, w), err)

    def test_batchnorm_eval_mode(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            c = int(rng.integers(1, 4))
            x = rand_tensor(rng, (2, c, 3, 3))
            gamma = rand_tensor(rng, (c,))
            beta = rand_tensor(rng, (c,))
            rm = rng.normal(size=c)
            rv = rng.uniform(0.5, 2.0, size=c)
            err = check_gradients(
                lambda: batch_norm(x, gamma, beta, rm, rv, training=False)
                .square()
                .mean(),
                [x, gamma, beta],
            )
            assert err < 1e-4

    @pytest.mark.parametrize(
        "name,fn",
        [
            ("relu", lambda t: t.relu()),
            ("leaky", lambda t: t.leaky_relu(0.1)),
            ("sigmoid", lambda t: t.sigmoid()),
            ("tanh", lambda t: t.tanh()),
        ],
    )
    def test_activations(self, name, fn):
        rng = np.random.default_rng(hash(name) % 2**32)
        for _ in range(20):
            shape = tuple(rng.integers(1, 6, size=int(rng.integers(1, 4))))
            # keep samples away from the relu kink so FD is meaningful
            data = rng.normal(size=shape)
            data[np.abs(data) < 1e-3] = 0.1
            x = Tensor(data, requires_grad=True)
            err = check_gradients(lambda: fn(x).square().mean(), [x])
            assert err < 1e-4

    def test_up_down_sampling(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            n = int(rng.integers(1, 3))
            c = int(rng.integers(1, 4))
            h = int(rng.integers(2, 5))
            x = rand_tensor(rng, (n, c, h, h))
            err = check_gradients(lambda: upsample2x(x).square().mean(), [x])
            assert err < 1e-4
            y = rand_tensor(rng, (n, c, 2 * h, 2 * h))
            err = check_gradients(lambda: downsample2x(y).square().mean(), [y])
            assert err < 1e-4

    def test_cat_and_reductions(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            a = rand_tensor(rng, (2, int(rng.integers(1, 4)), 3, 3))
            b = rand_tensor(rng, (2, int(rng.integers(1, 4)), 3, 3))
            err = check_gradients(
                lambda: (cat([a, b], axis=1).square().mean(axis=(0, 2, 3))).sum(),
                [a, b],
            )
            assert err < 1e-4

    def test_matmul_linear_ops(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            n = int(rng.integers(1, 5))
            fi = int(rng.integers(1, 5))
            fo = int(rng.integers(1, 5))
            x = rand_tensor(rng, (n, fi))
            w = rand_tensor(rng, (fi, fo))
            b = rand_tensor(rng, (fo,))
            err = check_gradients(lambda: (x.matmul(w) + b).square().mean(), [x, w, b])
            assert err < 1e-4

    def test_division_sqrt_acos(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            x = Tensor(rng.uniform(-0.9, 0.9, size=(3, 4)), requires_grad=True)
            d = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
            err = check_gradients(
                lambda: ((x / d).clip(-0.95, 0.95).acos().mean() + d.sqrt().sum()),
                [x, d],
            )
            assert err < 1e-4

    def test_residual_composition(self):
        rng = np.random.default_rng(9)
        x = rand_tensor(rng, (2, 3, 4, 4))
        w = rand_tensor(rng, (3, 3, 3, 3), scale=0.4)
        b = rand_tensor(rng, (3,))
        gamma = rand_tensor(rng, (3,))
        beta = rand_tensor(rng, (3,))
        probe = Tensor(rng.normal(size=(2, 3, 4, 4)))

        def build():
            y = conv2d(x, w, b, stride=1, padding=1)
            y = batch_norm(y, gamma, beta, np.zeros(3), np.ones(3), training=True)
            return ((y.relu() + x) * probe).sum()

        assert check_gradients(build, [x, w, b, gamma, beta]) < 1e-4


class TestBatchNormSemantics:
    def test_constant_input_zero_output(self):
        x = Tensor(np.full((4, 2, 3, 3), 7.0))
        out = batch_norm(
            x, Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), True
        )
        assert np.max(np.abs(out.data)) < 1e-6

    def test_standardized_input_passthrough(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(8, 1, 16, 16))
        x = (x - x.mean()) / x.std()
        out = batch_norm(
            Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), np.zeros(1), np.ones(1), True
        )
        assert np.allclose(out.data, x, atol=1e-4)

    def test_two_point_affine_oracle(self):
        # batch {-1, 1}: mean 0, biased var 1 -> normalized {-1, 1} -> {1, 5}
        x = Tensor(np.array([-1.0, 1.0]).reshape(2, 1, 1, 1))
        out = batch_norm(
            x,
            Tensor(np.array([2.0])),
            Tensor(np.array([3.0])),
            np.zeros(1),
            np.ones(1),
            True,
            eps=0.0,
        )
        assert np.allclose(out.data.ravel(), [1.0, 5.0], atol=1e-12)

    def test_batch_statistics_invariant(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            x = Tensor(rng.normal(loc=3.0, scale=2.5, size=(6, 3, 5, 5)))
            out = batch_norm(
                x, Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), True
            )
            mean = out.data.mean(axis=(0, 2, 3))
            var = out.data.var(axis=(0, 2, 3))
            assert np.max(np.abs(mean)) < 1e-9
            assert np.max(np.abs(var - 1.0)) < 1e-4

    def test_batch_of_one_rejected(self):
        x = Tensor(np.ones((1, 2, 3, 3)))
        with pytest.raises(DiffError, match="batch too small"):
            batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), True)

    def test_running_statistics_update(self):
        rng = np.random.default_rng(12)
        x = rng.normal(loc=5.0, size=(16, 1, 8, 8))
        rm = np.zeros(1)
        rv = np.ones(1)
        batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, True)
        assert rm[0] == pytest.approx(0.1 * x.mean(), rel=1e-10)
        assert rv[0] == pytest.approx(0.9 + 0.1 * x.var(), rel=1e-10)

    def test_eval_uses_running_stats(self):
        x = Tensor(np.zeros((2, 1, 2, 2)))
        out = batch_norm(
            x,
            Tensor(np.ones(1)),
            Tensor(np.zeros(1)),
            np.array([2.0]),
            np.array([4.0]),
            False,
            eps=0.0,
        )
        assert np.allclose(out.data, -1.0)


class TestAdam:
    def test_zero_gradient_noop_fresh_state(self):
        p = np.array([1.0, -2.0, 3.0])
        state = AdamState(lr=0.1)
        adam_step([p], [np.zeros(3)], state)
        assert p.tolist() == [1.0, -2.0, 3.0]

    def test_zero_gradient_noop_any_state(self):
        # momentum history present: zero gradient must still leave params alone
        p = np.array([1.0])
        state = AdamState(lr=0.1)
        adam_step([p], [np.array([0.5])], state)
        moved = p.copy()
        m_before = state.m[0].copy()
        adam_step([p], [np.array([0.0])], state)
        assert np.array_equal(p, moved)
        assert np.array_equal(state.m[0], m_before)

    def test_first_step_closed_form(self):
        # step 1: m_hat = g, v_hat = g^2, update = -lr * g / (|g| + eps)
        for g in (0.3, -4.0, 1e-4):
            p = np.array([0.0])
            adam_step([p], [np.array([g])], AdamState(lr=0.01))
            expected = -0.01 * g / (abs(g) + 1e-8)
            assert p[0] == pytest.approx(expected, rel=1e-12)
            assert abs(abs(p[0]) - 0.01) < 1e-5  # magnitude ~ lr * sign

    def test_quadratic_descent(self):
        p = np.array([1.0])
        state = AdamState(lr=0.05)
        values = [0.5 * p[0] ** 2]
        for _ in range(2):
            adam_step([p], [p.copy()], state)
            values.append(0.5 * p[0] ** 2)
        assert values[1] < values[0]
        assert values[2] < values[1]

    def test_shape_mismatch(self):
        with pytest.raises(DiffError, match="shape"):
            adam_step([np.zeros(3)], [np.zeros(4)], AdamState())

    def test_wrapper_matches_functional(self):
        rng = np.random.default_rng(13)
        data = rng.normal(size=(4,))
        grad = rng.normal(size=(4,))
        t = Tensor(data.copy(), requires_grad=True)
        t.grad = grad.copy()
        opt = Adam([t], lr=0.01)
        opt.step()
        ref = data.copy()
        adam_step([ref], [grad.copy()], AdamState(lr=0.01))
        assert np.allclose(t.data, ref, atol=1e-15)


class TestCosine:
    def test_endpoints(self):
        assert cosine_lr(0, 10, 0.001) == pytest.approx(0.001)
        assert cosine_lr(10, 10, 0.001) == pytest.approx(0.0)

    def test_midpoint(self):
        assert cosine_lr(5, 10, 0.001, 0.0) == pytest.approx(0.0005)

    def test_monotone_decay(self):
        values = [cosine_lr(s, 20, 0.001) for s in range(21)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_zero_total_rejected(self):
        with pytest.raises(DiffError):
            cosine_lr(0, 0, 0.001)


class TestModulePlumbing:
    def test_parameter_discovery(self):
        rng = np.random.default_rng(14)

        class Net(Conv2d.__mro__[1]):  # Module
            def __init__(self):
                super().__init__()
                self.conv = Conv2d(2, 3, 3, rng=rng, dtype=np.float64)
                self.bn = BatchNorm2d(3, dtype=np.float64)
                self.blocks = [Linear(4, 4, rng=rng, dtype=np.float64) for _ in range(2)]

        net = Net()
        names = [n for n, _ in net.named_parameters()]
        assert "conv.weight" in names
        assert "bn.gamma" in names
        assert "blocks.1.bias" in names
        assert len(names) == 8

    def test_state_arrays_include_buffers(self):
        net = BatchNorm2d(3)
        names = [n for n, _ in net.state_arrays()]
        assert "running_mean" in names
        assert "gamma" in names

    def test_load_state_round_trip(self):
        rng = np.random.default_rng(15)
        a = Conv2d(2, 3, 3, rng=rng)
        b = Conv2d(2, 3, 3, rng=np.random.default_rng(99))
        b.load_state_arrays({n: v.copy() for n, v in a.state_arrays()})
        assert np.array_equal(a.weight.data, b.weight.data)

    def test_train_eval_switch(self):
        class Net(Conv2d.__mro__[1]):
            def __init__(self):
                super().__init__()
                self.bn = BatchNorm2d(2)

        net = Net().eval()
        assert not net.bn.training
        net.train()
        assert net.bn.training

    def test_no_grad_blocks_graph(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert y._backward_fn is None
        assert not y.requires_grad

    def test_kaiming_bound(self):
        rng = np.random.default_rng(16)
        conv = Conv2d(8, 4, 3, rng=rng, dtype=np.float64)
        bound = math.sqrt(6.0 / (8 * 9))
        assert np.max(np.abs(conv.weight.data)) <= bound
        assert np.std(conv.weight.data) > 0.3 * bound

    def test_float32_kept_through_ops(self):
        x = Tensor(np.ones((2, 3, 4, 4), dtype=np.float32), requires_grad=True)
        conv = Conv2d(3, 2, 3, padding=1)
        out = conv(x).relu().mean()
        assert out.data.dtype == np.float32
        out.backward()
        assert x.grad.dtype == np.float32
