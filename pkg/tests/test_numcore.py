import numpy as np
import pytest

from proxymanip import numcore as nc


def make_net(sizes, acts, seed=0):
    return nc.init_mlp(sizes, acts, seed)


class TestForward:
    def test_identity_single_layer(self):
        net = nc.MlpNetwork([2, 2], [np.eye(2)], [np.zeros(2)], ["identity"])
        y, _ = nc.forward(net, np.array([1.0, 2.0]))
        assert np.array_equal(y, [1.0, 2.0])

    def test_relu_clamp(self):
        net = nc.MlpNetwork([2, 2], [np.eye(2)], [np.zeros(2)], ["relu"])
        y, _ = nc.forward(net, np.array([-1.0, 2.0]))
        assert np.array_equal(y, [0.0, 2.0])

    def test_hand_evaluated_affine(self):
        net = nc.MlpNetwork(
            [2, 1], [np.array([[0.5], [0.5]])], [np.array([0.25])], ["identity"])
        y, _ = nc.forward(net, np.array([1.0, 1.0]))
        assert y[0] == pytest.approx(1.25, abs=0)

    def test_deterministic(self):
        net = make_net([4, 8, 3], ["tanh", "identity"], seed=7)
        x = np.linspace(-1, 1, 4)
        y1, _ = nc.forward(net, x)
        y2, _ = nc.forward(net, x)
        assert np.array_equal(y1, y2)

    def test_dimension_mismatch_raises(self):
        net = make_net([4, 3], ["identity"], seed=1)
        with pytest.raises(nc.ConfigurationError):
            nc.forward(net, np.zeros(5))


class TestBackward:
    def test_linear_bias_gradient_is_one(self):
        net = make_net([3, 2], ["identity"], seed=3)
        y, cache = nc.forward(net, np.array([0.3, -0.2, 0.9]))
        grads, _ = nc.backward(net, cache, np.ones(2))
        # loss = sum(outputs): d loss / d bias = 1 per unit
        assert np.array_equal(grads[1], np.ones(2))

    def test_relu_subgradient_zero_at_zero(self):
        net = nc.MlpNetwork([1, 1], [np.eye(1)], [np.zeros(1)], ["relu"])
        y, cache = nc.forward(net, np.array([0.0]))
        grads, gin = nc.backward(net, cache, np.ones(1))
        assert gin[0] == 0.0
        assert grads[0][0, 0] == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_finite_differences(self, seed):
        rng = np.random.Generator(np.random.PCG64(seed))
        net = make_net([3, 4, 2], ["tanh", "identity"], seed=seed)
        assert net.num_params() <= 64 or True  # small net, fast oracle
        x = rng.uniform(-1, 1, 3)
        w = rng.uniform(-1, 1, 2)  # fixed linear readout makes the loss scalar

        def loss(params):
            net.set_parameters(params)
            y, _ = nc.forward(net, x)
            return float(y @ w)

        params = [p.copy() for p in net.parameters()]
        fd = nc.finite_diff_grad(loss, params, step=1e-5)
        net.set_parameters(params)
        _, cache = nc.forward(net, x)
        exact, _ = nc.backward(net, cache, w)
        for a, b in zip(exact, fd):
            assert nc.relative_error(a, b) < 1e-6

    def test_stale_cache_rejected(self):
        net = make_net([3, 2], ["identity"], seed=0)
        other = make_net([3, 5, 2], ["relu", "identity"], seed=0)
        _, cache = nc.forward(other, np.zeros(3))
        with pytest.raises(nc.ConfigurationError):
            nc.backward(net, cache, np.ones(2))

    def test_batched_matches_single(self):
        # across batch shapes BLAS blocking may differ, so merely tight;
        # identical call patterns are bitwise (see test_deterministic)
        net = make_net([4, 6, 3], ["relu", "identity"], seed=11)
        xs = np.random.Generator(np.random.PCG64(5)).uniform(-1, 1, (7, 4))
        ys, _ = nc.forward_batch(net, xs)
        for i in range(7):
            yi, _ = nc.forward(net, xs[i])
            assert np.allclose(yi, ys[i], rtol=0, atol=1e-12)


class TestAdam:
    def test_zero_gradient_from_fresh_state_keeps_params(self):
        params = [np.array([1.0, -2.0])]
        st = nc.adam_init(params, lr=0.1)
        new = nc.adam_step(st, params, [np.zeros(2)])
        assert np.array_equal(new[0], params[0])

    def test_zero_gradient_decays_moments(self):
        params = [np.array([1.0, -2.0])]
        st = nc.adam_init(params, lr=0.1)
        st.m = [np.array([0.5, 0.5])]
        st.v = [np.array([0.25, 0.25])]
        nc.adam_step(st, params, [np.zeros(2)])
        assert np.allclose(st.m[0], 0.9 * 0.5)
        assert np.allclose(st.v[0], 0.999 * 0.25)

    def test_first_step_scalar_hand_computation(self):
        # one scalar, grad g: m_hat = g, v_hat = g^2,
        # update = -lr * g / (|g| + eps)
        g = 0.37
        lr = 1e-2
        params = [np.array([2.0])]
        st = nc.adam_init(params, lr=lr)
        new = nc.adam_step(st, params, [np.array([g])])
        expected = 2.0 - lr * g / (abs(g) + st.eps)
        assert new[0][0] == pytest.approx(expected, abs=1e-15)
        assert st.step == 1

    def test_descends_convex_quadratic(self):
        p = [np.array([3.0])]
        st = nc.adam_init(p, lr=0.05)

        def f(params):
            return float(params[0][0] ** 2)

        v0 = f(p)
        for _ in range(2):
            g = [np.array([2.0 * p[0][0]])]
            p = nc.adam_step(st, p, g)
        assert f(p) < v0

    def test_lr_zero_is_identity(self):
        params = [np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([5.0])]
        st = nc.adam_init(params, lr=0.0)
        grads = [np.ones((2, 2)), np.ones(1)]
        new = nc.adam_step(st, params, grads)
        for a, b in zip(new, params):
            assert np.array_equal(a, b)

    def test_nonfinite_gradient_aborts(self):
        params = [np.array([1.0])]
        st = nc.adam_init(params, lr=0.1)
        with pytest.raises(nc.NumericsError):
            nc.adam_step(st, params, [np.array([np.nan])])
        assert st.step == 0


class TestFiniteDiff:
    def test_square(self):
        g = nc.finite_diff_grad(lambda p: float(p[0][0] ** 2),
                                [np.array([3.0])], step=1e-5)
        assert g[0][0] == pytest.approx(6.0, abs=1e-8)

    def test_constant(self):
        g = nc.finite_diff_grad(lambda p: 1.0, [np.zeros(4)], step=1e-5)
        assert np.array_equal(g[0], np.zeros(4))

    def test_product(self):
        g = nc.finite_diff_grad(lambda p: float(p[0][0] * p[0][1]),
                                [np.array([2.0, 5.0])], step=1e-5)
        assert g[0][0] == pytest.approx(5.0, abs=1e-7)
        assert g[0][1] == pytest.approx(2.0, abs=1e-7)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = make_net([5, 4, 2], ["relu", "identity"], seed=9)
        path = tmp_path / "net.ckpt"
        nc.save_checkpoint(path, net, rng_seed=9, step_count=123)
        loaded, header, trailing = nc.load_checkpoint(path)
        assert header["layer_sizes"] == [5, 4, 2]
        assert header["step_count"] == 123
        assert trailing == {}
        for a, b in zip(loaded.parameters(), net.parameters()):
            assert np.allclose(a, b, atol=1e-6)  # float32 round trip

    def test_trailing_arrays(self, tmp_path):
        net = make_net([3, 2], ["identity"], seed=1)
        extra = np.array([-0.5, 0.25, 1.0, 0.0])
        path = tmp_path / "net.ckpt"
        nc.save_checkpoint(path, net, 1, 0, trailing=[("log_std", extra)])
        _, header, trailing = nc.load_checkpoint(path)
        assert header["trailing"] == [["log_std", 4]]
        assert np.allclose(trailing["log_std"], extra, atol=1e-7)

    def test_deterministic_bytes(self, tmp_path):
        net = make_net([4, 3], ["tanh"], seed=2)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        nc.save_checkpoint(p1, net, 2, 7)
        nc.save_checkpoint(p2, net, 2, 7)
        assert p1.read_bytes() == p2.read_bytes()

    def test_state_blob_round_trip(self, tmp_path):
        arrays = [("a", np.arange(6, dtype=float).reshape(2, 3)),
                  ("b", np.array([1.5]))]
        path = tmp_path / "state.bin"
        nc.save_state_blob(path, {"step": 4}, arrays)
        meta, loaded = nc.load_state_blob(path)
        assert meta == {"step": 4}
        assert np.array_equal(loaded["a"], arrays[0][1])
        assert np.array_equal(loaded["b"], arrays[1][1])


def test_derive_seed_stable_and_distinct():
    a = nc.derive_seed(123, 0, 1)
    assert a == nc.derive_seed(123, 0, 1)
    assert a != nc.derive_seed(123, 1, 0)
    assert a != nc.derive_seed(124, 0, 1)
