import numpy as np
import pytest

from tileattrib import cnn
from tileattrib.cnn import (ArchitectureSpec, Conv2d, ConvLayerSpec, Dense,
                            GlobalAvgPool, MaxPool2x2, Network, Parameters,
                            ReLU, Sigmoid, Tensor, binary_cross_entropy,
                            binary_cross_entropy_grad, conv2d, dense,
                            init_parameters, load_bundle, make_spec, maxpool2x2,
                            relu, save_bundle, sigmoid)

from gradcheck import (EPS, TOL, check_op, fd_gradient, network_signature,
                       rel_error, same_signature)

N_TRIALS = 20


class TestForwardSemantics:
    def test_conv_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 1, 6, 6))
        w = np.ones((1, 1, 1, 1))
        out = conv2d(x, w, np.zeros(1))
        assert np.allclose(out, x)

    def test_conv_box_kernel_on_constant(self):
        x = np.full((1, 1, 8, 8), 3.0)
        w = np.ones((1, 1, 3, 3))
        out = conv2d(x, w, np.zeros(1))
        assert out.shape == (1, 1, 6, 6)
        assert np.allclose(out, 27.0)  # 9 * c

    def test_conv_shape_mismatch(self):
        with pytest.raises(ValueError):
            conv2d(np.zeros((1, 2, 8, 8)), np.zeros((1, 3, 3, 3)), np.zeros(1))

    def test_relu_values(self):
        assert np.array_equal(relu(np.array([-1.0, 2.0])), [0.0, 2.0])

    def test_maxpool_constant_block(self):
        assert np.all(maxpool2x2(np.full((1, 1, 4, 4), 5.0)) == 5.0)

    def test_maxpool_tie_routes_to_first(self):
        layer = MaxPool2x2()
        x = np.full((1, 1, 2, 2), 1.0)
        layer.forward(x)
        dx = layer.backward(np.ones((1, 1, 1, 1)))
        assert dx[0, 0, 0, 0] == 1.0
        assert dx[0, 0, 0, 1] == dx[0, 0, 1, 0] == dx[0, 0, 1, 1] == 0.0

    def test_sigmoid_at_zero(self):
        assert sigmoid(np.array([0.0]))[0] == 0.5

    def test_dense_shape_mismatch(self):
        with pytest.raises(ValueError):
            dense(np.zeros((2, 3)), np.zeros((4, 1)), np.zeros(1))

    def test_bce_at_half(self):
        loss = binary_cross_entropy(np.full(8, 0.5), np.tile([0, 1], 4))
        assert loss == pytest.approx(np.log(2), abs=1e-7)

    def test_bce_perfect_prediction(self):
        probs = np.array([1.0, 0.0, 1.0])
        labels = np.array([1, 0, 1])
        assert binary_cross_entropy(probs, labels) <= 1e-6

    def test_bce_rejects_bad_labels(self):
        with pytest.raises(ValueError):
            binary_cross_entropy(np.array([0.5]), np.array([2]))


class TestGradients:
    """Every differentiable op against central finite differences (float64,
    eps = 1e-3, max relative error < 1e-3), >= 20 randomized trials each."""

    def test_conv_gradients(self):
        rng = np.random.default_rng(10)
        for trial in range(N_TRIALS):
            c, o, k = rng.integers(1, 4), rng.integers(1, 4), rng.choice([1, 2, 3])
            h = int(rng.integers(k, k + 5))
            stride = int(rng.integers(1, 3))
            x = rng.normal(size=(2, c, h, h))
            w = Tensor(rng.normal(scale=0.5, size=(o, c, k, k)).astype(np.float32))
            b = Tensor(rng.normal(scale=0.5, size=o).astype(np.float32))
            w.values = w.values.astype(np.float64)
            b.values = b.values.astype(np.float64)
            layer = Conv2d(w, b, stride=stride)
            out = layer.forward(x)
            dout = rng.normal(size=out.shape)
            w.grad = b.grad = None
            dx = layer.backward(dout)

            def loss():
                return float((Conv2d(w, b, stride=stride).forward(x) * dout).sum())

            assert rel_error(dx, fd_gradient(loss, x)) < TOL
            assert rel_error(w.grad, fd_gradient(loss, w.values)) < TOL
            assert rel_error(b.grad, fd_gradient(loss, b.values)) < TOL

    def test_relu_gradient(self):
        rng = np.random.default_rng(11)
        for _ in range(N_TRIALS):
            x = rng.normal(size=(3, 7))
            x = np.where(np.abs(x) < 10 * EPS, x + 0.1, x)  # stay off the kink
            layer = ReLU()
            dout = rng.normal(size=x.shape)
            err = check_op(lambda: layer.forward(x),
                           lambda d: layer.backward(d), x, dout)
            assert err < TOL

    def test_maxpool_gradient(self):
        rng = np.random.default_rng(12)
        trials = 0
        while trials < N_TRIALS:
            x = rng.normal(size=(2, 2, 4, 6))
            # FD is only valid when no window has a near-tie
            v = x.reshape(2, 2, 2, 2, 3, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
            gaps = np.sort(v, axis=1)
            if np.min(gaps[:, 3] - gaps[:, 2]) < 10 * EPS:
                continue
            trials += 1
            layer = MaxPool2x2()
            dout = rng.normal(size=(2, 2, 2, 3))
            err = check_op(lambda: layer.forward(x),
                           lambda d: layer.backward(d), x, dout)
            assert err < TOL

    def test_dense_gradients(self):
        rng = np.random.default_rng(13)
        for _ in range(N_TRIALS):
            f, o = int(rng.integers(1, 8)), int(rng.integers(1, 5))
            x = rng.normal(size=(3, f))
            w = Tensor(rng.normal(size=(f, o)))
            b = Tensor(rng.normal(size=o))
            layer = Dense(w, b)
            out = layer.forward(x)
            dout = rng.normal(size=out.shape)
            w.grad = b.grad = None
            dx = layer.backward(dout)

            def loss():
                return float((Dense(w, b).forward(x) * dout).sum())

            assert rel_error(dx, fd_gradient(loss, x)) < TOL
            assert rel_error(w.grad, fd_gradient(loss, w.values)) < TOL
            assert rel_error(b.grad, fd_gradient(loss, b.values)) < TOL

    def test_sigmoid_gradient(self):
        rng = np.random.default_rng(14)
        for _ in range(N_TRIALS):
            x = rng.normal(size=(4, 3))
            layer = Sigmoid()
            dout = rng.normal(size=x.shape)
            err = check_op(lambda: layer.forward(x),
                           lambda d: layer.backward(d), x, dout)
            assert err < TOL

    def test_global_avg_pool_gradient(self):
        rng = np.random.default_rng(15)
        for _ in range(N_TRIALS):
            x = rng.normal(size=(2, 3, 4, 4))
            layer = GlobalAvgPool()
            dout = rng.normal(size=(2, 3))
            err = check_op(lambda: layer.forward(x),
                           lambda d: layer.backward(d), x, dout)
            assert err < TOL

    def test_bce_gradient(self):
        rng = np.random.default_rng(16)
        for _ in range(N_TRIALS):
            probs = rng.uniform(0.05, 0.95, size=12)
            labels = rng.integers(0, 2, size=12)
            analytic = binary_cross_entropy_grad(probs, labels)
            numeric = fd_gradient(
                lambda: binary_cross_entropy(probs, labels), probs)
            assert rel_error(analytic, numeric) < TOL


def architecture_gradcheck(variant, side, seed, n_coords=2, max_attempts=200,
                           max_input_draws=6):
    """FD check of sampled parameter and input coordinates through the whole
    network + loss. A coordinate whose +/-eps perturbation changes any ReLU
    mask or pool argmax is discarded (FD is invalid across a kink); if an
    input batch leaves a parameter tensor with no usable coordinate, a fresh
    batch is drawn for that tensor."""
    rng = np.random.default_rng(seed)
    spec = make_spec(variant, side)
    params = init_parameters(spec, seed)
    net = Network(spec, params)
    y = np.array([0, 1])

    def fresh_batch():
        x = rng.random((2, 1, side, side)).astype(np.float64)
        params.zero_grads()
        _, _, dx = net.forward_backward(x, y)
        return x, dx, network_signature(net)

    def fd_at(x, center, arr, grad_arr, i):
        orig = arr[i]
        arr[i] = orig + EPS
        n2 = Network(spec, params)
        lp = binary_cross_entropy(n2.forward(x), y)
        sp = network_signature(n2)
        arr[i] = orig - EPS
        n3 = Network(spec, params)
        lm = binary_cross_entropy(n3.forward(x), y)
        sm = network_signature(n3)
        arr[i] = orig
        if not (same_signature(center, sp) and same_signature(center, sm)):
            return None
        return rel_error(grad_arr[i], (lp - lm) / (2 * EPS))

    worst = 0.0
    x, dx, center = fresh_batch()
    names = list(params.names()) + ["input"]
    for name in names:
        checked = 0
        for draw in range(max_input_draws):
            if name == "input":
                arr, grad_arr = x.reshape(-1), dx.reshape(-1)
            else:
                arr = params[name].values.reshape(-1)
                grad_arr = params[name].grad.reshape(-1)
            for _ in range(max_attempts):
                err = fd_at(x, center, arr, grad_arr, int(rng.integers(arr.size)))
                if err is None:
                    continue
                checked += 1
                worst = max(worst, err)
                if checked >= n_coords:
                    break
            if checked >= n_coords:
                break
            x, dx, center = fresh_batch()
        if checked == 0:
            # every sampled coordinate of this tensor crosses a kink within
            # +/-eps for this parameter draw; FD is inconclusive here
            return None
    return worst


def run_architecture_gradchecks(variant, side, n_required=3, max_seeds=10):
    """Check randomly initialized networks until n_required are conclusive
    (every tensor had kink-free coordinates). Returns the worst error."""
    worst = 0.0
    conclusive = 0
    for seed in range(max_seeds):
        err = architecture_gradcheck(variant, side, seed)
        if err is None:
            continue
        conclusive += 1
        worst = max(worst, err)
        if conclusive >= n_required:
            return worst
    raise AssertionError(f"only {conclusive} conclusive networks")


class TestArchitectures:
    def test_five_layer_gradcheck(self):
        assert run_architecture_gradchecks("five_layer", 78) < TOL

    def test_eight_layer_gradcheck(self):
        assert run_architecture_gradchecks("eight_layer", 16) < TOL

    def test_variant_layer_counts(self):
        assert len(make_spec("five_layer").conv_layers) == 5
        assert len(make_spec("eight_layer").conv_layers) == 8
        with pytest.raises(ValueError):
            ArchitectureSpec("five_layer", 128,
                             make_spec("eight_layer").conv_layers)

    def test_eight_layer_kernel_ordering(self):
        bad = tuple(ConvLayerSpec(3, 16, pool=False) for _ in range(8))
        with pytest.raises(ValueError):
            ArchitectureSpec("eight_layer", 128, bad)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            make_spec("six_layer")


class TestNetworkForward:
    def test_zero_final_layer_gives_half(self):
        spec = make_spec("five_layer", 96)
        params = init_parameters(spec, 0)
        params["dense_w"].values[:] = 0.0
        params["dense_b"].values[:] = 0.0
        net = Network(spec, params)
        x = np.random.default_rng(0).random((3, 1, 96, 96), dtype=np.float32)
        assert np.all(net.forward(x) == 0.5)

    def test_batch_independence(self):
        spec = make_spec("five_layer", 96)
        net = Network(spec, init_parameters(spec, 1))
        x = np.random.default_rng(1).random((5, 1, 96, 96), dtype=np.float32)
        batch = net.forward(x)
        singles = np.array([net.forward(x[i:i + 1])[0] for i in range(5)])
        assert np.allclose(batch, singles, atol=1e-6)

    def test_forward_deterministic(self):
        spec = make_spec("eight_layer", 32)
        net = Network(spec, init_parameters(spec, 2))
        x = np.random.default_rng(2).random((4, 1, 32, 32), dtype=np.float32)
        a = net.forward(x)
        b = net.forward(x)
        assert np.array_equal(a, b)

    def test_outputs_in_unit_interval(self):
        spec = make_spec("five_layer", 96)
        net = Network(spec, init_parameters(spec, 3))
        x = np.random.default_rng(3).random((6, 1, 96, 96), dtype=np.float32)
        p = net.forward(x)
        assert np.all(p >= 0) and np.all(p <= 1)

    def test_wrong_input_side_rejected(self):
        spec = make_spec("five_layer", 96)
        net = Network(spec, init_parameters(spec, 0))
        with pytest.raises(ValueError):
            net.forward(np.zeros((1, 1, 64, 64), dtype=np.float32))


class TestBundle:
    def test_round_trip(self, tmp_path):
        spec = make_spec("eight_layer", 32)
        params = init_parameters(spec, 7)
        meta = {"seed": 7, "density": 25.0, "tile_side": 128,
                "pos_overlap": 0.94, "neg_overlap": 0.92}
        path = tmp_path / "m.bin"
        save_bundle(path, spec, params, meta)
        spec2, params2, meta2 = load_bundle(path)
        assert spec2 == spec
        assert meta2 == meta
        for n in params.names():
            assert np.array_equal(params[n].values, params2[n].values)

    def test_deterministic_bytes(self, tmp_path):
        spec = make_spec("five_layer", 96)
        params = init_parameters(spec, 1)
        save_bundle(tmp_path / "a.bin", spec, params, {"seed": 1})
        save_bundle(tmp_path / "b.bin", spec, params, {"seed": 1})
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"not a bundle")
        with pytest.raises(ValueError):
            load_bundle(p)


def test_tensor_invariants():
    with pytest.raises(ValueError):
        Tensor(np.zeros(3), grad=np.zeros(4))
