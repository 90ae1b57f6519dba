"""Value-network checks: hand evaluation, input-gradient and weight-gradient
finite-difference oracles, determinism, checkpoint round trip."""

import numpy as np
import pytest

from pdepolicy import tape as tp
from pdepolicy.network import NetInput, ValueNetwork


def random_net(width, depth, d, q, seed):
    """Network with every weight randomized (init() zeroes the head)."""
    net = ValueNetwork.init(width, depth, d, q, seed)
    rng = np.random.default_rng(seed + 1000)
    for k in net.weights:
        net.weights[k] = rng.uniform(-0.8, 0.8, size=net.weights[k].shape) / np.sqrt(width)
    return net


def pack(net):
    names = net.param_names
    return np.concatenate([net.weights[k].ravel() for k in names]), names


def unpack(net, theta, names):
    out = net.copy()
    pos = 0
    for k in names:
        size = out.weights[k].size
        out.weights[k] = theta[pos : pos + size].reshape(out.weights[k].shape)
        pos += size
    return out


def rel_err(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-12)


class TestForward:
    def test_zero_head_gives_zero(self):
        net = ValueNetwork.init(8, 2, d=5, q=2, seed=0)
        rng = np.random.default_rng(1)
        for _ in range(5):
            inp = NetInput(rng.uniform(0, 1), rng.standard_normal(5), rng.standard_normal(2))
            assert net.forward(inp) == 0.0

    def test_hand_evaluation_scalar_width(self):
        # width 1, depth 1, all K and b zero, head 1:
        # h1 = sigma(0) = log 2, output = h1 + sigma(0) = 2 log 2
        net = ValueNetwork.init(1, 1, d=1, q=1, seed=0)
        for k in net.weights:
            net.weights[k] = np.zeros_like(net.weights[k])
        net.weights["w"] = np.ones(1)
        inp = NetInput(0.3, np.array([0.5]), np.array([-0.2]))
        assert np.isclose(net.forward(inp), 2.0 * np.log(2.0), atol=1e-14)

    def test_taylor_remainder_is_second_order(self):
        net = random_net(6, 3, d=4, q=2, seed=3)
        rng = np.random.default_rng(4)
        x = rng.standard_normal(7)
        phi0, g0 = net.grad_batch(x[None, :])
        direction = rng.standard_normal(7)
        direction /= np.linalg.norm(direction)
        remainders = []
        for eps in (1e-2, 1e-3):
            phi1 = net.forward_batch((x + eps * direction)[None, :])[0]
            remainders.append(abs(phi1 - phi0[0] - eps * g0[0] @ direction))
        # remainder should shrink ~quadratically when eps shrinks 10x
        assert remainders[1] < 0.05 * remainders[0]

    def test_dimension_mismatch(self):
        net = ValueNetwork.init(4, 1, d=3, q=1, seed=0)
        with pytest.raises(ValueError):
            net.forward_batch(np.zeros((1, 9)))

    def test_forward_deterministic(self):
        net = random_net(8, 2, d=5, q=2, seed=9)
        inp = NetInput(0.4, np.arange(5.0), np.array([0.1, 0.2]))
        assert net.forward(inp) == net.forward(inp)


class TestGradInput:
    def test_zero_network_zero_gradient(self):
        net = ValueNetwork.init(8, 2, d=5, q=2, seed=0)
        ds, gz, gy = net.grad_input(NetInput(0.3, np.ones(5), np.ones(2)))
        assert ds == 0.0
        assert np.all(gz == 0.0) and np.all(gy == 0.0)

    def test_matches_fd_of_forward(self):
        net = random_net(8, 3, d=6, q=2, seed=11)
        rng = np.random.default_rng(12)
        for _ in range(5):
            x = rng.uniform(-1, 1, size=9)
            _, g = net.grad_batch(x[None, :])
            fd = np.zeros(9)
            for k in range(9):
                e = np.zeros(9)
                e[k] = 1e-5
                fd[k] = (
                    net.forward_batch((x + e)[None, :])[0]
                    - net.forward_batch((x - e)[None, :])[0]
                ) / 2e-5
            assert rel_err(g[0], fd) < 1e-6

    def test_component_split(self):
        net = random_net(5, 2, d=4, q=3, seed=13)
        inp = NetInput(0.7, np.array([0.1, 0.2, 0.3, 0.4]), np.array([1.0, 2.0, 3.0]))
        ds, gz, gy = net.grad_input(inp)
        _, g = net.grad_batch(inp.stacked()[None, :])
        assert np.isclose(ds, g[0, 0])
        assert np.allclose(gz, g[0, 1:5])
        assert np.allclose(gy, g[0, 5:])


class TestTapePaths:
    def test_tape_forward_equals_numpy(self):
        net = random_net(6, 2, d=4, q=2, seed=21)
        rng = np.random.default_rng(22)
        a, alpha = rng.standard_normal(3), 0.4
        y = rng.standard_normal(2)
        s = 0.25
        tape = tp.Tape()
        handle = net.bind(tape)
        phi = handle.forward(s, a, np.array(alpha), y)
        ref = net.forward(NetInput(s, np.concatenate([a, [alpha]]), y))
        assert np.isclose(float(phi.value), ref, atol=1e-14)

    def test_tape_grads_equal_numpy(self):
        net = random_net(6, 2, d=4, q=2, seed=23)
        rng = np.random.default_rng(24)
        a, alpha = rng.standard_normal(3), 0.6
        y = rng.standard_normal(2)
        s = 0.75
        tape = tp.Tape()
        handle = net.bind(tape)
        phi, dphi_ds, grad_a, grad_alpha, grad_y = handle.forward_and_grads(
            s, a, np.array(alpha), y
        )
        ds_ref, gz_ref, gy_ref = net.grad_input(
            NetInput(s, np.concatenate([a, [alpha]]), y)
        )
        assert np.isclose(float(dphi_ds.value), ds_ref)
        assert np.allclose(grad_a.value, gz_ref[:-1])
        assert np.isclose(float(grad_alpha.value), gz_ref[-1])
        assert np.allclose(grad_y.value, gy_ref)

    def test_weight_gradient_of_loss_on_forward_matches_fd(self):
        """d/dtheta of phi(s, z, y) via the tape vs finite differences."""
        net = random_net(4, 2, d=4, q=1, seed=31)
        x_a = np.array([0.3, -0.2, 0.5])
        alpha, s = 0.4, 0.6
        y = np.array([0.15])
        theta0, names = pack(net)

        def loss(theta):
            m = unpack(net, theta, names)
            return m.forward(NetInput(s, np.concatenate([x_a, [alpha]]), y))

        tape = tp.Tape()
        handle = net.bind(tape)
        phi = handle.forward(s, x_a, np.array(alpha), y)
        grads = handle.gradients(tape.backward(phi))
        got = np.concatenate([grads[k].ravel() for k in names])

        fd = np.zeros_like(theta0)
        for k in range(theta0.size):
            e = np.zeros_like(theta0)
            e[k] = 1e-5
            fd[k] = (loss(theta0 + e) - loss(theta0 - e)) / 2e-5
        assert rel_err(got, fd) < 1e-5

    def test_weight_gradient_through_input_gradient_matches_fd(self):
        """The input gradient is itself differentiable w.r.t. the weights."""
        net = random_net(4, 2, d=4, q=1, seed=33)
        rng = np.random.default_rng(34)
        x_a = rng.standard_normal(3)
        alpha, s = 0.3, 0.2
        y = np.array([0.2])
        v = rng.standard_normal(3)
        v_alpha = rng.standard_normal()
        theta0, names = pack(net)

        def loss(theta):
            m = unpack(net, theta, names)
            _, gz, _ = m.grad_input(NetInput(s, np.concatenate([x_a, [alpha]]), y))
            return gz[:-1] @ v + gz[-1] * v_alpha

        tape = tp.Tape()
        handle = net.bind(tape)
        _, _, grad_a, grad_alpha, _ = handle.forward_and_grads(s, x_a, np.array(alpha), y)
        root = tp.add(tp.dot(grad_a, v), tp.mul(grad_alpha, v_alpha))
        grads = handle.gradients(tape.backward(root))
        got = np.concatenate([grads[k].ravel() for k in names])

        fd = np.zeros_like(theta0)
        for k in range(theta0.size):
            e = np.zeros_like(theta0)
            e[k] = 1e-5
            fd[k] = (loss(theta0 + e) - loss(theta0 - e)) / 2e-5
        assert rel_err(got, fd) < 1e-5


class TestInit:
    def test_paper_scale_config(self):
        net = ValueNetwork.init(64, 4, d=1025, q=3, seed=0)
        assert net.width == 64
        assert net.depth == 4
        assert net.weights["K0"].shape == (64, 1 + 1025 + 3)
        assert net.weights["K4"].shape == (64, 64)

    def test_seed_reproducible(self):
        a = ValueNetwork.init(16, 2, d=10, q=2, seed=123)
        b = ValueNetwork.init(16, 2, d=10, q=2, seed=123)
        for k in a.weights:
            assert np.array_equal(a.weights[k], b.weights[k])

    def test_origin_value_bounded(self):
        net = ValueNetwork.init(64, 4, d=20, q=2, seed=5)
        phi = net.forward(NetInput(0.0, np.zeros(20), np.zeros(2)))
        assert np.isfinite(phi) and abs(phi) < 10.0

    def test_invalid_sizes_rejected(self):
        with pytest.raises(ValueError):
            ValueNetwork.init(0, 2, d=3, q=1, seed=0)


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        net = random_net(8, 3, d=12, q=2, seed=77)
        path = tmp_path / "weights.npz"
        net.save(path, metadata={"seed": 77, "setup": "horizontal"})
        loaded, meta = ValueNetwork.load(path)
        assert meta["seed"] == 77
        assert meta["width"] == 8
        for k in net.weights:
            assert np.array_equal(net.weights[k], loaded.weights[k])
