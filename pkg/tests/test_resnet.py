import math

import numpy as np
import pytest

from featureflow.config_io import Dataset
from featureflow.funcs import get_activation
from featureflow.resnet import (ResCache, ResNet, ShapeMismatch, resnet_backward, resnet_forward, resnet_loss,
                                resnet_step, skip_perturbation, train_resnet)
from oracles import central_difference, random_coords, resnet_forward_loop


def random_resnet(d=3, m=6, L=4, seed=0, scale=1.0, h2="tanh"):
    rng = np.random.default_rng(seed)
    V = [rng.standard_normal((d, m))] + [scale * rng.standard_normal((m, m)) for _ in range(L - 1)]
    V.append(rng.standard_normal((m, 1)))
    return ResNet(V, "tanh", h2)


class TestForward:
    def test_zero_residual_weights(self, toy_data):
        net = random_resnet()
        net = ResNet([net.V[0]] + [np.zeros_like(W) for W in net.V[1:-1]] + [net.V[-1]])
        cache = resnet_forward(net, toy_data)
        assert all(np.all(a == 0) for a in cache.alphas)
        assert all(np.array_equal(b, cache.betas[0]) for b in cache.betas)

    def test_scalar_chain(self):
        net = ResNet([np.ones((1, 1))] * 3)
        cache = resnet_forward(net, Dataset.from_arrays([[1.0]], [0.0]))
        assert cache.betas[0][0, 0] == 1.0
        assert cache.alphas[0][0, 0] == pytest.approx(math.tanh(1.0), abs=1e-15)
        assert cache.betas[1][0, 0] == pytest.approx(math.tanh(math.tanh(1.0)) + 1, abs=1e-15)
        assert cache.out[0] == pytest.approx(math.tanh(math.tanh(math.tanh(1.0)) + 1), abs=1e-15)

    def test_loop_oracle(self, toy_data):
        net = random_resnet()
        B, A, out = resnet_forward_loop(net.V, np.array(toy_data.X))
        cache = resnet_forward(net, toy_data)
        assert max(np.max(np.abs(a - b)) for a, b in zip(cache.betas, B)) < 1e-12
        assert max(np.max(np.abs(a - b)) for a, b in zip(cache.alphas, A)) < 1e-12
        assert np.max(np.abs(cache.out - out)) < 1e-12

    def test_shapes(self, toy_data):
        with pytest.raises(ShapeMismatch):
            ResNet([np.ones((3, 4)), np.ones((4, 5)), np.ones((4, 1))])
        with pytest.raises(ShapeMismatch):
            resnet_forward(random_resnet(d=2), toy_data)


class TestBackward:
    def test_at_minimum(self, toy_data):
        net = random_resnet()
        cache = resnet_forward(net, toy_data)
        grads = resnet_backward(net, cache, toy_data.with_labels(cache.out), "pseudo_huber(1.0)")
        assert all(np.max(np.abs(g)) < 1e-12 for g in grads.G)

    def test_scalar_chain_rule(self):
        net = ResNet([np.ones((1, 1))] * 3)
        data = Dataset.from_arrays([[1.0]], [0.0])
        grads = resnet_backward(net, resnet_forward(net, data), data, "squared")
        t = math.tanh
        dt = lambda x: 1 - math.tanh(x) ** 2  # noqa: E731
        b1 = 1.0
        a2 = t(b1)
        b2 = t(a2) + b1
        out = t(b2)
        D = 2 * out
        Db2 = D * dt(b2)
        Da2 = Db2 * dt(a2)
        Db1 = Da2 * dt(b1) + Db2  # residual adds the identity path
        expected = [Db1, Da2 * t(b1), D * t(b2)]
        assert np.allclose([g[0, 0] for g in grads.G], expected, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_difference(self, toy_data, seed):
        net = random_resnet(seed=seed)
        loss = "pseudo_huber(1.0)"
        grads = resnet_backward(net, resnet_forward(net, toy_data), toy_data, loss)
        coords = random_coords(net.V, 50, np.random.default_rng(seed))
        fd = central_difference(lambda V: resnet_loss(resnet_forward(ResNet(V), toy_data), toy_data.y, loss),
                                net.V, coords)
        an = np.array([grads.G[l][i, j] for l, i, j in coords])
        assert np.max(np.abs(an - fd) / np.maximum(np.abs(fd), 1e-6)) < 1e-5


class TestStepAndTrain:
    def test_zero_gradient(self):
        net = random_resnet()
        new = resnet_step(net, [np.zeros_like(W) for W in net.V], 0.5)
        assert all(np.array_equal(a, b) for a, b in zip(new.V, net.V))

    def test_scales(self):
        net = ResNet([np.zeros((3, 4)), np.zeros((4, 4)), np.zeros((4, 1))])
        new = resnet_step(net, [np.ones((3, 4)), np.ones((4, 4)), np.ones((4, 1))], 1.0)
        assert [float(W[0, 0]) for W in new.V] == [-12.0, -16.0, -4.0]

    def test_one_step_composition(self, toy_data):
        net = random_resnet()
        final, _ = train_resnet(net, toy_data, "squared", 0.01, 1)
        manual = resnet_step(net, resnet_backward(net, resnet_forward(net, toy_data), toy_data, "squared"), 0.01)
        assert all(np.array_equal(a, b) for a, b in zip(final.V, manual.V))

    def test_deterministic(self, toy_data):
        a = train_resnet(random_resnet(), toy_data, "pseudo_huber(1.0)", 0.01, 20)[1]
        b = train_resnet(random_resnet(), toy_data, "pseudo_huber(1.0)", 0.01, 20)[1]
        assert a == b


class TestSkip:
    def test_zero_residual(self, toy_data):
        net = random_resnet(scale=0.0)
        assert skip_perturbation(resnet_forward(net, toy_data)) == 0.0

    def test_bounded_for_any_weights(self, toy_data):
        for seed in range(5):
            net = random_resnet(seed=seed, scale=1e3)
            assert skip_perturbation(resnet_forward(net, toy_data)) <= get_activation("tanh").L1

    def test_trajectory_scan(self, toy_data):
        _, recs = train_resnet(random_resnet(m=16, scale=3.0), toy_data, "pseudo_huber(1.0)", 0.01, 100)
        assert max(r.stats["skip"] for r in recs) <= 1.0

    def test_increments_match_differences(self, toy_data):
        cache = resnet_forward(random_resnet(seed=3), toy_data)
        plain = ResCache(cache.betas, cache.alphas, cache.out)
        assert skip_perturbation(plain) == pytest.approx(skip_perturbation(cache), abs=1e-15)

    def test_needs_two_layers(self):
        with pytest.raises(ValueError):
            skip_perturbation(ResCache([np.zeros((2, 2))], [], np.zeros(2)))
