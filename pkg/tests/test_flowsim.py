import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from featureflow.config_io import Dataset, make_synthetic_dataset
from featureflow.dnn import DnnNet, NonFiniteLoss, dnn_forward, train_dnn
from featureflow.flowsim import evolve, spread_observer, step_refinement, weight_deviation, width_refinement
from featureflow.meanfield import init_dnn_regression, init_resnet_regression, init_resnet_zero
from featureflow.resnet import ResNet, train_resnet


def random_dnn(seed, d, widths, act="tanh"):
    rng = np.random.default_rng(seed)
    full = [d] + widths + [1]
    return DnnNet([rng.standard_normal((a, b)) for a, b in zip(full[:-1], full[1:])], act)


class TestEulerIdentity:
    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4), st.integers(1, 3), st.integers(2, 9),
           st.sampled_from(["pseudo_huber(1.0)", "squared", "logistic"]), st.floats(1e-3, 0.2))
    @settings(max_examples=20, deadline=None)
    def test_dnn(self, seed, d, L, m, loss, eta):
        data = make_synthetic_dataset(3, d, seed % 1000)
        net = random_dnn(seed, d, [m] * L)
        final, recs = train_dnn(net, data, loss, eta, 15)
        traj = evolve(net, data, loss, eta, 15)
        assert [r.loss for r in recs] == list(traj.losses)
        assert all(np.array_equal(a, b) for a, b in zip(final.weights, traj.final.weights))

    @given(st.integers(0, 2 ** 32 - 1), st.integers(2, 4), st.integers(2, 9), st.floats(1e-3, 0.2))
    @settings(max_examples=15, deadline=None)
    def test_resnet(self, seed, L, m, eta):
        data = make_synthetic_dataset(3, 2, seed % 1000)
        net = init_resnet_regression(data, m + 3, L, 1.0, seed)
        final, recs = train_resnet(net, data, "pseudo_huber(1.0)", eta, 15)
        traj = evolve(net, data, "pseudo_huber(1.0)", eta, 15)
        assert [r.loss for r in recs] == list(traj.losses)
        assert all(np.array_equal(a, b) for a, b in zip(final.V, traj.final.V))

    def test_unequal_widths(self, toy_data):
        net = random_dnn(4, 3, [5, 9, 2])
        final, _ = train_dnn(net, toy_data, "squared", 0.05, 30)
        traj = evolve(net, toy_data, "squared", 0.05, 30)
        assert all(np.array_equal(a, b) for a, b in zip(final.weights, traj.final.weights))


class TestEvolve:
    def test_constant_at_minimum(self, toy_data):
        net = random_dnn(0, 3, [6, 6])
        fitted = toy_data.with_labels(dnn_forward(net, toy_data).out)
        traj = evolve(net, fitted, "pseudo_huber(1.0)", 0.1, 10, keep_snapshots=True)
        assert np.all(traj.losses == 0.0)
        assert all(np.array_equal(s[i], net.weights[i]) for s in traj.snapshots for i in range(3))

    def test_times_increasing(self, toy_data):
        traj = evolve(random_dnn(1, 3, [4]), toy_data, "squared", 0.01, 5)
        assert np.all(np.diff(traj.times) > 0)
        assert np.allclose(traj.times, 0.01 * np.arange(6))

    def test_observables(self, toy_data):
        traj = evolve(random_dnn(1, 3, [4, 4]), toy_data, "squared", 0.01, 5, observe=spread_observer([1, 2]))
        assert set(traj.observables) == {"spread_1", "spread_2"}
        res = evolve(init_resnet_zero(toy_data, 8, 3, 1.0, 0), toy_data, "squared", 0.01, 5)
        assert np.all(res.observables["skip"] <= 1.0)

    def test_midpoint_refinement(self, toy_data):
        net = init_dnn_regression(toy_data, [16, 16], 1.0, 0)
        devs = []
        for eta in (0.1, 0.05):
            K = int(round(1.0 / eta))
            e = evolve(net, toy_data, "pseudo_huber(1.0)", eta, K, keep_snapshots=True, record_at=[K])
            mid = evolve(net, toy_data, "pseudo_huber(1.0)", eta, K, "midpoint", keep_snapshots=True, record_at=[K])
            devs.append(weight_deviation(e.snapshots[-1], mid.snapshots[-1]))
        assert 1.5 <= devs[0] / devs[1] <= 4.5

    def test_rejects(self, toy_data):
        with pytest.raises(ValueError):
            evolve(random_dnn(0, 3, [4]), toy_data, "squared", 0.1, 0)
        with pytest.raises(ValueError):
            evolve(random_dnn(0, 3, [4]), toy_data, "squared", 0.1, 3, integrator="rk4")
        with pytest.raises(NonFiniteLoss):
            with np.errstate(over="ignore", invalid="ignore"):
                evolve(random_dnn(0, 3, [4]), toy_data, "squared", 1e300, 5)


class TestStepRefinement:
    def test_same_step(self, toy_data):
        res = step_refinement(random_dnn(0, 3, [6, 6]), toy_data, "squared", 0.5, 0.05, r=1)
        assert res.weight_deviation == 0.0 and res.loss_deviation == 0.0

    def test_first_order(self, toy_data):
        net = init_dnn_regression(toy_data, [32, 32, 32], 1.0, 0)
        a = step_refinement(net, toy_data, "pseudo_huber(1.0)", 1.0, 0.1)
        b = step_refinement(net, toy_data, "pseudo_huber(1.0)", 1.0, 0.05)
        assert 1.4 <= a.weight_deviation / b.weight_deviation <= 2.8
        assert np.all(a.weight_path >= 0) and a.weight_path[0] == 0.0

    def test_horizon_must_divide(self, toy_data):
        with pytest.raises(ValueError):
            step_refinement(random_dnn(0, 3, [4]), toy_data, "squared", 1.0, 0.3)

    def test_linear_dynamics_oracle(self):
        # out = w2 * w1 * x with identity activation and unit widths; the flow is a 2-d ODE
        X = np.array([[1.0], [0.5], [-0.8]])
        y = np.array([0.7, 0.2, -0.4])
        data = Dataset.from_arrays(X, y)
        w0 = (0.3, 0.9)

        def rhs(_, w):
            r = w[1] * w[0] * X[:, 0] - y
            return [-np.mean(2 * r * w[1] * X[:, 0]), -np.mean(2 * r * w[0] * X[:, 0])]

        exact = solve_ivp(rhs, (0, 1), w0, rtol=1e-12, atol=1e-14).y[:, -1]
        errs = []
        for eta in (0.02, 0.01, 0.005):
            net = DnnNet([np.array([[w0[0]]]), np.array([[w0[1]]])], "identity")
            final = evolve(net, data, "squared", eta, int(round(1 / eta)), record_at=[]).final
            errs.append(np.max(np.abs(np.array([final.weights[0][0, 0], final.weights[1][0, 0]]) - exact)))
        assert errs[-1] < 0.01
        assert all(1.7 <= a / b <= 2.3 for a, b in zip(errs, errs[1:]))


class TestWidthRefinement:
    def test_reference_width(self, toy_data):
        res = width_refinement(toy_data, "pseudo_huber(1.0)", 0.1, 0.5, [32, 64, 128], 128, depth=2)
        assert res.deviations[-1] == 0.0
        assert all(v >= 0 for v in res.deviations)

    def test_zero_horizon(self, toy_data):
        res = width_refinement(toy_data, "pseudo_huber(1.0)", 0.1, 0.0, [32, 64], 128, depth=2)
        loss = lambda m: float(np.mean(np.sqrt(1 + (dnn_forward(  # noqa: E731
            init_dnn_regression(toy_data, [m, m], 1.0, 0), toy_data).out - toy_data.y) ** 2) - 1))
        assert res.deviations == pytest.approx([abs(loss(32) - loss(128)), abs(loss(64) - loss(128))], abs=1e-15)
        assert res.slope is None

    def test_reference_too_narrow(self, toy_data):
        with pytest.raises(ValueError):
            width_refinement(toy_data, "squared", 0.1, 0.1, [64], 32)


def test_resnet_refinement(toy_data):
    net = init_resnet_regression(toy_data, 16, 3, 1.0, 0)
    assert isinstance(net, ResNet)
    a = step_refinement(net, toy_data, "pseudo_huber(1.0)", 0.5, 0.05)
    b = step_refinement(net, toy_data, "pseudo_huber(1.0)", 0.5, 0.025)
    assert 1.4 <= a.weight_deviation / b.weight_deviation <= 2.8
