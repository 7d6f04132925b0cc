"""Solver tests: identity, closed-form decay, convergence order, divergence bounds."""

import math

import numpy as np
import pytest

from pnodeseg import tensor as T
from pnodeseg.ode import DynamicsNet, OdeConfig, ode_forward, trajectory_divergence
from pnodeseg.tensor import Tensor


def wire_decay(channels: int, kernel_size: int = 3) -> DynamicsNet:
    """Hand-wire a dynamics net realizing dh/dt = -h.

    Uses softplus(z) - softplus(-z) = z: each layer carries (+z, -z) channel
    pairs and the output layer recombines them with a sign flip.
    """
    dyn = DynamicsNet(channels, hidden=2 * channels, kernel_size=kernel_size)
    c0 = kernel_size // 2
    for w in (dyn.w1, dyn.w2, dyn.w3):
        w.data[:] = 0.0
    for c in range(channels):
        dyn.w1.data[c, c, c0, c0] = 1.0
        dyn.w1.data[channels + c, c, c0, c0] = -1.0
        dyn.w2.data[c, c, c0, c0] = 1.0
        dyn.w2.data[c, channels + c, c0, c0] = -1.0
        dyn.w2.data[channels + c, c, c0, c0] = -1.0
        dyn.w2.data[channels + c, channels + c, c0, c0] = 1.0
        dyn.w3.data[c, c, c0, c0] = -1.0
        dyn.w3.data[c, channels + c, c0, c0] = 1.0
    return dyn


def random_dynamics(channels=4, hidden=8, seed=0, out_std=0.05) -> DynamicsNet:
    rng = np.random.default_rng(seed)
    dyn = DynamicsNet(channels, hidden=hidden, rng=rng)
    dyn.w3.data[:] = rng.normal(0.0, out_std, size=dyn.w3.shape)
    return dyn


class TestOdeForward:
    def test_zero_dynamics_is_identity_bitwise(self):
        rng = np.random.default_rng(0)
        state = Tensor(rng.normal(size=(1, 3, 5, 5)))
        dyn = DynamicsNet(3, rng=rng)  # last layer zero-initialized
        out = ode_forward(state, dyn, OdeConfig())
        assert out.data.tobytes() == state.data.tobytes()

    def test_decay_matches_exponential(self):
        rng = np.random.default_rng(1)
        state = Tensor(rng.normal(size=(1, 2, 4, 4)))
        dyn = wire_decay(2)
        out = ode_forward(state, dyn, OdeConfig(terminal_time=1.0, n_steps=4, scheme="rk4"))
        np.testing.assert_allclose(out.data, state.data * math.exp(-1.0), rtol=1e-4)

    @pytest.mark.parametrize("scheme,min_order", [("rk4", 3.5), ("euler", 0.9)])
    def test_convergence_order_on_decay(self, scheme, min_order):
        rng = np.random.default_rng(2)
        state = Tensor(rng.normal(size=(1, 2, 3, 3)))
        exact = state.data * math.exp(-1.0)
        dyn = wire_decay(2)
        errs = []
        for n in (4, 8):
            out = ode_forward(state, dyn, OdeConfig(1.0, n, scheme))
            errs.append(float(np.linalg.norm(out.data - exact)))
        order = math.log2(errs[0] / errs[1])
        assert order >= min_order

    def test_richardson_ratio_on_random_dynamics(self):
        rng = np.random.default_rng(3)
        state = Tensor(rng.normal(size=(1, 4, 6, 6)))
        dyn = random_dynamics(seed=3)
        ref = ode_forward(state, dyn, OdeConfig(1.0, 64, "rk4")).data
        err = [float(np.linalg.norm(ode_forward(state, dyn, OdeConfig(1.0, n, "rk4")).data - ref))
               for n in (4, 8)]
        assert err[0] / err[1] >= 12.0

    def test_channel_mismatch_rejected(self):
        dyn = DynamicsNet(3)
        with pytest.raises(ValueError, match="channels"):
            ode_forward(Tensor(np.zeros((1, 2, 4, 4))), dyn, OdeConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            OdeConfig(terminal_time=0.0)
        with pytest.raises(ValueError):
            OdeConfig(n_steps=0)
        with pytest.raises(ValueError):
            OdeConfig(scheme="rk38")

    def test_gradients_pass_finite_differences(self):
        rng = np.random.default_rng(4)
        dyn = random_dynamics(channels=2, hidden=4, seed=4)
        weights = Tensor(rng.normal(size=(1, 2, 4, 4)))
        cfg = OdeConfig(1.0, 2, "rk4")

        def loss_of_state(s):
            return T.sum_(T.mul(ode_forward(s, dyn, cfg), weights))

        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        assert T.finite_diff_check(loss_of_state, x, n_probes=16, rng=rng) < 1e-6

        state = Tensor(rng.normal(size=(1, 2, 4, 4)))

        def loss_of_w3(w):
            saved = dyn.w3
            dyn.w3 = w
            try:
                return T.sum_(T.mul(ode_forward(state, dyn, cfg), weights))
            finally:
                dyn.w3 = saved

        assert T.finite_diff_check(loss_of_w3, Tensor(dyn.w3.data.copy()), n_probes=16, rng=rng) < 1e-6


class TestTrajectoryDivergence:
    def test_identical_states_return_zero(self):
        rng = np.random.default_rng(5)
        state = Tensor(rng.normal(size=(1, 4, 5, 5)))
        dyn = random_dynamics(seed=5)
        input_dist, output_dist, est = trajectory_divergence(state, Tensor(state.data.copy()), dyn,
                                                             OdeConfig(), n_pairs=16, rng=rng)
        assert input_dist == 0.0 and output_dist == 0.0
        assert est >= 0.0

    def test_decay_contracts_by_exponential_factor(self):
        rng = np.random.default_rng(6)
        base = rng.normal(size=(1, 2, 4, 4))
        delta = 1e-3 * rng.normal(size=base.shape)
        dyn = wire_decay(2)
        input_dist, output_dist, est = trajectory_divergence(
            Tensor(base), Tensor(base + delta), dyn, OdeConfig(1.0, 8, "rk4"), n_pairs=32, rng=rng)
        assert output_dist == pytest.approx(input_dist * math.exp(-1.0), rel=1e-3)
        assert est == pytest.approx(1.0, rel=1e-6)  # |h(a)-h(b)| / |a-b| is exactly 1 for h = -z

    def test_gronwall_bound_holds_with_slack(self):
        rng = np.random.default_rng(7)
        dyn = random_dynamics(seed=7, out_std=0.1)
        cfg = OdeConfig(1.0, 4, "rk4")
        for _ in range(20):
            base = rng.normal(size=(1, 4, 6, 6))
            other = base + 1e-3 * rng.normal(size=base.shape)
            input_dist, output_dist, est = trajectory_divergence(
                Tensor(base), Tensor(other), dyn, cfg, n_pairs=64, rng=rng)
            assert output_dist <= input_dist * math.exp(est * cfg.terminal_time) * 1.05

    def test_shape_mismatch_rejected(self):
        dyn = random_dynamics()
        with pytest.raises(ValueError, match="shapes"):
            trajectory_divergence(Tensor(np.zeros((1, 4, 5, 5))), Tensor(np.zeros((1, 4, 4, 4))),
                                  dyn, OdeConfig())
