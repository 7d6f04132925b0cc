"""Fixed-step Runge-Kutta integration of feature states under learned dynamics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

SCHEMES = ("rk4", "euler")


@dataclass(frozen=True)
class OdeConfig:
    terminal_time: float = 1.0
    n_steps: int = 4
    scheme: str = "rk4"

    def __post_init__(self):
        if self.terminal_time <= 0.0:
            raise ValueError("terminal_time must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")


class DynamicsNet:
    """Three conv layers computing dh/dt; time enters as a constant extra channel.

    Input and output channel counts are equal, so the feature state keeps its
    dimension across integration. The last layer starts at zero, making the
    initial flow the identity map. Activations are softplus: smooth dynamics
    let the fixed-step solver reach its nominal convergence order.
    """

    def __init__(self, channels: int, hidden: int | None = None, kernel_size: int = 3, rng=None):
        if channels < 1:
            raise ValueError("channels must be at least 1")
        rng = np.random.default_rng(0) if rng is None else rng
        hidden = channels if hidden is None else hidden
        self.channels = channels
        self.hidden = hidden
        self.kernel_size = kernel_size
        self.padding = kernel_size // 2

        def he(fan_out, fan_in):
            std = np.sqrt(2.0 / (fan_in * kernel_size * kernel_size))
            return Tensor(rng.normal(0.0, std, size=(fan_out, fan_in, kernel_size, kernel_size)),
                          requires_grad=True)

        self.w1 = he(hidden, channels + 1)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = he(hidden, hidden)
        self.b2 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w3 = Tensor(np.zeros((channels, hidden, kernel_size, kernel_size)), requires_grad=True)
        self.b3 = Tensor(np.zeros(channels), requires_grad=True)

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def named_parameters(self):
        return {"dyn.w1": self.w1, "dyn.b1": self.b1, "dyn.w2": self.w2,
                "dyn.b2": self.b2, "dyn.w3": self.w3, "dyn.b3": self.b3}

    def __call__(self, state: Tensor, t: float) -> Tensor:
        n, c, h, w = state.shape
        if c != self.channels:
            raise ValueError(f"dynamics expect {self.channels} channels, got {c}")
        time_channel = Tensor(np.full((n, 1, h, w), float(t)))
        x = T.concat([state, time_channel], axis=1)
        x = T.softplus(T.conv2d(x, self.w1, self.b1, padding=self.padding))
        x = T.softplus(T.conv2d(x, self.w2, self.b2, padding=self.padding))
        return T.conv2d(x, self.w3, self.b3, padding=self.padding)


def _step(state: Tensor, dyn: DynamicsNet, t: float, dt: float, scheme: str) -> Tensor:
    if scheme == "euler":
        return state + dt * dyn(state, t)
    k1 = dyn(state, t)
    k2 = dyn(state + (dt / 2.0) * k1, t + dt / 2.0)
    k3 = dyn(state + (dt / 2.0) * k2, t + dt / 2.0)
    k4 = dyn(state + dt * k3, t + dt)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def ode_forward(state0: Tensor, dyn: DynamicsNet, cfg: OdeConfig) -> Tensor:
    """Integrate the state from t=0 to the terminal time with uniform steps."""
    if state0.shape[1] != dyn.channels:
        raise ValueError(f"state has {state0.shape[1]} channels, dynamics expect {dyn.channels}")
    dt = cfg.terminal_time / cfg.n_steps
    state = state0
    for i in range(cfg.n_steps):
        state = _step(state, dyn, i * dt, dt, cfg.scheme)
    return state


def _trajectory(state0: Tensor, dyn: DynamicsNet, cfg: OdeConfig):
    dt = cfg.terminal_time / cfg.n_steps
    states = [state0]
    for i in range(cfg.n_steps):
        states.append(_step(states[-1], dyn, i * dt, dt, cfg.scheme))
    return states


def trajectory_divergence(state_a: Tensor, state_b: Tensor, dyn: DynamicsNet,
                          cfg: OdeConfig, n_pairs: int = 256, rng=None):
    """Measure how two feature states separate under integration.

    Returns (input_dist, output_dist, lipschitz_est) where lipschitz_est is the
    empirical max of ||h(u,t) - h(v,t)|| / ||u - v|| over matched trajectory
    states plus n_pairs random state pairs near the trajectories. Identical
    inputs return (0, 0, est) without any division.
    """
    if state_a.shape != state_b.shape:
        raise ValueError(f"state shapes differ: {state_a.shape} vs {state_b.shape}")
    rng = np.random.default_rng(0) if rng is None else rng

    with T.no_grad():
        traj_a = [s.data for s in _trajectory(Tensor(state_a.data), dyn, cfg)]
        traj_b = [s.data for s in _trajectory(Tensor(state_b.data), dyn, cfg)]
        dt = cfg.terminal_time / cfg.n_steps

        def rate(u, v, t):
            sep = float(np.linalg.norm(u - v))
            if sep == 0.0:
                return 0.0
            hu = dyn(Tensor(u), t).data
            hv = dyn(Tensor(v), t).data
            return float(np.linalg.norm(hu - hv)) / sep

        est = 0.0
        for i, (ua, ub) in enumerate(zip(traj_a, traj_b)):
            est = max(est, rate(ua, ub, i * dt))

        scale = max(1.0, float(np.max(np.abs(traj_a[0]))))
        shape = state_a.shape
        for _ in range(n_pairs):
            i = int(rng.integers(len(traj_a)))
            u = traj_a[i] + 0.1 * scale * rng.normal(size=shape)
            v = u + 1e-3 * scale * rng.normal(size=shape)
            est = max(est, rate(u, v, i * dt))

        input_dist = float(np.linalg.norm(traj_a[0] - traj_b[0]))
        output_dist = float(np.linalg.norm(traj_a[-1] - traj_b[-1]))
    if input_dist == 0.0:
        return 0.0, 0.0, est
    return input_dist, output_dist, est
