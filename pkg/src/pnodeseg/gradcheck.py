"""Finite-difference verification of every primitive and the composed model loss."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import Episode
from .model import SegModel, episode_loss
from .ode import DynamicsNet, OdeConfig, ode_forward
from .tensor import Tensor, finite_diff_check

TOLERANCE = 1e-6


def _suite_episode(model: SegModel, rng) -> Episode:
    size = model.image_size
    def image():
        return rng.uniform(0.1, 0.9, size=(1, model.in_channels, size, size))
    def mask():
        out = np.zeros((size, size), dtype=np.int64)
        y, x = rng.integers(2, size - 10, size=2)
        out[y:y + 8, x:x + 8] = 1
        return out
    return Episode((1,), {1: [image()]}, {1: [mask()]}, [image()], [mask()])


def _primitive_checks(rng, n_probes):
    x34 = rng.normal(size=(3, 4))
    other = Tensor(rng.normal(size=(3, 4)) + 3.0)
    row = Tensor(rng.normal(size=(1, 4)))
    mat = Tensor(rng.normal(size=(4, 2)))
    x4d = rng.normal(size=(2, 3, 6, 6))
    kernel = Tensor(rng.normal(size=(2, 3, 3, 3)))
    bias = Tensor(rng.normal(size=2))
    weight = Tensor(rng.normal(size=(3, 4)))
    target = (rng.random(size=(3, 4)) > 0.5).astype(float)
    vec = Tensor(rng.normal(size=5))

    return [
        ("add", lambda t: T.sum_(T.mul(T.add(t, other), other)), x34),
        ("add_broadcast", lambda t: T.sum_(T.mul(T.add(t, row), row)), x34),
        ("mul", lambda t: T.sum_(T.mul(t, other)), x34),
        ("div", lambda t: T.sum_(T.div(t, other)), x34),
        ("matmul", lambda t: T.sum_(T.mul(T.matmul(t, mat), T.matmul(t, mat))), x34),
        ("relu", lambda t: T.sum_(T.relu(t)), x34 + 0.05),
        ("softplus", lambda t: T.sum_(T.mul(T.softplus(t), 0.5)), x34),
        ("exp", lambda t: T.sum_(T.exp(t)), x34),
        ("log", lambda t: T.sum_(T.log(t)), np.abs(x34) + 0.5),
        ("sqrt", lambda t: T.sum_(T.sqrt(t)), np.abs(x34) + 0.5),
        ("clamp", lambda t: T.sum_(T.clamp(t, lo=-0.5, hi=0.5)), x34),
        ("sum_axis", lambda t: T.sum_(T.mul(T.sum_(t, axis=0), T.sum_(t, axis=0))), x34),
        ("mean", lambda t: T.mul(T.mean(t), T.mean(t)), x34),
        ("reshape", lambda t: T.sum_(T.mul(T.reshape(t, (4, 3)), 2.0)), x34),
        ("transpose", lambda t: T.sum_(T.mul(T.transpose(t, (1, 0)), 3.0)), x34),
        ("slice", lambda t: T.sum_(T.mul(t[1:3, ::2], 2.0)), x34),
        ("concat", lambda t: T.sum_(T.mul(T.concat([t, t], axis=0),
                                          T.concat([t * 2.0, t], axis=0))), x34),
        ("conv2d_input", lambda t: T.sum_(T.mul(T.conv2d(t, kernel, bias, padding=1), 0.3)), x4d),
        ("conv2d_kernel", lambda t: T.sum_(T.mul(T.conv2d(Tensor(x4d), t, bias, padding=1), 0.3)),
         kernel.data.copy()),
        ("conv2d_bias", lambda t: T.sum_(T.mul(T.conv2d(Tensor(x4d), kernel, t, padding=1), 0.3)),
         bias.data.copy()),
        ("avg_pool2d", lambda t: T.sum_(T.mul(T.avg_pool2d(t, 2), 0.7)), x4d),
        ("bilinear_resize", lambda t: T.sum_(T.mul(T.bilinear_resize(t, 9, 4), 0.7)), x4d),
        ("softmax", lambda t: T.sum_(T.mul(T.softmax(t, axis=1), weight)), x34),
        ("cosine_similarity", lambda t: T.sum_(T.cosine_similarity(t, vec)),
         rng.normal(size=(3, 5))),
        ("bce_loss", lambda t: T.bce_loss(t, target), rng.uniform(0.1, 0.9, size=(3, 4))),
    ]


def gradient_suite(seed: int = 0, n_probes: int = 32, image_size: int = 32,
                   feat_channels: int = 8):
    """Run every gradient check; returns a list of (name, max relative error)."""
    rng = np.random.default_rng(seed)
    checks = []
    for name, f, x in _primitive_checks(rng, n_probes):
        checks.append((name, finite_diff_check(f, Tensor(np.asarray(x, dtype=np.float64)),
                                               n_probes=n_probes, rng=rng)))

    # solver block on its own
    dyn = DynamicsNet(2, hidden=4, rng=rng)
    dyn.w3.data[:] = rng.normal(0.0, 0.05, size=dyn.w3.shape)
    cfg = OdeConfig(1.0, 2, "rk4")
    ode_weight = Tensor(rng.normal(size=(1, 2, 4, 4)))
    checks.append(("ode_forward", finite_diff_check(
        lambda s: T.sum_(T.mul(ode_forward(s, dyn, cfg), ode_weight)),
        Tensor(rng.normal(size=(1, 2, 4, 4))), n_probes=n_probes, rng=rng)))

    # composed model loss with respect to images and every parameter
    model = SegModel(in_channels=1, feat_channels=feat_channels, image_size=image_size,
                     use_ode=True, ode_cfg=OdeConfig(1.0, 2, "rk4"),
                     dyn_hidden=feat_channels, seed=seed)
    # non-zero output layer so every dynamics parameter carries a real gradient
    model.dyn.w3.data[:] = rng.normal(0.0, 0.05, size=model.dyn.w3.shape)
    episode = _suite_episode(model, rng)

    def loss_of_query(img):
        return episode_loss(model, episode.copy_with(query_images=[img]))

    def loss_of_support(img):
        return episode_loss(model, episode.copy_with(support_images={1: [img]}))

    checks.append(("model_loss/query_image", finite_diff_check(
        loss_of_query, Tensor(np.asarray(episode.query_images[0]).copy()),
        n_probes=n_probes, rng=rng)))
    checks.append(("model_loss/support_image", finite_diff_check(
        loss_of_support, Tensor(np.asarray(episode.support_images[1][0]).copy()),
        n_probes=n_probes, rng=rng)))

    for name in model.named_parameters():
        def loss_of_param(p, _name=name):
            if _name.startswith("dyn."):
                obj, attr = model.dyn, _name.split(".", 1)[1]
            else:
                obj, attr = model, _name.replace(".", "_")
            saved = getattr(obj, attr)
            setattr(obj, attr, p)
            try:
                return episode_loss(model, episode)
            finally:
                setattr(obj, attr, saved)

        param = model.named_parameters()[name]
        checks.append((f"model_loss/{name}", finite_diff_check(
            loss_of_param, Tensor(param.data.copy()), n_probes=n_probes, rng=rng)))
    return checks
