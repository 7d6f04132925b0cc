"""Gradient-based adversarial perturbation of episode support or query images.

All attacks maximize the episode loss with sign-gradient steps, keep every
iterate inside both the epsilon ball around the clean image and the [0, 1]
image box, and never touch masks or the untargeted image set. Model parameters
are frozen for the duration of an attack: gradients flow only to images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Episode
from .model import SegModel, episode_prototypes, predict_query, prototypes_from_features
from .tensor import Tensor

FAMILIES = ("fgsm", "pgd", "smia")
TARGETS = ("support", "query")


@dataclass(frozen=True)
class AttackSpec:
    family: str
    epsilon: float
    step_size: float | None = None
    n_iters: int = 1
    target: str = "query"
    smia_lambda: float = 1.0
    random_start: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"attack family must be one of {FAMILIES}, got {self.family!r}")
        if self.target not in TARGETS:
            raise ValueError(f"attack target must be one of {TARGETS}, got {self.target!r}")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.n_iters < 1:
            raise ValueError("n_iters must be at least 1")
        if self.family == "fgsm":
            object.__setattr__(self, "n_iters", 1)
        if self.step_size is None:
            # standard schedule, capped so a single step cannot leave the ball
            object.__setattr__(self, "step_size",
                               min(2.5 * self.epsilon / self.n_iters, self.epsilon))
        if self.step_size > self.epsilon:
            raise ValueError("step_size must not exceed epsilon")
        if self.step_size <= 0.0:
            raise ValueError("step_size must be positive")


def _project(adv: np.ndarray, orig: np.ndarray, eps: float) -> np.ndarray:
    """Project onto the eps ball then the [0,1] box, exactly in float arithmetic.

    A one-ulp nudge repairs the rounding of orig + delta, so the result always
    measures ||out - orig||_inf <= eps with no tolerance. The box clip can only
    shrink the perturbation (images live in [0,1]), preserving the ball bound.
    """
    out = orig + np.clip(adv - orig, -eps, eps)
    for _ in range(2):
        diff = out - orig
        over, under = diff > eps, diff < -eps
        if not (over.any() or under.any()):
            break
        out = np.where(over, np.nextafter(out, -np.inf), out)
        out = np.where(under, np.nextafter(out, np.inf), out)
    return np.clip(out, 0.0, 1.0)


def _target_images(episode: Episode, target: str):
    """Flat float-array list of attacked images plus an episode rebuild function."""
    if target == "query":
        images = [np.asarray(img.data if isinstance(img, Tensor) else img, dtype=np.float64)
                  for img in episode.query_images]
        if not images:
            raise ValueError("episode has no query images to attack")

        def rebuild(new_images):
            return episode.copy_with(query_images=list(new_images))

        return images, rebuild

    layout = [(cls, len(episode.support_images[cls])) for cls in episode.classes]
    images = [np.asarray(img.data if isinstance(img, Tensor) else img, dtype=np.float64)
              for cls in episode.classes for img in episode.support_images[cls]]
    if not images:
        raise ValueError("episode has no support images to attack")

    def rebuild(new_images):
        out, it = {}, iter(new_images)
        for cls, count in layout:
            out[cls] = [next(it) for _ in range(count)]
        return episode.copy_with(support_images=out)

    return images, rebuild


def _soft_cross_entropy(pred: Tensor, soft_target: Tensor) -> Tensor:
    p = T.clamp(pred, lo=T.BCE_CLAMP, hi=1.0 - T.BCE_CLAMP)
    return -T.mean(T.add(T.mul(T.log(p), soft_target),
                         T.mul(T.log(1.0 - p), 1.0 - soft_target)))


def _mean_filter_kernel(channels: int) -> Tensor:
    kernel = np.zeros((channels, channels, 3, 3))
    for c in range(channels):
        kernel[c, c] = 1.0 / 9.0
    return Tensor(kernel)


def _make_objective(model: SegModel, episode: Episode, target: str):
    """Forward over attacked-image variants, with the clean branch hoisted.

    During a query attack the support prototypes are fixed, and during a
    support attack the query features are fixed, so either constant branch is
    evaluated once up front. Returns f(variants) where variants is a list of
    target-image lists, all run through the network as one batch; f gives one
    (loss, foreground maps) pair per variant.
    """
    episode.validate()
    size = model.image_size

    def score(protos, query_features):
        loss, fg_maps = None, []
        for q_feat, q_mask in zip(query_features, episode.query_masks):
            pred = predict_query(model, protos, q_feat, (size, size))
            for ci, cls in enumerate(episode.classes, start=1):
                gt = (np.asarray(q_mask) == cls).astype(np.float64)
                term = T.bce_loss(pred.prob_map[ci], gt)
                loss = term if loss is None else T.add(loss, term)
                fg_maps.append(pred.prob_map[ci])
        n_terms = len(episode.query_masks) * len(episode.classes)
        return T.mul(loss, 1.0 / n_terms), fg_maps

    def batched_features(variants):
        flat = [t for tensors in variants for t in tensors]
        feats = model.features(flat[0] if len(flat) == 1 else T.concat(flat, axis=0))
        per_variant, offset = [], 0
        for tensors in variants:
            per_variant.append([feats[offset + i:offset + i + 1] for i in range(len(tensors))])
            offset += len(tensors)
        return feats, per_variant

    if target == "query":
        with T.no_grad():
            protos = episode_prototypes(model, episode)

        def forward(variants):
            _, per_variant = batched_features(variants)
            return [score(protos, q_feats) for q_feats in per_variant]

        return forward

    with T.no_grad():
        q_feats = [model.features(q if isinstance(q, Tensor) else Tensor(q))
                   for q in episode.query_images]

    def forward(variants):
        feats, _ = batched_features(variants)
        n = len(variants[0])
        support_up = T.bilinear_resize(feats, size, size)
        results = []
        for vi in range(len(variants)):
            protos = prototypes_from_features(support_up[vi * n:(vi + 1) * n], episode)
            results.append(score(protos, q_feats))
        return results

    return forward


def fgsm_attack(model: SegModel, episode: Episode, spec: AttackSpec, rng=None) -> Episode:
    """Single sign-gradient step of size epsilon on the target image set.

    All attacked images are perturbed jointly under one gradient computation.
    """
    if spec.family != "fgsm":
        raise ValueError(f"fgsm_attack got spec family {spec.family!r}")
    with T.frozen(model.parameters()):
        originals, rebuild = _target_images(episode, spec.target)
        forward = _make_objective(model, episode, spec.target)
        tensors = [Tensor(img, requires_grad=True) for img in originals]
        forward([tensors])[0][0].backward()
        adv = [_project(img + spec.epsilon * np.sign(t.grad), img, spec.epsilon)
               for img, t in zip(originals, tensors)]
    return rebuild(adv)


def _iterative_attack(model: SegModel, episode: Episode, spec: AttackSpec,
                      start_rng, use_stabilizer: bool) -> Episode:
    with T.frozen(model.parameters()):
        originals, rebuild = _target_images(episode, spec.target)
        forward = _make_objective(model, episode, spec.target)
        if start_rng is not None:
            current = [_project(img + start_rng.uniform(-spec.epsilon, spec.epsilon,
                                                        size=img.shape),
                                img, spec.epsilon) for img in originals]
        else:
            current = [img.copy() for img in originals]

        kernel = _mean_filter_kernel(model.in_channels)
        zero_bias = Tensor(np.zeros(model.in_channels))
        for _ in range(spec.n_iters):
            tensors = [Tensor(img, requires_grad=True) for img in current]
            if use_stabilizer and spec.smia_lambda != 0.0:
                smoothed = [T.conv2d(t, kernel, zero_bias, padding=1) for t in tensors]
                (loss_dev, maps_pert), (_, maps_smooth) = forward([tensors, smoothed])
                sta = None
                for m_p, m_s in zip(maps_pert, maps_smooth):
                    term = _soft_cross_entropy(m_p, m_s)
                    sta = term if sta is None else T.add(sta, term)
                objective = T.add(loss_dev, T.mul(sta, -spec.smia_lambda / len(maps_pert)))
            else:
                objective = forward([tensors])[0][0]
            objective.backward()
            current = [_project(img + spec.step_size * np.sign(t.grad), orig, spec.epsilon)
                       for img, t, orig in zip(current, tensors, originals)]
    return rebuild(current)


def pgd_attack(model: SegModel, episode: Episode, spec: AttackSpec, rng=None) -> Episode:
    """Iterated sign-gradient ascent with ball and box projection each step."""
    if spec.family != "pgd":
        raise ValueError(f"pgd_attack got spec family {spec.family!r}")
    start_rng = (rng if rng is not None else np.random.default_rng(0)) if spec.random_start else None
    return _iterative_attack(model, episode, spec, start_rng, use_stabilizer=False)


def smia_attack(model: SegModel, episode: Episode, spec: AttackSpec, rng=None) -> Episode:
    """Iterative ascent on deviation loss minus a prediction-stability penalty.

    The stability term is the cross entropy between foreground predictions on
    the perturbed images and on their 3x3-mean-smoothed copies; iterates start
    at the clean images.
    """
    if spec.family != "smia":
        raise ValueError(f"smia_attack got spec family {spec.family!r}")
    return _iterative_attack(model, episode, spec, start_rng=None, use_stabilizer=True)


def run_attack(model: SegModel, episode: Episode, spec: AttackSpec, rng=None) -> Episode:
    if spec.family == "fgsm":
        return fgsm_attack(model, episode, spec, rng)
    if spec.family == "pgd":
        return pgd_attack(model, episode, spec, rng)
    return smia_attack(model, episode, spec, rng)
