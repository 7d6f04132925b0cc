"""Prototype-based few-shot segmentation model with an optional ODE feature block.

A small conv encoder produces d-channel feature maps; masked average pooling
over support features yields one prototype per episode class plus a background
prototype; query pixels are scored by scaled cosine similarity to every
prototype and softmaxed into a per-class probability map.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndtio
from . import tensor as T
from .data import BACKGROUND, Episode
from .ode import DynamicsNet, OdeConfig, ode_forward
from .tensor import Tensor

CHECKPOINT_MAGIC = b"PNODE1"


@dataclass
class Prototype:
    class_id: int
    vector: Tensor  # shape (d,)


@dataclass
class Prediction:
    prob_map: Tensor  # (n_classes + 1, H, W), channel 0 is background
    hard_mask: np.ndarray  # (H, W) int, argmax with ties to the lowest index
    class_ids: tuple  # class id of each prob_map channel


class SegModel:
    """Feature extractor plus optional neural-ODE refinement and cosine scoring."""

    def __init__(self, in_channels: int = 1, feat_channels: int = 16, image_size: int = 64,
                 use_ode: bool = True, ode_cfg: OdeConfig | None = None,
                 dyn_hidden: int | None = None, cosine_scale: float = 20.0, seed: int = 0):
        if image_size % 4:
            raise ValueError("image_size must be divisible by 4 (two 2x downsamples)")
        rng = np.random.default_rng(seed)
        self.in_channels = in_channels
        self.feat_channels = feat_channels
        self.image_size = image_size
        self.use_ode = bool(use_ode)
        self.ode_cfg = OdeConfig() if ode_cfg is None else ode_cfg
        self.cosine_scale = float(cosine_scale)
        self.seed = seed

        def he(fan_out, fan_in, k=3):
            std = np.sqrt(2.0 / (fan_in * k * k))
            return Tensor(rng.normal(0.0, std, size=(fan_out, fan_in, k, k)), requires_grad=True)

        d = feat_channels
        self.enc_w1 = he(d, in_channels)
        self.enc_b1 = Tensor(np.zeros(d), requires_grad=True)
        self.enc_w2 = he(d, d)
        self.enc_b2 = Tensor(np.zeros(d), requires_grad=True)
        self.enc_w3 = he(d, d)
        self.enc_b3 = Tensor(np.zeros(d), requires_grad=True)
        self.dyn = DynamicsNet(d, hidden=dyn_hidden, rng=rng)

    # -- parameters ------------------------------------------------------

    def named_parameters(self) -> dict:
        params = {"enc.w1": self.enc_w1, "enc.b1": self.enc_b1,
                  "enc.w2": self.enc_w2, "enc.b2": self.enc_b2,
                  "enc.w3": self.enc_w3, "enc.b3": self.enc_b3}
        params.update(self.dyn.named_parameters())
        return params

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def config_echo(self) -> str:
        lines = [
            f"model.in_channels = {self.in_channels}",
            f"model.feat_channels = {self.feat_channels}",
            f"model.image_size = {self.image_size}",
            f"model.use_ode = {str(self.use_ode).lower()}",
            f"model.cosine_scale = {self.cosine_scale!r}",
            f"model.dyn_hidden = {self.dyn.hidden}",
            f"model.seed = {self.seed}",
            f"ode.terminal_time = {self.ode_cfg.terminal_time!r}",
            f"ode.steps = {self.ode_cfg.n_steps}",
            f"ode.scheme = {self.ode_cfg.scheme}",
        ]
        return "\n".join(lines) + "\n"

    # -- forward ---------------------------------------------------------

    def encode(self, image) -> Tensor:
        """Feature state at t=0; accepts one image or a stacked batch of them."""
        img = image if isinstance(image, Tensor) else Tensor(image)
        expected = (self.in_channels, self.image_size, self.image_size)
        if img.data.ndim != 4 or img.shape[1:] != expected:
            raise ValueError(f"encode expects images of shape (n,) + {expected}, got {img.shape}")
        x = T.relu(T.conv2d(img, self.enc_w1, self.enc_b1, padding=1))
        x = T.avg_pool2d(x, 2)
        x = T.relu(T.conv2d(x, self.enc_w2, self.enc_b2, padding=1))
        x = T.avg_pool2d(x, 2)
        return T.relu(T.conv2d(x, self.enc_w3, self.enc_b3, padding=1))

    def features(self, image) -> Tensor:
        """Encoded features, refined by the ODE block when enabled."""
        z0 = self.encode(image)
        if self.use_ode:
            return ode_forward(z0, self.dyn, self.ode_cfg)
        return z0


def masked_average_pool(features: Tensor, masks, class_id: int) -> Prototype:
    """Average feature vectors over pixels labeled class_id, then over shots.

    Shots whose mask has no class_id pixel are dropped from the average; if
    every shot is empty the class has no prototype and an error is raised.
    Features must already be resized to the mask resolution.
    """
    masks = np.asarray(masks)
    k, d, h, w = features.shape
    if masks.shape != (k, h, w):
        raise ValueError(f"masks shape {masks.shape} does not match features {(k, h, w)}")
    indicator = masks == class_id
    counts = indicator.sum(axis=(1, 2))
    kept = np.nonzero(counts)[0]
    if kept.size == 0:
        raise ValueError(f"empty foreground: class {class_id} absent from every shot")
    vec = None
    for idx in kept:
        weight = Tensor(indicator[idx][None].astype(np.float64))
        shot_mean = T.mul(T.sum_(T.mul(features[int(idx)], weight), axis=(1, 2)),
                          1.0 / float(counts[idx]))
        vec = shot_mean if vec is None else T.add(vec, shot_mean)
    return Prototype(class_id, T.mul(vec, 1.0 / float(kept.size)))


def background_prototype(features: Tensor, masks, foreground_set) -> Prototype:
    """Feature mean over every pixel not labeled with any foreground class."""
    masks = np.asarray(masks)
    k, d, h, w = features.shape
    indicator = ~np.isin(masks, list(foreground_set))
    total = int(indicator.sum())
    if total == 0:
        raise ValueError("no background pixels in any support shot")
    weight = Tensor(indicator[:, None].astype(np.float64))
    vec = T.mul(T.sum_(T.mul(features, weight), axis=(0, 2, 3)), 1.0 / float(total))
    return Prototype(BACKGROUND, vec)


def predict_query(model: SegModel, prototypes, query_features: Tensor, out_size) -> Prediction:
    """Scaled cosine-softmax scoring of query pixels against each prototype.

    The class probability map is computed at feature resolution, upsampled to
    out_size, and argmaxed (ties to the lowest channel, background first).
    """
    if not prototypes:
        raise ValueError("prototype list is empty")
    ordered = sorted(prototypes, key=lambda p: p.class_id)
    if ordered[0].class_id != BACKGROUND:
        raise ValueError("prototype list must include the background prototype")
    d = query_features.shape[1]
    for proto in ordered:
        if proto.vector.shape != (d,):
            raise ValueError(f"prototype for class {proto.class_id} has dimension "
                             f"{proto.vector.shape}, features have {d}")

    _, _, fh, fw = query_features.shape
    pixels = T.transpose(T.reshape(query_features, (d, fh * fw)), (1, 0))  # (P, d)
    rows = [T.reshape(T.cosine_similarity(pixels, proto.vector), (1, fh * fw))
            for proto in ordered]
    logits = T.mul(T.concat(rows, axis=0), model.cosine_scale)
    probs = T.softmax(logits, axis=0)
    maps = T.reshape(probs, (1, len(ordered), fh, fw))
    out_h, out_w = out_size
    prob_map = T.bilinear_resize(maps, out_h, out_w)[0]
    hard = np.argmax(prob_map.data, axis=0)
    return Prediction(prob_map, hard, tuple(p.class_id for p in ordered))


def prototypes_from_features(support_up: Tensor, episode: Episode):
    """Per-class MAP plus background pooling over upsampled support features."""
    protos, offset = [], 0
    all_masks = []
    for cls in episode.classes:
        masks = np.stack(episode.support_masks[cls])
        k = masks.shape[0]
        protos.append(masked_average_pool(support_up[offset:offset + k], masks, cls))
        all_masks.append(masks)
        offset += k
    bg = background_prototype(support_up, np.concatenate(all_masks), episode.classes)
    return [bg] + protos


def _batched_features(model: SegModel, images) -> Tensor:
    tensors = [img if isinstance(img, Tensor) else Tensor(img) for img in images]
    return model.features(tensors[0] if len(tensors) == 1 else T.concat(tensors, axis=0))


def episode_prototypes(model: SegModel, episode: Episode):
    """Support pass: batched features, upsampling, MAP, and background pooling."""
    size = model.image_size
    images = [img for cls in episode.classes for img in episode.support_images[cls]]
    feats = _batched_features(model, images)
    return prototypes_from_features(T.bilinear_resize(feats, size, size), episode)


def episode_forward(model: SegModel, episode: Episode):
    """Full forward pass: (mean BCE loss, per-query Prediction list).

    Support shots and query images run through the encoder and ODE block as one
    batch. Each episode class is scored one-vs-rest from its softmax channel;
    the loss averages over classes and query images and is differentiable with
    respect to model parameters, support images, and query images.
    """
    episode.validate()
    size = model.image_size
    support = [img for cls in episode.classes for img in episode.support_images[cls]]
    feats = _batched_features(model, support + list(episode.query_images))
    n_support = len(support)
    protos = prototypes_from_features(T.bilinear_resize(feats[:n_support], size, size), episode)

    loss = None
    predictions = []
    for qi, q_mask in enumerate(episode.query_masks):
        q_feat = feats[n_support + qi:n_support + qi + 1]
        pred = predict_query(model, protos, q_feat, (size, size))
        predictions.append(pred)
        for ci, cls in enumerate(episode.classes, start=1):
            target = (np.asarray(q_mask) == cls).astype(np.float64)
            term = T.bce_loss(pred.prob_map[ci], target)
            loss = term if loss is None else T.add(loss, term)
    n_terms = len(episode.query_masks) * len(episode.classes)
    return T.mul(loss, 1.0 / n_terms), predictions


def episode_loss(model: SegModel, episode: Episode) -> Tensor:
    """Mean BCE between predicted foreground probability maps and ground truth."""
    return episode_forward(model, episode)[0]


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(model: SegModel, path):
    """PNODE1 file: magic, length-prefixed config echo, then named NDT1 tensors."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    named = model.named_parameters()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        echo = model.config_echo().encode()
        fh.write(struct.pack("<Q", len(echo)))
        fh.write(echo)
        fh.write(struct.pack("<I", len(named)))
        for name, param in named.items():
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            ndtio.write_array(fh, param.data)


def load_checkpoint(path) -> SegModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (echo_len,) = struct.unpack("<Q", fh.read(8))
        echo = fh.read(echo_len).decode()
        cfg = {}
        for line in echo.splitlines():
            key, _, value = line.partition("=")
            cfg[key.strip()] = value.strip()
        model = SegModel(
            in_channels=int(cfg["model.in_channels"]),
            feat_channels=int(cfg["model.feat_channels"]),
            image_size=int(cfg["model.image_size"]),
            use_ode=cfg["model.use_ode"] == "true",
            ode_cfg=OdeConfig(float(cfg["ode.terminal_time"]), int(cfg["ode.steps"]),
                              cfg["ode.scheme"]),
            dyn_hidden=int(cfg["model.dyn_hidden"]),
            cosine_scale=float(cfg["model.cosine_scale"]),
            seed=int(cfg["model.seed"]),
        )
        named = model.named_parameters()
        (n_tensors,) = struct.unpack("<I", fh.read(4))
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode()
            arr = ndtio.read_array(fh)
            if name not in named:
                raise ValueError(f"checkpoint holds unknown parameter {name!r}")
            if named[name].data.shape != arr.shape:
                raise ValueError(f"parameter {name!r} shape mismatch")
            named[name].data = arr
    return model
