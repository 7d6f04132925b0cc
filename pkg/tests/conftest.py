"""Shared builders for desk-scale models and episodes."""

import numpy as np

from pnodeseg.data import Episode
from pnodeseg.model import SegModel
from pnodeseg.ode import OdeConfig


def small_model(use_ode=True, seed=0, **kw):
    return SegModel(in_channels=1, feat_channels=4, image_size=16, use_ode=use_ode,
                    ode_cfg=OdeConfig(1.0, 2, "rk4"), dyn_hidden=4, seed=seed, **kw)


def tiny_episode(rng, size=16, k_shot=1, classes=(1,), n_query=1, interior=False) -> Episode:
    """Random episode with block foreground regions per class.

    With interior=True pixel values stay in [0.1, 0.9], so epsilon-sized
    perturbations never hit the [0, 1] box.
    """
    lo, hi = (0.1, 0.9) if interior else (0.0, 1.0)
    support_images, support_masks = {}, {}
    for ci, cls in enumerate(classes):
        imgs, masks = [], []
        for _ in range(k_shot):
            imgs.append(rng.uniform(lo, hi, size=(1, 1, size, size)))
            mask = np.zeros((size, size), dtype=np.int64)
            y, x = rng.integers(0, size - 5, size=2)
            mask[y:y + 5, x + ci:x + ci + 5] = cls
            masks.append(mask)
        support_images[cls], support_masks[cls] = imgs, masks
    q_imgs, q_masks = [], []
    for _ in range(n_query):
        q_imgs.append(rng.uniform(lo, hi, size=(1, 1, size, size)))
        mask = np.zeros((size, size), dtype=np.int64)
        y, x = rng.integers(0, size - 6, size=2)
        mask[y:y + 6, x:x + 6] = classes[0]
        q_masks.append(mask)
    return Episode(tuple(sorted(classes)), support_images, support_masks, q_imgs, q_masks)
