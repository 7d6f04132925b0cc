"""Synthetic multi-class segmentation data and episodic N-way K-shot sampling.

Images are single-channel 64x64 arrays in [0, 1]; masks are integer arrays
carrying every class present in the image. Datasets are written as NDT1 tensor
files plus a line-oriented manifest, then sampled into support/query episodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndtio

BACKGROUND = 0

ELLIPSE = "ellipse"
ROUNDED_RECT = "rounded-rectangle"
CRESCENT = "crescent"
SHAPE_FAMILIES = (ELLIPSE, ROUNDED_RECT, CRESCENT)


@dataclass(frozen=True)
class ShapeDomain:
    """Appearance statistics of one synthetic imaging domain."""

    domain_id: str
    shape_families: dict  # class id -> family name
    fg_intensity: tuple  # (lo, hi) for foreground instances
    bg_intensity: tuple  # (lo, hi) for the background level
    noise_level: float
    texture_frequency: float

    def __post_init__(self):
        for family in self.shape_families.values():
            if family not in SHAPE_FAMILIES:
                raise ValueError(f"unknown shape family {family!r}")


def source_domain(classes=(1, 2, 3)) -> ShapeDomain:
    families = {c: SHAPE_FAMILIES[i % 3] for i, c in enumerate(classes)}
    return ShapeDomain("source", families, fg_intensity=(0.55, 0.85),
                       bg_intensity=(0.05, 0.25), noise_level=0.03, texture_frequency=6.0)


def shifted_domain(classes=(1, 2, 3), strength: float = 1.0) -> ShapeDomain:
    """Cross-domain stand-in: re-ranged intensities, doubled noise, swapped families."""
    families = {c: SHAPE_FAMILIES[(i + 1) % 3] for i, c in enumerate(classes)}
    lo = 0.55 - 0.20 * strength
    return ShapeDomain("shifted", families, fg_intensity=(lo, lo + 0.30),
                       bg_intensity=(0.05 + 0.10 * strength, 0.25 + 0.10 * strength),
                       noise_level=0.06, texture_frequency=3.0)


# -- image synthesis -------------------------------------------------------


def _instance_mask(family: str, size: int, rng) -> np.ndarray:
    """One random pose of the family rasterized on a size x size grid."""
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
    angle = rng.uniform(0.0, np.pi)
    a = rng.uniform(0.14 * size, 0.26 * size)
    b = rng.uniform(0.10 * size, 0.20 * size)
    u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
    v = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
    if family == ELLIPSE:
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if family == ROUNDED_RECT:
        r = 0.3 * b
        du = np.maximum(np.abs(u) - (a - r), 0.0)
        dv = np.maximum(np.abs(v) - (b - r), 0.0)
        return du ** 2 + dv ** 2 <= r ** 2
    # crescent: ellipse minus a shifted copy
    outer = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    inner = ((u - 0.45 * a) / a) ** 2 + ((v - 0.2 * b) / b) ** 2 <= 0.85
    return outer & ~inner


def render_image(domain: ShapeDomain, classes, rng, size: int = 64):
    """Compose 1-3 class instances over textured background; returns (image, mask)."""
    image = np.full((size, size), rng.uniform(*domain.bg_intensity))
    yy, xx = np.mgrid[0:size, 0:size]
    phase = rng.uniform(0.0, 2.0 * np.pi)
    texture = 0.05 * np.sin(2.0 * np.pi * domain.texture_frequency * (xx + yy) / (2.0 * size) + phase)
    image += texture
    mask = np.zeros((size, size), dtype=np.int64)

    n_instances = int(rng.integers(1, 4))
    drawn = [int(c) for c in rng.choice(list(classes), size=n_instances)]
    for cls in drawn:
        inst = _instance_mask(domain.shape_families[cls], size, rng)
        if not inst.any():
            continue
        level = rng.uniform(*domain.fg_intensity)
        shading = 0.04 * np.sin(2.0 * np.pi * domain.texture_frequency * xx / size + phase)
        image = np.where(inst, level + shading, image)
        mask = np.where(inst, cls, mask)

    image += rng.normal(0.0, domain.noise_level, size=(size, size))
    return np.clip(image, 0.0, 1.0)[None, None], mask


# -- dataset files ----------------------------------------------------------


@dataclass
class Dataset:
    root: Path
    images: list  # (1, 1, H, W) float arrays in [0, 1]
    masks: list  # (H, W) int arrays
    class_ids: list  # per image, sorted tuple of foreground classes present

    @property
    def classes(self):
        out = set()
        for ids in self.class_ids:
            out.update(ids)
        return tuple(sorted(out))


def generate_dataset(domain: ShapeDomain, n_images: int, classes, seed: int, out_dir,
                     size: int = 64) -> Path:
    """Write images, masks, and a manifest for one domain; returns the manifest path."""
    if n_images < 1:
        raise ValueError("n_images must be at least 1")
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    lines = []
    for i in range(n_images):
        image, mask = render_image(domain, classes, rng, size=size)
        present = sorted(int(c) for c in np.unique(mask) if c != BACKGROUND)
        img_rel = f"images/im_{i:05d}.ndt"
        mask_rel = f"masks/mask_{i:05d}.ndt"
        ndtio.save(out_dir / img_rel, image)
        ndtio.save(out_dir / mask_rel, mask.astype(np.float64))
        lines.append(f"{img_rel}\t{mask_rel}\t{','.join(str(c) for c in present)}")

    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.tsv"
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest at {manifest}")
    images, masks, class_ids = [], [], []
    for line in manifest.read_text().splitlines():
        img_rel, mask_rel, ids = line.split("\t")
        images.append(ndtio.load(root / img_rel))
        raw_mask = ndtio.load(root / mask_rel)
        mask = raw_mask.astype(np.int64)
        if not np.array_equal(raw_mask, mask):
            raise ValueError(f"mask {mask_rel} holds non-integer values")
        masks.append(mask)
        class_ids.append(tuple(int(c) for c in ids.split(",")) if ids else ())
    return Dataset(root, images, masks, class_ids)


# -- episodes ---------------------------------------------------------------


@dataclass
class Episode:
    """One N-way K-shot task: per-class support (image, mask) pairs plus queries."""

    classes: tuple  # sorted foreground class set C_i
    support_images: dict  # class -> list of K (1, Cin, H, W) arrays or Tensors
    support_masks: dict  # class -> list of K (H, W) int arrays
    query_images: list  # N_Q arrays or Tensors
    query_masks: list  # N_Q (H, W) int arrays

    def validate(self):
        if not self.classes:
            raise ValueError("episode has an empty class set")
        shots = {len(self.support_images[c]) for c in self.classes}
        if len(shots) != 1:
            raise ValueError(f"unequal shot counts across classes: {shots}")
        for cls in self.classes:
            for mask in self.support_masks[cls]:
                if not (np.asarray(mask) == cls).any():
                    raise ValueError(f"support mask has no pixel of class {cls}")
        if not self.query_images:
            raise ValueError("episode has no query images")

    def copy_with(self, support_images=None, query_images=None) -> "Episode":
        return Episode(
            classes=self.classes,
            support_images={c: list(v) for c, v in self.support_images.items()}
            if support_images is None else support_images,
            support_masks={c: list(v) for c, v in self.support_masks.items()},
            query_images=list(self.query_images) if query_images is None else query_images,
            query_masks=list(self.query_masks),
        )


@dataclass
class DatasetView:
    """Episode source restricted to a class subset of one dataset."""

    dataset: Dataset
    classes: tuple
    indices: list = field(default_factory=list)

    def sample_episode(self, n_way: int, k_shot: int, n_query: int, rng) -> Episode:
        return sample_episode(self, n_way, k_shot, n_query, self.classes, rng)


def sample_episode(view, n_way: int, k_shot: int, n_query: int, classes, rng) -> Episode:
    """Uniformly sample a well-formed episode; support and query images are disjoint.

    Images violating the nonempty-mask invariant are redrawn, up to 100 draws
    per slot.
    """
    classes = tuple(sorted(classes))
    if n_way > len(classes):
        raise ValueError(f"cannot sample {n_way} ways from {len(classes)} classes")
    ds = view.dataset
    chosen = tuple(int(c) for c in rng.choice(classes, size=n_way, replace=False))

    by_class = {c: [i for i in view.indices if c in ds.class_ids[i]] for c in chosen}
    for cls, pool in by_class.items():
        if len(pool) < k_shot + n_query:
            raise ValueError(f"insufficient data for class {cls}: {len(pool)} images")

    used = set()

    def draw(cls):
        pool = by_class[cls]
        for _ in range(100):
            i = int(pool[int(rng.integers(len(pool)))])
            if i in used:
                continue
            if (ds.masks[i] == cls).any():
                used.add(i)
                return i
        raise ValueError(f"insufficient data for class {cls}: retries exhausted")

    support_images, support_masks = {}, {}
    for cls in sorted(chosen):
        idx = [draw(cls) for _ in range(k_shot)]
        support_images[cls] = [ds.images[i].copy() for i in idx]
        support_masks[cls] = [ds.masks[i].copy() for i in idx]

    query_cls = sorted(chosen)[0] if n_way == 1 else None
    query_images, query_masks = [], []
    for _ in range(n_query):
        i = draw(query_cls if query_cls is not None else sorted(chosen)[int(rng.integers(n_way))])
        query_images.append(ds.images[i].copy())
        query_masks.append(ds.masks[i].copy())

    episode = Episode(tuple(sorted(chosen)), support_images, support_masks,
                      query_images, query_masks)
    episode.validate()
    return episode


def split_train_test(dataset: Dataset, base_classes, novel_classes):
    """Partition a dataset into a base-class train view and novel-class test view.

    Training images containing any novel-class pixels are excluded outright, so
    no novel class can leak into a training episode.
    """
    base = tuple(sorted(set(int(c) for c in base_classes)))
    novel = tuple(sorted(set(int(c) for c in novel_classes)))
    if set(base) & set(novel):
        raise ValueError(f"base and novel classes overlap: {set(base) & set(novel)}")

    train_idx = [i for i, ids in enumerate(dataset.class_ids)
                 if not set(ids) & set(novel) and set(ids) & set(base)]
    test_idx = [i for i, ids in enumerate(dataset.class_ids) if set(ids) & set(novel)]
    return (DatasetView(dataset, base, train_idx), DatasetView(dataset, novel, test_idx))
