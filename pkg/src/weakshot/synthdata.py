"""Synthetic shapes corpus and its weak-shot view.

Generates fully annotated images (every pixel carries a semantic class ID),
splits the class vocabulary into base/novel, and exposes the weak-shot
training view: novel pixels are reset to the ignore ID while image-level
labels keep both base and novel classes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image

IGNORE_ID = 255

# Texture styles, one per background class (cycled if more backgrounds).
_BG_TEXTURES = ("plain", "stripes", "checker", "dots")
# Shape styles, one per foreground class (cycled).
_FG_SHAPES = ("disk", "square", "triangle", "diamond",
              "ring", "frame", "cross", "striped_disk")

# Base colors chosen so some foreground pairs share a color family and are
# only separable by shape/texture (keeps the corpus from being trivially
# color-coded).
_BG_COLORS = np.array([
    (0.16, 0.16, 0.18),
    (0.24, 0.34, 0.22),
    (0.36, 0.30, 0.20),
    (0.26, 0.21, 0.34),
])
_FG_COLORS = np.array([
    (0.85, 0.20, 0.20),
    (0.20, 0.35, 0.85),
    (0.90, 0.80, 0.20),
    (0.20, 0.80, 0.75),
    (0.80, 0.33, 0.28),
    (0.33, 0.45, 0.80),
    (0.82, 0.25, 0.80),
    (0.95, 0.55, 0.15),
])


class GenerationError(RuntimeError):
    """Corpus constraints could not be met after bounded retries."""


@dataclass(frozen=True)
class ClassSplit:
    """Disjoint base/novel class-ID sets plus the distinguished ignore ID."""

    base_ids: frozenset
    novel_ids: frozenset
    ignore_id: int = IGNORE_ID

    def __post_init__(self):
        if self.base_ids & self.novel_ids:
            raise ValueError("base and novel class sets must be disjoint")
        if self.ignore_id in self.base_ids | self.novel_ids:
            raise ValueError("ignore_id must not be a semantic class")

    @property
    def num_semantic(self) -> int:
        return len(self.base_ids) + len(self.novel_ids)

    @property
    def semantic_ids(self) -> tuple:
        """All semantic class IDs in ascending order."""
        return tuple(sorted(self.base_ids | self.novel_ids))

    def to_dict(self) -> dict:
        return {
            "base_ids": sorted(self.base_ids),
            "novel_ids": sorted(self.novel_ids),
            "ignore_id": self.ignore_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassSplit":
        return cls(frozenset(d["base_ids"]), frozenset(d["novel_ids"]),
                   d.get("ignore_id", IGNORE_ID))


@dataclass
class FullSample:
    """Fully annotated sample: every pixel has a semantic class ID."""

    image: np.ndarray          # H x W x 3 float in [0, 1]
    mask: np.ndarray           # H x W integer class IDs
    present_classes: set
    source_id: str = ""


@dataclass
class WeakShotSample:
    """Training view: base pixels keep their mask, novel pixels are ignored."""

    image: np.ndarray          # H x W x 3 float in [0, 1]
    mask: np.ndarray           # H x W over base IDs and the ignore ID
    image_labels: set          # base and novel classes present in the image
    source_id: str = ""


@dataclass
class GenerationConfig:
    image_size: int = 64
    num_classes: int = 12
    num_background: int = 4
    train_samples: int = 500
    test_samples: int = 100
    shapes_min: int = 2
    shapes_max: int = 4
    base_fraction: float = 0.75
    noise_sigma: float = 0.05
    min_class_pixels: int = 20
    min_pair_images: int = 20

    def validate(self):
        if self.num_classes < 2 or self.num_background < 1:
            raise ValueError("need at least 2 classes and 1 background class")
        if self.num_background >= self.num_classes:
            raise ValueError("need at least one foreground class")
        if not (0 <= self.shapes_min <= self.shapes_max):
            raise ValueError("invalid shapes-per-image range")
        if self.shapes_max > self.num_classes - self.num_background:
            raise ValueError("shapes_max exceeds foreground vocabulary")


@dataclass
class DatasetManifest:
    split: ClassSplit
    train_ids: list
    test_ids: list
    image_labels: dict          # sample id -> sorted list of class IDs
    root: str
    config: dict = field(default_factory=dict)
    seed: int = 0

    def sample_paths(self, sample_id: str) -> tuple:
        sub = "train" if sample_id.startswith("t") else "test"
        base = os.path.join(self.root, sub, sample_id)
        return base + "_img.png", base + "_mask.png"

    def load_full(self, sample_id: str) -> FullSample:
        img_path, mask_path = self.sample_paths(sample_id)
        image = np.asarray(Image.open(img_path), dtype=np.float64) / 255.0
        mask = np.asarray(Image.open(mask_path), dtype=np.int64)
        return FullSample(image=image, mask=mask,
                          present_classes=set(np.unique(mask).tolist()),
                          source_id=sample_id)

    def load_weak(self, sample_id: str) -> WeakShotSample:
        return make_weakshot(self.load_full(sample_id), self.split)

    def save(self):
        path = os.path.join(self.root, "manifest.json")
        doc = {
            "split": self.split.to_dict(),
            "train_ids": self.train_ids,
            "test_ids": self.test_ids,
            "image_labels": {k: sorted(v) if not isinstance(v, list) else v
                             for k, v in self.image_labels.items()},
            "config": self.config,
            "seed": self.seed,
        }
        with open(path, "w") as f:
            json.dump(doc, f, indent=1)

    @classmethod
    def load(cls, root: str) -> "DatasetManifest":
        with open(os.path.join(root, "manifest.json")) as f:
            doc = json.load(f)
        return cls(split=ClassSplit.from_dict(doc["split"]),
                   train_ids=doc["train_ids"], test_ids=doc["test_ids"],
                   image_labels={k: set(v) for k, v in doc["image_labels"].items()},
                   root=root, config=doc.get("config", {}),
                   seed=doc.get("seed", 0))


def split_classes(all_ids, base_fraction: float, seed: int) -> ClassSplit:
    """Randomly partition class IDs into base and novel sets.

    The base count is round(base_fraction * n), clamped so both sides keep
    at least one class. Deterministic for a fixed seed.
    """
    ids = sorted(all_ids)
    n = len(ids)
    if n < 2:
        raise ValueError("need at least 2 classes to split")
    if not 0.0 < base_fraction < 1.0:
        raise ValueError("base_fraction must lie in (0, 1)")
    n_base = int(round(base_fraction * n))
    n_base = min(max(n_base, 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    base = frozenset(ids[i] for i in order[:n_base])
    novel = frozenset(ids[i] for i in order[n_base:])
    return ClassSplit(base_ids=base, novel_ids=novel)


def make_weakshot(sample: FullSample, split: ClassSplit) -> WeakShotSample:
    """Reset novel-class pixels to the ignore ID, keep image-level labels."""
    known = split.base_ids | split.novel_ids
    present = set(np.unique(sample.mask).tolist())
    unknown = present - known
    if unknown:
        raise ValueError(f"mask contains unknown class IDs: {sorted(unknown)}")
    mask = sample.mask.copy()
    for c in present & split.novel_ids:
        mask[sample.mask == c] = split.ignore_id
    return WeakShotSample(image=sample.image, mask=mask,
                          image_labels=set(present), source_id=sample.source_id)


def choose_reference_id(labels: set, source_id: str, manifest: DatasetManifest,
                        rng: np.random.Generator) -> tuple:
    """Pick a reference sample ID for cross-image pair learning.

    Prefers a different training sample sharing at least one base and one
    novel class with the input (level 0). Fallback chain: shared novel
    only (1), shared base only (2), the input itself (3).
    """
    if not manifest.train_ids:
        raise ValueError("manifest has no training samples")
    split = manifest.split
    in_base = labels & split.base_ids
    in_novel = labels & split.novel_ids
    tiers = ([], [], [])
    for sid in manifest.train_ids:
        if sid == source_id:
            continue
        other = manifest.image_labels[sid]
        shared_base = bool(in_base & other)
        shared_novel = bool(in_novel & other)
        if shared_base and shared_novel:
            tiers[0].append(sid)
        elif shared_novel:
            tiers[1].append(sid)
        elif shared_base:
            tiers[2].append(sid)
    for level, pool in enumerate(tiers):
        if pool:
            return pool[int(rng.integers(len(pool)))], level
    return source_id, 3


def sample_reference(sample: WeakShotSample, manifest: DatasetManifest,
                     rng: np.random.Generator) -> tuple:
    """Load a reference sample for `sample`; returns (reference, fallback level)."""
    ref_id, level = choose_reference_id(sample.image_labels, sample.source_id,
                                        manifest, rng)
    if level == 3:
        return sample, level
    return manifest.load_weak(ref_id), level


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.indices((size, size), dtype=np.float64)
    dy, dx = yy - cy, xx - cx
    if kind in ("disk", "striped_disk"):
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= r
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= 0.6 * (dy + r))
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "frame":
        m = np.maximum(np.abs(dy), np.abs(dx))
        return (m <= r) & (m >= 0.55 * r)
    if kind == "cross":
        return ((np.abs(dx) <= r / 3) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= r / 3) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape kind {kind!r}")


def class_style(class_id: int, num_background: int) -> tuple:
    """(kind, base color) for a class ID; backgrounds first, then shapes."""
    if class_id < num_background:
        return (_BG_TEXTURES[class_id % len(_BG_TEXTURES)],
                _BG_COLORS[class_id % len(_BG_COLORS)])
    k = class_id - num_background
    return (_FG_SHAPES[k % len(_FG_SHAPES)], _FG_COLORS[k % len(_FG_COLORS)])


def _paint_background(image: np.ndarray, kind: str, color: np.ndarray):
    size = image.shape[0]
    yy, xx = np.indices((size, size))
    image[:] = color
    delta = 0.08
    if kind == "stripes":
        image[(yy // 4) % 2 == 0] += delta
    elif kind == "checker":
        image[((yy // 8) + (xx // 8)) % 2 == 0] += delta
    elif kind == "dots":
        image[(yy % 6 < 2) & (xx % 6 < 2)] += delta


def render_sample(bg_class: int, fg_classes, size: int, num_background: int,
                  noise_sigma: float, min_class_pixels: int,
                  rng: np.random.Generator) -> tuple:
    """Render one image and its full mask from a planned class set.

    Shapes are drawn in order (later shapes occlude earlier ones); placement
    retries a few times so every planned class keeps visible pixels.
    """
    kind, color = class_style(bg_class, num_background)
    planned = [bg_class] + list(fg_classes)
    for _ in range(20):
        image = np.empty((size, size, 3), dtype=np.float64)
        _paint_background(image, kind, color)
        mask = np.full((size, size), bg_class, dtype=np.int64)
        yy, xx = np.indices((size, size))
        for fg in fg_classes:
            fk, fc = class_style(fg, num_background)
            r = rng.uniform(7.0, 13.0)
            cy = rng.uniform(r, size - r)
            cx = rng.uniform(r, size - r)
            region = _shape_mask(fk, size, cy, cx, r)
            if fk == "striped_disk":
                stripe = ((yy + xx) // 3) % 2 == 0
                image[region & stripe] = fc
                image[region & ~stripe] = fc * 0.55
            else:
                image[region] = fc
            mask[region] = fg
        counts = {c: int(np.sum(mask == c)) for c in planned}
        if all(v >= min_class_pixels for v in counts.values()):
            break
    image += rng.normal(0.0, noise_sigma, image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    present = set(np.unique(mask).tolist())
    return image, mask, present


def _plan_label_sets(cfg: GenerationConfig, count: int,
                     rng: np.random.Generator) -> list:
    fg_ids = list(range(cfg.num_background, cfg.num_classes))
    plans = []
    for _ in range(count):
        bg = int(rng.integers(cfg.num_background))
        n_fg = int(rng.integers(cfg.shapes_min, cfg.shapes_max + 1))
        if n_fg:
            fgs = sorted(int(c) for c in rng.choice(fg_ids, size=n_fg,
                                                    replace=False))
        else:
            fgs = []
        plans.append((bg, fgs))
    return plans


def _pair_floor_ok(label_sets, split: ClassSplit, num_background: int,
                   floor: int) -> bool:
    """Every feasible (base, novel) pair co-occurs in >= floor images.

    Pairs of two background classes are exempt: one background per image
    makes their joint occurrence structurally impossible.
    """
    if floor <= 0:
        return True
    for b in split.base_ids:
        for n in split.novel_ids:
            if b < num_background and n < num_background:
                continue
            joint = sum(1 for s in label_sets if b in s and n in s)
            if joint < floor:
                return False
    return True


def _save_sample(root: str, sub: str, sample_id: str, image: np.ndarray,
                 mask: np.ndarray):
    base = os.path.join(root, sub, sample_id)
    img8 = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img8, mode="RGB").save(base + "_img.png")
    Image.fromarray(mask.astype(np.uint8), mode="L").save(base + "_mask.png")


def generate_dataset(cfg: GenerationConfig, seed: int, root: str) -> DatasetManifest:
    """Generate the corpus on disk and return its manifest.

    Class co-occurrence of the planned label sets is redrawn until every
    feasible (base, novel) pair appears jointly in at least
    `cfg.min_pair_images` training images.
    """
    cfg.validate()
    split = split_classes(range(cfg.num_classes), cfg.base_fraction, seed)
    try:
        os.makedirs(os.path.join(root, "train"), exist_ok=True)
        os.makedirs(os.path.join(root, "test"), exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset root {root!r}: {e}") from e

    rng = np.random.default_rng(seed)
    for attempt in range(200):
        train_plans = _plan_label_sets(cfg, cfg.train_samples, rng)
        planned_sets = [{bg, *fgs} for bg, fgs in train_plans]
        if _pair_floor_ok(planned_sets, split, cfg.num_background,
                          cfg.min_pair_images):
            break
    else:
        raise GenerationError(
            "could not satisfy the class co-occurrence floor; "
            "lower min_pair_images or add training samples")
    test_plans = _plan_label_sets(cfg, cfg.test_samples, rng)

    image_labels = {}
    train_ids, test_ids = [], []
    for sub, prefix, plans, ids in (("train", "t", train_plans, train_ids),
                                    ("test", "v", test_plans, test_ids)):
        for i, (bg, fgs) in enumerate(plans):
            sid = f"{prefix}{i:04d}"
            image, mask, present = render_sample(
                bg, fgs, cfg.image_size, cfg.num_background,
                cfg.noise_sigma, cfg.min_class_pixels, rng)
            _save_sample(root, sub, sid, image, mask)
            ids.append(sid)
            image_labels[sid] = present

    # Rendering can occasionally drop a planned class; re-check on the
    # rendered truth so the manifest never overstates co-occurrence.
    train_sets = [image_labels[sid] for sid in train_ids]
    if not _pair_floor_ok(train_sets, split, cfg.num_background,
                          cfg.min_pair_images):
        raise GenerationError("rendered corpus violates the co-occurrence floor")

    manifest = DatasetManifest(split=split, train_ids=train_ids,
                               test_ids=test_ids, image_labels=image_labels,
                               root=root, config=asdict(cfg), seed=seed)
    manifest.save()
    return manifest
