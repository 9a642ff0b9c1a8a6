"""Cross-image pixel-pair construction.

For an (input, reference) image pair, J pixels are sampled per image and
all J x J cross pairs are formed. BASE batches draw class-aware from
annotated base pixels and carry same-class labels; NOT_BASE batches draw
uniformly from ignore-labeled pixels and are scored by SimNet instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .synthdata import ClassSplit, WeakShotSample

BASE = "base"
NOT_BASE = "not_base"


@dataclass
class PixelPairBatch:
    region: str
    coords_input: np.ndarray | None      # J x 2 (row, col)
    coords_ref: np.ndarray | None
    pair_embeddings: torch.Tensor | None  # 2C x J x J
    labels: np.ndarray | None             # J x J in {0,1}; BASE batches only
    skipped: bool = False
    balance_achieved: bool = True
    same_class_fraction: float | None = None

    @classmethod
    def empty(cls, region: str) -> "PixelPairBatch":
        return cls(region=region, coords_input=None, coords_ref=None,
                   pair_embeddings=None, labels=None, skipped=True)


def _rounded_counts(props: dict, total: int) -> dict:
    """Largest-remainder rounding of class proportions to integer counts."""
    raw = {c: p * total for c, p in props.items()}
    counts = {c: int(math.floor(v)) for c, v in raw.items()}
    short = total - sum(counts.values())
    order = sorted(props, key=lambda c: (counts[c] - raw[c], c))
    for c in order[:short]:
        counts[c] += 1
    return counts


def _class_proportions(classes: list, concentrate_on, weight: float) -> dict:
    if concentrate_on is None or len(classes) == 1:
        return {c: 1.0 / len(classes) for c in classes}
    others = [c for c in classes if c != concentrate_on]
    props = {c: (1.0 - weight) / len(others) for c in others}
    props[concentrate_on] = weight
    return props


def _draw_coords(mask: np.ndarray, class_counts: dict,
                 rng: np.random.Generator) -> tuple:
    coords, classes = [], []
    for c, count in class_counts.items():
        if count == 0:
            continue
        pix = np.argwhere(mask == c)
        idx = rng.choice(len(pix), size=count, replace=len(pix) < count)
        coords.append(pix[idx])
        classes.extend([c] * count)
    return np.concatenate(coords, axis=0), np.asarray(classes)


def _pair_grid(e_input: torch.Tensor, e_ref: torch.Tensor,
               coords_input: np.ndarray, coords_ref: np.ndarray) -> torch.Tensor:
    """Concatenate pixel embeddings over all cross pairs -> 2C x J x J."""
    j = len(coords_input)
    a = e_input[:, coords_input[:, 0], coords_input[:, 1]]   # C x J
    b = e_ref[:, coords_ref[:, 0], coords_ref[:, 1]]         # C x J
    top = a[:, :, None].expand(-1, -1, j)
    bottom = b[:, None, :].expand(-1, j, -1)
    return torch.cat([top, bottom], dim=0)


def sample_pixel_pairs(input_sample: WeakShotSample, ref_sample: WeakShotSample,
                       e_pix_input: torch.Tensor, e_pix_ref: torch.Tensor,
                       region: str, j: int, split: ClassSplit,
                       rng: np.random.Generator) -> PixelPairBatch:
    """Sample a J x J pixel-pair batch for the given region.

    BASE sampling is class-aware: when the two images share a base class,
    draw proportions concentrate on one shared class so the same-class
    fraction of the J x J pairs lands near 0.5 (flagged when the label
    structure makes the [0.3, 0.7] band unreachable). Regions thinner than
    J pixels are sampled with replacement; empty regions yield a skipped
    batch.
    """
    if j < 2:
        raise ValueError("need at least 2 pixels per image")
    if region == NOT_BASE:
        picks = []
        for sample in (input_sample, ref_sample):
            pix = np.argwhere(sample.mask == split.ignore_id)
            if len(pix) == 0:
                return PixelPairBatch.empty(region)
            idx = rng.choice(len(pix), size=j, replace=len(pix) < j)
            picks.append(pix[idx])
        coords_input, coords_ref = picks
        pair = _pair_grid(e_pix_input, e_pix_ref, coords_input, coords_ref)
        return PixelPairBatch(region=region, coords_input=coords_input,
                              coords_ref=coords_ref, pair_embeddings=pair,
                              labels=None)
    if region != BASE:
        raise ValueError(f"unknown region {region!r}")

    cls_input = sorted(set(np.unique(input_sample.mask)) & split.base_ids)
    cls_ref = sorted(set(np.unique(ref_sample.mask)) & split.base_ids)
    if not cls_input or not cls_ref:
        return PixelPairBatch.empty(region)

    shared = sorted(set(cls_input) & set(cls_ref))
    if shared:
        anchor = shared[int(rng.integers(len(shared)))]
        # Same-class mass is dominated by the anchor's product of draw
        # weights; aim that product at 0.5.
        w_input = 1.0 if len(cls_input) == 1 else math.sqrt(0.5)
        w_ref = min(1.0, 0.5 / w_input) if len(cls_ref) > 1 else 1.0
        props_input = _class_proportions(cls_input, anchor, w_input)
        props_ref = _class_proportions(cls_ref, anchor, w_ref)
    else:
        props_input = _class_proportions(cls_input, None, 0.0)
        props_ref = _class_proportions(cls_ref, None, 0.0)

    coords_input, classes_input = _draw_coords(
        input_sample.mask, _rounded_counts(props_input, j), rng)
    coords_ref, classes_ref = _draw_coords(
        ref_sample.mask, _rounded_counts(props_ref, j), rng)
    labels = (classes_input[:, None] == classes_ref[None, :]).astype(np.int64)
    fraction = float(labels.mean())
    pair = _pair_grid(e_pix_input, e_pix_ref, coords_input, coords_ref)
    return PixelPairBatch(region=region, coords_input=coords_input,
                          coords_ref=coords_ref, pair_embeddings=pair,
                          labels=labels, balance_achieved=0.3 <= fraction <= 0.7,
                          same_class_fraction=fraction)


def gather_novel_scores(class_probs: torch.Tensor, mask_scores: torch.Tensor,
                        split: ClassSplit, coords: np.ndarray) -> torch.Tensor:
    """Fused novel-class segmentation scores at sampled pixels.

    Entry (c, j) sums Y[c, i] * M[i, h_j, w_j] over proposals; gradients
    flow into both factors. Rows follow ascending novel class ID.
    """
    h, w = mask_scores.shape[1:]
    coords = np.asarray(coords)
    if coords.size and (coords.min() < 0 or coords[:, 0].max() >= h
                        or coords[:, 1].max() >= w):
        raise ValueError("pixel coordinate out of bounds")
    novel = sorted(split.novel_ids)
    y_novel = class_probs[novel, :]                        # |Cn| x N
    m_sel = mask_scores[:, coords[:, 0], coords[:, 1]]     # N x J
    return y_novel @ m_sel
