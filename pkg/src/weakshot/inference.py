"""Fusing proposals into a semantic label map, and mixed-label construction."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .synthdata import ClassSplit, WeakShotSample


@dataclass
class SegmentationResult:
    labels: np.ndarray      # H x W semantic class IDs
    scores: np.ndarray      # K x H x W fused scores, rows by class_id_order
    class_id_order: tuple


def semantic_segment(class_probs, mask_scores, class_id_order) -> SegmentationResult:
    """Per-pixel argmax over class-weighted mask sums.

    scores[c] = sum_i Y[c, i] * M[i]; the ignore row of Y never competes.
    Ties go to the smallest class ID.
    """
    y = class_probs.detach().cpu().numpy() if torch.is_tensor(class_probs) \
        else np.asarray(class_probs)
    m = mask_scores.detach().cpu().numpy() if torch.is_tensor(mask_scores) \
        else np.asarray(mask_scores)
    ids = list(class_id_order)
    if y.shape[0] not in (len(ids), len(ids) + 1):
        raise ValueError("class_probs rows do not match class_id_order")
    scores = np.einsum("kn,nhw->khw", y[:len(ids)], m)
    order = np.argsort(ids, kind="stable")
    ordered = scores[order]
    winners = np.argmax(ordered, axis=0)      # first max -> smallest class ID
    ids_sorted = np.asarray(ids)[order]
    return SegmentationResult(labels=ids_sorted[winners], scores=scores,
                              class_id_order=tuple(ids))


def make_pseudo_labels(sample: WeakShotSample, result: SegmentationResult,
                       split: ClassSplit,
                       min_confidence: float | None = None) -> np.ndarray:
    """Mixed mask: GT base pixels kept, ignore pixels filled from prediction.

    Predicted classes absent from the image-level labels are suppressed
    back to the ignore ID. `min_confidence` (off by default) additionally
    drops fills whose winning fused score is below the threshold.
    """
    if result.labels.shape != sample.mask.shape:
        raise ValueError("prediction and sample resolutions differ")
    mixed = sample.mask.copy()
    ignore_pix = sample.mask == split.ignore_id
    pred = result.labels
    allowed = np.isin(pred, sorted(sample.image_labels))
    if min_confidence is not None:
        allowed &= result.scores.max(axis=0) >= min_confidence
    fill = np.where(allowed, pred, split.ignore_id)
    mixed[ignore_pix] = fill[ignore_pix]
    return mixed


def save_prediction_png(path: str, labels: np.ndarray):
    """Predicted mask in the dataset's 8-bit single-channel format."""
    from PIL import Image
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def dump_scores(path_prefix: str, scores: np.ndarray):
    """Raw fused scores: 32-bit binary plus a JSON shape header."""
    arr = scores.astype(np.float32)
    arr.tofile(path_prefix + ".bin")
    with open(path_prefix + ".json", "w") as f:
        json.dump({"dtype": "float32", "shape": list(arr.shape),
                   "order": "c"}, f)


def load_scores(path_prefix: str) -> np.ndarray:
    with open(path_prefix + ".json") as f:
        header = json.load(f)
    arr = np.fromfile(path_prefix + ".bin", dtype=np.float32)
    return arr.reshape(header["shape"])
