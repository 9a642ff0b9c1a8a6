"""Side-by-side inspection panels: image, GT, base/novel split map, prediction."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .synthdata import ClassSplit, class_style

IGNORE_COLOR = (30, 30, 30)
BASE_COLOR = (205, 60, 60)      # base pixels drawn red
NOVEL_COLOR = (70, 100, 215)    # novel pixels drawn blue


def colorize_mask(mask: np.ndarray, num_background: int,
                  ignore_id: int = 255) -> np.ndarray:
    out = np.zeros((*mask.shape, 3), dtype=np.uint8)
    out[:] = IGNORE_COLOR
    for c in np.unique(mask):
        if c == ignore_id:
            continue
        _, color = class_style(int(c), num_background)
        out[mask == c] = np.clip(np.round(np.asarray(color) * 255), 0, 255)
    return out


def split_map(full_mask: np.ndarray, split: ClassSplit) -> np.ndarray:
    out = np.zeros((*full_mask.shape, 3), dtype=np.uint8)
    out[:] = IGNORE_COLOR
    out[np.isin(full_mask, sorted(split.base_ids))] = BASE_COLOR
    out[np.isin(full_mask, sorted(split.novel_ids))] = NOVEL_COLOR
    return out


def save_panel(path: str, image: np.ndarray, gt_mask: np.ndarray,
               full_mask: np.ndarray, pred_mask: np.ndarray,
               split: ClassSplit, num_background: int):
    """image | GT | split map | prediction, separated by white gutters."""
    img8 = np.clip(np.round(image * 255), 0, 255).astype(np.uint8)
    panels = [
        img8,
        colorize_mask(gt_mask, num_background, split.ignore_id),
        split_map(full_mask, split),
        colorize_mask(pred_mask, num_background, split.ignore_id),
    ]
    h = panels[0].shape[0]
    gutter = np.full((h, 2, 3), 255, dtype=np.uint8)
    strips = []
    for i, p in enumerate(panels):
        if i:
            strips.append(gutter)
        strips.append(p)
    Image.fromarray(np.concatenate(strips, axis=1), mode="RGB").save(path)
