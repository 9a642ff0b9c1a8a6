"""Bipartite assignment of image classes to proposals.

Each class present in the image becomes one target; base targets carry
their GT binary mask, novel targets carry none and contribute no mask
term to the assignment cost. Unmatched proposals are assigned no-object.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .losses import LossConfig, focal_term, dice_term
from .synthdata import IGNORE_ID, ClassSplit, WeakShotSample

NO_OBJECT = -1


@dataclass
class TargetEntry:
    class_id: int
    mask: torch.Tensor | None = None    # H x W binary, None for novel classes


@dataclass
class Assignment:
    match: np.ndarray           # proposal -> target index, NO_OBJECT if none
    y_star: np.ndarray          # proposal -> class ID, ignore_id if no-object
    target_to_proposal: np.ndarray
    total_cost: float


def build_targets(sample: WeakShotSample, split: ClassSplit,
                  dtype: torch.dtype = torch.float32) -> list:
    """One target per image-level label; base entries carry a GT mask."""
    targets = []
    for c in sorted(sample.image_labels):
        if c in split.base_ids:
            mask = torch.as_tensor(sample.mask == c, dtype=dtype)
            targets.append(TargetEntry(c, mask))
        elif c in split.novel_ids:
            targets.append(TargetEntry(c, None))
        else:
            raise ValueError(f"label {c} is neither base nor novel")
    return targets


def _batched_focal(preds: torch.Tensor, gts: torch.Tensor,
                   cfg: LossConfig) -> torch.Tensor:
    """Mean focal loss for every (target, proposal) pair: (T, HW) x (N, HW) -> (T, N)."""
    p = preds.clamp(cfg.eps, 1.0 - cfg.eps)
    pos = -cfg.focal_alpha * (1.0 - p) ** cfg.focal_gamma * torch.log(p)
    neg = -(1.0 - cfg.focal_alpha) * p ** cfg.focal_gamma * torch.log1p(-p)
    return (gts @ pos.T + (1.0 - gts) @ neg.T) / preds.shape[1]


def _batched_dice(preds: torch.Tensor, gts: torch.Tensor,
                  smooth: float) -> torch.Tensor:
    inter = gts @ preds.T
    denom = gts.sum(dim=1, keepdim=True) + preds.sum(dim=1)[None, :]
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


@torch.no_grad()
def build_cost_matrix(class_probs: torch.Tensor, mask_scores: torch.Tensor,
                      targets, split: ClassSplit,
                      cfg: LossConfig) -> torch.Tensor:
    """T x N cost: -w_cls * P(class) plus focal+dice for base targets only."""
    n = class_probs.shape[1]
    if len(targets) > n:
        raise ValueError(
            f"{len(targets)} targets exceed the {n} available proposals")
    class_ids = torch.as_tensor([t.class_id for t in targets], dtype=torch.long)
    cost = -cfg.w_cls * class_probs[class_ids, :]
    with_mask = [i for i, t in enumerate(targets) if t.mask is not None]
    if with_mask:
        gts = torch.stack([targets[i].mask.to(mask_scores.dtype).flatten()
                           for i in with_mask])
        preds = mask_scores.reshape(n, -1)
        mask_cost = (cfg.w_focal * _batched_focal(preds, gts, cfg)
                     + cfg.w_dice * _batched_dice(preds, gts, cfg.dice_smooth))
        cost = cost.clone()
        cost[with_mask, :] += mask_cost
    return cost


def _lex_optimal(cost: np.ndarray, tol: float) -> np.ndarray:
    """Among minimum-cost matchings, pick the lexicographically smallest
    (target index, proposal index) one by fixing targets in order."""
    t_count, n_count = cost.shape
    ri, ci = linear_sum_assignment(cost)
    best_total = float(cost[ri, ci].sum())
    chosen = np.empty(t_count, dtype=np.int64)
    free_cols = list(range(n_count))
    fixed = 0.0
    for t in range(t_count):
        rest_rows = np.arange(t + 1, t_count)
        for p in free_cols:
            candidate = fixed + float(cost[t, p])
            if rest_rows.size:
                cols = [c for c in free_cols if c != p]
                sub = cost[np.ix_(rest_rows, cols)]
                sri, sci = linear_sum_assignment(sub)
                candidate += float(sub[sri, sci].sum())
            if candidate <= best_total + tol:
                chosen[t] = p
                free_cols.remove(p)
                fixed += float(cost[t, p])
                break
        else:
            raise RuntimeError("no feasible completion found (tolerance too tight)")
    return chosen


def hungarian_assign(cost, target_classes=None,
                     ignore_id: int = IGNORE_ID) -> Assignment:
    """Minimum-cost injective target-to-proposal matching.

    Ties between optimal matchings are broken toward the lexicographically
    smallest (target index, proposal index) pairs. `target_classes` fills
    `y_star`; without it matched proposals get their target index there.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    t_count, n_count = cost.shape
    if t_count > n_count:
        raise ValueError(f"{t_count} targets exceed {n_count} proposals")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")

    tol = 1e-9 * max(1.0, float(np.abs(cost).max(initial=0.0)))
    chosen = _lex_optimal(cost, tol)

    match = np.full(n_count, NO_OBJECT, dtype=np.int64)
    y_star = np.full(n_count, ignore_id, dtype=np.int64)
    for t, p in enumerate(chosen):
        match[p] = t
        y_star[p] = target_classes[t] if target_classes is not None else t
    total = float(sum(cost[t, p] for t, p in enumerate(chosen)))
    return Assignment(match=match, y_star=y_star,
                      target_to_proposal=chosen, total_cost=total)


def match_targets(class_probs: torch.Tensor, mask_scores: torch.Tensor,
                  targets, split: ClassSplit, cfg: LossConfig) -> Assignment:
    """Cost construction plus Hungarian matching in one call."""
    cost = build_cost_matrix(class_probs, mask_scores, targets, split, cfg)
    return hungarian_assign(cost.cpu().numpy(),
                            target_classes=[t.class_id for t in targets],
                            ignore_id=split.ignore_id)
