"""Training losses.

Five terms feed the full objective: proposal classification, focal+dice
mask supervision for base proposals, pixel-pair similarity (BCE on scored
base pairs), cross-image similarity distillation onto novel segmentation
scores, and a complementary loss that supervises the union of novel/ignore
masks with the complement of the base ground-truth union.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field

import torch
import torch.nn.functional as F

from .synthdata import IGNORE_ID, ClassSplit


@dataclass
class LossConfig:
    alpha: float = 0.1          # distillation weight
    beta: float = 0.2           # complementary weight
    gamma: float = 0.1          # prior mask value for no-object proposals
    w_cls: float = 1.0
    w_focal: float = 20.0
    w_dice: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    eps: float = 1e-6
    dice_smooth: float = 1.0
    # When True, the pair-similarity loss trains only SimNet and does not
    # push gradients into the pixel embeddings.
    sim_stopgrad_pix: bool = False

    def validate(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")


@dataclass
class LossReport:
    """Per-step loss values; dist/comp are None when their inputs were absent."""

    cls: float
    mask: float
    sim: float
    dist: float | None
    comp: float | None
    full: float
    counts: dict = field(default_factory=dict)
    fallback_levels: tuple = ()

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _check_binary(gt: torch.Tensor):
    if not torch.all((gt == 0) | (gt == 1)):
        raise ValueError("ground-truth mask must be binary")


def focal_term(pred: torch.Tensor, gt: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Mean binary focal loss over pixels; pred is clamped away from {0,1}."""
    p = pred.clamp(cfg.eps, 1.0 - cfg.eps)
    pt = torch.where(gt > 0.5, p, 1.0 - p)
    at = torch.where(gt > 0.5,
                     torch.as_tensor(cfg.focal_alpha, dtype=p.dtype),
                     torch.as_tensor(1.0 - cfg.focal_alpha, dtype=p.dtype))
    return (-at * (1.0 - pt) ** cfg.focal_gamma * torch.log(pt)).mean()


def dice_term(pred: torch.Tensor, gt: torch.Tensor,
              smooth: float = 1.0) -> torch.Tensor:
    """Smoothed dice loss; symmetric in its two arguments."""
    inter = (pred * gt).sum()
    return 1.0 - (2.0 * inter + smooth) / (pred.sum() + gt.sum() + smooth)


def loss_focal_dice(pred: torch.Tensor, gt: torch.Tensor,
                    cfg: LossConfig) -> torch.Tensor:
    """Weighted focal + dice on one predicted mask against a binary target."""
    if pred.shape != gt.shape:
        raise ValueError("pred and gt shapes differ")
    _check_binary(gt)
    return (cfg.w_focal * focal_term(pred, gt, cfg)
            + cfg.w_dice * dice_term(pred, gt, cfg.dice_smooth))


def loss_cls(class_probs: torch.Tensor, y_star, ignore_id: int = IGNORE_ID,
             eps: float = 1e-6) -> torch.Tensor:
    """Sum over proposals of -log probability of the assigned class.

    `class_probs` is (K+1, N) with row K the ignore/no-object class;
    `y_star` maps each proposal to a class ID (ignore_id for no-object).
    """
    k = class_probs.shape[0] - 1
    rows = torch.as_tensor([k if int(c) == ignore_id else int(c) for c in y_star],
                           dtype=torch.long)
    cols = torch.arange(class_probs.shape[1])
    picked = class_probs[rows, cols].clamp(eps, 1.0)
    return -torch.log(picked).sum()


def loss_mask(mask_scores: torch.Tensor, y_star, targets, split: ClassSplit,
              cfg: LossConfig) -> tuple:
    """Focal+dice over base-matched proposals. Returns (loss, term count)."""
    gt_by_class = {t.class_id: t.mask for t in targets if t.mask is not None}
    total = mask_scores.new_zeros(())
    n_terms = 0
    for i, c in enumerate(y_star):
        c = int(c)
        if c in split.base_ids:
            total = total + loss_focal_dice(mask_scores[i], gt_by_class[c], cfg)
            n_terms += 1
    return total, n_terms


def loss_sim(scores: torch.Tensor, labels: torch.Tensor,
             cfg: LossConfig) -> torch.Tensor:
    """Mean binary cross-entropy of pair scores against same-class labels."""
    p = scores.clamp(cfg.eps, 1.0 - cfg.eps)
    y = labels.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def loss_dist(s_input: torch.Tensor, s_ref: torch.Tensor,
              r_n: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Distill detached pair-similarity scores into novel segmentation scores.

    Columns of `s_input`/`s_ref` are per-pixel novel-class score vectors;
    all cross pairs are compared by cosine similarity (zero-norm vectors
    compare as 0), rectified, and pushed toward `r_n` by BCE.
    """
    if s_input.shape[0] != s_ref.shape[0]:
        raise ValueError("score matrices must share the class dimension")
    if r_n.shape != (s_input.shape[1], s_ref.shape[1]):
        raise ValueError("similarity grid shape does not match the pair count")
    r_n = r_n.detach()
    a = F.normalize(s_input, dim=0, eps=1e-12)
    b = F.normalize(s_ref, dim=0, eps=1e-12)
    cos = a.T @ b
    p = torch.relu(cos).clamp(cfg.eps, 1.0 - cfg.eps)
    y = r_n.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def loss_comp(mask_scores: torch.Tensor, y_star, targets, split: ClassSplit,
              cfg: LossConfig) -> tuple:
    """Complementary loss. Returns (loss or None, contributing proposals).

    The union (pixelwise max) of novel-proposal masks and constant-gamma
    grids for no-object proposals is pushed toward the complement of the
    union of base GT masks. Skipped (None) when the image has no base GT
    mask or no novel/no-object proposal.
    """
    base_masks = [t.mask for t in targets if t.mask is not None]
    novel_idx = [i for i, c in enumerate(y_star) if int(c) in split.novel_ids]
    noobj_idx = [i for i, c in enumerate(y_star) if int(c) == split.ignore_id]
    if not base_masks or (not novel_idx and not noobj_idx):
        return None, 0
    target = 1.0 - torch.stack(base_masks).amax(dim=0)
    parts = [mask_scores[i] for i in novel_idx]
    if noobj_idx:
        parts.append(torch.full_like(mask_scores[0], cfg.gamma))
    union = torch.stack(parts).amax(dim=0)
    return loss_focal_dice(union, target, cfg), len(novel_idx) + len(noobj_idx)


def loss_full(cls: float, mask: float, sim: float, dist: float | None,
              comp: float | None, cfg: LossConfig) -> float:
    """Weighted total; absent dist/comp contribute zero."""
    total = cls + mask + sim
    if dist is not None:
        total += cfg.alpha * dist
    if comp is not None:
        total += cfg.beta * comp
    return total
