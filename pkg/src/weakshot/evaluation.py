"""IoU metrics, pair-similarity transferability F1, and the seed significance test."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import stats

from .inference import semantic_segment
from .sampling import BASE, NOT_BASE, sample_pixel_pairs
from .synthdata import ClassSplit, DatasetManifest, sample_reference


@dataclass
class IoUReport:
    per_class_iou: dict                 # class ID -> IoU, defined classes only
    mean_novel_iou: float
    mean_base_iou: float
    intersections: dict = field(default_factory=dict)
    unions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
            "mean_novel_iou": self.mean_novel_iou,
            "mean_base_iou": self.mean_base_iou,
            "intersections": {str(k): v for k, v in self.intersections.items()},
            "unions": {str(k): v for k, v in self.unions.items()},
        }


@dataclass
class PairF1Report:
    f1: dict            # (group, decision) -> F1, e.g. ("novel", "similar")
    counts: dict        # (group, decision) -> number of labeled pairs

    def to_dict(self) -> dict:
        return {
            "f1": {f"{g}_{d}": v for (g, d), v in self.f1.items()},
            "counts": {f"{g}_{d}": v for (g, d), v in self.counts.items()},
        }


@dataclass
class SignificanceResult:
    p_value: float
    mean_a: float
    std_a: float
    mean_b: float
    std_b: float

    def summary(self, side: str) -> str:
        mean, std = (self.mean_a, self.std_a) if side == "a" else \
                    (self.mean_b, self.std_b)
        return format_mean_std(mean, std)


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.1f}±{std:.2f}"


def compute_miou(predictions, gts, split: ClassSplit) -> IoUReport:
    """Whole-set intersection/union per class, averaged within each group.

    Classes whose accumulated union is zero never occur and are excluded
    from the group means.
    """
    if len(predictions) != len(gts):
        raise ValueError("prediction and GT lists differ in length")
    inter = {c: 0 for c in split.semantic_ids}
    union = {c: 0 for c in split.semantic_ids}
    for pred, gt in zip(predictions, gts):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError("prediction and GT shapes differ")
        for c in split.semantic_ids:
            p = pred == c
            g = gt == c
            inter[c] += int(np.sum(p & g))
            union[c] += int(np.sum(p | g))
    per_class = {c: inter[c] / union[c] for c in split.semantic_ids
                 if union[c] > 0}
    novel = [per_class[c] for c in sorted(split.novel_ids) if c in per_class]
    base = [per_class[c] for c in sorted(split.base_ids) if c in per_class]
    return IoUReport(per_class_iou=per_class,
                     mean_novel_iou=float(np.mean(novel)) if novel else float("nan"),
                     mean_base_iou=float(np.mean(base)) if base else float("nan"),
                     intersections=inter, unions=union)


def evaluate_model(model, manifest: DatasetManifest, sample_ids,
                   split: ClassSplit | None = None) -> IoUReport:
    """Segment the listed samples and score them against their full masks."""
    split = split or manifest.split
    preds, gts = [], []
    model.eval()
    with torch.no_grad():
        for sid in sample_ids:
            full = manifest.load_full(sid)
            out = model.forward(full.image.astype(np.float32))
            result = semantic_segment(out.class_probs, out.mask_scores,
                                      split.semantic_ids)
            preds.append(result.labels)
            gts.append(full.mask)
    return compute_miou(preds, gts, split)


def _f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def _pair_f1(scores: np.ndarray, labels: np.ndarray,
             threshold: float = 0.5) -> dict:
    pred = scores >= threshold
    lab = labels.astype(bool)
    out = {}
    out["similar"] = _f1_from_counts(int(np.sum(pred & lab)),
                                     int(np.sum(pred & ~lab)),
                                     int(np.sum(~pred & lab)))
    out["dissimilar"] = _f1_from_counts(int(np.sum(~pred & ~lab)),
                                        int(np.sum(~pred & lab)),
                                        int(np.sum(pred & ~lab)))
    return out


def eval_simnet_f1(model, manifest: DatasetManifest,
                   num_image_pairs: int = 100, j: int = 100,
                   rng: np.random.Generator | None = None,
                   scorer=None) -> PairF1Report:
    """Pair-similarity transferability on training image pairs.

    Base pairs are labeled from the weak masks; novel pairs (sampled from
    ignore regions) are labeled from the oracle full masks. `scorer`
    overrides SimNet; it receives (pair_embeddings, gt_labels) and a real
    model must ignore the labels (they exist so tests can plug in a GT
    oracle or a constant scorer).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    split = manifest.split
    if scorer is None:
        scorer = lambda pair_emb, gt: \
            model.simnet(pair_emb).detach().cpu().numpy()
    groups = {"base": ([], []), "novel": ([], [])}
    model.eval()
    with torch.no_grad():
        for _ in range(num_image_pairs):
            sid = manifest.train_ids[int(rng.integers(len(manifest.train_ids)))]
            sample = manifest.load_weak(sid)
            ref, _level = sample_reference(sample, manifest, rng)
            e_in = model.forward(sample.image.astype(np.float32)).e_pix
            e_ref = e_in if ref.source_id == sample.source_id else \
                model.forward(ref.image.astype(np.float32)).e_pix

            batch = sample_pixel_pairs(sample, ref, e_in, e_ref, BASE, j,
                                       split, rng)
            if not batch.skipped:
                scores = np.asarray(scorer(batch.pair_embeddings, batch.labels))
                groups["base"][0].append(scores.ravel())
                groups["base"][1].append(batch.labels.ravel())

            batch = sample_pixel_pairs(sample, ref, e_in, e_ref, NOT_BASE, j,
                                       split, rng)
            if not batch.skipped:
                full_in = manifest.load_full(sample.source_id).mask
                full_ref = manifest.load_full(ref.source_id).mask
                ci, cr = batch.coords_input, batch.coords_ref
                cls_in = full_in[ci[:, 0], ci[:, 1]]
                cls_ref = full_ref[cr[:, 0], cr[:, 1]]
                labels = (cls_in[:, None] == cls_ref[None, :]).astype(np.int64)
                scores = np.asarray(scorer(batch.pair_embeddings, labels))
                groups["novel"][0].append(scores.ravel())
                groups["novel"][1].append(labels.ravel())

    f1, counts = {}, {}
    for group, (score_parts, label_parts) in groups.items():
        scores = np.concatenate(score_parts) if score_parts else np.zeros(0)
        labels = np.concatenate(label_parts) if label_parts else np.zeros(0)
        per = _pair_f1(scores, labels)
        for decision in ("dissimilar", "similar"):
            f1[(group, decision)] = per[decision]
            want = 0 if decision == "dissimilar" else 1
            counts[(group, decision)] = int(np.sum(labels == want))
    return PairF1Report(f1=f1, counts=counts)


def significance_test(runs_a, runs_b) -> SignificanceResult:
    """Two-sided Welch test between two lists of per-seed scores.

    Zero variance on both sides degenerates to p = 1.0 for equal means
    and p = 0.0 otherwise.
    """
    a = np.asarray(runs_a, dtype=np.float64)
    b = np.asarray(runs_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("need at least 2 runs per side")
    mean_a, mean_b = float(a.mean()), float(b.mean())
    std_a = float(a.std(ddof=1))
    std_b = float(b.std(ddof=1))
    if std_a == 0.0 and std_b == 0.0:
        p = 1.0 if mean_a == mean_b else 0.0
    else:
        p = float(stats.ttest_ind(a, b, equal_var=False).pvalue)
    return SignificanceResult(p_value=p, mean_a=mean_a, std_a=std_a,
                              mean_b=mean_b, std_b=std_b)
