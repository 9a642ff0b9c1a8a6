"""End-to-end optimization: batch assembly with reference images, matching,
loss computation, poly learning-rate schedule, checkpointing, and the
second-stage re-training on mixed GT/pseudo labels."""

from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from PIL import Image

from . import losses as L
from .evaluation import evaluate_model
from .inference import make_pseudo_labels, semantic_segment
from .matching import TargetEntry, match_targets
from .model import ModelConfig, SegModel, load_checkpoint, save_checkpoint
from .sampling import BASE, NOT_BASE, gather_novel_scores, sample_pixel_pairs
from .synthdata import (ClassSplit, DatasetManifest, WeakShotSample,
                        choose_reference_id, make_weakshot)


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    weight_decay: float = 1e-4
    total_iters: int = 20000
    batch_size: int = 8             # image pairs per step
    poly_power: float = 0.9
    eval_interval: int = 1000
    log_interval: int = 25
    flip: bool = True
    crop_size: int = 0              # 0 disables random crops
    sim_loss: bool = True
    pixel_transfer: bool = True     # distillation loss toggle
    # SimNet burn-in: distillation starts once the pair scorer has seen
    # this many iterations of base-pair supervision.
    dist_warmup_iters: int = 300
    comp_loss: bool = True          # complementary loss toggle
    reference_mode: str = "cross"   # "cross" or "self"
    pair_count: int = 100           # J pixels per image
    seed: int = 0
    float64: bool = False
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if self.lr0 <= 0 or self.total_iters <= 0:
            raise ValueError("lr0 and total_iters must be positive")
        if self.reference_mode not in ("cross", "self"):
            raise ValueError("reference_mode must be 'cross' or 'self'")
        self.loss.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = L.LossConfig(**d["loss"])
        if "model" in d:
            m = dict(d["model"])
            if "backbone_channels" in m:
                m["backbone_channels"] = tuple(m["backbone_channels"])
            d["model"] = ModelConfig(**m)
        return cls(**d)


def poly_lr(lr0: float, iteration: int, total_iters: int, power: float) -> float:
    frac = min(max(iteration / total_iters, 0.0), 1.0)
    return lr0 * (1.0 - frac) ** power


class TrainDataset:
    """Preloaded training samples under one of three supervision modes.

    weak:   masks with novel pixels ignored; labels cover base and novel.
    oracle: full GT masks, every class treated as base.
    mixed:  masks from a pseudo-label directory, every class treated as base.
    """

    def __init__(self, manifest: DatasetManifest, mode: str = "weak",
                 mixed_dir: str | None = None):
        if mode not in ("weak", "oracle", "mixed"):
            raise ValueError(f"unknown dataset mode {mode!r}")
        self.manifest = manifest
        self.mode = mode
        split = manifest.split
        if mode == "weak":
            self.effective_split = split
        else:
            self.effective_split = ClassSplit(
                base_ids=frozenset(split.semantic_ids),
                novel_ids=frozenset(), ignore_id=split.ignore_id)
        self.samples = {}
        for sid in manifest.train_ids:
            full = manifest.load_full(sid)
            if mode == "weak":
                s = make_weakshot(full, split)
            elif mode == "oracle":
                s = WeakShotSample(full.image, full.mask,
                                   set(full.present_classes), sid)
            else:
                path = os.path.join(mixed_dir, f"{sid}_mask.png")
                mask = np.asarray(Image.open(path), dtype=np.int64)
                labels = set(np.unique(mask).tolist()) - {split.ignore_id}
                s = WeakShotSample(full.image, mask, labels, sid)
            s.image = s.image.astype(np.float32)
            self.samples[sid] = s

    def get(self, sid: str) -> WeakShotSample:
        return self.samples[sid]


def _augment(sample: WeakShotSample, cfg: TrainConfig, split: ClassSplit,
             rng: np.random.Generator) -> WeakShotSample:
    image, mask = sample.image, sample.mask
    labels = set(sample.image_labels)
    if cfg.flip and rng.random() < 0.5:
        image = image[:, ::-1].copy()
        mask = mask[:, ::-1].copy()
    cs = cfg.crop_size
    if cs and cs < mask.shape[0]:
        y0 = int(rng.integers(mask.shape[0] - cs + 1))
        x0 = int(rng.integers(mask.shape[1] - cs + 1))
        image = image[y0:y0 + cs, x0:x0 + cs].copy()
        mask = mask[y0:y0 + cs, x0:x0 + cs].copy()
        # Base presence is recomputed from the visible crop; novel labels
        # are kept since their pixels are hidden behind the ignore region.
        visible = set(np.unique(mask).tolist()) - {split.ignore_id}
        labels = (labels & split.novel_ids) | visible
    return WeakShotSample(image, mask, labels, sample.source_id)


@dataclass
class PairEntry:
    input: WeakShotSample
    ref: WeakShotSample
    fallback_level: int

    @property
    def self_pair(self) -> bool:
        return self.ref is self.input


class Trainer:
    """Single-writer optimization loop over (input, reference) image pairs."""

    def __init__(self, config: TrainConfig, manifest: DatasetManifest,
                 out_dir: str, mode: str = "weak",
                 mixed_dir: str | None = None):
        config.validate()
        self.config = config
        self.manifest = manifest
        self.out_dir = out_dir
        self.mode = mode
        os.makedirs(out_dir, exist_ok=True)
        self.dtype = torch.float64 if config.float64 else torch.float32
        self.dataset = TrainDataset(manifest, mode, mixed_dir)
        self.split = self.dataset.effective_split
        mcfg = config.model
        mcfg.num_classes = manifest.split.num_semantic
        torch.manual_seed(config.seed)
        self.model = SegModel(mcfg).to(self.dtype)
        self.opt = torch.optim.AdamW(self.model.parameters(), lr=config.lr0,
                                     weight_decay=config.weight_decay)
        self.rng = np.random.default_rng(config.seed)
        self.iteration = 0
        self.best_novel = float("-inf")
        self.recent_full = deque(maxlen=100)

    # ----- batch assembly -------------------------------------------------

    def make_batch(self) -> list:
        ids = self.manifest.train_ids
        cfg = self.config
        picked = self.rng.choice(len(ids), size=cfg.batch_size,
                                 replace=len(ids) < cfg.batch_size)
        batch = []
        for i in picked:
            sid = ids[int(i)]
            inp = self.dataset.get(sid)
            if cfg.reference_mode == "self":
                ref_id, level = sid, 3
            else:
                ref_id, level = choose_reference_id(
                    inp.image_labels, sid, self.manifest, self.rng)
            inp = _augment(inp, cfg, self.split, self.rng)
            if ref_id == sid:
                ref = inp
            else:
                ref = _augment(self.dataset.get(ref_id), cfg, self.split,
                               self.rng)
            batch.append(PairEntry(input=inp, ref=ref, fallback_level=level))
        return batch

    # ----- one optimization step ------------------------------------------

    def train_step(self, batch: list | None = None) -> L.LossReport:
        if batch is None:
            batch = self.make_batch()
        cfg, lcfg, split = self.config, self.config.loss, self.split
        self.model.train()

        images, index = [], {}
        for entry in batch:
            for sample in ((entry.input,) if entry.self_pair
                           else (entry.input, entry.ref)):
                index[id(sample)] = len(images)
                images.append(sample)
        stack = torch.as_tensor(
            np.stack([s.image for s in images]), dtype=self.dtype
        ).permute(0, 3, 1, 2)
        e_prop, e_pix, probs, masks = self.model.forward_batch(stack)

        zero = stack.new_zeros(())
        cls_terms, mask_terms, comp_terms = [], [], []
        sim_terms, dist_terms = [], []
        counts = {"images": len(images), "mask_proposals": 0,
                  "sim_batches": 0, "dist_batches": 0, "comp_images": 0}

        for k, sample in enumerate(images):
            targets = []
            for c in sorted(sample.image_labels):
                if c in split.base_ids:
                    gt = torch.as_tensor(sample.mask == c, dtype=self.dtype)
                    targets.append(TargetEntry(c, gt))
                else:
                    targets.append(TargetEntry(c, None))
            assign = match_targets(probs[k], masks[k], targets, split, lcfg)
            cls_terms.append(L.loss_cls(probs[k], assign.y_star,
                                        split.ignore_id, lcfg.eps))
            mloss, n_m = L.loss_mask(masks[k], assign.y_star, targets,
                                     split, lcfg)
            mask_terms.append(mloss)
            counts["mask_proposals"] += n_m
            if cfg.comp_loss:
                closs, n_c = L.loss_comp(masks[k], assign.y_star, targets,
                                         split, lcfg)
                if closs is not None:
                    comp_terms.append(closs)
                    counts["comp_images"] += 1

        for entry in batch:
            ki = index[id(entry.input)]
            kr = index[id(entry.ref)]
            if cfg.sim_loss:
                pb = sample_pixel_pairs(entry.input, entry.ref,
                                        e_pix[ki], e_pix[kr], BASE,
                                        cfg.pair_count, split, self.rng)
                if not pb.skipped:
                    emb = pb.pair_embeddings
                    if lcfg.sim_stopgrad_pix:
                        emb = emb.detach()
                    scores = self.model.simnet(emb)
                    labels = torch.as_tensor(pb.labels)
                    sim_terms.append(L.loss_sim(scores, labels, lcfg))
                    counts["sim_batches"] += 1
            if cfg.pixel_transfer and split.novel_ids and \
                    self.iteration >= cfg.dist_warmup_iters:
                nb = sample_pixel_pairs(entry.input, entry.ref,
                                        e_pix[ki], e_pix[kr], NOT_BASE,
                                        cfg.pair_count, split, self.rng)
                if not nb.skipped:
                    with torch.no_grad():
                        r_n = self.model.simnet(nb.pair_embeddings)
                    s_in = gather_novel_scores(probs[ki], masks[ki], split,
                                               nb.coords_input)
                    s_ref = gather_novel_scores(probs[kr], masks[kr], split,
                                                nb.coords_ref)
                    dist_terms.append(L.loss_dist(s_in, s_ref, r_n, lcfg))
                    counts["dist_batches"] += 1

        cls = torch.stack(cls_terms).mean() if cls_terms else zero
        mask = torch.stack(mask_terms).mean() if mask_terms else zero
        sim = torch.stack(sim_terms).mean() if sim_terms else zero
        dist = torch.stack(dist_terms).mean() if dist_terms else None
        comp = torch.stack(comp_terms).mean() if comp_terms else None

        total = cls + mask + sim
        if dist is not None:
            total = total + lcfg.alpha * dist
        if comp is not None:
            total = total + lcfg.beta * comp

        if not torch.isfinite(total):
            self._dump_diagnostics(batch, cls, mask, sim, dist, comp)
            raise RuntimeError(
                f"non-finite loss at iteration {self.iteration}; "
                f"diagnostic dump written to {self.out_dir}")

        self.opt.zero_grad(set_to_none=True)
        total.backward()
        lr = poly_lr(self.config.lr0, self.iteration,
                     self.config.total_iters, self.config.poly_power)
        for group in self.opt.param_groups:
            group["lr"] = lr
        self.opt.step()
        self.iteration += 1

        report = L.LossReport(
            cls=cls.item(), mask=mask.item(), sim=sim.item(),
            dist=None if dist is None else dist.item(),
            comp=None if comp is None else comp.item(),
            full=total.item(), counts=counts,
            fallback_levels=tuple(e.fallback_level for e in batch))
        self.recent_full.append(report.full)
        return report

    def _dump_diagnostics(self, batch, cls, mask, sim, dist, comp):
        doc = {
            "iteration": self.iteration,
            "sample_ids": [[e.input.source_id, e.ref.source_id] for e in batch],
            "fallback_levels": [e.fallback_level for e in batch],
            "components": {
                "cls": cls.item(), "mask": mask.item(), "sim": sim.item(),
                "dist": None if dist is None else dist.item(),
                "comp": None if comp is None else comp.item(),
            },
        }
        with open(os.path.join(self.out_dir, "diagnostic_dump.json"), "w") as f:
            json.dump(doc, f, indent=1)

    # ----- checkpointing ----------------------------------------------------

    def save(self, path: str):
        torch.save({
            "iteration": self.iteration,
            "train_config": self.config.to_dict(),
            "mode": self.mode,
            "model_config_json": json.dumps(asdict(self.model.config)),
            "model_state": self.model.state_dict(),
            "opt_state": self.opt.state_dict(),
            "rng_state": self.rng.bit_generator.state,
            "best_novel": self.best_novel,
            "recent_full": list(self.recent_full),
        }, path)

    def restore(self, path: str):
        payload = torch.load(path, map_location="cpu", weights_only=False)
        self.iteration = payload["iteration"]
        self.model.load_state_dict(payload["model_state"])
        self.opt.load_state_dict(payload["opt_state"])
        self.rng.bit_generator.state = payload["rng_state"]
        self.best_novel = payload["best_novel"]
        self.recent_full = deque(payload["recent_full"], maxlen=100)

    # ----- full runs ----------------------------------------------------------

    def evaluate(self):
        return evaluate_model(self.model, self.manifest,
                              self.manifest.test_ids, self.manifest.split)

    def run(self, resume: bool = False) -> dict:
        cfg = self.config
        last_path = os.path.join(self.out_dir, "last.pt")
        best_path = os.path.join(self.out_dir, "best.pt")
        if resume and os.path.exists(last_path):
            self.restore(last_path)
        loss_log = open(os.path.join(self.out_dir, "loss_log.jsonl"), "a")
        metrics_log = open(os.path.join(self.out_dir, "metrics.jsonl"), "a")
        try:
            while self.iteration < cfg.total_iters:
                report = self.train_step()
                if self.iteration % cfg.log_interval == 0 or \
                        self.iteration == cfg.total_iters:
                    loss_log.write(json.dumps(
                        {"iteration": self.iteration,
                         "running_full": float(np.mean(self.recent_full))})
                        + "\n")
                    loss_log.write(report.to_json() + "\n")
                    loss_log.flush()
                if self.iteration % cfg.eval_interval == 0 or \
                        self.iteration == cfg.total_iters:
                    iou = self.evaluate()
                    line = {"iteration": self.iteration,
                            "novel_miou": iou.mean_novel_iou,
                            "base_miou": iou.mean_base_iou,
                            "per_class_iou": {str(k): v for k, v
                                              in iou.per_class_iou.items()},
                            "running_full": float(np.mean(self.recent_full))}
                    metrics_log.write(json.dumps(line) + "\n")
                    metrics_log.flush()
                    if iou.mean_novel_iou >= self.best_novel:
                        self.best_novel = iou.mean_novel_iou
                        save_checkpoint(best_path, self.model,
                                        {"iteration": self.iteration,
                                         "novel_miou": iou.mean_novel_iou})
                    self.save(last_path)
        finally:
            loss_log.close()
            metrics_log.close()
        self.save(last_path)
        return {"last": last_path, "best": best_path,
                "best_novel_miou": self.best_novel,
                "iterations": self.iteration}


def run_training(config: TrainConfig, manifest: DatasetManifest, out_dir: str,
                 mode: str = "weak", resume: bool = False) -> dict:
    return Trainer(config, manifest, out_dir, mode=mode).run(resume=resume)


def generate_mixed_labels(teacher: SegModel, manifest: DatasetManifest,
                          mixed_dir: str,
                          min_confidence: float | None = None) -> str:
    """Write GT-base / pseudo-novel masks for every training image."""
    os.makedirs(mixed_dir, exist_ok=True)
    split = manifest.split
    teacher.eval()
    with torch.no_grad():
        for sid in manifest.train_ids:
            weak = manifest.load_weak(sid)
            out = teacher.forward(weak.image.astype(np.float32))
            result = semantic_segment(out.class_probs, out.mask_scores,
                                      split.semantic_ids)
            mixed = make_pseudo_labels(weak, result, split, min_confidence)
            Image.fromarray(mixed.astype(np.uint8), mode="L").save(
                os.path.join(mixed_dir, f"{sid}_mask.png"))
    return mixed_dir


def run_retraining(config: TrainConfig, manifest: DatasetManifest,
                   teacher_checkpoint: str, out_dir: str,
                   resume: bool = False,
                   pseudo_min_confidence: float | None = None) -> dict:
    """Self-training stage: pseudo-label with the teacher, then train a
    fresh student fully supervised on the mixed labels."""
    if not os.path.exists(teacher_checkpoint):
        raise FileNotFoundError(teacher_checkpoint)
    dtype = torch.float64 if config.float64 else torch.float32
    teacher, _ = load_checkpoint(teacher_checkpoint, dtype)
    mixed_dir = os.path.join(out_dir, "mixed")
    if not resume or not os.path.isdir(mixed_dir):
        generate_mixed_labels(teacher, manifest, mixed_dir,
                              pseudo_min_confidence)
    student_cfg = TrainConfig.from_dict(config.to_dict())
    student_cfg.sim_loss = False
    student_cfg.pixel_transfer = False
    student_cfg.comp_loss = False
    trainer = Trainer(student_cfg, manifest, out_dir, mode="mixed",
                      mixed_dir=mixed_dir)
    return trainer.run(resume=resume)
