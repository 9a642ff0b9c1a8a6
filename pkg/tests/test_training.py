import json
import os

import numpy as np
import pytest
import torch

from weakshot.model import load_checkpoint
from weakshot.synthdata import DatasetManifest
from weakshot.training import (TrainConfig, TrainDataset, Trainer,
                               generate_mixed_labels, poly_lr, run_retraining,
                               run_training)

from conftest import tiny_model_config


def fast_config(**overrides) -> TrainConfig:
    cfg = TrainConfig(total_iters=4, batch_size=2, eval_interval=100,
                      log_interval=1, pair_count=8, dist_warmup_iters=0,
                      model=tiny_model_config(num_queries=4), seed=0)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


class TestPolySchedule:
    def test_start_is_initial_rate(self):
        assert poly_lr(1e-4, 0, 20000, 0.9) == 1e-4

    def test_end_is_zero(self):
        assert poly_lr(1e-4, 20000, 20000, 0.9) == 0.0

    def test_midpoint_value(self):
        val = poly_lr(1e-4, 10000, 20000, 0.9)
        assert val == pytest.approx(5.358867312681466e-05, rel=1e-9)
        assert val == pytest.approx(1e-4 * 0.5 ** 0.9, rel=1e-12)


class TestTrainStep:
    def test_step_updates_parameters(self, tiny_corpus):
        trainer = Trainer(fast_config(), tiny_corpus, "/tmp/ws_step")
        before = {n: p.detach().clone()
                  for n, p in trainer.model.named_parameters()}
        report = trainer.train_step()
        assert np.isfinite(report.full)
        changed = any(not torch.equal(before[n], p.detach())
                      for n, p in trainer.model.named_parameters())
        assert changed

    def test_zero_rate_leaves_parameters_bitwise(self, tiny_corpus):
        cfg = fast_config(total_iters=4)
        trainer = Trainer(cfg, tiny_corpus, "/tmp/ws_lr0")
        trainer.train_step()
        trainer.iteration = cfg.total_iters       # poly schedule hits lr = 0
        before = {n: p.detach().clone()
                  for n, p in trainer.model.named_parameters()}
        trainer.train_step()
        for n, p in trainer.model.named_parameters():
            assert torch.equal(before[n], p.detach()), n

    def test_toggles_off_drop_dist_and_comp(self, tiny_corpus):
        cfg = fast_config(pixel_transfer=False, comp_loss=False)
        trainer = Trainer(cfg, tiny_corpus, "/tmp/ws_toggle")
        report = trainer.train_step()
        assert report.dist is None
        assert report.comp is None
        assert report.full == pytest.approx(report.cls + report.mask
                                            + report.sim)

    def test_full_combines_all_terms(self, tiny_corpus):
        cfg = fast_config()
        trainer = Trainer(cfg, tiny_corpus, "/tmp/ws_full")
        report = None
        for _ in range(3):
            report = trainer.train_step()
        lcfg = cfg.loss
        expected = report.cls + report.mask + report.sim
        if report.dist is not None:
            expected += lcfg.alpha * report.dist
        if report.comp is not None:
            expected += lcfg.beta * report.comp
        assert report.full == pytest.approx(expected, rel=1e-6)

    def test_dist_warmup_defers_distillation(self, tiny_corpus):
        cfg = fast_config(dist_warmup_iters=2, total_iters=6)
        trainer = Trainer(cfg, tiny_corpus, "/tmp/ws_warm")
        first = trainer.train_step()
        assert first.dist is None
        trainer.train_step()
        third = trainer.train_step()
        assert third.dist is not None

    def test_no_shared_novel_pair_flagged(self, tiny_corpus):
        """A pair that only shares base classes still trains distillation,
        and the report carries its fallback level."""
        m = tiny_corpus
        novel = m.split.novel_ids
        by_novel = {}
        for sid in m.train_ids:
            key = frozenset(m.image_labels[sid] & novel)
            by_novel.setdefault(key, []).append(sid)
        keys = [k for k in by_novel if k]
        a_key, b_key = None, None
        for i, k1 in enumerate(keys):
            for k2 in keys[i + 1:]:
                if not (k1 & k2):
                    a_key, b_key = k1, k2
        assert a_key is not None, "corpus lacks a disjoint-novel pair"
        restricted = DatasetManifest(
            split=m.split, train_ids=[by_novel[a_key][0], by_novel[b_key][0]],
            test_ids=m.test_ids, image_labels=m.image_labels, root=m.root,
            config=m.config, seed=m.seed)
        cfg = fast_config(batch_size=2)
        trainer = Trainer(cfg, restricted, "/tmp/ws_fallback")
        report = trainer.train_step()
        assert all(level >= 2 for level in report.fallback_levels)
        assert report.dist is not None

    def test_self_reference_mode(self, tiny_corpus):
        cfg = fast_config(reference_mode="self")
        trainer = Trainer(cfg, tiny_corpus, "/tmp/ws_self")
        report = trainer.train_step()
        assert report.fallback_levels == (3, 3)
        assert report.counts["images"] == 2   # each pair forwards one image

    def test_sim_stopgrad_switch_detaches_pair_embeddings(self, tiny_corpus):
        for stopgrad in (False, True):
            cfg = fast_config(pixel_transfer=False, comp_loss=False)
            cfg.loss.sim_stopgrad_pix = stopgrad
            trainer = Trainer(cfg, tiny_corpus, "/tmp/ws_stopgrad")
            seen = []
            inner = trainer.model.simnet.forward
            trainer.model.simnet.forward = \
                lambda emb: (seen.append(emb.requires_grad), inner(emb))[1]
            trainer.train_step()
            assert seen, "similarity batches were never scored"
            assert all(flag is (not stopgrad) for flag in seen)

    def test_non_finite_loss_aborts_with_dump(self, tiny_corpus, tmp_path,
                                              monkeypatch):
        out = str(tmp_path / "nan")
        trainer = Trainer(fast_config(), tiny_corpus, out)
        import weakshot.training as training_mod
        monkeypatch.setattr(
            training_mod.L, "loss_cls",
            lambda *a, **k: torch.tensor(float("nan"), dtype=torch.float64))
        with pytest.raises(RuntimeError, match="non-finite"):
            trainer.train_step()
        assert os.path.exists(os.path.join(out, "diagnostic_dump.json"))


class TestCheckpointDeterminism:
    def test_resume_reproduces_loss_bitwise(self, tiny_corpus, tmp_path):
        cfg = fast_config(float64=True, total_iters=10)
        a = Trainer(cfg, tiny_corpus, str(tmp_path / "a"))
        for _ in range(3):
            a.train_step()
        ckpt = str(tmp_path / "state.pt")
        a.save(ckpt)

        cfg2 = fast_config(float64=True, total_iters=10)
        b = Trainer(cfg2, tiny_corpus, str(tmp_path / "b"))
        b.restore(ckpt)
        ra = a.train_step()
        rb = b.train_step()
        assert ra.full == rb.full
        assert ra.cls == rb.cls and ra.mask == rb.mask and ra.sim == rb.sim
        assert ra.dist == rb.dist and ra.comp == rb.comp
        for (na, pa), (nb, pb) in zip(a.model.named_parameters(),
                                      b.model.named_parameters()):
            assert torch.equal(pa, pb), na


class TestRunTraining:
    def test_writes_logs_and_checkpoints(self, tiny_corpus, tmp_path):
        out = str(tmp_path / "run")
        cfg = fast_config(total_iters=4, eval_interval=2)
        result = run_training(cfg, tiny_corpus, out)
        assert os.path.exists(result["last"])
        assert os.path.exists(result["best"])
        with open(os.path.join(out, "metrics.jsonl")) as f:
            lines = [json.loads(l) for l in f]
        assert lines and {"iteration", "novel_miou", "base_miou"} <= \
            set(lines[0])
        with open(os.path.join(out, "loss_log.jsonl")) as f:
            assert len(f.readlines()) >= 2

    def test_resume_continues_to_total(self, tiny_corpus, tmp_path):
        out = str(tmp_path / "resume")
        cfg = fast_config(total_iters=2, eval_interval=2)
        run_training(cfg, tiny_corpus, out)
        cfg2 = fast_config(total_iters=5, eval_interval=2)
        result = run_training(cfg2, tiny_corpus, out, resume=True)
        assert result["iterations"] == 5


class TestRetraining:
    def test_mixed_labels_are_valid_dataset_masks(self, tiny_corpus, tmp_path):
        from conftest import tiny_model
        from PIL import Image
        model = tiny_model(dtype=torch.float32,
                           num_classes=tiny_corpus.split.num_semantic)
        mixed = generate_mixed_labels(model, tiny_corpus,
                                      str(tmp_path / "mixed"))
        split = tiny_corpus.split
        for sid in tiny_corpus.train_ids[:5]:
            arr = np.asarray(Image.open(os.path.join(mixed,
                                                     f"{sid}_mask.png")))
            allowed = set(split.semantic_ids) | {split.ignore_id}
            assert set(np.unique(arr).tolist()) <= allowed
            weak = tiny_corpus.load_weak(sid)
            base_pix = weak.mask != split.ignore_id
            assert np.array_equal(arr[base_pix], weak.mask[base_pix])

    def test_retraining_end_to_end(self, tiny_corpus, tmp_path):
        teacher_dir = str(tmp_path / "teacher")
        cfg = fast_config(total_iters=2, eval_interval=2)
        run_training(cfg, tiny_corpus, teacher_dir)
        student_dir = str(tmp_path / "student")
        result = run_retraining(fast_config(total_iters=2, eval_interval=2),
                                tiny_corpus, os.path.join(teacher_dir,
                                                          "best.pt"),
                                student_dir)
        assert os.path.exists(result["best"])
        assert os.path.isdir(os.path.join(student_dir, "mixed"))
        model, _ = load_checkpoint(result["best"])
        assert model.config.num_classes == tiny_corpus.split.num_semantic

    def test_missing_teacher_rejected(self, tiny_corpus, tmp_path):
        with pytest.raises(FileNotFoundError):
            run_retraining(fast_config(), tiny_corpus,
                           str(tmp_path / "nope.pt"), str(tmp_path / "s"))


class TestDatasetModes:
    def test_oracle_mode_exposes_full_masks(self, tiny_corpus):
        ds = TrainDataset(tiny_corpus, mode="oracle")
        assert not ds.effective_split.novel_ids
        sid = tiny_corpus.train_ids[0]
        full = tiny_corpus.load_full(sid)
        assert np.array_equal(ds.get(sid).mask, full.mask)

    def test_weak_mode_hides_novel(self, tiny_corpus):
        ds = TrainDataset(tiny_corpus, mode="weak")
        for sid in tiny_corpus.train_ids[:10]:
            mask = ds.get(sid).mask
            for c in tiny_corpus.split.novel_ids:
                assert not np.any(mask == c)

    def test_unknown_mode_rejected(self, tiny_corpus):
        with pytest.raises(ValueError):
            TrainDataset(tiny_corpus, mode="bogus")
