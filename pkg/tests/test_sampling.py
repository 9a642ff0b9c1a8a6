import numpy as np
import pytest
import torch

from weakshot.sampling import (BASE, NOT_BASE, PixelPairBatch,
                               gather_novel_scores, sample_pixel_pairs)
from weakshot.synthdata import ClassSplit, WeakShotSample

SPLIT = ClassSplit(frozenset({1, 2, 3}), frozenset({8, 9}))


def make_sample(mask, sid="s"):
    mask = np.asarray(mask, dtype=np.int64)
    return WeakShotSample(np.zeros((*mask.shape, 3)), mask,
                          set(np.unique(mask).tolist()), sid)


def make_epix(c, h, w, seed):
    return torch.as_tensor(np.random.default_rng(seed).normal(size=(c, h, w)))


class TestBasePairs:
    def test_coords_only_on_base_pixels(self):
        rng = np.random.default_rng(0)
        mask_a = np.full((8, 8), 255)
        mask_a[:4] = 1
        mask_a[6:] = 2
        mask_b = np.full((8, 8), 255)
        mask_b[:, :3] = 2
        a, b = make_sample(mask_a, "a"), make_sample(mask_b, "b")
        batch = sample_pixel_pairs(a, b, make_epix(4, 8, 8, 1),
                                   make_epix(4, 8, 8, 2), BASE, 10, SPLIT, rng)
        assert not batch.skipped
        for (y, x) in batch.coords_input:
            assert mask_a[y, x] in SPLIT.base_ids
        for (y, x) in batch.coords_ref:
            assert mask_b[y, x] in SPLIT.base_ids

    def test_labels_match_ground_truth_classes(self):
        rng = np.random.default_rng(1)
        mask_a = np.zeros((6, 6), dtype=np.int64)
        mask_a[:3] = 1
        mask_a[3:] = 2
        mask_b = np.zeros((6, 6), dtype=np.int64)
        mask_b[:, :3] = 1
        mask_b[:, 3:] = 3
        a, b = make_sample(mask_a), make_sample(mask_b)
        batch = sample_pixel_pairs(a, b, make_epix(4, 6, 6, 3),
                                   make_epix(4, 6, 6, 4), BASE, 8, SPLIT, rng)
        cls_in = mask_a[batch.coords_input[:, 0], batch.coords_input[:, 1]]
        cls_ref = mask_b[batch.coords_ref[:, 0], batch.coords_ref[:, 1]]
        expected = (cls_in[:, None] == cls_ref[None, :]).astype(int)
        assert np.array_equal(batch.labels, expected)

    def test_single_class_degenerate_flagged(self):
        rng = np.random.default_rng(2)
        mask = np.full((6, 6), 1)
        a, b = make_sample(mask, "a"), make_sample(mask.copy(), "b")
        batch = sample_pixel_pairs(a, b, make_epix(4, 6, 6, 5),
                                   make_epix(4, 6, 6, 6), BASE, 5, SPLIT, rng)
        assert np.all(batch.labels == 1)
        assert batch.same_class_fraction == 1.0
        assert not batch.balance_achieved

    def test_two_by_two_enumerated_pairs(self):
        rng = np.random.default_rng(3)
        mask_a = np.array([[1, 1], [2, 2]])
        mask_b = np.array([[1, 1], [3, 3]])
        a, b = make_sample(mask_a), make_sample(mask_b)
        batch = sample_pixel_pairs(a, b, make_epix(4, 2, 2, 7),
                                   make_epix(4, 2, 2, 8), BASE, 2, SPLIT, rng)
        cls_in = mask_a[batch.coords_input[:, 0], batch.coords_input[:, 1]]
        cls_ref = mask_b[batch.coords_ref[:, 0], batch.coords_ref[:, 1]]
        for i in range(2):
            for j in range(2):
                assert batch.labels[i, j] == int(cls_in[i] == cls_ref[j])

    def test_balance_band_reached_when_achievable(self):
        rng = np.random.default_rng(4)
        mask_a = np.zeros((20, 20), dtype=np.int64)
        mask_a[:10] = 1
        mask_a[10:] = 2
        mask_b = np.zeros((20, 20), dtype=np.int64)
        mask_b[:, :10] = 1
        mask_b[:, 10:] = 3
        a, b = make_sample(mask_a), make_sample(mask_b)
        fractions = []
        for _ in range(10):
            batch = sample_pixel_pairs(a, b, make_epix(4, 20, 20, 9),
                                       make_epix(4, 20, 20, 10), BASE, 100,
                                       SPLIT, rng)
            assert batch.balance_achieved
            fractions.append(batch.same_class_fraction)
        assert 0.3 <= np.mean(fractions) <= 0.7

    def test_thin_region_sampled_with_replacement(self):
        rng = np.random.default_rng(5)
        mask = np.full((4, 4), 255)
        mask[0, 0] = 1
        a, b = make_sample(mask, "a"), make_sample(mask.copy(), "b")
        batch = sample_pixel_pairs(a, b, make_epix(4, 4, 4, 11),
                                   make_epix(4, 4, 4, 12), BASE, 6, SPLIT, rng)
        assert len(batch.coords_input) == 6

    def test_empty_region_skipped(self):
        rng = np.random.default_rng(6)
        mask = np.full((4, 4), 255)
        a, b = make_sample(mask, "a"), make_sample(mask.copy(), "b")
        batch = sample_pixel_pairs(a, b, make_epix(4, 4, 4, 13),
                                   make_epix(4, 4, 4, 14), BASE, 4, SPLIT, rng)
        assert batch.skipped


class TestNotBasePairs:
    def test_coords_only_on_ignore_pixels(self):
        rng = np.random.default_rng(7)
        mask = np.zeros((8, 8), dtype=np.int64)
        mask[2:5, 2:5] = 255
        a, b = make_sample(mask, "a"), make_sample(mask.copy(), "b")
        batch = sample_pixel_pairs(a, b, make_epix(4, 8, 8, 15),
                                   make_epix(4, 8, 8, 16), NOT_BASE, 12,
                                   SPLIT, rng)
        assert batch.labels is None
        for (y, x) in np.concatenate([batch.coords_input, batch.coords_ref]):
            assert mask[y, x] == 255

    def test_no_ignore_pixels_skipped(self):
        rng = np.random.default_rng(8)
        mask = np.full((4, 4), 1)
        a, b = make_sample(mask, "a"), make_sample(mask.copy(), "b")
        batch = sample_pixel_pairs(a, b, make_epix(4, 4, 4, 17),
                                   make_epix(4, 4, 4, 18), NOT_BASE, 4,
                                   SPLIT, rng)
        assert batch.skipped


class TestPairEmbeddings:
    def test_slices_recover_source_embeddings_bitwise(self):
        rng = np.random.default_rng(9)
        mask = np.full((6, 6), 255)
        mask[:2] = 1
        a, b = make_sample(mask, "a"), make_sample(mask.copy(), "b")
        e_in = make_epix(4, 6, 6, 19)
        e_ref = make_epix(4, 6, 6, 20)
        batch = sample_pixel_pairs(a, b, e_in, e_ref, BASE, 5, SPLIT, rng)
        pe = batch.pair_embeddings
        assert pe.shape == (8, 5, 5)
        for ai in range(5):
            y, x = batch.coords_input[ai]
            for bi in range(5):
                yr, xr = batch.coords_ref[bi]
                assert torch.equal(pe[:4, ai, bi], e_in[:, y, x])
                assert torch.equal(pe[4:, ai, bi], e_ref[:, yr, xr])

    def test_minimum_pixel_count_enforced(self):
        a = make_sample(np.full((4, 4), 1))
        with pytest.raises(ValueError):
            sample_pixel_pairs(a, a, make_epix(4, 4, 4, 21),
                               make_epix(4, 4, 4, 22), BASE, 1, SPLIT,
                               np.random.default_rng(0))


class TestGatherNovelScores:
    def test_single_proposal_identity(self):
        split = ClassSplit(frozenset({0}), frozenset({1}))
        y = torch.zeros(3, 1, dtype=torch.float64)
        y[1, 0] = 1.0
        masks = torch.ones(1, 4, 4, dtype=torch.float64)
        coords = np.array([[0, 0], [2, 3]])
        scores = gather_novel_scores(y, masks, split, coords)
        assert torch.all(scores == 1.0)
        assert scores.shape == (1, 2)

    def test_zero_probability_row(self):
        split = ClassSplit(frozenset({0}), frozenset({1, 2}))
        y = torch.zeros(4, 3, dtype=torch.float64)
        y[1, :] = 0.5
        masks = torch.rand(3, 4, 4, dtype=torch.float64)
        coords = np.array([[1, 1]])
        scores = gather_novel_scores(y, masks, split, coords)
        assert torch.all(scores[1] == 0.0)   # class 2 carries no probability

    def test_matches_scalar_loop(self):
        split = ClassSplit(frozenset({0, 3}), frozenset({1, 2}))
        rng = np.random.default_rng(10)
        y = torch.as_tensor(rng.uniform(0, 1, (5, 2)))
        masks = torch.as_tensor(rng.uniform(0, 1, (2, 4, 4)))
        coords = np.array([[0, 1], [3, 2], [2, 2]])
        scores = gather_novel_scores(y, masks, split, coords)
        for ci, c in enumerate(sorted(split.novel_ids)):
            for j, (h, w) in enumerate(coords):
                expected = sum(y[c, i].item() * masks[i, h, w].item()
                               for i in range(2))
                assert abs(scores[ci, j].item() - expected) < 1e-9

    def test_gradients_flow_to_both_factors(self):
        split = ClassSplit(frozenset({0}), frozenset({1}))
        y = torch.rand(3, 2, dtype=torch.float64, requires_grad=True)
        masks = torch.rand(2, 4, 4, dtype=torch.float64, requires_grad=True)
        scores = gather_novel_scores(y, masks, split, np.array([[1, 1]]))
        scores.sum().backward()
        assert y.grad is not None and y.grad.abs().sum() > 0
        assert masks.grad is not None and masks.grad.abs().sum() > 0

    def test_out_of_bounds_rejected(self):
        split = ClassSplit(frozenset({0}), frozenset({1}))
        y = torch.rand(3, 2)
        masks = torch.rand(2, 4, 4)
        with pytest.raises(ValueError):
            gather_novel_scores(y, masks, split, np.array([[4, 0]]))
