import math

import numpy as np
import pytest

from geometry import (GLOBAL, PATCH, Box, Detection, iou, merge_cross_patch, nms, pairwise_iou,
                      boxes_to_array, sort_detections, to_global, to_patch)
from tiling import PatchSpec


def det(x, y, w, h, score, det_id=None, frame=GLOBAL, patch_id=None):
    return Detection(Box(x, y, w, h), score, frame=frame, patch_id=patch_id, det_id=det_id)


def random_dets(r, n):
    dets = []
    for k in range(n):
        x, y = r.integers(0, 100, size=2)
        w, h = r.integers(1, 40, size=2)
        dets.append(det(float(x), float(y), float(w), float(h), round(float(r.uniform(0, 1)), 2), f"d{k:02d}"))
    return dets


def brute_nms(dets, thr):
    ordered = sorted(dets, key=Detection.rank_key)
    suppressed = [False] * len(ordered)
    keep = []
    for i, d in enumerate(ordered):
        if suppressed[i]:
            continue
        keep.append(d)
        for j in range(i + 1, len(ordered)):
            if iou(d.box, ordered[j].box) > thr:
                suppressed[j] = True
    return keep


def brute_merge(dets, thr):
    parent = list(range(len(dets)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(dets)):
        for j in range(i + 1, len(dets)):
            if iou(dets[i].box, dets[j].box) >= thr:
                parent[find(i)] = find(j)
    groups = {}
    for i, d in enumerate(dets):
        groups.setdefault(find(i), []).append(d)
    return sort_detections(min(g, key=Detection.rank_key) for g in groups.values())


class TestBox:
    def test_rejects_degenerate_extent(self):
        with pytest.raises(ValueError):
            Box(0, 0, 0, 5)
        with pytest.raises(ValueError):
            Box(0, 0, 5, -1)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Box(math.nan, 0, 1, 1)

    def test_clip_and_contains(self):
        b = Box(-10, 5, 30, 10)
        assert b.clip(100, 100) == Box(0, 5, 20, 10)
        assert Box(0, 0, 10, 10).clip(100, 100, 20, 20) is None
        assert Box(0, 0, 10, 10).contains(Box(0, 0, 10, 10))
        assert not Box(0, 0, 10, 10).contains(Box(1, 1, 10, 10))


class TestDetection:
    def test_score_bounds(self):
        with pytest.raises(ValueError):
            det(0, 0, 1, 1, 1.5)

    def test_patch_frame_needs_patch_id(self):
        with pytest.raises(ValueError):
            det(0, 0, 1, 1, 0.5, frame=PATCH)


class TestIoU:
    def test_identical(self):
        assert iou(Box(0, 0, 2, 2), Box(0, 0, 2, 2)) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 2, 2), Box(10, 10, 2, 2)) == 0.0

    def test_partial_overlap(self):
        assert iou(Box(0, 0, 2, 2), Box(1, 1, 2, 2)) == pytest.approx(1 / 7, abs=1e-12)

    def test_touching_edges_do_not_overlap(self):
        assert iou(Box(0, 0, 2, 2), Box(2, 0, 2, 2)) == 0.0

    def test_symmetry_and_bounds(self, rng):
        for _ in range(500):
            a = Box(*rng.uniform(0, 50, 2), *rng.uniform(0.1, 30, 2))
            b = Box(*rng.uniform(0, 50, 2), *rng.uniform(0.1, 30, 2))
            assert iou(a, b) == iou(b, a)
            assert 0.0 <= iou(a, b) <= 1.0
            assert iou(a, a) == pytest.approx(1.0)

    def test_pairwise_matches_scalar(self, rng):
        boxes = [Box(*rng.uniform(0, 50, 2), *rng.uniform(1, 30, 2)) for _ in range(20)]
        matrix = pairwise_iou(boxes_to_array(boxes), boxes_to_array(boxes))
        for i, a in enumerate(boxes):
            for j, b in enumerate(boxes):
                assert matrix[i, j] == pytest.approx(iou(a, b), abs=1e-12)


class TestNMS:
    def test_empty(self):
        assert nms([], 0.3) == []

    def test_overlapping_box_is_suppressed(self):
        b1, b2 = det(0, 0, 10, 10, 0.9), det(1, 1, 10, 10, 0.8)
        assert nms([b2, b1], 0.3) == [b1]

    def test_disjoint_boxes_survive(self):
        b1, b3 = det(0, 0, 10, 10, 0.9), det(100, 100, 10, 10, 0.5)
        assert nms([b3, b1], 0.3) == [b1, b3]

    def test_iou_equal_to_threshold_is_kept(self):
        # IoU of these two is exactly 1/3
        b1, b2 = det(0, 0, 2, 1, 0.9), det(1, 0, 2, 1, 0.8)
        assert iou(b1.box, b2.box) == pytest.approx(1 / 3)
        assert len(nms([b1, b2], iou(b1.box, b2.box))) == 2

    def test_mixed_frames_rejected(self):
        with pytest.raises(ValueError):
            nms([det(0, 0, 1, 1, 0.5), det(0, 0, 1, 1, 0.5, frame=PATCH, patch_id="p")], 0.3)

    def test_idempotent_and_pairwise_separated(self, rng):
        for _ in range(50):
            kept = nms(random_dets(rng, int(rng.integers(1, 40))), 0.3)
            assert nms(kept, 0.3) == kept
            for i in range(len(kept)):
                for j in range(i + 1, len(kept)):
                    assert iou(kept[i].box, kept[j].box) <= 0.3

    def test_matches_brute_force(self):
        r = np.random.default_rng(2024)
        for _ in range(1000):
            dets = random_dets(r, int(r.integers(0, 51)))
            thr = float(r.choice([0.1, 0.3, 0.5, 0.7]))
            assert nms(dets, thr) == brute_nms(dets, thr)


class TestFrames:
    @pytest.mark.parametrize("origin, expected", [
        ((0, 0), Box(5, 5, 10, 10)),
        ((410, 0), Box(415, 5, 10, 10)),
    ])
    def test_to_global_translates(self, origin, expected):
        patch = PatchSpec("p", origin[0], origin[1], 512)
        d = det(5, 5, 10, 10, 0.5, frame=PATCH, patch_id="p")
        assert to_global(d, patch).box == expected

    def test_full_patch_box(self):
        patch = PatchSpec("p", 410, 410, 512)
        d = det(0, 0, 512, 512, 0.5, frame=PATCH, patch_id="p")
        assert to_global(d, patch).box == Box(410, 410, 512, 512)

    def test_round_trip(self):
        patch = PatchSpec("p", 410, 820, 512)
        d = det(3.5, 7.25, 10, 12, 0.7, frame=PATCH, patch_id="p")
        assert to_patch(to_global(d, patch), patch) == d

    def test_wrong_patch_rejected(self):
        d = det(0, 0, 1, 1, 0.5, frame=PATCH, patch_id="other")
        with pytest.raises(ValueError):
            to_global(d, PatchSpec("p", 0, 0, 512))


class TestMerge:
    def test_overlapping_pair_keeps_best(self):
        # 10x10 boxes shifted by 2.5 px: IoU = 75 / 125 = 0.6
        a, b = det(0, 0, 10, 10, 0.9), det(2.5, 0, 10, 10, 0.7)
        assert iou(a.box, b.box) == pytest.approx(0.6)
        assert merge_cross_patch([b, a]) == [a]

    def test_below_threshold_keeps_both(self):
        a, b = det(0, 0, 10, 10, 0.9), det(0, 0, 10, 4, 0.7)
        assert iou(a.box, b.box) == pytest.approx(0.4)
        assert len(merge_cross_patch([a, b])) == 2

    def test_singleton(self):
        a = det(0, 0, 10, 10, 0.9)
        assert merge_cross_patch([a]) == [a]

    def test_chain_collapses_transitively(self):
        chain = [det(float(k), 0, 10, 10, 0.5 + 0.1 * k) for k in range(4)]
        merged = merge_cross_patch(chain)
        assert merged == [chain[-1]]

    def test_matches_union_find(self):
        r = np.random.default_rng(7)
        for _ in range(1000):
            dets = random_dets(r, int(r.integers(0, 51)))
            assert merge_cross_patch(dets, 0.5) == brute_merge(dets, 0.5)

    def test_patch_frame_rejected(self):
        with pytest.raises(ValueError):
            merge_cross_patch([det(0, 0, 1, 1, 0.5, frame=PATCH, patch_id="p")])
