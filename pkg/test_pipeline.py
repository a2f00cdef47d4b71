import itertools

import numpy as np
import pytest
from PIL import Image

from data_io import Annotation
from evaluation import evaluate
from geometry import GLOBAL, Box, Detection
from pipeline import (ArraySource, GroundTruthClassifier, GroundTruthProposer, PassThroughClassifier, PipelineConfig,
                      ProposalCache, RasterSource, collect_proposals, finalize, load_caches, read_detections_csv,
                      render_overlay, run_wsi, save_caches, sweep_thresholds, write_detections_csv)
from tiling import make_grid


def summary(dets):
    return [(d.box, d.score, d.det_id) for d in dets]


@pytest.fixture
def planted_source(planted_image):
    image, anns = planted_image
    return ArraySource(image.image_id, image.pixels), anns


def hand_cache(image_id="h", n=40, seed=0):
    """Well-separated proposals, half of them on annotations; no two overlap."""
    r = np.random.default_rng(seed)
    anns, dets = [], []
    for k in range(n):
        cx, cy = 60.0 + 100.0 * (k % 10), 60.0 + 100.0 * (k // 10)
        if k % 2 == 0:
            anns.append(Annotation(image_id, cx, cy))
        dets.append(Detection(Box.from_center(cx, cy, 40), float(r.uniform(0.2, 1.0)),
                              det_id=f"{image_id}#{k}", cls_score=float(r.uniform(0, 1))))
    return ProposalCache(image_id, 1100, 500, 0.2, 2, dets), anns


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"conf_threshold": 0.0}, {"merge_iou": 1.0}, {"overlap": 1.0}, {"workers": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            PipelineConfig(**kwargs)


class TestRunWsi:
    def test_empty_proposer(self, planted_source, empty_proposer, random_classifier):
        source, _ = planted_source
        result = run_wsi(source, empty_proposer, random_classifier)
        assert result.detections == [] and result.stats.proposals == 0 and result.stats.final == 0
        assert result.stats.patches == 9

    def test_pass_through_equals_single_stage(self, planted_source, random_proposer):
        source, _ = planted_source
        two = run_wsi(source, random_proposer, PassThroughClassifier())
        one = run_wsi(source, random_proposer, None, PipelineConfig(two_stage=False))
        assert summary(two.detections) == summary(one.detections)
        assert two.stats.rejected == 0

    def test_two_stage_flag_off_ignores_classifier(self, planted_source, random_proposer, random_classifier):
        source, _ = planted_source
        off = run_wsi(source, random_proposer, random_classifier, PipelineConfig(two_stage=False))
        none = run_wsi(source, random_proposer, None)
        assert summary(off.detections) == summary(none.detections)
        assert all(d.cls_score is None for d in off.proposals)

    def test_planted_oracle_finds_every_blob_once(self, planted_source):
        source, anns = planted_source
        proposer = GroundTruthProposer(anns, box_size=20, image_size=(source.width, source.height))
        result = run_wsi(source, proposer, GroundTruthClassifier(anns))
        assert len(result.detections) == len(anns) == 10
        for d in result.detections:
            cx, cy = d.box.center
            assert min(np.hypot(a.cx - cx, a.cy - cy) for a in anns) <= 5.0
        assert result.stats.proposals > len(anns)

    def test_stage_outputs_are_nested(self, planted_source, random_proposer, random_classifier):
        source, _ = planted_source
        result = run_wsi(source, random_proposer, random_classifier)
        proposals = {d.det_id for d in result.proposals}
        survivors = {d.det_id for d in result.survivors}
        final = {d.det_id for d in result.detections}
        assert final <= survivors <= proposals
        assert result.stats.proposals == result.stats.rejected + result.stats.survivors
        assert all(d.cls_score >= 0.5 for d in result.survivors)
        assert all(d.frame == GLOBAL for d in result.detections)

    def test_final_detections_do_not_overlap_heavily(self, planted_source, random_proposer, random_classifier):
        source, _ = planted_source
        dets = run_wsi(source, random_proposer, random_classifier).detections
        for a, b in itertools.combinations(dets, 2):
            ix = min(a.box.x2, b.box.x2) - max(a.box.x, b.box.x)
            iy = min(a.box.y2, b.box.y2) - max(a.box.y, b.box.y)
            if ix > 0 and iy > 0:
                inter = ix * iy
                assert inter / (a.box.area + b.box.area - inter) < 0.5

    def test_patch_order_does_not_matter(self, planted_source, random_proposer, random_classifier):
        source, _ = planted_source
        ids = [p.id for p in make_grid(source.width, source.height, image_id=source.image_id).patches]
        shuffled = list(np.random.default_rng(1).permutation(ids))
        cfg = PipelineConfig(proposer_batch=2, workers=3)
        a = run_wsi(source, random_proposer, random_classifier, cfg)
        b = run_wsi(source, random_proposer, random_classifier, cfg, patch_order=shuffled)
        assert summary(a.detections) == summary(b.detections)
        assert a.cache.proposals == b.cache.proposals

    def test_input_size_mismatch(self, planted_source, random_proposer):
        source, _ = planted_source
        random_proposer.input_size = 256
        with pytest.raises(ValueError, match="input size 256"):
            run_wsi(source, random_proposer, None)

    def test_missing_raster(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            RasterSource(str(tmp_path / "nope.png"))

    def test_raster_source_reads_pixels(self, tmp_path, png_writer):
        path = png_writer(tmp_path / "slide.png", 700, 600, value=50)
        source = RasterSource(path)
        assert (source.image_id, source.width, source.height) == ("slide", 700, 600)
        assert (source.read_region(650, 0, 512, 512) == 50).all()
        assert source.read_region(650, 0, 512, 512).shape == (512, 50, 3)

    def test_bad_array_source(self):
        with pytest.raises(ValueError):
            ArraySource("x", np.zeros((10, 10)))


class TestFinalizeAndSweep:
    def test_finalize_below_floor_warns(self, caplog):
        cache, _ = hand_cache()
        kept, _, _ = finalize(cache, 0.1, 0.5, 0.5)
        assert len(kept) == len(cache.proposals)
        assert "below the cache floor" in caplog.text

    def test_recall_non_increasing_in_conf(self):
        cache, anns = hand_cache()
        grid = [(c, 0.5, 0.5) for c in (0.2, 0.3, 0.5, 0.7, 0.9)]
        frame = sweep_thresholds([cache], {cache.image_id: anns}, grid)
        recalls = frame["r"].tolist()
        assert recalls == sorted(recalls, reverse=True)

    def test_lower_classifier_threshold_admits_more_false_positives(self):
        cache, anns = hand_cache(seed=2)
        frame = sweep_thresholds([cache], {cache.image_id: anns}, [(0.2, 0.0, 0.5), (0.2, 0.5, 0.5)])
        assert frame["fp"].iloc[0] >= frame["fp"].iloc[1]
        assert frame["fp"].iloc[0] == len(cache.proposals) - len(anns)

    def test_single_cell_matches_run_wsi(self, planted_source, random_proposer, random_classifier):
        source, anns = planted_source
        result = run_wsi(source, random_proposer, random_classifier)
        report = evaluate({source.image_id: result.detections}, {source.image_id: anns})
        frame = sweep_thresholds([result.cache], {source.image_id: anns}, [(0.2, 0.5, 0.5)])
        row = frame.iloc[0]
        assert (row["tp"], row["fp"], row["fn"]) == (report.tp, report.fp, report.fn)
        assert row["f1"] == pytest.approx(report.f1)

    def test_sweep_needs_caches(self):
        with pytest.raises(ValueError):
            sweep_thresholds([], {}, [(0.2, 0.5, 0.5)])


class TestFiles:
    def test_detection_csv_round_trip(self, tmp_path, planted_source, random_proposer, random_classifier):
        source, _ = planted_source
        result = run_wsi(source, random_proposer, random_classifier)
        path = str(tmp_path / "dets.csv")
        write_detections_csv(source.image_id, result.proposals, result.detections, path)
        final = read_detections_csv(path)[source.image_id]
        np.testing.assert_allclose([(d.box.x, d.box.y, d.score) for d in final],
                                   [(d.box.x, d.box.y, d.score) for d in result.detections])
        assert len(read_detections_csv(path, stage="proposal")[source.image_id]) == len(result.proposals)

    def test_detection_csv_missing_columns(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("image_id,x,y\na,1,2\n")
        with pytest.raises(ValueError, match="missing columns"):
            read_detections_csv(str(path))

    def test_cache_round_trip(self, tmp_path, planted_source, random_proposer, random_classifier):
        source, _ = planted_source
        cache = collect_proposals(source, random_proposer, random_classifier)
        path = str(tmp_path / "cache.json")
        save_caches([cache], path)
        (loaded,) = load_caches(path)
        assert loaded == cache

    def test_overlay_draws_boxes(self, tmp_path):
        pixels = np.zeros((100, 100, 3), dtype=np.uint8)
        path = str(tmp_path / "overlay.png")
        render_overlay(pixels, [Detection(Box(10, 10, 30, 30), 0.9)], path)
        drawn = np.asarray(Image.open(path))
        assert tuple(drawn[10, 20]) == (0, 255, 0)
        assert tuple(drawn[25, 25]) == (0, 0, 0)
