import numpy as np
import pytest

from data_io import Annotation
from evaluation import (IOU, MatchRule, evaluate, format_table, match, metrics, parse_rule, reference_report,
                        report_frame, summary_line, write_report_csv)
from geometry import Box, Detection


def det(cx, cy, score=0.9, size=50, det_id=None):
    return Detection(Box.from_center(cx, cy, size), score, det_id=det_id)


def ann(cx, cy, image_id="a"):
    return Annotation(image_id, cx, cy)


class TestMatch:
    def test_single_hit(self):
        result = match([det(110, 100)], [ann(100, 100)])
        assert (result.tp, result.fp, result.fn) == (1, 0, 0)

    def test_too_far(self):
        result = match([det(140, 100)], [ann(100, 100)])
        assert (result.tp, result.fp, result.fn) == (0, 1, 1)

    def test_radius_is_inclusive(self):
        assert match([det(130, 100)], [ann(100, 100)]).tp == 1

    def test_one_to_one(self):
        result = match([det(100, 100, 0.9), det(105, 100, 0.8)], [ann(100, 100)])
        assert (result.tp, result.fp, result.fn) == (1, 1, 0)

    def test_higher_score_claims_first(self):
        dets = [det(120, 100, 0.5, det_id="low"), det(90, 100, 0.9, det_id="high")]
        result = match(dets, [ann(100, 100), ann(145, 100)])
        assert result.pairs[0] == ("high", 0)
        assert ("low", 1) in result.pairs
        assert result.tp == 2

    def test_empty_sides(self):
        assert (match([], [ann(1, 1)]).fn, match([det(1, 1)], []).fp) == (1, 1)

    def test_iou_rule(self):
        rule = MatchRule(IOU, 0.5)
        assert match([det(110, 100)], [ann(100, 100)], rule).tp == 1
        assert match([det(125, 100)], [ann(100, 100)], rule).tp == 0

    def test_counts_partition(self):
        r = np.random.default_rng(4)
        for _ in range(200):
            dets = [det(*r.uniform(0, 300, 2), float(r.uniform(0, 1))) for _ in range(r.integers(0, 15))]
            gts = [ann(*r.uniform(0, 300, 2)) for _ in range(r.integers(0, 15))]
            result = match(dets, gts)
            assert result.tp + result.fn == len(gts)
            assert result.tp + result.fp == len(dets)


class TestMetrics:
    def test_two_stage_counts(self):
        p, r, f1 = metrics(17030, 3272, 1288)
        assert p == pytest.approx(0.839, abs=1e-3)
        assert r == pytest.approx(0.929, abs=1e-3)
        assert f1 == pytest.approx(0.882, abs=1e-3)

    def test_degenerate_is_perfect(self):
        assert metrics(0, 0, 0) == (1.0, 1.0, 1.0)

    def test_nothing_found(self):
        assert metrics(0, 0, 5) == (0.0, 0.0, 0.0)

    def test_negative_counts(self):
        with pytest.raises(ValueError):
            metrics(-1, 0, 0)

    def test_reference_rows_flag_baseline_precision(self):
        rows = {r["name"]: r for r in reference_report()}
        baseline = rows["single-stage baseline"]
        assert not baseline["consistent"]
        assert baseline["computed"][0] == pytest.approx(0.714, abs=5e-4)
        assert rows["single-stage improved"]["consistent"]
        assert rows["two-stage"]["consistent"]


class TestEvaluate:
    def test_union_of_image_ids(self):
        report = evaluate({"a": [det(100, 100)], "b": [det(5, 5)]},
                          {"a": [ann(100, 100)], "c": [ann(50, 50, "c")]})
        assert sorted(report.per_image) == ["a", "b", "c"]
        assert (report.tp, report.fp, report.fn) == (1, 1, 1)

    def test_empty_everything(self):
        report = evaluate({}, {})
        assert (report.precision, report.recall, report.f1) == (1.0, 1.0, 1.0)

    def test_report_frame_and_csv(self, tmp_path):
        report = evaluate({"a": [det(100, 100)]}, {"a": [ann(100, 100), ann(300, 300)]})
        frame = report_frame(report)
        assert frame["image_id"].tolist() == ["a", "ALL"]
        assert frame.iloc[-1][["tp", "fp", "fn"]].tolist() == [1, 0, 1]
        path = tmp_path / "report.csv"
        write_report_csv(report, str(path))
        assert path.read_text().splitlines()[0] == "image_id,tp,fp,fn,p,r,f1"


class TestRules:
    @pytest.mark.parametrize("text, kind, threshold", [("center:30", "center", 30.0), ("iou:0.5", "iou", 0.5),
                                                       ("CENTER", "center", 30.0)])
    def test_parse(self, text, kind, threshold):
        rule = parse_rule(text)
        assert (rule.kind, rule.threshold) == (kind, threshold)

    @pytest.mark.parametrize("text", ["area:3", "iou:1.5", "center:-2", "center:abc"])
    def test_parse_errors(self, text):
        with pytest.raises(ValueError):
            parse_rule(text)

    def test_str(self):
        assert str(MatchRule()) == "center:30"


class TestFormatting:
    def test_table(self):
        text = format_table([("two-stage", 17030, 3272, 1288)])
        header, rule, row = text.splitlines()
        assert header.split() == ["Method", "TP", "FP", "FN", "P", "R", "F1"]
        assert set(rule) == {"-"}
        assert row.split() == ["two-stage", "17030", "3272", "1288", "0.839", "0.930", "0.882"]

    def test_summary_line(self):
        assert summary_line(0.8391, 0.92969, 0.8818) == "P=0.839 R=0.930 F1=0.882"
