"""
Evaluation Module
Greedy detection-to-annotation matching, precision/recall/F1 and report output.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
import pandas as pd

from data_io import Annotation
from geometry import Detection, box_areas, boxes_to_array, pairwise_iou, sort_detections

logger = logging.getLogger(__name__)

CENTER = "center"
IOU = "iou"
REPORT_COLUMNS = ["image_id", "tp", "fp", "fn", "p", "r", "f1"]


@dataclass(frozen=True)
class MatchRule:
    kind: str = CENTER
    threshold: float = 30.0
    box_size: float = 50.0

    def __post_init__(self):
        if self.kind not in (CENTER, IOU):
            raise ValueError(f"Unknown match rule '{self.kind}'")
        if self.threshold <= 0 or (self.kind == IOU and self.threshold > 1):
            raise ValueError(f"Invalid threshold {self.threshold} for rule '{self.kind}'")

    def __str__(self) -> str:
        return f"{self.kind}:{self.threshold:g}"


def parse_rule(text: str) -> MatchRule:
    """`center:30` or `iou:0.5`."""
    kind, _, value = text.partition(":")
    kind = kind.strip().lower()
    try:
        if not value:
            return MatchRule(kind)
        return MatchRule(kind, float(value))
    except (TypeError, ValueError) as e:
        raise ValueError(f"Invalid match rule '{text}': {e}") from e


@dataclass
class MatchResult:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    pairs: List[Tuple[str, int]] = field(default_factory=list)


@dataclass
class EvalReport:
    per_image: Dict[str, MatchResult]
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float


def _costs(det: Detection, centers: np.ndarray,
           gt_boxes: np.ndarray, gt_areas: np.ndarray, rule: MatchRule) -> np.ndarray:
    """Lower is better; inf where the rule forbids the pair."""
    if rule.kind == CENTER:
        cx, cy = det.box.center
        dist = np.hypot(centers[:, 0] - cx, centers[:, 1] - cy)
        return np.where(dist <= rule.threshold, dist, np.inf)
    overlap = pairwise_iou(boxes_to_array([det.box]), gt_boxes, box_areas([det.box]), gt_areas)[0]
    return np.where(overlap >= rule.threshold, -overlap, np.inf)


def match(dets: Sequence[Detection], gts: Sequence[Annotation], rule: MatchRule = MatchRule()) -> MatchResult:
    """
    Greedy one-to-one matching. Detections claim, in rank order, the best
    unmatched annotation the rule allows (nearest center, or highest IoU).
    """
    ordered = sort_detections(dets)
    if not ordered or not gts:
        return MatchResult(tp=0, fp=len(ordered), fn=len(gts))
    centers = np.array([(a.cx, a.cy) for a in gts], dtype=np.float64)
    boxes = [a.to_box(rule.box_size) for a in gts]
    gt_boxes, gt_areas = boxes_to_array(boxes), box_areas(boxes)

    taken = np.zeros(len(gts), dtype=bool)
    pairs: List[Tuple[str, int]] = []
    for idx, det in enumerate(ordered):
        costs = _costs(det, centers, gt_boxes, gt_areas, rule)
        costs[taken] = np.inf
        best = int(np.argmin(costs))
        if np.isfinite(costs[best]):
            taken[best] = True
            pairs.append((det.det_id or f"det{idx}", best))
    tp = len(pairs)
    return MatchResult(tp=tp, fp=len(ordered) - tp, fn=len(gts) - tp, pairs=pairs)


def metrics(tp: int, fp: int, fn: int) -> Tuple[float, float, float]:
    """Precision, recall and F1; 1.0 each when there is nothing to find and nothing found."""
    if min(tp, fp, fn) < 0:
        raise ValueError(f"Counts must be non-negative, got tp={tp}, fp={fp}, fn={fn}")
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def evaluate(dets_by_image: Mapping[str, Sequence[Detection]],
             gts_by_image: Mapping[str, Sequence[Annotation]],
             rule: MatchRule = MatchRule()) -> EvalReport:
    """Per-image matching and micro-averaged metrics over the union of image ids."""
    per_image: Dict[str, MatchResult] = {}
    for image_id in sorted(set(dets_by_image) | set(gts_by_image)):
        per_image[image_id] = match(dets_by_image.get(image_id, []), gts_by_image.get(image_id, []), rule)
    tp = sum(r.tp for r in per_image.values())
    fp = sum(r.fp for r in per_image.values())
    fn = sum(r.fn for r in per_image.values())
    p, r, f1 = metrics(tp, fp, fn)
    logger.info(f"✅ Evaluated {len(per_image)} images ({rule}): P={p:.3f} R={r:.3f} F1={f1:.3f}")
    return EvalReport(per_image, tp, fp, fn, p, r, f1)


def report_frame(report: EvalReport) -> pd.DataFrame:
    rows = []
    for image_id, result in report.per_image.items():
        rows.append([image_id, result.tp, result.fp, result.fn, *metrics(result.tp, result.fp, result.fn)])
    rows.append(["ALL", report.tp, report.fp, report.fn, report.precision, report.recall, report.f1])
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def write_report_csv(report: EvalReport, path: str) -> None:
    report_frame(report).to_csv(path, index=False, float_format="%.6f")


def format_table(rows: Sequence[Tuple[str, int, int, int]]) -> str:
    """Text table with TP, FP, FN, P, R, F1 columns, metrics to 3 decimals."""
    name_w = max([len("Method")] + [len(r[0]) for r in rows])
    header = f"{'Method':<{name_w}}  {'TP':>7}  {'FP':>7}  {'FN':>7}  {'P':>5}  {'R':>5}  {'F1':>5}"
    lines = [header, "-" * len(header)]
    for name, tp, fp, fn in rows:
        p, r, f1 = metrics(tp, fp, fn)
        lines.append(f"{name:<{name_w}}  {tp:>7}  {fp:>7}  {fn:>7}  {p:>5.3f}  {r:>5.3f}  {f1:>5.3f}")
    return "\n".join(lines)


def summary_line(p: float, r: float, f1: float) -> str:
    return f"P={p:.3f} R={r:.3f} F1={f1:.3f}"


# Published whole-test-set counts and the metrics printed next to them.
REFERENCE_ROWS = [
    ("single-stage baseline", 17879, 7165, 439, (0.716, 0.976, 0.827)),
    ("single-stage improved", 17441, 5433, 877, (0.762, 0.952, 0.847)),
    ("two-stage", 17030, 3272, 1288, (0.839, 0.929, 0.882)),
]


def reference_report(tolerance: float = 1e-3) -> List[dict]:
    """
    Recompute each reference row from its counts. A printed value counts as
    consistent when it lies within `tolerance` of the recomputed one.
    """
    out = []
    for name, tp, fp, fn, printed in REFERENCE_ROWS:
        computed = metrics(tp, fp, fn)
        consistent = all(abs(c - q) < tolerance for c, q in zip(computed, printed))
        if not consistent:
            logger.warning(f"⚠️ {name}: printed {printed} disagrees with counts -> "
                           f"({computed[0]:.3f}, {computed[1]:.3f}, {computed[2]:.3f})")
        out.append({"name": name, "tp": tp, "fp": fp, "fn": fn,
                    "computed": computed, "printed": printed, "consistent": consistent})
    return out
