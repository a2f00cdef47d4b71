"""
WSI Pipeline Module
Tile -> propose -> classify-filter -> lift to global -> cross-patch merge.

Proposals are collected once per image (at the configured confidence floor,
with classifier scores attached) into a ProposalCache; the final detections
and every threshold sweep are derived from that cache by one function.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image, ImageDraw

from classifier import ClassifierConfig, candidates_from_detections, classify
from data_io import Annotation, load_image
from evaluation import MatchRule, evaluate
from geometry import GLOBAL, PATCH, Box, Detection, merge_cross_patch, sort_detections, to_global
from proposer import ProposerModel, propose_batch
from tiling import PatchSpec, extract_patch, make_grid

logger = logging.getLogger(__name__)

DETECTION_COLUMNS = ["image_id", "x", "y", "w", "h", "score", "stage"]
SWEEP_COLUMNS = ["conf_threshold", "classifier_threshold", "merge_iou", "tp", "fp", "fn", "p", "r", "f1"]


@dataclass(frozen=True)
class PipelineConfig:
    patch_size: int = 512
    overlap: float = 0.2
    conf_threshold: float = 0.2
    nms_iou: float = 0.3
    classifier_threshold: float = 0.5
    merge_iou: float = 0.5
    proposer_batch: int = 8
    classifier_batch: int = 256
    workers: int = 1
    two_stage: bool = True

    def __post_init__(self):
        for name in ("conf_threshold", "nms_iou", "classifier_threshold", "merge_iou"):
            value = getattr(self, name)
            if not (0.0 < value < 1.0):
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        if not (0.0 <= self.overlap < 1.0):
            raise ValueError(f"overlap must lie in [0, 1), got {self.overlap}")
        if self.patch_size < 1 or self.proposer_batch < 1 or self.classifier_batch < 1 or self.workers < 1:
            raise ValueError("patch_size, batch sizes and workers must be positive")


# --- Image sources ---

class ImageSource(Protocol):
    image_id: str
    width: int
    height: int

    def read_region(self, x: int, y: int, w: int, h: int) -> np.ndarray:
        """uint8 (h', w', 3) pixels of the region clipped to the image."""
        ...


class ArraySource:
    def __init__(self, image_id: str, pixels: np.ndarray):
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"Expected an (H, W, 3) array, got {pixels.shape}")
        self.image_id = image_id
        self.pixels = pixels
        self.height, self.width = pixels.shape[:2]

    def read_region(self, x: int, y: int, w: int, h: int) -> np.ndarray:
        return self.pixels[y:y + h, x:x + w]


class RasterSource(ArraySource):
    """Plain raster file (PNG/TIFF/JPEG) decoded with Pillow."""

    def __init__(self, path: str, image_id: Optional[str] = None):
        if not os.path.exists(path):
            raise FileNotFoundError(f"Image not found: {path}")
        try:
            pixels = load_image(path)
        except OSError as e:
            raise OSError(f"Unreadable image {path}: {e}") from e
        super().__init__(image_id or os.path.splitext(os.path.basename(path))[0], pixels)


def read_patch(source: ImageSource, patch: PatchSpec) -> np.ndarray:
    region = source.read_region(patch.origin_x, patch.origin_y, patch.size, patch.size)
    return extract_patch(region, PatchSpec(patch.id, 0, 0, patch.size))


# --- Stage interfaces ---

class StageProposer(Protocol):
    input_size: Optional[int]

    def propose(self, patches: Sequence[np.ndarray], specs: Sequence[PatchSpec]) -> List[List[Detection]]:
        """Patch-frame detections per patch."""
        ...


class StageClassifier(Protocol):
    def score(self, pixels: np.ndarray, dets: Sequence[Detection], patch: PatchSpec) -> np.ndarray:
        """Mitosis probability per patch-frame detection."""
        ...


class ModelProposer:
    def __init__(self, model: ProposerModel, conf_threshold: Optional[float] = None,
                 nms_iou: Optional[float] = None):
        self.model = model.eval()
        overrides = {}
        if conf_threshold is not None:
            overrides["conf_threshold"] = conf_threshold
        if nms_iou is not None:
            overrides["nms_iou"] = nms_iou
        self.cfg = replace(model.cfg, **overrides)
        self.input_size = self.cfg.input_size

    def propose(self, patches, specs):
        return propose_batch(self.model, patches, [s.id for s in specs], self.cfg)


class ModelClassifier:
    def __init__(self, model, cfg: Optional[ClassifierConfig] = None, batch_size: int = 256):
        self.model = model.eval()
        self.cfg = cfg or getattr(model, "cfg", ClassifierConfig())
        self.batch_size = batch_size

    def score(self, pixels, dets, patch):
        return classify(self.model, candidates_from_detections(pixels, dets, self.cfg), self.batch_size)


class GroundTruthProposer:
    """Emits one detection per annotation whose box lies fully inside the patch's real pixels."""

    input_size = None

    def __init__(self, annotations: Sequence[Annotation], box_size: float = 50.0, score: float = 0.9,
                 image_size: Optional[Tuple[int, int]] = None):
        width, height = image_size if image_size is not None else (float("inf"), float("inf"))
        boxes = [a.to_box(box_size) for a in annotations]
        self.boxes = [b for b in (box.clip(width, height) for box in boxes) if b is not None]
        self.score = score

    def propose(self, patches, specs):
        out = []
        for spec in specs:
            dets = []
            for k, box in enumerate(self.boxes):
                if spec.bounds.contains(box):
                    dets.append(Detection(box.translate(-spec.origin_x, -spec.origin_y), self.score,
                                          frame=PATCH, patch_id=spec.id, det_id=f"{spec.id}#gt{k}"))
            out.append(dets)
        return out


class GroundTruthClassifier:
    """1.0 for detections whose center lies within `radius` of an annotation, else 0.0."""

    def __init__(self, annotations: Sequence[Annotation], radius: float = 15.0):
        self.centers = np.array([(a.cx, a.cy) for a in annotations], dtype=np.float64).reshape(-1, 2)
        self.radius = radius

    def score(self, pixels, dets, patch):
        scores = np.zeros(len(dets), dtype=np.float64)
        if not len(self.centers):
            return scores
        for i, d in enumerate(dets):
            cx, cy = d.box.center
            dist = np.hypot(self.centers[:, 0] - cx - patch.origin_x, self.centers[:, 1] - cy - patch.origin_y)
            scores[i] = 1.0 if dist.min() <= self.radius else 0.0
        return scores


class PassThroughClassifier:
    def score(self, pixels, dets, patch):
        return np.ones(len(dets), dtype=np.float64)


# --- Cache and results ---

@dataclass
class RunStats:
    image_id: str
    patches: int = 0
    proposals: int = 0
    rejected: int = 0
    survivors: int = 0
    final: int = 0


@dataclass
class ProposalCache:
    image_id: str
    width: int
    height: int
    floor_conf: float
    patches: int
    proposals: List[Detection] = field(default_factory=list)


@dataclass
class WsiResult:
    detections: List[Detection]
    stats: RunStats
    proposals: List[Detection]
    survivors: List[Detection]
    cache: ProposalCache


def _process_batch(source: ImageSource, specs: Sequence[PatchSpec], proposer: StageProposer,
                   classifier: Optional[StageClassifier]) -> Dict[str, List[Detection]]:
    pixels = [read_patch(source, s) for s in specs]
    out = {}
    for spec, patch_pixels, dets in zip(specs, pixels, proposer.propose(pixels, specs)):
        if classifier is not None and dets:
            scores = np.asarray(classifier.score(patch_pixels, dets, spec), dtype=np.float64)
            dets = [replace(d, cls_score=float(np.clip(s, 0.0, 1.0))) for d, s in zip(dets, scores)]
        out[spec.id] = [to_global(d, spec) for d in dets]
    return out


def collect_proposals(source: ImageSource, proposer: StageProposer, classifier: Optional[StageClassifier],
                      cfg: PipelineConfig = PipelineConfig(),
                      patch_order: Optional[Sequence[str]] = None) -> ProposalCache:
    """
    Run both stages over every patch and lift the results to the image frame.
    Patch batches run in a thread pool; the result does not depend on order.
    """
    input_size = getattr(proposer, "input_size", None)
    if input_size is not None and input_size != cfg.patch_size:
        raise ValueError(f"Proposer input size {input_size} does not match patch size {cfg.patch_size}")

    grid = make_grid(source.width, source.height, cfg.patch_size, cfg.overlap, source.image_id)
    specs = list(grid.patches)
    if patch_order is not None:
        by_id = {p.id: p for p in specs}
        specs = [by_id[pid] for pid in patch_order]
    batches = [specs[i:i + cfg.proposer_batch] for i in range(0, len(specs), cfg.proposer_batch)]

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        parts = list(pool.map(lambda b: _process_batch(source, b, proposer, classifier), batches))
    lifted: Dict[str, List[Detection]] = {}
    for part in parts:
        lifted.update(part)

    proposals = sort_detections([d for p in grid.patches for d in lifted.get(p.id, [])])
    logger.info(f"{source.image_id}: {len(specs)} patches, {len(proposals)} proposals")
    return ProposalCache(source.image_id, source.width, source.height, cfg.conf_threshold, len(specs), proposals)


def finalize(cache: ProposalCache, conf_threshold: float, classifier_threshold: float,
             merge_iou: float) -> Tuple[List[Detection], List[Detection], List[Detection]]:
    """(kept proposals, classifier survivors, merged final) for one threshold triple."""
    if conf_threshold < cache.floor_conf:
        logger.warning(f"⚠️ conf {conf_threshold} is below the cache floor {cache.floor_conf}; "
                       f"proposals under the floor were never recorded")
    kept = [d for d in cache.proposals if d.score >= conf_threshold]
    survivors = [d for d in kept if d.cls_score is None or d.cls_score >= classifier_threshold]
    return kept, survivors, merge_cross_patch(survivors, merge_iou)


def run_wsi(source: ImageSource, proposer: StageProposer, classifier: Optional[StageClassifier],
            cfg: PipelineConfig = PipelineConfig(), patch_order: Optional[Sequence[str]] = None) -> WsiResult:
    """Two-stage inference over one image; `classifier=None` or `two_stage=False` skips stage 2."""
    stage2 = classifier if cfg.two_stage else None
    cache = collect_proposals(source, proposer, stage2, cfg, patch_order)
    kept, survivors, final = finalize(cache, cfg.conf_threshold, cfg.classifier_threshold, cfg.merge_iou)
    stats = RunStats(source.image_id, cache.patches, len(kept), len(kept) - len(survivors), len(survivors), len(final))
    logger.info(f"✅ {source.image_id}: {stats.proposals} proposals -> {stats.survivors} survivors -> {stats.final} final")
    return WsiResult(final, stats, kept, survivors, cache)


def sweep_thresholds(caches: Sequence[ProposalCache], gts: Mapping[str, Sequence[Annotation]],
                     grid: Iterable[Tuple[float, float, float]],
                     rule: MatchRule = MatchRule()) -> pd.DataFrame:
    """P/R/F1 for every (conf, classifier, merge) triple, re-filtering cached proposals only."""
    if not caches:
        raise ValueError("sweep_thresholds needs at least one proposal cache")
    rows = []
    for conf, cls_thr, merge in grid:
        finals = {c.image_id: finalize(c, conf, cls_thr, merge)[2] for c in caches}
        gt_subset = {c.image_id: list(gts.get(c.image_id, [])) for c in caches}
        report = evaluate(finals, gt_subset, rule)
        rows.append([conf, cls_thr, merge, report.tp, report.fp, report.fn,
                     report.precision, report.recall, report.f1])
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


# --- Files ---

def _det_to_dict(d: Detection) -> Dict:
    return {"x": d.box.x, "y": d.box.y, "w": d.box.w, "h": d.box.h, "score": d.score,
            "cls_score": d.cls_score, "label": d.label, "patch_id": d.patch_id, "det_id": d.det_id}


def save_caches(caches: Sequence[ProposalCache], path: str) -> None:
    payload = {"images": [
        {"image_id": c.image_id, "width": c.width, "height": c.height, "floor_conf": c.floor_conf,
         "patches": c.patches, "proposals": [_det_to_dict(d) for d in c.proposals]}
        for c in caches
    ]}
    with open(path, "w") as f:
        json.dump(payload, f)


def load_caches(path: str) -> List[ProposalCache]:
    with open(path, "r") as f:
        payload = json.load(f)
    caches = []
    for item in payload.get("images", []):
        proposals = [Detection(Box(p["x"], p["y"], p["w"], p["h"]), p["score"], p.get("label", 0),
                               GLOBAL, p.get("patch_id"), p.get("det_id"), p.get("cls_score"))
                     for p in item["proposals"]]
        caches.append(ProposalCache(item["image_id"], item["width"], item["height"],
                                    item["floor_conf"], item["patches"], proposals))
    return caches


def write_detections_csv(image_id: str, proposals: Sequence[Detection], final: Sequence[Detection],
                         path: str) -> None:
    rows = [(image_id, d.box.x, d.box.y, d.box.w, d.box.h, d.score, stage)
            for stage, dets in (("proposal", proposals), ("final", final)) for d in dets]
    pd.DataFrame(rows, columns=DETECTION_COLUMNS).to_csv(path, index=False)


def read_detections_csv(path: str, stage: str = "final") -> Dict[str, List[Detection]]:
    frame = pd.read_csv(path, dtype={"image_id": str})
    missing = [c for c in DETECTION_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"Detection CSV {path} is missing columns {missing}")
    out: Dict[str, List[Detection]] = {}
    for i, r in enumerate(frame[frame["stage"] == stage].itertuples(index=False)):
        out.setdefault(r.image_id, []).append(
            Detection(Box(float(r.x), float(r.y), float(r.w), float(r.h)), float(r.score), det_id=f"{r.image_id}#{i}"))
    return out


def render_overlay(pixels: np.ndarray, dets: Sequence[Detection], path: str,
                   color: Tuple[int, int, int] = (0, 255, 0), width: int = 2) -> None:
    """Final detections as green rectangles."""
    image = Image.fromarray(np.ascontiguousarray(pixels))
    draw = ImageDraw.Draw(image)
    for d in dets:
        draw.rectangle([d.box.x, d.box.y, d.box.x2 - 1, d.box.y2 - 1], outline=color, width=width)
    image.save(path)
