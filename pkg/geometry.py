"""
Box Geometry Module
IoU, greedy NMS, patch/global coordinate lifting and cross-patch merging.
Boxes are (x, y, w, h) in pixels over half-open intervals [x, x+w) x [y, y+h).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, List, Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

if TYPE_CHECKING:
    from tiling import PatchSpec

logger = logging.getLogger(__name__)

PATCH = "patch"
GLOBAL = "global"


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"Box.{name} must be finite, got {value}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"Box needs w > 0 and h > 0, got w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.x + dx, self.y + dy, self.w, self.h)

    def clip(self, width: float, height: float, x0: float = 0.0, y0: float = 0.0) -> Optional["Box"]:
        """Intersect with the rectangle [x0, x0+width) x [y0, y0+height); None if nothing is left."""
        nx1 = max(self.x, x0)
        ny1 = max(self.y, y0)
        nx2 = min(self.x2, x0 + width)
        ny2 = min(self.y2, y0 + height)
        if nx2 <= nx1 or ny2 <= ny1:
            return None
        return Box(nx1, ny1, nx2 - nx1, ny2 - ny1)

    def contains(self, other: "Box") -> bool:
        return (other.x >= self.x and other.y >= self.y
                and other.x2 <= self.x2 and other.y2 <= self.y2)

    @classmethod
    def from_center(cls, cx: float, cy: float, size: float) -> "Box":
        return cls(cx - size / 2.0, cy - size / 2.0, size, size)

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls(x1, y1, x2 - x1, y2 - y1)


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    label: int = 0
    frame: str = GLOBAL
    patch_id: Optional[str] = None
    det_id: Optional[str] = None
    cls_score: Optional[float] = None

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"Detection score must lie in [0, 1], got {self.score}")
        if self.frame not in (PATCH, GLOBAL):
            raise ValueError(f"Unknown frame '{self.frame}'")
        if self.frame == PATCH and self.patch_id is None:
            raise ValueError("Patch-frame detections need a patch_id")
        if self.cls_score is not None and not (0.0 <= self.cls_score <= 1.0):
            raise ValueError(f"Classifier score must lie in [0, 1], got {self.cls_score}")

    def rank_key(self) -> tuple:
        """Score descending, then smaller x, then smaller y."""
        return (-self.score, self.box.x, self.box.y, self.det_id or "")


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0.0 when disjoint."""
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    """(N, 4) float64 array of x1, y1, x2, y2."""
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([(b.x, b.y, b.x2, b.y2) for b in boxes], dtype=np.float64)


def box_areas(boxes: Sequence[Box]) -> np.ndarray:
    return np.array([b.area for b in boxes], dtype=np.float64)


def pairwise_iou(a: np.ndarray, b: np.ndarray,
                 area_a: Optional[np.ndarray] = None,
                 area_b: Optional[np.ndarray] = None) -> np.ndarray:
    """IoU matrix between two xyxy arrays, same arithmetic as `iou` when areas are passed."""
    if area_a is None:
        area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    if area_b is None:
        area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    overlap = (iw > 0.0) & (ih > 0.0)
    inter = np.where(overlap, iw * ih, 0.0)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(overlap, inter / union, 0.0)


def sort_detections(dets: Sequence[Detection]) -> List[Detection]:
    return sorted(dets, key=Detection.rank_key)


def nms(dets: Sequence[Detection], iou_threshold: float) -> List[Detection]:
    """Greedy non-maximum suppression; a candidate is dropped when IoU > iou_threshold."""
    if not dets:
        return []
    frames = {(d.frame, d.patch_id if d.frame == PATCH else None) for d in dets}
    if len(frames) > 1:
        raise ValueError(f"nms needs detections in one frame, got {sorted(map(str, frames))}")

    ordered = sort_detections(dets)
    xyxy = boxes_to_array([d.box for d in ordered])
    areas = box_areas([d.box for d in ordered])

    keep = []
    order = np.arange(len(ordered))
    while order.size > 0:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.minimum(xyxy[i, 2], xyxy[rest, 2]) - np.maximum(xyxy[i, 0], xyxy[rest, 0])
        ih = np.minimum(xyxy[i, 3], xyxy[rest, 3]) - np.maximum(xyxy[i, 1], xyxy[rest, 1])
        overlap = (iw > 0.0) & (ih > 0.0)
        inter = np.where(overlap, iw * ih, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            ovr = np.where(overlap, inter / (areas[i] + areas[rest] - inter), 0.0)
        order = rest[ovr <= iou_threshold]
    return [ordered[i] for i in keep]


def to_global(d: Detection, patch: "PatchSpec") -> Detection:
    """Lift a patch-frame detection into the image frame."""
    if d.frame != PATCH or d.patch_id != patch.id:
        raise ValueError(f"Detection frame ({d.frame}, {d.patch_id}) does not match patch {patch.id}")
    return replace(d, box=d.box.translate(patch.origin_x, patch.origin_y), frame=GLOBAL)


def to_patch(d: Detection, patch: "PatchSpec") -> Detection:
    """Inverse of `to_global`."""
    if d.frame != GLOBAL:
        raise ValueError(f"Expected a global detection, got frame {d.frame}")
    return replace(d, box=d.box.translate(-patch.origin_x, -patch.origin_y), frame=PATCH, patch_id=patch.id)


def merge_cross_patch(dets: Sequence[Detection], iou_threshold: float = 0.5) -> List[Detection]:
    """
    Collapse duplicates from overlapping patches.

    Detections are linked when IoU >= iou_threshold; every connected component is
    replaced by its best-ranked member. Output is sorted by score descending.
    """
    if not dets:
        return []
    if any(d.frame != GLOBAL for d in dets):
        raise ValueError("merge_cross_patch needs global-frame detections")

    ordered = sort_detections(dets)
    if len(ordered) == 1:
        return ordered

    xyxy = boxes_to_array([d.box for d in ordered])
    areas = box_areas([d.box for d in ordered])
    linked = pairwise_iou(xyxy, xyxy, areas, areas) >= iou_threshold
    n_components, labels = connected_components(csr_matrix(linked), directed=False)

    # `ordered` is already ranked, so the first member seen per component is its representative
    representatives = {}
    for idx, comp in enumerate(labels):
        representatives.setdefault(int(comp), ordered[idx])

    merged = sort_detections(representatives.values())
    logger.debug(f"Merged {len(ordered)} detections into {n_components} components")
    return merged
