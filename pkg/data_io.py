"""
Dataset IO Module
Annotations, dataset manifests, the 7:1:2 image-level split and the synthetic
blob corpus used for desk-scale runs.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image
from scipy import ndimage

from geometry import Box

logger = logging.getLogger(__name__)

ANNOTATION_COLUMNS = ["image_id", "cx", "cy", "label"]
SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (7, 1, 2)
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".tif", ".tiff")


class ManifestError(ValueError):
    """Raised when annotations or images cannot form a valid manifest."""


@dataclass(frozen=True)
class Annotation:
    image_id: str
    cx: float
    cy: float
    label: str = "mitosis"
    box: Optional[Box] = None
    truncated: bool = False

    def to_box(self, box_size: float = 50.0) -> Box:
        """Explicit box when present, otherwise a square of `box_size` around the center."""
        if self.box is not None:
            return self.box
        return Box.from_center(self.cx, self.cy, box_size)

    def translate(self, dx: float, dy: float) -> "Annotation":
        return replace(self, cx=self.cx + dx, cy=self.cy + dy,
                       box=self.box.translate(dx, dy) if self.box is not None else None)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    path: str
    width: int
    height: int


@dataclass
class DatasetManifest:
    images: List[ImageRecord]
    annotations: List[Annotation]
    splits: Dict[str, str] = field(default_factory=dict)
    issues: List[str] = field(default_factory=list)

    def image(self, image_id: str) -> ImageRecord:
        for record in self.images:
            if record.image_id == image_id:
                return record
        raise KeyError(image_id)

    def annotations_for(self, image_id: str) -> List[Annotation]:
        return [a for a in self.annotations if a.image_id == image_id]

    def images_in(self, split_name: str) -> List[ImageRecord]:
        return [r for r in self.images if self.splits.get(r.image_id) == split_name]

    def __eq__(self, other):
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return (self.images == other.images and self.annotations == other.annotations
                and self.splits == other.splits)


class AnnotationAdapter(Protocol):
    """Reads one annotation source into a frame with `image_id,cx,cy,label` columns, in file order."""

    def read(self, path: str) -> pd.DataFrame:
        ...


class CsvAnnotationAdapter:
    """`image_id,cx,cy,label` CSV, one row per mitotic figure."""

    def read(self, path: str) -> pd.DataFrame:
        if not os.path.exists(path):
            raise FileNotFoundError(f"Annotation file not found: {path}")
        try:
            frame = pd.read_csv(path, dtype={"image_id": str, "label": str})
        except pd.errors.EmptyDataError:
            return pd.DataFrame(columns=ANNOTATION_COLUMNS)
        missing = [c for c in ANNOTATION_COLUMNS if c not in frame.columns]
        if missing:
            raise ManifestError(f"Annotation CSV {path} is missing columns {missing}")
        return frame[ANNOTATION_COLUMNS]


def scan_images(images_root: str) -> List[ImageRecord]:
    """Every raster under `images_root` becomes one image; id = file stem."""
    records = []
    if not os.path.isdir(images_root):
        raise FileNotFoundError(f"Images root not found: {images_root}")
    for name in sorted(os.listdir(images_root)):
        stem, ext = os.path.splitext(name)
        if ext.lower() not in IMAGE_EXTENSIONS:
            continue
        path = os.path.join(images_root, name)
        with Image.open(path) as img:
            width, height = img.size
        records.append(ImageRecord(stem, path, int(width), int(height)))
    return records


def load_manifest(annotation_file: str, images_root: str,
                  adapter: Optional[AnnotationAdapter] = None) -> DatasetManifest:
    """
    Build a validated manifest from an annotation table and an image folder.

    Rows that fail validation are dropped and reported (with their file line
    number) in `manifest.issues`. Annotations naming an image that does not
    exist raise ManifestError listing the ids.
    """
    adapter = adapter or CsvAnnotationAdapter()
    images = scan_images(images_root)
    by_id = {r.image_id: r for r in images}
    frame = adapter.read(annotation_file)

    issues: List[str] = []
    annotations: List[Annotation] = []
    seen = set()
    missing_ids = set()

    cx_values = pd.to_numeric(frame["cx"], errors="coerce")
    cy_values = pd.to_numeric(frame["cy"], errors="coerce")
    for row_idx in range(len(frame)):
        line = row_idx + 2  # header is line 1
        image_id = str(frame["image_id"].iloc[row_idx])
        cx, cy = cx_values.iloc[row_idx], cy_values.iloc[row_idx]
        label = frame["label"].iloc[row_idx]
        label = "mitosis" if pd.isna(label) else str(label)

        if image_id not in by_id:
            missing_ids.add(image_id)
            continue
        if pd.isna(cx) or pd.isna(cy):
            issues.append(f"line {line}: non-numeric center ({frame['cx'].iloc[row_idx]}, {frame['cy'].iloc[row_idx]})")
            continue
        record = by_id[image_id]
        if not (0 <= cx < record.width and 0 <= cy < record.height):
            issues.append(f"line {line}: center ({cx}, {cy}) outside image {image_id} "
                          f"of size {record.width}x{record.height}")
            continue
        key = (image_id, float(cx), float(cy), label)
        if key in seen:
            issues.append(f"line {line}: duplicate annotation {key} dropped")
            continue
        seen.add(key)
        annotations.append(Annotation(image_id, float(cx), float(cy), label))

    if missing_ids:
        raise ManifestError(f"Annotations reference missing images: {sorted(missing_ids)}")
    for issue in issues:
        logger.warning(f"⚠️ {annotation_file} {issue}")

    logger.info(f"✅ Loaded manifest: {len(images)} images, {len(annotations)} annotations")
    return DatasetManifest(images=images, annotations=annotations, issues=issues)


def _split_quotas(n: int, ratios: Sequence[float]) -> List[int]:
    total = float(sum(ratios))
    quotas = [int(round(n * r / total)) for r in ratios[:-1]]
    quotas.append(n - sum(quotas))
    return quotas


def _interleaved_labels(quotas: Sequence[int]) -> List[str]:
    """Evenly interleave split labels so every stretch of the ordering gets its share."""
    slots = []
    for split_idx, q in enumerate(quotas):
        for i in range(q):
            slots.append(((i + 0.5) / q, split_idx))
    slots.sort()
    return [SPLITS[split_idx] for _, split_idx in slots]


def split(manifest: DatasetManifest, seed: int = 0,
          ratios: Sequence[float] = DEFAULT_RATIOS) -> DatasetManifest:
    """
    Image-level train/val/test assignment, stratified by annotation-count tercile.

    Images are ordered by stratum (shuffled within each stratum by `seed`) and
    the split labels are interleaved along that ordering, so totals are exact
    and every stratum is represented proportionally.
    """
    counts = {r.image_id: 0 for r in manifest.images}
    for ann in manifest.annotations:
        counts[ann.image_id] = counts.get(ann.image_id, 0) + 1

    rng = np.random.default_rng(seed)
    ids = sorted(counts)
    values = np.array([counts[i] for i in ids], dtype=float)
    if len(ids) >= 3:
        edges = np.quantile(values, [1 / 3, 2 / 3])
        strata = np.digitize(values, edges, right=True)
    else:
        strata = np.zeros(len(ids), dtype=int)

    ordering: List[str] = []
    for stratum in sorted(set(strata.tolist())):
        members = [ids[i] for i in range(len(ids)) if strata[i] == stratum]
        ordering.extend(members[i] for i in rng.permutation(len(members)))

    labels = _interleaved_labels(_split_quotas(len(ordering), ratios))
    assignment = dict(zip(ordering, labels))
    sizes = {s: sum(1 for v in assignment.values() if v == s) for s in SPLITS}
    logger.info(f"✅ Split {len(ordering)} images: {sizes}")
    return replace(manifest, splits=assignment)


def write_manifest(manifest: DatasetManifest, path: str) -> None:
    payload = {
        "images": [asdict(r) for r in manifest.images],
        "annotations": [
            {"image_id": a.image_id, "cx": a.cx, "cy": a.cy, "label": a.label,
             "box": [a.box.x, a.box.y, a.box.w, a.box.h] if a.box is not None else None,
             "truncated": a.truncated}
            for a in manifest.annotations
        ],
        "splits": dict(manifest.splits),
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)


def read_manifest(path: str) -> DatasetManifest:
    with open(path, "r") as f:
        payload = json.load(f)
    images = [ImageRecord(**r) for r in payload.get("images", [])]
    annotations = [
        Annotation(a["image_id"], a["cx"], a["cy"], a.get("label", "mitosis"),
                   Box(*a["box"]) if a.get("box") else None, a.get("truncated", False))
        for a in payload.get("annotations", [])
    ]
    return DatasetManifest(images=images, annotations=annotations, splits=payload.get("splits", {}))


def write_annotations_csv(annotations: Sequence[Annotation], path: str) -> None:
    frame = pd.DataFrame([(a.image_id, a.cx, a.cy, a.label) for a in annotations],
                         columns=ANNOTATION_COLUMNS)
    frame.to_csv(path, index=False)


def read_annotations_csv(path: str) -> List[Annotation]:
    frame = CsvAnnotationAdapter().read(path)
    return [Annotation(str(r.image_id), float(r.cx), float(r.cy),
                       "mitosis" if pd.isna(r.label) else str(r.label))
            for r in frame.itertuples(index=False)]


def load_image(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


# --- Synthetic corpus ---

BACKGROUND_RGB = np.array([232.0, 196.0, 214.0])
NUCLEUS_RGB = np.array([150.0, 110.0, 175.0])
MITOSIS_RGB = np.array([60.0, 25.0, 90.0])
BORDER_MARGIN = 15
MAX_PLACEMENT_TRIES = 200


@dataclass
class SyntheticImage:
    image_id: str
    pixels: np.ndarray


def _stamp(canvas: np.ndarray, mask: np.ndarray, x0: int, y0: int, color: np.ndarray, strength: float) -> None:
    h, w = mask.shape
    top, left = max(y0, 0), max(x0, 0)
    bottom, right = min(y0 + h, canvas.shape[0]), min(x0 + w, canvas.shape[1])
    if bottom <= top or right <= left:
        return
    mask = mask[top - y0:bottom - y0, left - x0:right - x0]
    region = canvas[top:bottom, left:right]
    alpha = (strength * mask)[..., None]
    region[...] = region * (1.0 - alpha) + color * alpha


def _blob_mask(diameter: float, rng: np.random.Generator) -> np.ndarray:
    radius = diameter / 2.0
    half = int(np.ceil(radius)) + 1
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1].astype(float)
    angle = rng.uniform(0, np.pi)
    squash = rng.uniform(0.8, 1.0)
    u = xx * np.cos(angle) + yy * np.sin(angle)
    v = (-xx * np.sin(angle) + yy * np.cos(angle)) / squash
    r2 = (u ** 2 + v ** 2) / (radius ** 2)
    # flat dark core with a soft rim, zero outside the nominal diameter
    return np.clip(np.exp(-2.0 * r2 ** 2) * (r2 <= 1.0), 0.0, 1.0)


def _ring_mask(diameter: float) -> np.ndarray:
    radius = diameter / 2.0
    half = int(np.ceil(radius)) + 1
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1].astype(float)
    r = np.sqrt(xx ** 2 + yy ** 2)
    return np.exp(-((r - 0.8 * radius) ** 2) / (2 * (0.12 * radius) ** 2))


def _smear_mask(length: float, rng: np.random.Generator) -> np.ndarray:
    half = int(np.ceil(length / 2.0)) + 1
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1].astype(float)
    angle = rng.uniform(0, np.pi)
    u = xx * np.cos(angle) + yy * np.sin(angle)
    v = -xx * np.sin(angle) + yy * np.cos(angle)
    return np.exp(-(u ** 2) / (2 * (length / 4.0) ** 2) - (v ** 2) / (2 * 1.5 ** 2))


def _background(size: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = size
    coarse = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=24)
    fine = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=2)
    coarse /= max(np.abs(coarse).max(), 1e-9)
    fine /= max(np.abs(fine).max(), 1e-9)
    texture = 18.0 * coarse + 8.0 * fine
    return np.clip(BACKGROUND_RGB[None, None, :] + texture[..., None], 0, 255)


def _place(centers: List[Tuple[float, float, float]], diameter: float, size: Tuple[int, int],
           rng: np.random.Generator, margin: float) -> Optional[Tuple[float, float]]:
    h, w = size
    for _ in range(MAX_PLACEMENT_TRIES):
        cx = rng.uniform(margin, w - margin)
        cy = rng.uniform(margin, h - margin)
        if all((cx - ox) ** 2 + (cy - oy) ** 2 >= ((diameter + od) / 2.0 + 6.0) ** 2 for ox, oy, od in centers):
            return cx, cy
    return None


def generate_synthetic(n_images: int, size: int = 1024, blobs_per_image: int = 15, seed: int = 0,
                       distractors_per_image: Optional[int] = None,
                       nuclei_per_image: Optional[int] = None,
                       prefix: str = "synth") -> Tuple[List[SyntheticImage], List[Annotation]]:
    """
    Textured tissue-like canvases with planted mitosis-like blobs.

    Positives are compact dark blobs with diameter U[10, 30] px whose centers
    stay at least 15 px from the borders. Hard negatives are rings and
    elongated smears of similar color; pale nuclei add clutter.
    """
    if size < 512:
        raise ValueError(f"Synthetic images need size >= 512, got {size}")
    if n_images < 0 or blobs_per_image < 0:
        raise ValueError("n_images and blobs_per_image must be non-negative")
    distractors = blobs_per_image if distractors_per_image is None else distractors_per_image
    nuclei = 2 * blobs_per_image if nuclei_per_image is None else nuclei_per_image

    rng = np.random.default_rng(seed)
    images: List[SyntheticImage] = []
    annotations: List[Annotation] = []
    shape = (size, size)

    for idx in range(n_images):
        image_id = f"{prefix}_{idx:03d}"
        canvas = _background(shape, rng)
        occupied: List[Tuple[float, float, float]] = []

        for _ in range(nuclei):
            diameter = rng.uniform(14, 26)
            spot = _place(occupied, diameter, shape, rng, BORDER_MARGIN)
            if spot is None:
                break
            mask = _blob_mask(diameter, rng)
            half = mask.shape[0] // 2
            _stamp(canvas, mask, int(round(spot[0])) - half, int(round(spot[1])) - half, NUCLEUS_RGB, 0.55)
            occupied.append((spot[0], spot[1], diameter))

        planted = 0
        for _ in range(blobs_per_image):
            diameter = rng.uniform(10, 30)
            spot = _place(occupied, diameter, shape, rng, BORDER_MARGIN)
            if spot is None:
                break
            mask = _blob_mask(diameter, rng)
            half = mask.shape[0] // 2
            x0, y0 = int(round(spot[0])) - half, int(round(spot[1])) - half
            _stamp(canvas, mask, x0, y0, MITOSIS_RGB, 0.95)
            occupied.append((spot[0], spot[1], diameter))
            annotations.append(Annotation(image_id, float(x0 + half), float(y0 + half)))
            planted += 1
        if planted < blobs_per_image:
            logger.warning(f"⚠️ {image_id}: placed {planted}/{blobs_per_image} blobs after retries")

        for k in range(distractors):
            length = rng.uniform(14, 30)
            spot = _place(occupied, length, shape, rng, BORDER_MARGIN)
            if spot is None:
                break
            mask = _ring_mask(length) if k % 2 == 0 else _smear_mask(length, rng)
            half = mask.shape[0] // 2
            _stamp(canvas, mask, int(round(spot[0])) - half, int(round(spot[1])) - half, MITOSIS_RGB, 0.85)
            occupied.append((spot[0], spot[1], length))

        images.append(SyntheticImage(image_id, np.clip(np.round(canvas), 0, 255).astype(np.uint8)))

    logger.info(f"✅ Generated {len(images)} synthetic images with {len(annotations)} blobs")
    return images, annotations


def save_synthetic(images: Sequence[SyntheticImage], annotations: Sequence[Annotation],
                   out_dir: str) -> Tuple[str, str]:
    """Write `images/<id>.png` and `annotations.csv`; returns (csv path, images root)."""
    images_root = os.path.join(out_dir, "images")
    os.makedirs(images_root, exist_ok=True)
    for item in images:
        Image.fromarray(item.pixels).save(os.path.join(images_root, f"{item.image_id}.png"))
    csv_path = os.path.join(out_dir, "annotations.csv")
    write_annotations_csv(annotations, csv_path)
    return csv_path, images_root
