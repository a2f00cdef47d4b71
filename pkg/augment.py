"""
Augmentation Module
Detection-stage (box-aware) and classification-stage augmentation suites.

Every operation draws from an explicit numpy Generator; torchvision photometric
ops run inside a forked torch RNG seeded from that generator, so one seed
fixes the whole output.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import ndimage
from torchvision import transforms

from geometry import Box

logger = logging.getLogger(__name__)

DETECTION = "detection"
CLASSIFICATION = "classification"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
MEAN_FILL = tuple(int(round(m * 255)) for m in IMAGENET_MEAN)  # (124, 116, 104)


@dataclass
class DetectionSample:
    image: np.ndarray  # (H, W, 3) uint8
    boxes: List[Box] = field(default_factory=list)


@dataclass
class ClassificationSample:
    image: np.ndarray  # (S, S, 3) uint8
    target: np.ndarray  # (2,) class weights: [background, mitosis]


@dataclass(frozen=True)
class AugmentProfile:
    stage: str
    seed: int = 0
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotate_p: float = 1.0
    rotate_range: Tuple[float, float] = (0.0, 180.0)
    mixup_p: float = 0.3
    mixup_range: Tuple[float, float] = (0.0, 1.0)
    mosaic_p: float = 1.0
    close_mosaic: int = 20
    randaugment_p: float = 1.0
    randaugment_ops: int = 2
    randaugment_magnitude: int = 9
    jitter_p: float = 0.0
    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    erase_p: float = 0.4
    erase_range: Tuple[float, float] = (0.02, 0.1)
    half_erase: bool = False
    fill: Tuple[int, int, int] = MEAN_FILL
    min_box_fraction: float = 0.25
    crop_size: int = 64

    def __post_init__(self):
        if self.stage not in (DETECTION, CLASSIFICATION):
            raise ValueError(f"Unknown augmentation stage '{self.stage}'")
        for name in ("hflip_p", "vflip_p", "rotate_p", "mixup_p", "mosaic_p",
                     "randaugment_p", "jitter_p", "erase_p", "min_box_fraction"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        for name in ("rotate_range", "mixup_range", "erase_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be a valid interval, got ({lo}, {hi})")
        lo, hi = self.mixup_range
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"mixup_range must lie within [0, 1], got {self.mixup_range}")
        lo, hi = self.erase_range
        if lo < 0.0 or hi > 0.5:
            raise ValueError(f"erase_range must lie within [0, 0.5], got {self.erase_range}")
        if min(self.brightness, self.contrast, self.saturation) < 0:
            raise ValueError("color jitter factors must be non-negative")

    def rng(self, stream: int = 0) -> np.random.Generator:
        """Independent generator per worker stream."""
        return np.random.default_rng([self.seed, stream])


def detection_profile(seed: int = 0, **overrides) -> AugmentProfile:
    return replace(AugmentProfile(stage=DETECTION, seed=seed), **overrides)


def classification_profile(seed: int = 0, **overrides) -> AugmentProfile:
    base = AugmentProfile(
        stage=CLASSIFICATION, seed=seed,
        hflip_p=0.5, vflip_p=0.0,
        rotate_p=1.0, rotate_range=(-15.0, 15.0),
        mixup_p=0.2, mosaic_p=0.0,
        randaugment_p=1.0, randaugment_ops=3, randaugment_magnitude=5,
        jitter_p=1.0, brightness=0.2, contrast=0.2, saturation=0.1,
        erase_p=0.5, erase_range=(0.02, 0.15), half_erase=True,
    )
    return replace(base, **overrides)


# --- Geometric ops ---

def hflip(image: np.ndarray, boxes: Sequence[Box] = ()) -> Tuple[np.ndarray, List[Box]]:
    width = image.shape[1]
    return image[:, ::-1].copy(), [Box(width - b.x - b.w, b.y, b.w, b.h) for b in boxes]


def vflip(image: np.ndarray, boxes: Sequence[Box] = ()) -> Tuple[np.ndarray, List[Box]]:
    height = image.shape[0]
    return image[::-1].copy(), [Box(b.x, height - b.y - b.h, b.w, b.h) for b in boxes]


def rotate(image: np.ndarray, boxes: Sequence[Box], angle_deg: float) -> Tuple[np.ndarray, List[Box]]:
    """
    Rotate about the image center, bilinear with reflect padding.

    Box corners go through the same rotation and are replaced by their
    axis-aligned hull; clipping to the canvas is left to the caller.
    """
    if angle_deg == 0.0:
        return image.copy(), list(boxes)
    h, w = image.shape[:2]
    theta = math.radians(angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)

    # output (row, col) -> input (row, col): inverse rotation in index space
    matrix = np.array([[cos, -sin, 0.0], [sin, cos, 0.0], [0.0, 0.0, 1.0]])
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0, 0.0])
    offset = center - matrix @ center
    out = ndimage.affine_transform(image.astype(np.float32), matrix, offset=offset,
                                   order=1, mode="reflect")

    cx, cy = w / 2.0, h / 2.0
    rotated = []
    for b in boxes:
        xs, ys = [], []
        for px, py in ((b.x, b.y), (b.x2, b.y), (b.x, b.y2), (b.x2, b.y2)):
            dx, dy = px - cx, py - cy
            xs.append(cx + cos * dx - sin * dy)
            ys.append(cy + sin * dx + cos * dy)
        rotated.append(Box.from_xyxy(min(xs), min(ys), max(xs), max(ys)))
    return out, rotated


def clip_boxes(boxes: Sequence[Box], width: float, height: float,
               min_fraction: float = 0.25) -> List[Box]:
    """Clip to the canvas; drop boxes keeping less than `min_fraction` of their area."""
    canvas = Box(0.0, 0.0, width, height)
    kept = []
    for b in boxes:
        if canvas.contains(b):
            kept.append(b)
            continue
        clipped = b.clip(width, height)
        if clipped is not None and clipped.area >= min_fraction * b.area:
            kept.append(clipped)
    return kept


def _resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = image.shape[:2]
    zoomed = ndimage.zoom(image.astype(np.float32), (out_h / h, out_w / w, 1.0), order=1)
    out = np.zeros((out_h, out_w, image.shape[2]), dtype=np.float32)
    ch, cw = min(out_h, zoomed.shape[0]), min(out_w, zoomed.shape[1])
    out[:ch, :cw] = zoomed[:ch, :cw]
    return out


def mosaic(parts: Sequence[Tuple[np.ndarray, Sequence[Box]]],
           out_shape: Tuple[int, int]) -> Tuple[np.ndarray, List[Box]]:
    """2x2 canvas of four samples, each rescaled into one quadrant."""
    if len(parts) != 4:
        raise ValueError(f"mosaic needs 4 samples, got {len(parts)}")
    height, width = out_shape
    top, left = height // 2, width // 2
    cells = [(0, 0, top, left), (0, left, top, width - left),
             (top, 0, height - top, left), (top, left, height - top, width - left)]
    canvas = np.zeros((height, width, parts[0][0].shape[2]), dtype=np.float32)
    boxes: List[Box] = []
    for (image, part_boxes), (y0, x0, qh, qw) in zip(parts, cells):
        canvas[y0:y0 + qh, x0:x0 + qw] = _resize(image, qh, qw)
        sx, sy = qw / image.shape[1], qh / image.shape[0]
        boxes.extend(Box(x0 + b.x * sx, y0 + b.y * sy, b.w * sx, b.h * sy) for b in part_boxes)
    return canvas, boxes


def mixup(a: np.ndarray, b: np.ndarray, weight: float) -> np.ndarray:
    """Convex pixel blend w*a + (1-w)*b in float32."""
    if a.shape != b.shape:
        raise ValueError(f"mixup needs equal shapes, got {a.shape} and {b.shape}")
    if weight == 1.0:
        return a.astype(np.float32)
    return weight * a.astype(np.float32) + (1.0 - weight) * b.astype(np.float32)


# --- Photometric ops ---

def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image), 0, 255).astype(np.uint8)


def _torch_op(image: np.ndarray, op, rng: np.random.Generator) -> np.ndarray:
    seed = int(rng.integers(0, 2 ** 31 - 1))
    tensor = torch.from_numpy(np.ascontiguousarray(_to_uint8(image))).permute(2, 0, 1)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        out = op(tensor)
    return out.permute(1, 2, 0).numpy().astype(np.float32)


def randaugment(image: np.ndarray, num_ops: int, magnitude: int, rng: np.random.Generator) -> np.ndarray:
    return _torch_op(image, transforms.RandAugment(num_ops=num_ops, magnitude=magnitude), rng)


def color_jitter(image: np.ndarray, brightness: float, contrast: float, saturation: float,
                 rng: np.random.Generator) -> np.ndarray:
    op = transforms.ColorJitter(brightness=brightness, contrast=contrast, saturation=saturation)
    return _torch_op(image, op, rng)


def erase_area(ratio: float, height: int, width: int) -> int:
    return int(round(ratio * height * width))


def random_erase(image: np.ndarray, rng: np.random.Generator, ratio_range: Tuple[float, float],
                 fill: Sequence[int] = MEAN_FILL, half: bool = False) -> Tuple[np.ndarray, Tuple[int, int, int, int]]:
    """
    Fill one rectangle of area round(ratio * H * W) with `fill`. The
    rectangle is the nearest whole-pixel one, so its area can differ from
    the target when no w x h product hits it (614 in 64x64).

    With `half`, the rectangle stays inside one uniformly chosen half
    (left, right, top or bottom). Returns the image and (x, y, w, h).
    """
    h, w = image.shape[:2]
    rx, ry, rw, rh = 0, 0, w, h
    if half:
        side = int(rng.integers(0, 4))
        if side == 0:
            rw = w // 2
        elif side == 1:
            rx, rw = w // 2, w - w // 2
        elif side == 2:
            rh = h // 2
        else:
            ry, rh = h // 2, h - h // 2

    target = max(1, erase_area(rng.uniform(*ratio_range), h, w))
    aspect = math.exp(rng.uniform(math.log(0.3), math.log(1 / 0.3)))
    eh = int(np.clip(round(math.sqrt(target * aspect)), 1, rh))
    ew = int(np.clip(round(target / eh), 1, rw))
    eh = int(np.clip(round(target / ew), 1, rh))

    y0 = ry + int(rng.integers(0, rh - eh + 1))
    x0 = rx + int(rng.integers(0, rw - ew + 1))
    out = image.copy()
    out[y0:y0 + eh, x0:x0 + ew] = np.asarray(fill, dtype=out.dtype)
    return out, (x0, y0, ew, eh)


# --- Suites ---

def augment_detection(sample: DetectionSample, profile: AugmentProfile, epoch: int,
                      rng: np.random.Generator,
                      partners: Sequence[DetectionSample] = ()) -> DetectionSample:
    """
    One detection-stage draw. Mosaic and mixup pull their extra samples from
    `partners`; mosaic only fires while epoch < profile.close_mosaic.
    """
    image = sample.image.astype(np.float32)
    boxes = list(sample.boxes)
    height, width = image.shape[:2]

    if partners and epoch < profile.close_mosaic and rng.random() < profile.mosaic_p:
        picks = rng.integers(0, len(partners), size=3)
        parts = [(image, boxes)] + [(partners[i].image, partners[i].boxes) for i in picks]
        image, boxes = mosaic(parts, (height, width))

    if partners and rng.random() < profile.mixup_p:
        other = partners[int(rng.integers(0, len(partners)))]
        if other.image.shape == image.shape:
            weight = rng.uniform(*profile.mixup_range)
            image = mixup(image, other.image, weight)
            boxes = boxes + list(other.boxes)

    if rng.random() < profile.rotate_p:
        angle = rng.uniform(*profile.rotate_range)
        if angle != 0.0:
            image, boxes = rotate(image, boxes, angle)
            boxes = clip_boxes(boxes, width, height, profile.min_box_fraction)

    if rng.random() < profile.hflip_p:
        image, boxes = hflip(image, boxes)
    if rng.random() < profile.vflip_p:
        image, boxes = vflip(image, boxes)

    if rng.random() < profile.randaugment_p:
        image = randaugment(image, profile.randaugment_ops, profile.randaugment_magnitude, rng)
    if rng.random() < profile.erase_p:
        image, _ = random_erase(image, rng, profile.erase_range, profile.fill)

    boxes = clip_boxes(boxes, width, height, profile.min_box_fraction)
    return DetectionSample(_to_uint8(image), boxes)


def augment_classification(sample: ClassificationSample, profile: AugmentProfile,
                           rng: np.random.Generator,
                           partners: Sequence[ClassificationSample] = ()) -> ClassificationSample:
    """One classification-stage draw over a uint8 crop; mixup blends the targets too."""
    size = profile.crop_size
    if sample.image.shape != (size, size, 3):
        raise ValueError(f"Expected a {size}x{size}x3 crop, got {sample.image.shape}")
    image = sample.image.astype(np.float32)
    target = np.asarray(sample.target, dtype=np.float64)

    if rng.random() < profile.hflip_p:
        image, _ = hflip(image)
    if rng.random() < profile.vflip_p:
        image, _ = vflip(image)
    if rng.random() < profile.rotate_p:
        angle = rng.uniform(*profile.rotate_range)
        if angle != 0.0:
            image, _ = rotate(image, (), angle)
    if rng.random() < profile.jitter_p:
        image = color_jitter(image, profile.brightness, profile.contrast, profile.saturation, rng)
    if partners and rng.random() < profile.mixup_p:
        other = partners[int(rng.integers(0, len(partners)))]
        weight = rng.uniform(*profile.mixup_range)
        image = mixup(image, other.image, weight)
        target = weight * target + (1.0 - weight) * np.asarray(other.target, dtype=np.float64)
    if rng.random() < profile.randaugment_p:
        image = randaugment(image, profile.randaugment_ops, profile.randaugment_magnitude, rng)
    if rng.random() < profile.erase_p:
        image, _ = random_erase(image, rng, profile.erase_range, profile.fill, half=profile.half_erase)

    return ClassificationSample(_to_uint8(image), target)
