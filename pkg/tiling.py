"""
Tiling Module
Splits large images into overlapping square patches, maps annotations into
patch frames and extracts patch pixels.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence

import numpy as np
from PIL import Image

from data_io import Annotation
from geometry import Box

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PatchSpec:
    id: str
    origin_x: int
    origin_y: int
    size: int
    pad_x: int = 0
    pad_y: int = 0

    def __post_init__(self):
        if self.origin_x < 0 or self.origin_y < 0:
            raise ValueError(f"Patch origin must be non-negative, got ({self.origin_x}, {self.origin_y})")

    @property
    def valid_w(self) -> int:
        return self.size - self.pad_x

    @property
    def valid_h(self) -> int:
        return self.size - self.pad_y

    @property
    def bounds(self) -> Box:
        """Global-frame rectangle of real image pixels inside this patch."""
        return Box(self.origin_x, self.origin_y, self.valid_w, self.valid_h)

    def filename(self) -> str:
        return f"{self.id}.png"


@dataclass(frozen=True)
class TileGrid:
    image_w: int
    image_h: int
    patch_size: int
    overlap_fraction: float
    patches: tuple

    @property
    def stride(self) -> int:
        return grid_stride(self.patch_size, self.overlap_fraction)

    def patch(self, patch_id: str) -> PatchSpec:
        for p in self.patches:
            if p.id == patch_id:
                return p
        raise KeyError(patch_id)


def patch_id(image_id: str, origin_x: int, origin_y: int) -> str:
    return f"{image_id}_x{origin_x}_y{origin_y}"


def grid_stride(patch_size: int, overlap: float) -> int:
    return max(1, int(round(patch_size * (1.0 - overlap))))


def axis_origins(extent: int, patch_size: int, stride: int) -> List[int]:
    """Origins 0, stride, 2*stride, ... plus a final origin clamped to the image edge."""
    if extent <= patch_size:
        return [0]
    origins = list(range(0, extent - patch_size + 1, stride))
    if origins[-1] != extent - patch_size:
        origins.append(extent - patch_size)
    return origins


def make_grid(image_w: int, image_h: int, patch_size: int = 512, overlap: float = 0.2,
              image_id: str = "image") -> TileGrid:
    """Row-major grid of patches covering every pixel; short axes get one zero-padded patch."""
    if image_w < 1 or image_h < 1:
        raise ValueError(f"Image extent must be positive, got {image_w}x{image_h}")
    if patch_size < 1:
        raise ValueError(f"patch_size must be positive, got {patch_size}")
    if not (0.0 <= overlap < 1.0):
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")

    stride = grid_stride(patch_size, overlap)
    xs = axis_origins(image_w, patch_size, stride)
    ys = axis_origins(image_h, patch_size, stride)
    pad_x = max(0, patch_size - image_w)
    pad_y = max(0, patch_size - image_h)
    if pad_x or pad_y:
        logger.warning(f"⚠️ {image_id} is {image_w}x{image_h}, smaller than {patch_size}; zero-padding")

    patches = tuple(
        PatchSpec(patch_id(image_id, ox, oy), ox, oy, patch_size, pad_x, pad_y)
        for oy in ys for ox in xs
    )
    return TileGrid(image_w, image_h, patch_size, overlap, patches)


def crop_annotations(grid: TileGrid, anns: Sequence[Annotation],
                     box_size: float = 50.0) -> Dict[str, List[Annotation]]:
    """
    Assign each annotation to every patch that fully contains its box, in patch coordinates.

    Boxes are first clipped to the image. An annotation that no patch contains
    whole goes to the first patch holding its center, clipped and flagged
    `truncated`.
    """
    result: Dict[str, List[Annotation]] = {p.id: [] for p in grid.patches}
    for ann in anns:
        box = ann.to_box(box_size).clip(grid.image_w, grid.image_h)
        if box is None:
            logger.warning(f"⚠️ Annotation at ({ann.cx}, {ann.cy}) lies outside the image; skipped")
            continue
        placed = False
        for p in grid.patches:
            if p.bounds.contains(box):
                local = replace(ann, cx=ann.cx - p.origin_x, cy=ann.cy - p.origin_y,
                                box=box.translate(-p.origin_x, -p.origin_y))
                result[p.id].append(local)
                placed = True
        if placed:
            continue
        for p in grid.patches:
            b = p.bounds
            if b.x <= ann.cx < b.x2 and b.y <= ann.cy < b.y2:
                clipped = box.clip(b.w, b.h, b.x, b.y)
                local = replace(ann, cx=ann.cx - p.origin_x, cy=ann.cy - p.origin_y,
                                box=clipped.translate(-p.origin_x, -p.origin_y), truncated=True)
                result[p.id].append(local)
                logger.debug(f"Annotation at ({ann.cx}, {ann.cy}) truncated into {p.id}")
                break
    return result


def extract_patch(image: np.ndarray, patch: PatchSpec) -> np.ndarray:
    """Patch pixels (size x size x C), zero-padded past the image edge."""
    crop = image[patch.origin_y:patch.origin_y + patch.size, patch.origin_x:patch.origin_x + patch.size]
    if crop.shape[0] == patch.size and crop.shape[1] == patch.size:
        return crop
    out = np.zeros((patch.size, patch.size) + image.shape[2:], dtype=image.dtype)
    out[:crop.shape[0], :crop.shape[1]] = crop
    return out


def save_patches(image: np.ndarray, grid: TileGrid, out_dir: str, workers: int = 4) -> List[str]:
    """Dump every patch as `<image_id>_x<origin_x>_y<origin_y>.png`."""
    os.makedirs(out_dir, exist_ok=True)

    def _write(p: PatchSpec) -> str:
        path = os.path.join(out_dir, p.filename())
        Image.fromarray(extract_patch(image, p)).save(path)
        return path

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        paths = list(pool.map(_write, grid.patches))
    logger.info(f"✅ Wrote {len(paths)} patches to {out_dir}")
    return paths
