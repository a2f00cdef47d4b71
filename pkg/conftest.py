"""Shared fixtures: seeded generators, small block configs, synthetic corpora and fake stage models."""

import os
import zlib

import numpy as np
import pytest
from PIL import Image

from blocks import BlockConfig
from data_io import Annotation, generate_synthetic, load_manifest, save_synthetic, split, write_annotations_csv
from geometry import PATCH, Box, Detection


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_blocks():
    """Group counts that divide the narrow widths used in unit tests."""
    return BlockConfig(channels=16, ema_groups=4, lsconv_groups=4, norm_groups=4)


@pytest.fixture
def planted_image():
    images, annotations = generate_synthetic(1, size=1024, blobs_per_image=10, seed=3)
    return images[0], annotations


@pytest.fixture
def synth_corpus(tmp_path):
    """Ten small synthetic images on disk with a seeded 7:1:2 split."""
    images, annotations = generate_synthetic(10, size=512, blobs_per_image=4, seed=11)
    csv_path, images_root = save_synthetic(images, annotations, str(tmp_path))
    return split(load_manifest(csv_path, images_root), seed=0)


def write_png(path, width, height, value=200):
    Image.fromarray(np.full((height, width, 3), value, dtype=np.uint8)).save(path)
    return str(path)


@pytest.fixture
def png_writer():
    return write_png


def _patch_rng(patch_id: str, salt: int) -> np.random.Generator:
    return np.random.default_rng([zlib.crc32(patch_id.encode()), salt])


class RandomProposer:
    """Deterministic per-patch random candidates; output depends only on the patch spec."""

    input_size = None

    def __init__(self, per_patch=12, floor=0.2, salt=0):
        self.per_patch = per_patch
        self.floor = floor
        self.salt = salt

    def propose(self, patches, specs):
        out = []
        for spec in specs:
            r = _patch_rng(spec.id, self.salt)
            dets = []
            for k in range(self.per_patch):
                x, y = r.uniform(0, spec.valid_w - 40), r.uniform(0, spec.valid_h - 40)
                size = r.uniform(20, 40)
                dets.append(Detection(Box(x, y, size, size), float(r.uniform(self.floor, 1.0)),
                                      frame=PATCH, patch_id=spec.id, det_id=f"{spec.id}#{k}"))
            out.append(dets)
        return out


class RandomClassifier:
    def score(self, pixels, dets, patch):
        return _patch_rng(patch.id, 99).uniform(0, 1, size=len(dets))


class EmptyProposer:
    input_size = None

    def propose(self, patches, specs):
        return [[] for _ in specs]


@pytest.fixture
def random_proposer():
    return RandomProposer()


@pytest.fixture
def random_classifier():
    return RandomClassifier()


@pytest.fixture
def empty_proposer():
    return EmptyProposer()


@pytest.fixture
def count_fixture(tmp_path):
    """
    Detection and annotation CSVs that evaluate to exactly (tp, fp, fn) under
    center:30 matching. Returns a writer taking the three counts.
    """

    def _write(tp, fp, fn, per_image=20):
        n_gt = tp + fn
        n_images = max(1, -(-n_gt // per_image))
        gts, rows = [], []
        for j in range(n_gt):
            image_id = f"img{j // per_image:04d}"
            k = j % per_image
            cx, cy = 100.0 + 200.0 * (k % 10), 100.0 + 200.0 * (k // 10)
            gts.append(Annotation(image_id, cx, cy))
            if j < tp:
                rows.append(f"{image_id},{cx - 25},{cy - 25},50,50,0.9,final")
        for f in range(fp):
            image_id = f"img{f % n_images:04d}"
            cx = 5000.0 + 200.0 * (f // n_images)
            rows.append(f"{image_id},{cx - 25},4975,50,50,0.5,final")
        dets_path = os.path.join(tmp_path, "counts_detections.csv")
        with open(dets_path, "w") as fh:
            fh.write("image_id,x,y,w,h,score,stage\n")
            fh.write("\n".join(rows) + ("\n" if rows else ""))
        gt_path = os.path.join(tmp_path, "counts_gt.csv")
        write_annotations_csv(gts, gt_path)
        return dets_path, gt_path

    return _write
