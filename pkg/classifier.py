"""
Candidate Classifier Module
Stage-2 precision filter: a ConvNeXt over 64x64 candidate crops returning
class logits and an L2-normalized embedding, trained with focal loss plus a
temperature-scaled supervised contrastive term.
"""

import copy
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from torchvision.models import ConvNeXt_Tiny_Weights, convnext_tiny
from torchvision.models.convnext import CNBlockConfig, ConvNeXt

from augment import IMAGENET_MEAN, IMAGENET_STD, AugmentProfile, ClassificationSample, augment_classification
from evaluation import metrics
from geometry import Box, Detection
from training import EarlyStopping, TrainSchedule, load_checkpoint, make_optimizer, save_checkpoint

logger = logging.getLogger(__name__)

BACKGROUND = 0
MITOSIS = 1
HISTORY_COLUMNS = ["epoch", "loss_total", "loss_focal", "loss_contrastive", "val_f1"]


@dataclass(frozen=True)
class ClassifierConfig:
    arch: str = "convnext_desk"
    crop_size: int = 64
    num_classes: int = 2
    mean: Tuple[float, float, float] = IMAGENET_MEAN
    std: Tuple[float, float, float] = IMAGENET_STD
    crop_margin: float = 0.0
    pretrained: bool = False
    threshold: float = 0.5
    desk_dims: Tuple[int, ...] = (32, 64, 128, 256)
    desk_depths: Tuple[int, ...] = (1, 1, 2, 1)

    def __post_init__(self):
        if self.arch not in ("convnext_desk", "convnext_tiny"):
            raise ValueError(f"Unknown classifier arch '{self.arch}'")
        if self.crop_size < 32:
            raise ValueError(f"crop_size must be >= 32, got {self.crop_size}")
        if self.crop_margin < 0:
            raise ValueError(f"crop_margin must be >= 0, got {self.crop_margin}")
        if not (0.0 <= self.threshold <= 1.0):
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")
        if len(self.desk_dims) != len(self.desk_depths):
            raise ValueError("desk_dims and desk_depths must have the same length")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> "ClassifierConfig":
        values = dict(values)
        for key in ("mean", "std", "desk_dims", "desk_depths"):
            if key in values:
                values[key] = tuple(values[key])
        return cls(**values)


@dataclass(frozen=True)
class HybridLossParams:
    alpha_mitosis: float = 1.0
    alpha_background: float = 1.5
    gamma: float = 2.0
    temperature: float = 0.2
    lam: float = 1.0
    exclude_self: bool = False
    eps: float = 1e-7

    def __post_init__(self):
        if self.alpha_mitosis <= 0 or self.alpha_background <= 0:
            raise ValueError("class weights must be positive")
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("gamma and lambda must be non-negative")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    def class_weights(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.tensor([self.alpha_background, self.alpha_mitosis], dtype=dtype, device=device)


@dataclass
class EmbeddingBatch:
    features: torch.Tensor  # (N, D), unit norm
    labels: torch.Tensor  # (N,) long
    probs: torch.Tensor  # (N,) probability of each sample's own class

    def __post_init__(self):
        if self.features.dim() != 2 or self.labels.shape != (self.features.shape[0],) \
                or self.probs.shape != self.labels.shape:
            raise ValueError(f"Inconsistent batch shapes {tuple(self.features.shape)}, "
                             f"{tuple(self.labels.shape)}, {tuple(self.probs.shape)}")
        if self.features.shape[0] < 1:
            raise ValueError("EmbeddingBatch needs at least one sample")
        norms = self.features.detach().double().norm(dim=1)
        tolerance = max(1e-6, 16 * torch.finfo(self.features.dtype).eps)
        if torch.any((norms - 1.0).abs() > tolerance):
            raise ValueError("EmbeddingBatch features must be unit-norm")


@dataclass
class Candidate:
    crop: np.ndarray  # (S, S, 3) float32, normalized
    detection: Optional[Detection] = None


# --- Losses ---

def focal_loss(batch: EmbeddingBatch, params: HybridLossParams = HybridLossParams()) -> torch.Tensor:
    """-mean(alpha_c * (1 - p)^gamma * log p); p is clamped to eps from below."""
    p = batch.probs.clamp(min=params.eps)
    alpha = params.class_weights(p.dtype, p.device)[batch.labels]
    return -(alpha * (1.0 - p).pow(params.gamma) * torch.log(p)).mean()


def soft_focal_loss(logits: torch.Tensor, targets: torch.Tensor,
                    params: HybridLossParams = HybridLossParams()) -> torch.Tensor:
    """Focal loss against soft (mixup) targets: per-class terms weighted by target mass."""
    p = logits.softmax(dim=1).clamp(min=params.eps)
    alpha = params.class_weights(p.dtype, p.device)
    per_class = -alpha * (1.0 - p).pow(params.gamma) * torch.log(p)
    return (targets.to(p.dtype) * per_class).sum(dim=1).mean()


def sample_positives(labels: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """For every sample, a uniformly chosen other in-batch sample of the same class; -1 if none."""
    n = labels.shape[0]
    same = (labels[:, None] == labels[None, :]) & ~torch.eye(n, dtype=torch.bool, device=labels.device)
    draws = torch.rand((n, n), generator=generator).to(labels.device)
    draws = torch.where(same, draws, torch.full_like(draws, -1.0))
    choice = draws.argmax(dim=1)
    return torch.where(same.any(dim=1), choice, torch.full_like(choice, -1))


def contrastive_loss(batch: EmbeddingBatch, params: HybridLossParams = HybridLossParams(),
                     positive_index: Optional[torch.Tensor] = None,
                     generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    -mean log(exp(sim(f_i, f_i+)/T) / sum_j exp(sim(f_i, f_j)/T)).

    The denominator runs over every j including i unless `exclude_self`.
    Samples without an in-batch positive are skipped; if none has one the
    loss is 0.
    """
    f = batch.features
    n = f.shape[0]
    if positive_index is None:
        positive_index = sample_positives(batch.labels, generator)
    valid = positive_index >= 0
    if n < 2 or not bool(valid.any()):
        logger.warning("⚠️ No sample has an in-batch positive; contrastive term is 0")
        return f.sum() * 0.0

    logits = (f @ f.t()) / params.temperature
    if params.exclude_self:
        logits = logits.masked_fill(torch.eye(n, dtype=torch.bool, device=f.device), float("-inf"))
    rows = valid.nonzero().squeeze(1)
    positive = logits[rows, positive_index[rows]]
    return (torch.logsumexp(logits[rows], dim=1) - positive).mean()


def total_loss(batch: EmbeddingBatch, params: HybridLossParams = HybridLossParams(),
               positive_index: Optional[torch.Tensor] = None,
               generator: Optional[torch.Generator] = None) -> torch.Tensor:
    focal = focal_loss(batch, params)
    if params.lam == 0:
        return focal
    return focal + params.lam * contrastive_loss(batch, params, positive_index, generator)


def hybrid_training_loss(logits: torch.Tensor, embeddings: torch.Tensor, targets: torch.Tensor,
                         params: HybridLossParams, generator: Optional[torch.Generator] = None):
    """(total, focal, contrastive) for one training batch with possibly soft targets."""
    focal = soft_focal_loss(logits, targets, params)
    labels = targets.argmax(dim=1)
    probs = logits.softmax(dim=1).gather(1, labels[:, None]).squeeze(1)
    contrast = contrastive_loss(EmbeddingBatch(embeddings, labels, probs), params, generator=generator)
    return focal + params.lam * contrast, focal, contrast


# --- Model ---

def _convnext(cfg: ClassifierConfig) -> ConvNeXt:
    if cfg.arch == "convnext_tiny":
        weights = ConvNeXt_Tiny_Weights.DEFAULT if cfg.pretrained else None
        return convnext_tiny(weights=weights)
    dims, depths = cfg.desk_dims, cfg.desk_depths
    settings = [CNBlockConfig(dims[i], dims[i + 1] if i + 1 < len(dims) else None, depths[i])
                for i in range(len(dims))]
    return ConvNeXt(settings, stochastic_depth_prob=0.0)


class CandidateClassifier(nn.Module):
    """Returns (logits over [background, mitosis], unit-norm pooled embedding)."""

    def __init__(self, cfg: ClassifierConfig = ClassifierConfig()):
        super().__init__()
        self.cfg = cfg
        net = _convnext(cfg)
        self.features = net.features
        self.avgpool = net.avgpool
        self.norm = net.classifier[0]
        self.flatten = net.classifier[1]
        self.head = nn.Linear(net.classifier[2].in_features, cfg.num_classes)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.flatten(self.norm(self.avgpool(self.features(x))))

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self.embed(x)
        return self.head(h), F.normalize(h, dim=1)


def build_classifier(cfg: ClassifierConfig = ClassifierConfig()) -> CandidateClassifier:
    model = CandidateClassifier(cfg)
    logger.info(f"✅ Built {cfg.arch} classifier, {sum(p.numel() for p in model.parameters()):,} parameters")
    return model


# --- Crops ---

def crop_region(pixels: np.ndarray, box: Box, margin: float = 0.0) -> np.ndarray:
    """Integer pixel region covering the box (plus margin), clipped to the image, at least 1x1."""
    h, w = pixels.shape[:2]
    x1 = int(np.clip(np.floor(box.x - margin * box.w), 0, w - 1))
    y1 = int(np.clip(np.floor(box.y - margin * box.h), 0, h - 1))
    x2 = int(np.clip(np.ceil(box.x2 + margin * box.w), x1 + 1, w))
    y2 = int(np.clip(np.ceil(box.y2 + margin * box.h), y1 + 1, h))
    return pixels[y1:y2, x1:x2]


def resize_crop(crop: np.ndarray, size: int = 64) -> np.ndarray:
    return np.asarray(Image.fromarray(np.ascontiguousarray(crop)).resize((size, size), Image.BILINEAR))


def normalize_crop(crop: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    scaled = crop.astype(np.float32) / 255.0
    return (scaled - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)


def preprocess_crop(pixels: np.ndarray, box: Box, cfg: ClassifierConfig = ClassifierConfig()) -> np.ndarray:
    resized = resize_crop(crop_region(pixels, box, cfg.crop_margin), cfg.crop_size)
    return normalize_crop(resized, cfg.mean, cfg.std)


def candidates_from_detections(pixels: np.ndarray, dets: Sequence[Detection],
                               cfg: ClassifierConfig = ClassifierConfig()) -> List[Candidate]:
    return [Candidate(preprocess_crop(pixels, d.box, cfg), d) for d in dets]


def crops_to_tensor(crops: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(crops).astype(np.float32)).permute(0, 3, 1, 2).contiguous()


# --- Inference ---

@torch.no_grad()
def classify(model: nn.Module, candidates: Sequence[Candidate], batch_size: int = 256) -> np.ndarray:
    """Mitosis probability per candidate (softmax over the 2-class head)."""
    if not candidates:
        return np.zeros(0, dtype=np.float64)
    size = getattr(getattr(model, "cfg", None), "crop_size", 64)
    for c in candidates:
        if c.crop.shape != (size, size, 3):
            raise ValueError(f"Candidate crops must be {size}x{size}x3, got {c.crop.shape}")
    model.eval()
    scores = []
    for start in range(0, len(candidates), batch_size):
        out = model(crops_to_tensor([c.crop for c in candidates[start:start + batch_size]]))
        logits = out[0] if isinstance(out, tuple) else out
        scores.append(logits.double().softmax(dim=1)[:, MITOSIS].cpu().numpy())
    return np.concatenate(scores)


def filter_candidates(candidates: Sequence[Candidate], scores: np.ndarray,
                      threshold: float = 0.5) -> List[Candidate]:
    """Reject score < threshold; a score equal to the threshold survives."""
    return [c for c, s in zip(candidates, scores) if s >= threshold]


# --- Candidate mining ---

def one_hot(label: int) -> np.ndarray:
    target = np.zeros(2, dtype=np.float64)
    target[label] = 1.0
    return target


def mine_candidates(images: Sequence[np.ndarray], boxes: Sequence[Sequence[Box]], rng: np.random.Generator,
                    proposer_fn: Optional[Callable[[int, np.ndarray], Sequence[Detection]]] = None,
                    negatives_per_image: int = 4, match_radius: float = 30.0, jitter: float = 0.1,
                    box_size: float = 50.0, crop_size: int = 64) -> List[ClassificationSample]:
    """
    Labeled uint8 crops for stage-2 training.

    Ground-truth boxes give jittered positives. Proposals (when `proposer_fn`
    is given) are labeled by center distance to the nearest ground truth.
    Random background boxes away from every ground truth fill in negatives.
    """
    samples: List[ClassificationSample] = []
    for idx, (pixels, gt) in enumerate(zip(images, boxes)):
        h, w = pixels.shape[:2]
        centers = np.array([b.center for b in gt], dtype=np.float64).reshape(-1, 2)

        def near_gt(cx: float, cy: float, radius: float) -> bool:
            if not len(centers):
                return False
            return bool(np.min(np.hypot(centers[:, 0] - cx, centers[:, 1] - cy)) <= radius)

        for b in gt:
            cx, cy = b.center
            cx += rng.uniform(-jitter, jitter) * b.w
            cy += rng.uniform(-jitter, jitter) * b.h
            scale = rng.uniform(0.9, 1.1)
            box = Box(cx - b.w * scale / 2, cy - b.h * scale / 2, b.w * scale, b.h * scale)
            samples.append(ClassificationSample(resize_crop(crop_region(pixels, box), crop_size), one_hot(MITOSIS)))

        if proposer_fn is not None:
            for det in proposer_fn(idx, pixels):
                label = MITOSIS if near_gt(*det.box.center, match_radius) else BACKGROUND
                samples.append(ClassificationSample(resize_crop(crop_region(pixels, det.box), crop_size),
                                                    one_hot(label)))

        placed, tries = 0, 0
        while placed < negatives_per_image and tries < 50 * max(negatives_per_image, 1):
            tries += 1
            cx, cy = rng.uniform(box_size / 2, w - box_size / 2), rng.uniform(box_size / 2, h - box_size / 2)
            if near_gt(cx, cy, box_size):
                continue
            box = Box.from_center(cx, cy, box_size)
            samples.append(ClassificationSample(resize_crop(crop_region(pixels, box), crop_size),
                                                one_hot(BACKGROUND)))
            placed += 1

    n_pos = sum(int(s.target.argmax() == MITOSIS) for s in samples)
    logger.info(f"✅ Mined {len(samples)} crops ({n_pos} mitosis, {len(samples) - n_pos} background)")
    return samples


# --- Training ---

def _batch_tensor(images: Sequence[np.ndarray], cfg: ClassifierConfig) -> torch.Tensor:
    return crops_to_tensor([normalize_crop(img, cfg.mean, cfg.std) for img in images])


def evaluate_classifier(model: CandidateClassifier, samples: Sequence[ClassificationSample],
                        threshold: float = 0.5) -> float:
    """F1 of the mitosis class on hard labels."""
    if not samples:
        return float("nan")
    candidates = [Candidate(normalize_crop(s.image, model.cfg.mean, model.cfg.std)) for s in samples]
    predicted = classify(model, candidates) >= threshold
    actual = np.array([s.target.argmax() == MITOSIS for s in samples])
    if not actual.any():
        logger.warning(f"⚠️ No mitosis crops among {len(samples)} validation samples; F1 is not informative")
    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    return metrics(tp, fp, fn)[2]


def train_classifier(model: CandidateClassifier, train: Sequence[ClassificationSample],
                     val: Sequence[ClassificationSample], params: HybridLossParams,
                     schedule: TrainSchedule, profile: Optional[AugmentProfile] = None,
                     seed: int = 0) -> Tuple[CandidateClassifier, List[Dict]]:
    """
    AdamW + cosine schedule with early stopping on validation F1; the
    best-F1 weights are loaded back into `model` before returning.
    """
    labels = {int(np.asarray(s.target).argmax()) for s in train}
    if labels != {BACKGROUND, MITOSIS}:
        raise ValueError(f"train_classifier needs both classes in the training set, got {sorted(labels)}")
    if not val:
        logger.warning("⚠️ No validation crops; monitoring F1 on the training set")
        val = train

    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    optimizer, scheduler = make_optimizer(model, schedule)
    stopper = EarlyStopping(schedule.patience or schedule.epochs)
    best_state = copy.deepcopy(model.state_dict())
    history: List[Dict] = []

    for epoch in range(schedule.epochs):
        model.train()
        order = rng.permutation(len(train))
        sums = np.zeros(3)
        batches = 0
        for start in range(0, len(order), schedule.batch_size):
            batch = [train[i] for i in order[start:start + schedule.batch_size]]
            if profile is not None:
                batch = [augment_classification(s, profile, rng, train) for s in batch]
            x = _batch_tensor([s.image for s in batch], model.cfg)
            targets = torch.from_numpy(np.stack([s.target for s in batch]).astype(np.float32))
            logits, embeddings = model(x)
            loss, focal, contrast = hybrid_training_loss(logits, embeddings, targets, params, generator)
            optimizer.zero_grad()
            loss.backward()
            if schedule.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), schedule.grad_clip)
            optimizer.step()
            sums += (float(loss.detach()), float(focal.detach()), float(contrast.detach()))
            batches += 1
        scheduler.step()

        val_f1 = evaluate_classifier(model, val, model.cfg.threshold)
        loss_total, loss_focal, loss_contrastive = sums / max(batches, 1)
        history.append({"epoch": epoch, "loss_total": loss_total, "loss_focal": loss_focal,
                        "loss_contrastive": loss_contrastive, "val_f1": val_f1})
        logger.info(f"Epoch {epoch + 1}/{schedule.epochs} loss={loss_total:.4f} "
                    f"(focal {loss_focal:.4f}, contrastive {loss_contrastive:.4f}) val F1={val_f1:.3f}")

        stop = stopper.step(epoch, val_f1)
        if stopper.improved:
            best_state = copy.deepcopy(model.state_dict())
        if stop:
            break

    model.load_state_dict(best_state)
    model.eval()
    logger.info(f"✅ Best val F1 {stopper.best_fitness:.3f} at epoch {stopper.best_epoch}")
    return model, history


def save_classifier(model: CandidateClassifier, path: str) -> None:
    save_checkpoint(path, model, model.cfg.to_dict())


def load_classifier(path: str) -> CandidateClassifier:
    checkpoint = load_checkpoint(path)
    model = CandidateClassifier(ClassifierConfig.from_dict(checkpoint["config"]))
    model.load_state_dict(checkpoint["state_dict"])
    model.eval()
    return model
