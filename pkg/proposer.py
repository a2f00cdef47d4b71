"""
Proposal Network Module
Recall-oriented stage-1 detector: a YOLO11-style backbone/neck with an
anchor-free, distribution-focal detection head at strides 8/16/32.

The improved variant swaps C3k2 for C3k2_LSConv on the P3/P4/P5 paths,
C2PSA for C2PSA_EMA at the backbone/neck fusion point, and puts EMA attention
in front of every head level. The baseline variant keeps the plain blocks.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from augment import AugmentProfile, DetectionSample, augment_detection
from blocks import C2PSA, C2PSAEMA, C3k2, C3k2LSConv, EMA, SPPF, BlockConfig, Conv
from data_io import Annotation, DatasetManifest, load_image
from evaluation import MatchRule, evaluate
from geometry import PATCH, Box, Detection, nms
from tiling import crop_annotations, extract_patch, make_grid
from training import TrainSchedule, load_checkpoint, make_optimizer, save_checkpoint

logger = logging.getLogger(__name__)

IMPROVED = "improved"
BASELINE = "baseline"
LEVELS = ("P3", "P4", "P5")
HISTORY_COLUMNS = ["epoch", "loss_box", "loss_cls", "loss_dfl", "val_p", "val_r", "val_f1"]


@dataclass(frozen=True)
class ProposerConfig:
    input_size: int = 512
    conf_threshold: float = 0.2
    nms_iou: float = 0.3
    head_strides: Tuple[int, ...] = (8, 16, 32)
    width: float = 0.125
    depth: float = 0.33
    max_channels: int = 1024
    variant: str = IMPROVED
    block: BlockConfig = field(default_factory=BlockConfig)
    num_classes: int = 1
    reg_max: int = 16
    max_candidates: int = 3000
    box_gain: float = 7.5
    cls_gain: float = 0.5
    dfl_gain: float = 1.5
    tal_topk: int = 10
    tal_alpha: float = 0.5
    tal_beta: float = 6.0

    def __post_init__(self):
        if not (0.0 < self.conf_threshold < 1.0):
            raise ValueError(f"conf_threshold must lie in (0, 1), got {self.conf_threshold}")
        if not (0.0 < self.nms_iou < 1.0):
            raise ValueError(f"nms_iou must lie in (0, 1), got {self.nms_iou}")
        if self.width <= 0 or self.depth <= 0:
            raise ValueError(f"width/depth multipliers must be positive, got {self.width}/{self.depth}")
        if self.max_channels < 8:
            raise ValueError(f"max_channels must be >= 8, got {self.max_channels}")
        if self.variant not in (IMPROVED, BASELINE):
            raise ValueError(f"Unknown proposer variant '{self.variant}'")
        if tuple(self.head_strides) != (8, 16, 32):
            raise ValueError(f"head_strides must be (8, 16, 32), got {self.head_strides}")
        if self.input_size < 32 or self.input_size % 32:
            raise ValueError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.num_classes < 1 or self.reg_max < 2 or self.max_candidates < 1:
            raise ValueError("num_classes, reg_max and max_candidates must be positive")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> "ProposerConfig":
        values = dict(values)
        values["block"] = BlockConfig(**values.get("block", {}))
        values["head_strides"] = tuple(values.get("head_strides", (8, 16, 32)))
        return cls(**values)


FULL_PROPOSER = ProposerConfig(width=1.5, depth=1.0, max_channels=512)


def make_divisible(x: float, divisor: int = 8) -> int:
    return int(math.ceil(x / divisor) * divisor)


# --- Head ---

def make_anchors(feats: Sequence[torch.Tensor], strides: Sequence[int], offset: float = 0.5):
    """Anchor centers in grid units per level, and the stride of each anchor."""
    points, stride_list = [], []
    dtype, device = feats[0].dtype, feats[0].device
    for x, s in zip(feats, strides):
        _, _, h, w = x.shape
        sx = torch.arange(w, device=device, dtype=dtype) + offset
        sy = torch.arange(h, device=device, dtype=dtype) + offset
        yy, xx = torch.meshgrid(sy, sx, indexing="ij")
        points.append(torch.stack((xx, yy), -1).view(-1, 2))
        stride_list.append(torch.full((h * w, 1), float(s), dtype=dtype, device=device))
    return torch.cat(points), torch.cat(stride_list)


def dist2bbox(distance: torch.Tensor, anchor_points: torch.Tensor) -> torch.Tensor:
    lt, rb = distance.chunk(2, -1)
    return torch.cat((anchor_points - lt, anchor_points + rb), -1)


def bbox2dist(anchor_points: torch.Tensor, bbox: torch.Tensor, reg_max: int) -> torch.Tensor:
    x1y1, x2y2 = bbox.chunk(2, -1)
    return torch.cat((anchor_points - x1y1, x2y2 - anchor_points), -1).clamp_(0, reg_max - 0.01)


class DFL(nn.Module):
    """Expected value of a softmax distribution over reg_max integer offsets."""

    def __init__(self, reg_max: int = 16):
        super().__init__()
        self.reg_max = reg_max
        self.register_buffer("project", torch.arange(reg_max, dtype=torch.float32), persistent=False)

    def forward(self, dist: torch.Tensor) -> torch.Tensor:
        b, a, _ = dist.shape
        prob = dist.view(b, a, 4, self.reg_max).softmax(-1)
        return prob @ self.project.to(prob.dtype)


class DetectHead(nn.Module):
    def __init__(self, num_classes: int, channels: Sequence[int], strides: Sequence[int],
                 reg_max: int = 16, input_size: int = 512, norm_groups: int = 8):
        super().__init__()
        self.nc = num_classes
        self.reg_max = reg_max
        self.no = num_classes + 4 * reg_max
        self.strides = tuple(strides)
        c2 = max(16, channels[0] // 4, reg_max * 4)
        c3 = max(channels[0], min(num_classes, 100))
        self.box = nn.ModuleList(
            nn.Sequential(Conv(c, c2, 3, norm_groups=norm_groups), Conv(c2, c2, 3, norm_groups=norm_groups),
                          nn.Conv2d(c2, 4 * reg_max, 1))
            for c in channels
        )
        self.cls = nn.ModuleList(
            nn.Sequential(Conv(c, c3, 3, norm_groups=norm_groups), Conv(c3, c3, 3, norm_groups=norm_groups),
                          nn.Conv2d(c3, num_classes, 1))
            for c in channels
        )
        self.dfl = DFL(reg_max)
        for box, cls, s in zip(self.box, self.cls, self.strides):
            nn.init.constant_(box[-1].bias, 1.0)
            nn.init.constant_(cls[-1].bias, math.log(5 / num_classes / (input_size / s) ** 2))

    def forward(self, feats: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        return [torch.cat((self.box[i](x), self.cls[i](x)), 1) for i, x in enumerate(feats)]


# --- Model ---

class ProposerModel(nn.Module):
    """Backbone layers 0-10, neck layers 11-22 and a three-level detect head."""

    def __init__(self, cfg: ProposerConfig):
        super().__init__()
        self.cfg = cfg
        bc = cfg.block
        g = bc.norm_groups
        improved = cfg.variant == IMPROVED

        def ch(c: int) -> int:
            return max(make_divisible(min(c, cfg.max_channels) * cfg.width, 8), 8)

        def n(k: int) -> int:
            return max(round(k * cfg.depth), 1)

        def head_block(c1, c2, c3k, level):
            if improved:
                return C3k2LSConv(c1, c2, n(2), c3k, cfg=bc, level=level)
            return C3k2(c1, c2, n(2), c3k, norm_groups=g)

        c1, c2, c3, c4, c5 = ch(64), ch(128), ch(256), ch(512), ch(1024)
        self.channels = (c3, c4, c5)

        # backbone
        self.stem = Conv(3, c1, 3, 2, norm_groups=g)
        self.down2 = Conv(c1, c2, 3, 2, norm_groups=g)
        self.stage2 = C3k2(c2, c3, n(2), False, 0.25, norm_groups=g)
        self.down3 = Conv(c3, c3, 3, 2, norm_groups=g)
        self.stage3 = C3k2(c3, c4, n(2), False, 0.25, norm_groups=g)
        self.down4 = Conv(c4, c4, 3, 2, norm_groups=g)
        self.stage4 = C3k2(c4, c4, n(2), True, norm_groups=g)
        self.down5 = Conv(c4, c5, 3, 2, norm_groups=g)
        self.stage5 = C3k2(c5, c5, n(2), True, norm_groups=g)
        self.sppf = SPPF(c5, c5, 5, norm_groups=g)
        if improved:
            self.fusion = C2PSAEMA(c5, bc)
        else:
            self.fusion = C2PSA(c5, bc.n_psa_blocks, bc.c2psa_splits, norm_groups=g)

        # neck
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.neck_td = C3k2(c5 + c4, c4, n(2), False, norm_groups=g)
        self.neck_p3 = head_block(c4 + c4, c3, False, "P3")
        self.down_p3 = Conv(c3, c3, 3, 2, norm_groups=g)
        self.neck_p4 = head_block(c3 + c4, c4, False, "P4")
        self.down_p4 = Conv(c4, c4, 3, 2, norm_groups=g)
        self.neck_p5 = head_block(c4 + c5, c5, True, "P5")

        if improved:
            self.head_attention = nn.ModuleList(EMA(c, bc.ema_groups) for c in self.channels)
        else:
            self.head_attention = nn.ModuleList(nn.Identity() for _ in self.channels)
        self.detect = DetectHead(cfg.num_classes, self.channels, cfg.head_strides,
                                 cfg.reg_max, cfg.input_size, g)

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        x = self.stage2(self.down2(self.stem(x)))
        p3 = self.stage3(self.down3(x))
        p4 = self.stage4(self.down4(p3))
        p5 = self.fusion(self.sppf(self.stage5(self.down5(p4))))

        td = self.neck_td(torch.cat((self.up(p5), p4), 1))
        out3 = self.neck_p3(torch.cat((self.up(td), p3), 1))
        out4 = self.neck_p4(torch.cat((self.down_p3(out3), td), 1))
        out5 = self.neck_p5(torch.cat((self.down_p4(out4), p5), 1))
        return [att(f) for att, f in zip(self.head_attention, (out3, out4, out5))]

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        return self.detect(self.features(x))

    def split_predictions(self, raw: Sequence[torch.Tensor]):
        """(distributions (B,A,4R), class logits (B,A,nc), anchor points (A,2), anchor strides (A,1))."""
        b = raw[0].shape[0]
        pred = torch.cat([r.view(b, self.detect.no, -1) for r in raw], 2)
        dist, logits = pred.split((4 * self.cfg.reg_max, self.cfg.num_classes), 1)
        anchors, strides = make_anchors(raw, self.cfg.head_strides)
        return dist.permute(0, 2, 1).contiguous(), logits.permute(0, 2, 1).contiguous(), anchors, strides

    def decode(self, raw: Sequence[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
        """Pixel xyxy boxes (B,A,4) and sigmoid class scores (B,A,nc)."""
        dist, logits, anchors, strides = self.split_predictions(raw)
        boxes = dist2bbox(self.detect.dfl(dist), anchors) * strides
        return boxes, logits.sigmoid()

    @torch.no_grad()
    def predict(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.decode(self.forward(x))


def build_proposer(cfg: ProposerConfig = ProposerConfig()) -> ProposerModel:
    model = ProposerModel(cfg)
    logger.info(f"✅ Built {cfg.variant} proposer: width {cfg.width}, depth {cfg.depth}, "
                f"head channels {model.channels}, {sum(p.numel() for p in model.parameters()):,} parameters")
    return model


def audit(model: ProposerModel) -> Dict:
    """Walk the graph and report where the improved blocks sit."""
    levels = {m.level for m in model.modules() if isinstance(m, C3k2LSConv)}
    return {
        "c3k2_lsconv": [lvl for lvl in LEVELS if lvl in levels],
        "c2psa_ema": sum(isinstance(m, C2PSAEMA) for m in model.modules()),
        "head_ema": sum(isinstance(m, EMA) for m in model.head_attention),
    }


def prediction_signature(model: ProposerModel) -> List[Tuple[int, ...]]:
    size = model.cfg.input_size
    with torch.no_grad():
        return [tuple(t.shape) for t in model(torch.zeros(1, 3, size, size))]


# --- Inference ---

def images_to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    """uint8 (H, W, 3) arrays -> float (B, 3, H, W) in [0, 1]."""
    stacked = np.stack([np.asarray(img) for img in images])
    return torch.from_numpy(stacked).permute(0, 3, 1, 2).float().div_(255.0)


def decode_detections(boxes: torch.Tensor, scores: torch.Tensor, cfg: ProposerConfig,
                      patch_id: str) -> List[Detection]:
    """Threshold, cap and NMS one image's decoded predictions into patch-frame detections."""
    conf, labels = scores.max(-1)
    conf = conf.double()
    idx = (conf >= cfg.conf_threshold).nonzero().squeeze(1)
    if idx.numel() > cfg.max_candidates:
        idx = idx[conf[idx].topk(cfg.max_candidates).indices]
    xyxy = boxes[idx].clamp(0, cfg.input_size).double().cpu().numpy()
    values = conf[idx].cpu().numpy()
    classes = labels[idx].cpu().numpy()
    anchor_ids = idx.cpu().numpy()

    dets = []
    for k in range(len(anchor_ids)):
        x1, y1, x2, y2 = xyxy[k]
        if x2 <= x1 or y2 <= y1:
            continue
        dets.append(Detection(Box.from_xyxy(x1, y1, x2, y2), score=float(min(values[k], 1.0)),
                              label=int(classes[k]), frame=PATCH, patch_id=patch_id,
                              det_id=f"{patch_id}#{int(anchor_ids[k])}"))
    return nms(dets, cfg.nms_iou)


def propose_batch(model: ProposerModel, patches: Sequence[np.ndarray], patch_ids: Sequence[str],
                  cfg: Optional[ProposerConfig] = None) -> List[List[Detection]]:
    cfg = cfg or model.cfg
    if len(patches) != len(patch_ids):
        raise ValueError("patches and patch_ids must have the same length")
    if not patches:
        return []
    for patch in patches:
        if patch.shape[:2] != (cfg.input_size, cfg.input_size):
            raise ValueError(f"Proposer expects {cfg.input_size}x{cfg.input_size} patches, got {patch.shape[:2]}")
    model.eval()
    boxes, scores = model.predict(images_to_tensor(patches))
    return [decode_detections(boxes[i], scores[i], cfg, pid) for i, pid in enumerate(patch_ids)]


def propose(model: ProposerModel, patch: np.ndarray, cfg: Optional[ProposerConfig] = None,
            patch_id: str = "patch") -> List[Detection]:
    """Patch-frame candidates with score >= conf_threshold after NMS."""
    return propose_batch(model, [patch], [patch_id], cfg)[0]


# --- Loss ---

def bbox_iou(box1: torch.Tensor, box2: torch.Tensor, ciou: bool = True, eps: float = 1e-7) -> torch.Tensor:
    """Elementwise IoU (or CIoU) of xyxy boxes, shape (..., 1)."""
    b1_x1, b1_y1, b1_x2, b1_y2 = box1.chunk(4, -1)
    b2_x1, b2_y1, b2_x2, b2_y2 = box2.chunk(4, -1)
    w1, h1 = b1_x2 - b1_x1, (b1_y2 - b1_y1).clamp(eps)
    w2, h2 = b2_x2 - b2_x1, (b2_y2 - b2_y1).clamp(eps)
    inter = ((torch.minimum(b1_x2, b2_x2) - torch.maximum(b1_x1, b2_x1)).clamp(0)
             * (torch.minimum(b1_y2, b2_y2) - torch.maximum(b1_y1, b2_y1)).clamp(0))
    union = w1 * h1 + w2 * h2 - inter + eps
    overlap = inter / union
    if not ciou:
        return overlap
    cw = torch.maximum(b1_x2, b2_x2) - torch.minimum(b1_x1, b2_x1)
    ch = torch.maximum(b1_y2, b2_y2) - torch.minimum(b1_y1, b2_y1)
    c2 = cw.pow(2) + ch.pow(2) + eps
    rho2 = ((b2_x1 + b2_x2 - b1_x1 - b1_x2).pow(2) + (b2_y1 + b2_y2 - b1_y1 - b1_y2).pow(2)) / 4
    v = (4 / math.pi ** 2) * (torch.atan(w2 / h2) - torch.atan(w1 / h1)).pow(2)
    with torch.no_grad():
        alpha = v / (v - overlap + (1 + eps))
    return overlap - (rho2 / c2 + v * alpha)


def df_loss(pred_dist: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Distribution focal loss: cross-entropy against the two integer bins around the target."""
    tl = target.long()
    tr = tl + 1
    wl = tr - target
    wr = 1 - wl
    left = F.cross_entropy(pred_dist, tl.view(-1), reduction="none").view(tl.shape)
    right = F.cross_entropy(pred_dist, tr.view(-1), reduction="none").view(tl.shape)
    return (left * wl + right * wr).mean(-1, keepdim=True)


class TaskAlignedAssigner(nn.Module):
    """
    Assigns ground-truth boxes to anchors by score^alpha * IoU^beta, keeping the
    top-k anchors whose centers fall inside each box.
    """

    def __init__(self, topk: int = 10, num_classes: int = 1, alpha: float = 0.5, beta: float = 6.0, eps: float = 1e-9):
        super().__init__()
        self.topk = topk
        self.num_classes = num_classes
        self.alpha = alpha
        self.beta = beta
        self.eps = eps

    @torch.no_grad()
    def forward(self, pd_scores, pd_bboxes, anc_points, gt_labels, gt_bboxes, mask_gt):
        bs, n_max = gt_bboxes.shape[:2]
        if n_max == 0:
            return (torch.full_like(pd_scores[..., 0], self.num_classes).long(),
                    torch.zeros_like(pd_bboxes), torch.zeros_like(pd_scores),
                    torch.zeros_like(pd_scores[..., 0]).bool())

        mask_in_gts = self._in_boxes(anc_points, gt_bboxes)
        mask_valid = mask_in_gts * mask_gt.to(mask_in_gts.dtype)
        align_metric, overlaps = self._metrics(pd_scores, pd_bboxes, gt_labels, gt_bboxes, mask_valid)
        mask_topk = self._topk(align_metric)
        mask_pos = mask_topk * mask_valid

        target_gt_idx, fg_mask, mask_pos = self._resolve(mask_pos, overlaps, n_max)
        target_labels, target_bboxes, target_scores = self._targets(gt_labels, gt_bboxes, target_gt_idx, fg_mask)

        align_metric = align_metric * mask_pos
        pos_align = align_metric.amax(dim=-1, keepdim=True)
        pos_overlaps = (overlaps * mask_pos).amax(dim=-1, keepdim=True)
        norm = (align_metric * pos_overlaps / (pos_align + self.eps)).amax(-2).unsqueeze(-1)
        return target_labels, target_bboxes, target_scores * norm, fg_mask.bool()

    @staticmethod
    def _in_boxes(points, gt_bboxes, eps=1e-9):
        n_anchors = points.shape[0]
        bs, n_boxes, _ = gt_bboxes.shape
        lt, rb = gt_bboxes.view(-1, 1, 4).chunk(2, 2)
        deltas = torch.cat((points[None] - lt, rb - points[None]), dim=2).view(bs, n_boxes, n_anchors, -1)
        return deltas.amin(3).gt(eps).to(gt_bboxes.dtype)

    def _metrics(self, pd_scores, pd_bboxes, gt_labels, gt_bboxes, mask):
        bs, n_max = gt_bboxes.shape[:2]
        na = pd_bboxes.shape[-2]
        mask = mask.bool()
        overlaps = torch.zeros((bs, n_max, na), dtype=pd_bboxes.dtype, device=pd_bboxes.device)
        bbox_scores = torch.zeros((bs, n_max, na), dtype=pd_scores.dtype, device=pd_scores.device)

        ind0 = torch.arange(bs, device=pd_scores.device).view(-1, 1).expand(-1, n_max)
        ind1 = gt_labels.squeeze(-1).long()
        bbox_scores[mask] = pd_scores[ind0, :, ind1][mask]

        pd_boxes = pd_bboxes.unsqueeze(1).expand(-1, n_max, -1, -1)[mask]
        gt_boxes = gt_bboxes.unsqueeze(2).expand(-1, -1, na, -1)[mask]
        overlaps[mask] = bbox_iou(gt_boxes, pd_boxes, ciou=False).squeeze(-1).clamp_(0)
        return bbox_scores.pow(self.alpha) * overlaps.pow(self.beta), overlaps

    def _topk(self, metrics):
        k = min(self.topk, metrics.shape[-1])
        _, idxs = torch.topk(metrics, k, dim=-1, largest=True)
        mask = torch.zeros_like(metrics)
        mask.scatter_(-1, idxs, 1.0)
        return mask

    @staticmethod
    def _resolve(mask_pos, overlaps, n_max):
        """An anchor claimed by several boxes keeps the box it overlaps most."""
        fg_mask = mask_pos.sum(-2)
        if fg_mask.max() > 1:
            multi = (fg_mask.unsqueeze(1) > 1).expand(-1, n_max, -1)
            best = overlaps.argmax(1)
            is_max = torch.zeros_like(mask_pos)
            is_max.scatter_(1, best.unsqueeze(1), 1.0)
            mask_pos = torch.where(multi, is_max, mask_pos)
            fg_mask = mask_pos.sum(-2)
        return mask_pos.argmax(-2), fg_mask, mask_pos

    def _targets(self, gt_labels, gt_bboxes, target_gt_idx, fg_mask):
        bs, n_max = gt_bboxes.shape[:2]
        batch_ind = torch.arange(bs, device=gt_labels.device)[..., None]
        flat_idx = target_gt_idx + batch_ind * n_max
        target_labels = gt_labels.long().flatten()[flat_idx].clamp_(0)
        target_bboxes = gt_bboxes.view(-1, 4)[flat_idx]
        target_scores = F.one_hot(target_labels, self.num_classes).to(gt_bboxes.dtype)
        target_scores = torch.where(fg_mask[:, :, None] > 0, target_scores, torch.zeros_like(target_scores))
        return target_labels, target_bboxes, target_scores


class DetectionLoss:
    """box (CIoU) + cls (BCE) + dfl terms, weighted 7.5 / 0.5 / 1.5 by default."""

    def __init__(self, model: ProposerModel):
        cfg = model.cfg
        self.model = model
        self.reg_max = cfg.reg_max
        self.gains = (cfg.box_gain, cfg.cls_gain, cfg.dfl_gain)
        self.assigner = TaskAlignedAssigner(cfg.tal_topk, cfg.num_classes, cfg.tal_alpha, cfg.tal_beta)

    @staticmethod
    def _pad(targets: Sequence[torch.Tensor], dtype, device):
        b = len(targets)
        m = max((t.shape[0] for t in targets), default=0)
        gt = torch.zeros((b, m, 4), dtype=dtype, device=device)
        mask = torch.zeros((b, m, 1), dtype=torch.bool, device=device)
        for i, t in enumerate(targets):
            if len(t):
                gt[i, :len(t)] = t.to(dtype)
                mask[i, :len(t)] = True
        return torch.zeros((b, m, 1), dtype=torch.long, device=device), gt, mask

    def __call__(self, raw: Sequence[torch.Tensor], targets: Sequence[torch.Tensor]):
        """`targets[i]` is an (n_i, 4) xyxy pixel tensor for image i."""
        dist, logits, anchors, strides = self.model.split_predictions(raw)
        dtype = logits.dtype
        gt_labels, gt_bboxes, mask_gt = self._pad(targets, dtype, logits.device)

        pred_bboxes = dist2bbox(self.model.detect.dfl(dist), anchors)
        _, target_bboxes, target_scores, fg_mask = self.assigner(
            logits.detach().sigmoid(), (pred_bboxes.detach() * strides).to(dtype),
            anchors * strides, gt_labels, gt_bboxes, mask_gt,
        )
        score_sum = max(target_scores.sum(), 1)

        loss_cls = F.binary_cross_entropy_with_logits(logits, target_scores.to(dtype), reduction="none").sum() / score_sum
        loss_box = logits.new_zeros(())
        loss_dfl = logits.new_zeros(())
        if fg_mask.sum():
            target_bboxes = target_bboxes / strides
            weight = target_scores.sum(-1)[fg_mask].unsqueeze(-1)
            overlap = bbox_iou(pred_bboxes[fg_mask], target_bboxes[fg_mask], ciou=True)
            loss_box = ((1.0 - overlap) * weight).sum() / score_sum
            target_ltrb = bbox2dist(anchors, target_bboxes, self.reg_max - 1)
            loss_dfl = (df_loss(dist[fg_mask].view(-1, self.reg_max), target_ltrb[fg_mask]) * weight).sum() / score_sum

        box_gain, cls_gain, dfl_gain = self.gains
        total = box_gain * loss_box + cls_gain * loss_cls + dfl_gain * loss_dfl
        parts = {"box": float(loss_box.detach()), "cls": float(loss_cls.detach()), "dfl": float(loss_dfl.detach())}
        return total, parts


# --- Training ---

def boxes_to_target(boxes: Sequence[Box]) -> torch.Tensor:
    if not boxes:
        return torch.zeros((0, 4), dtype=torch.float32)
    return torch.tensor([(b.x, b.y, b.x2, b.y2) for b in boxes], dtype=torch.float32)


def build_detection_samples(manifest: DatasetManifest, split_name: str, patch_size: int = 512,
                            overlap: float = 0.2, box_size: float = 50.0) -> List[DetectionSample]:
    """Every patch of every image in one split, with its patch-frame boxes."""
    samples = []
    for record in manifest.images_in(split_name):
        pixels = load_image(record.path)
        grid = make_grid(record.width, record.height, patch_size, overlap, record.image_id)
        crops = crop_annotations(grid, manifest.annotations_for(record.image_id), box_size)
        for patch in grid.patches:
            boxes = [a.to_box(box_size) for a in crops[patch.id]]
            samples.append(DetectionSample(np.ascontiguousarray(extract_patch(pixels, patch)), boxes))
    logger.info(f"✅ Built {len(samples)} {split_name} patches")
    return samples


def train_step(model: ProposerModel, loss_fn: DetectionLoss, optimizer: torch.optim.Optimizer,
               images: torch.Tensor, targets: Sequence[torch.Tensor], grad_clip: float = 10.0) -> Dict[str, float]:
    model.train()
    loss, parts = loss_fn(model(images), targets)
    optimizer.zero_grad()
    loss.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    parts["total"] = float(loss.detach())
    return parts


def evaluate_proposer(model: ProposerModel, samples: Sequence[DetectionSample],
                      rule: MatchRule = MatchRule(), batch_size: int = 8) -> Tuple[float, float, float]:
    dets_by, gts_by = {}, {}
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        ids = [f"val{start + i}" for i in range(len(chunk))]
        for pid, dets, sample in zip(ids, propose_batch(model, [s.image for s in chunk], ids), chunk):
            dets_by[pid] = dets
            gts_by[pid] = [Annotation(pid, *b.center, box=b) for b in sample.boxes]
    report = evaluate(dets_by, gts_by, rule)
    return report.precision, report.recall, report.f1


def train_proposer(model: ProposerModel, train_samples: Sequence[DetectionSample],
                   val_samples: Sequence[DetectionSample], schedule: TrainSchedule,
                   profile: Optional[AugmentProfile] = None, seed: int = 0,
                   rule: MatchRule = MatchRule()) -> Tuple[ProposerModel, List[Dict]]:
    """
    AdamW + per-epoch cosine schedule. Mosaic (inside `profile`) is only drawn
    while epoch < schedule.close_mosaic. History rows follow HISTORY_COLUMNS.
    """
    if not train_samples:
        raise ValueError("train_proposer needs a non-empty training set")
    if not any(s.boxes for s in train_samples):
        raise ValueError("train_proposer needs at least one annotated patch")
    size = model.cfg.input_size
    for s in train_samples:
        if s.image.shape[:2] != (size, size):
            raise ValueError(f"Training patches must be {size}x{size}, got {s.image.shape[:2]}")
    if profile is not None:
        profile = replace(profile, close_mosaic=schedule.close_mosaic)

    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    loss_fn = DetectionLoss(model)
    optimizer, scheduler = make_optimizer(model, schedule)
    history: List[Dict] = []

    for epoch in range(schedule.epochs):
        order = rng.permutation(len(train_samples))
        totals = np.zeros(3)
        batches = 0
        for start in range(0, len(order), schedule.batch_size):
            batch = [train_samples[i] for i in order[start:start + schedule.batch_size]]
            if profile is not None:
                batch = [augment_detection(s, profile, epoch, rng, train_samples) for s in batch]
            parts = train_step(model, loss_fn, optimizer, images_to_tensor([s.image for s in batch]),
                               [boxes_to_target(s.boxes) for s in batch], schedule.grad_clip)
            totals += (parts["box"], parts["cls"], parts["dfl"])
            batches += 1
        lr = optimizer.param_groups[0]["lr"]
        scheduler.step()

        if val_samples:
            val_p, val_r, val_f1 = evaluate_proposer(model, val_samples, rule)
        else:
            val_p = val_r = val_f1 = float("nan")
        loss_box, loss_cls, loss_dfl = totals / max(batches, 1)
        history.append({"epoch": epoch, "loss_box": loss_box, "loss_cls": loss_cls, "loss_dfl": loss_dfl,
                        "val_p": val_p, "val_r": val_r, "val_f1": val_f1})
        logger.info(f"Epoch {epoch + 1}/{schedule.epochs} lr={lr:.2e} box={loss_box:.4f} cls={loss_cls:.4f} "
                    f"dfl={loss_dfl:.4f} val P={val_p:.3f} R={val_r:.3f} F1={val_f1:.3f}")

    model.eval()
    return model, history


def save_proposer(model: ProposerModel, path: str) -> None:
    save_checkpoint(path, model, model.cfg.to_dict())


def load_proposer(path: str) -> ProposerModel:
    checkpoint = load_checkpoint(path)
    model = ProposerModel(ProposerConfig.from_dict(checkpoint["config"]))
    model.load_state_dict(checkpoint["state_dict"])
    model.eval()
    return model
