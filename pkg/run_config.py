"""
Run Configuration
Flat dotted-key configuration with TOML files, `run.json` replay and
`--set key=value` overrides, plus typed views for every module.
"""

import json
import logging
import os
from typing import Any, Dict, Iterable, Mapping, Optional

import toml

from augment import AugmentProfile, classification_profile, detection_profile
from blocks import BlockConfig
from classifier import ClassifierConfig, HybridLossParams
from evaluation import MatchRule, parse_rule
from pipeline import PipelineConfig
from proposer import ProposerConfig
from training import TrainSchedule

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Unknown key, wrong type or unreadable config file."""


DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "preset": "desk",
    "workers": 1,
    "paths.out": "runs/latest",
    "paths.ledger": "",

    "data.patch_size": 512,
    "data.overlap": 0.2,
    "data.box_size": 50.0,
    "data.ratios": [7, 1, 2],

    "synth.n_images": 20,
    "synth.size": 1024,
    "synth.blobs": 15,
    "synth.distractors": 15,

    "proposer.variant": "improved",
    "proposer.input_size": 512,
    "proposer.conf_threshold": 0.2,
    "proposer.nms_iou": 0.3,
    "proposer.width": 0.125,
    "proposer.depth": 0.33,
    "proposer.max_channels": 1024,
    "proposer.reg_max": 16,
    "proposer.max_candidates": 3000,
    "proposer.box_gain": 7.5,
    "proposer.cls_gain": 0.5,
    "proposer.dfl_gain": 1.5,
    "proposer.tal_topk": 10,
    "proposer.tal_alpha": 0.5,
    "proposer.tal_beta": 6.0,
    "proposer.epochs": 30,
    "proposer.batch_size": 8,
    "proposer.lr0": 1e-3,
    "proposer.lrf": 1e-5,
    "proposer.weight_decay": 5e-4,
    "proposer.close_mosaic": 20,

    "blocks.ema_groups": 32,
    "blocks.lsconv_large_kernel": 7,
    "blocks.lsconv_small_kernel": 3,
    "blocks.lsconv_groups": 8,
    "blocks.n_psa_blocks": 1,
    "blocks.c2psa_splits": 2,
    "blocks.norm_groups": 8,

    "classifier.arch": "convnext_desk",
    "classifier.crop_size": 64,
    "classifier.crop_margin": 0.0,
    "classifier.pretrained": False,
    "classifier.threshold": 0.5,
    "classifier.epochs": 50,
    "classifier.batch_size": 64,
    "classifier.lr0": 3e-4,
    "classifier.lrf": 1e-6,
    "classifier.weight_decay": 1e-5,
    "classifier.patience": 60,
    "classifier.negatives_per_image": 4,

    "loss.alpha_mitosis": 1.0,
    "loss.alpha_background": 1.5,
    "loss.gamma": 2.0,
    "loss.temperature": 0.2,
    "loss.lambda": 1.0,
    "loss.exclude_self": False,

    "pipeline.merge_iou": 0.5,
    "pipeline.proposer_batch": 8,
    "pipeline.classifier_batch": 256,
    "pipeline.two_stage": True,

    "eval.rule": "center:30",

    "augment.detection.hflip_p": 0.5,
    "augment.detection.vflip_p": 0.5,
    "augment.detection.rotate_p": 1.0,
    "augment.detection.rotate_min": 0.0,
    "augment.detection.rotate_max": 180.0,
    "augment.detection.mixup_p": 0.3,
    "augment.detection.mosaic_p": 1.0,
    "augment.detection.randaugment_p": 1.0,
    "augment.detection.randaugment_ops": 2,
    "augment.detection.randaugment_magnitude": 9,
    "augment.detection.erase_p": 0.4,
    "augment.detection.erase_min": 0.02,
    "augment.detection.erase_max": 0.1,
    "augment.detection.min_box_fraction": 0.25,

    "augment.classification.hflip_p": 0.5,
    "augment.classification.rotate_p": 1.0,
    "augment.classification.rotate_min": -15.0,
    "augment.classification.rotate_max": 15.0,
    "augment.classification.jitter_p": 1.0,
    "augment.classification.brightness": 0.2,
    "augment.classification.contrast": 0.2,
    "augment.classification.saturation": 0.1,
    "augment.classification.mixup_p": 0.2,
    "augment.classification.randaugment_p": 1.0,
    "augment.classification.randaugment_ops": 3,
    "augment.classification.randaugment_magnitude": 5,
    "augment.classification.erase_p": 0.5,
    "augment.classification.erase_min": 0.02,
    "augment.classification.erase_max": 0.15,
    "augment.classification.half_erase": True,
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {},
    "full": {
        "proposer.width": 1.5,
        "proposer.depth": 1.0,
        "proposer.max_channels": 512,
        "proposer.epochs": 300,
        "proposer.batch_size": 960,
        "classifier.arch": "convnext_tiny",
        "classifier.epochs": 400,
        "classifier.batch_size": 960,
    },
}


def flatten(nested: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in nested.items():
        full = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(flatten(value, f"{full}."))
        else:
            flat[full] = value
    return flat


def nest(flat: Mapping[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        node = nested
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return nested


def coerce(key: str, value: Any) -> Any:
    """Cast `value` to the type of the default for `key`."""
    if key not in DEFAULTS:
        raise ConfigError(f"Unknown config key '{key}'")
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, (list, tuple)):
            return list(value)
    raise ConfigError(f"Config key '{key}' expects {type(default).__name__}, got {value!r}")


def parse_override(text: str) -> tuple:
    """`key=value` with the value read as a TOML scalar, else kept as a string."""
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"Override must look like key=value, got '{text}'")
    raw = raw.strip()
    try:
        value = toml.loads(f"v = {raw}")["v"]
    except (toml.TomlDecodeError, IndexError):
        value = raw
    return key, value


def read_config_file(path: str) -> Dict[str, Any]:
    """Flat values from a TOML file, or from the `config` object of a run.json."""
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    try:
        if path.endswith(".json"):
            with open(path, "r") as f:
                payload = json.load(f)
            return flatten(payload.get("config", payload))
        return flatten(toml.load(path))
    except (json.JSONDecodeError, toml.TomlDecodeError) as e:
        raise ConfigError(f"Could not parse config {path}: {e}") from e


class RunConfig:
    """Resolved flat configuration: defaults < preset < file < overrides."""

    def __init__(self, values: Mapping[str, Any]):
        self.values = dict(values)

    def __getitem__(self, key: str) -> Any:
        if key not in self.values:
            raise ConfigError(f"Unknown config key '{key}'")
        return self.values[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    def to_dict(self) -> Dict[str, Any]:
        return dict(sorted(self.values.items()))

    def dump_toml(self, path: str) -> None:
        with open(path, "w") as f:
            toml.dump(nest(self.values), f)


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    explicit: Dict[str, Any] = {}
    if path:
        for key, value in read_config_file(path).items():
            explicit[key] = coerce(key, value)
    for item in overrides:
        key, value = parse_override(item)
        explicit[key] = coerce(key, value)

    preset = explicit.get("preset", DEFAULTS["preset"])
    if preset not in PRESETS:
        raise ConfigError(f"Unknown preset '{preset}', expected one of {sorted(PRESETS)}")
    values = dict(DEFAULTS)
    values.update(PRESETS[preset])
    values.update(explicit)
    logger.debug(f"Resolved config with preset '{preset}' and {len(explicit)} explicit keys")
    return RunConfig(values)


# --- Typed views ---

def _wrap(builder, *args, **kwargs):
    try:
        return builder(*args, **kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def block_config(cfg: RunConfig) -> BlockConfig:
    return _wrap(BlockConfig,
                 ema_groups=cfg["blocks.ema_groups"],
                 lsconv_large_kernel=cfg["blocks.lsconv_large_kernel"],
                 lsconv_small_kernel=cfg["blocks.lsconv_small_kernel"],
                 lsconv_groups=cfg["blocks.lsconv_groups"],
                 n_psa_blocks=cfg["blocks.n_psa_blocks"],
                 c2psa_splits=cfg["blocks.c2psa_splits"],
                 norm_groups=cfg["blocks.norm_groups"])


def proposer_config(cfg: RunConfig) -> ProposerConfig:
    return _wrap(ProposerConfig,
                 input_size=cfg["proposer.input_size"],
                 conf_threshold=cfg["proposer.conf_threshold"],
                 nms_iou=cfg["proposer.nms_iou"],
                 width=cfg["proposer.width"],
                 depth=cfg["proposer.depth"],
                 max_channels=cfg["proposer.max_channels"],
                 variant=cfg["proposer.variant"],
                 block=block_config(cfg),
                 reg_max=cfg["proposer.reg_max"],
                 max_candidates=cfg["proposer.max_candidates"],
                 box_gain=cfg["proposer.box_gain"],
                 cls_gain=cfg["proposer.cls_gain"],
                 dfl_gain=cfg["proposer.dfl_gain"],
                 tal_topk=cfg["proposer.tal_topk"],
                 tal_alpha=cfg["proposer.tal_alpha"],
                 tal_beta=cfg["proposer.tal_beta"])


def classifier_config(cfg: RunConfig) -> ClassifierConfig:
    return _wrap(ClassifierConfig,
                 arch=cfg["classifier.arch"],
                 crop_size=cfg["classifier.crop_size"],
                 crop_margin=cfg["classifier.crop_margin"],
                 pretrained=cfg["classifier.pretrained"],
                 threshold=cfg["classifier.threshold"])


def loss_params(cfg: RunConfig) -> HybridLossParams:
    return _wrap(HybridLossParams,
                 alpha_mitosis=cfg["loss.alpha_mitosis"],
                 alpha_background=cfg["loss.alpha_background"],
                 gamma=cfg["loss.gamma"],
                 temperature=cfg["loss.temperature"],
                 lam=cfg["loss.lambda"],
                 exclude_self=cfg["loss.exclude_self"])


def pipeline_config(cfg: RunConfig) -> PipelineConfig:
    return _wrap(PipelineConfig,
                 patch_size=cfg["data.patch_size"],
                 overlap=cfg["data.overlap"],
                 conf_threshold=cfg["proposer.conf_threshold"],
                 nms_iou=cfg["proposer.nms_iou"],
                 classifier_threshold=cfg["classifier.threshold"],
                 merge_iou=cfg["pipeline.merge_iou"],
                 proposer_batch=cfg["pipeline.proposer_batch"],
                 classifier_batch=cfg["pipeline.classifier_batch"],
                 workers=cfg["workers"],
                 two_stage=cfg["pipeline.two_stage"])


def detection_profile_from(cfg: RunConfig) -> AugmentProfile:
    p = "augment.detection."
    return _wrap(detection_profile, seed=cfg["seed"],
                 hflip_p=cfg[p + "hflip_p"], vflip_p=cfg[p + "vflip_p"],
                 rotate_p=cfg[p + "rotate_p"], rotate_range=(cfg[p + "rotate_min"], cfg[p + "rotate_max"]),
                 mixup_p=cfg[p + "mixup_p"], mosaic_p=cfg[p + "mosaic_p"],
                 close_mosaic=cfg["proposer.close_mosaic"],
                 randaugment_p=cfg[p + "randaugment_p"], randaugment_ops=cfg[p + "randaugment_ops"],
                 randaugment_magnitude=cfg[p + "randaugment_magnitude"],
                 erase_p=cfg[p + "erase_p"], erase_range=(cfg[p + "erase_min"], cfg[p + "erase_max"]),
                 min_box_fraction=cfg[p + "min_box_fraction"])


def classification_profile_from(cfg: RunConfig) -> AugmentProfile:
    p = "augment.classification."
    return _wrap(classification_profile, seed=cfg["seed"],
                 hflip_p=cfg[p + "hflip_p"],
                 rotate_p=cfg[p + "rotate_p"], rotate_range=(cfg[p + "rotate_min"], cfg[p + "rotate_max"]),
                 jitter_p=cfg[p + "jitter_p"], brightness=cfg[p + "brightness"],
                 contrast=cfg[p + "contrast"], saturation=cfg[p + "saturation"],
                 mixup_p=cfg[p + "mixup_p"],
                 randaugment_p=cfg[p + "randaugment_p"], randaugment_ops=cfg[p + "randaugment_ops"],
                 randaugment_magnitude=cfg[p + "randaugment_magnitude"],
                 erase_p=cfg[p + "erase_p"], erase_range=(cfg[p + "erase_min"], cfg[p + "erase_max"]),
                 half_erase=cfg[p + "half_erase"], crop_size=cfg["classifier.crop_size"])


def proposer_schedule(cfg: RunConfig) -> TrainSchedule:
    return _wrap(TrainSchedule, epochs=cfg["proposer.epochs"], batch_size=cfg["proposer.batch_size"],
                 lr0=cfg["proposer.lr0"], lrf=cfg["proposer.lrf"],
                 weight_decay=cfg["proposer.weight_decay"], close_mosaic=cfg["proposer.close_mosaic"])


def classifier_schedule(cfg: RunConfig) -> TrainSchedule:
    return _wrap(TrainSchedule, epochs=cfg["classifier.epochs"], batch_size=cfg["classifier.batch_size"],
                 lr0=cfg["classifier.lr0"], lrf=cfg["classifier.lrf"],
                 weight_decay=cfg["classifier.weight_decay"], patience=cfg["classifier.patience"])


def match_rule(cfg: RunConfig) -> MatchRule:
    return _wrap(parse_rule, cfg["eval.rule"])
