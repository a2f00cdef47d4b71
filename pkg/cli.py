"""
Command Line Interface
Subcommands: synth, tile, train-proposer, train-classifier, infer, evaluate, sweep.

Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.
Every run writes `run.json` (resolved config + seed) into its output folder
and registers itself in the run ledger.
"""

import argparse
import glob
import itertools
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

import database
from classifier import HISTORY_COLUMNS as CLASSIFIER_HISTORY, build_classifier, load_classifier, mine_candidates
from classifier import save_classifier, train_classifier
from data_io import generate_synthetic, load_manifest, read_annotations_csv, read_manifest, save_synthetic, split, \
    write_manifest
from evaluation import evaluate, format_table, parse_rule, report_frame, summary_line, write_report_csv
from pipeline import (GroundTruthClassifier, GroundTruthProposer, ModelClassifier, ModelProposer, RasterSource,
                      load_caches, read_detections_csv, render_overlay, run_wsi, save_caches, sweep_thresholds,
                      write_detections_csv)
from proposer import HISTORY_COLUMNS as PROPOSER_HISTORY, build_detection_samples, build_proposer, load_proposer
from proposer import propose, save_proposer, train_proposer
from run_config import (RunConfig, classification_profile_from, classifier_config, classifier_schedule,
                        detection_profile_from, load_config, loss_params, match_rule, pipeline_config,
                        proposer_config, proposer_schedule)
from tiling import make_grid, save_patches
from training import seed_everything, write_history_csv

logger = logging.getLogger(__name__)


class UsageError(ValueError):
    """Bad command line."""


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class RunContext:
    def __init__(self, command: str, cfg: RunConfig, argv: List[str]):
        self.command = command
        self.cfg = cfg
        self.out = cfg["paths.out"]
        os.makedirs(self.out, exist_ok=True)
        with open(os.path.join(self.out, "run.json"), "w") as f:
            json.dump({"command": command, "argv": argv, "seed": cfg["seed"], "config": cfg.to_dict()},
                      f, indent=2, sort_keys=True)
        self.ledger = cfg["paths.ledger"] or os.path.join(self.out, "runs.db")
        self.run_id = -1
        if database.init_database(self.ledger):
            self.run_id = database.create_run(command, cfg["seed"], cfg.to_dict(), self.ledger)

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def event(self, event_type: str, data: Optional[Dict] = None) -> None:
        database.log_event(self.run_id, event_type, data, self.ledger)


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        force=True,
    )


def resolve_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    if args.out is not None:
        overrides.append(f"paths.out={json.dumps(args.out)}")
    for key, value in getattr(args, "extra_overrides", lambda a: [])(args):
        overrides.append(f"{key}={json.dumps(value)}")
    return load_config(args.config, overrides)


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"Expected a comma-separated list of numbers, got '{text}'") from e


def _group_annotations(path: str) -> Dict[str, list]:
    grouped: Dict[str, list] = {}
    for ann in read_annotations_csv(path):
        grouped.setdefault(ann.image_id, []).append(ann)
    return grouped


# --- Subcommands ---

def cmd_synth(args, cfg: RunConfig, ctx: RunContext) -> int:
    images, annotations = generate_synthetic(cfg["synth.n_images"], cfg["synth.size"], cfg["synth.blobs"],
                                             seed=cfg["seed"], distractors_per_image=cfg["synth.distractors"])
    csv_path, images_root = save_synthetic(images, annotations, ctx.out)
    manifest = split(load_manifest(csv_path, images_root), seed=cfg["seed"], ratios=cfg["data.ratios"])
    write_manifest(manifest, ctx.path("manifest.json"))
    print(f"Wrote {len(images)} images with {len(annotations)} annotations to {ctx.out}")
    return 0


def cmd_tile(args, cfg: RunConfig, ctx: RunContext) -> int:
    source = RasterSource(args.image)
    grid = make_grid(source.width, source.height, cfg["data.patch_size"], cfg["data.overlap"], source.image_id)
    paths = save_patches(source.pixels, grid, ctx.path("patches"), workers=cfg["workers"])
    print(f"Wrote {len(paths)} patches ({source.width}x{source.height}, stride {grid.stride}) to {ctx.path('patches')}")
    return 0


def cmd_train_proposer(args, cfg: RunConfig, ctx: RunContext) -> int:
    pcfg = proposer_config(cfg)
    if pcfg.input_size != cfg["data.patch_size"]:
        raise ValueError(f"proposer.input_size ({pcfg.input_size}) must equal data.patch_size ({cfg['data.patch_size']})")
    manifest = read_manifest(args.manifest)
    kwargs = dict(patch_size=cfg["data.patch_size"], overlap=cfg["data.overlap"], box_size=cfg["data.box_size"])
    train = build_detection_samples(manifest, "train", **kwargs)
    val = build_detection_samples(manifest, "val", **kwargs)

    model = build_proposer(pcfg)
    profile = None if args.no_augment else detection_profile_from(cfg)
    model, history = train_proposer(model, train, val, proposer_schedule(cfg), profile,
                                    seed=cfg["seed"], rule=match_rule(cfg))
    save_proposer(model, ctx.path("proposer.pt"))
    write_history_csv(history, ctx.path("proposer_history.csv"), PROPOSER_HISTORY)
    ctx.event("checkpoint", {"path": ctx.path("proposer.pt"), "epochs": len(history)})
    print(f"Saved proposer to {ctx.path('proposer.pt')}")
    return 0


def cmd_train_classifier(args, cfg: RunConfig, ctx: RunContext) -> int:
    manifest = read_manifest(args.manifest)
    ccfg = classifier_config(cfg)
    proposer = load_proposer(args.proposer) if args.proposer else None
    rng = np.random.default_rng(cfg["seed"])
    kwargs = dict(patch_size=cfg["data.patch_size"], overlap=cfg["data.overlap"], box_size=cfg["data.box_size"])

    def crops_for(split_name: str):
        samples = build_detection_samples(manifest, split_name, **kwargs)
        proposer_fn = None
        if proposer is not None:
            proposer_fn = lambda idx, pixels: propose(proposer, pixels, patch_id=f"{split_name}{idx}")
        return mine_candidates([s.image for s in samples], [s.boxes for s in samples], rng, proposer_fn,
                               negatives_per_image=cfg["classifier.negatives_per_image"],
                               box_size=cfg["data.box_size"], crop_size=ccfg.crop_size)

    train, val = crops_for("train"), crops_for("val")
    model = build_classifier(ccfg)
    profile = None if args.no_augment else classification_profile_from(cfg)
    model, history = train_classifier(model, train, val, loss_params(cfg), classifier_schedule(cfg),
                                      profile, seed=cfg["seed"])
    save_classifier(model, ctx.path("classifier.pt"))
    write_history_csv(history, ctx.path("classifier_history.csv"), CLASSIFIER_HISTORY)
    ctx.event("checkpoint", {"path": ctx.path("classifier.pt"), "epochs": len(history)})
    print(f"Saved classifier to {ctx.path('classifier.pt')}")
    return 0


def _infer_inputs(args) -> List[tuple]:
    """(image_id, path) pairs from --image or --manifest/--split."""
    if args.image:
        return [(os.path.splitext(os.path.basename(p))[0], p) for p in args.image]
    if args.manifest:
        manifest = read_manifest(args.manifest)
        return [(r.image_id, r.path) for r in manifest.images_in(args.split)]
    raise UsageError("infer needs --image or --manifest")


def cmd_infer(args, cfg: RunConfig, ctx: RunContext) -> int:
    pcfg = pipeline_config(cfg)
    if args.single_stage:
        pcfg = replace(pcfg, two_stage=False)
    oracle = _group_annotations(args.oracle_gt) if args.oracle_gt else None
    if oracle is None and not args.proposer:
        raise UsageError("infer needs --proposer (or --oracle-gt)")
    if oracle is None and pcfg.two_stage and not args.classifier:
        raise UsageError("infer needs --classifier unless --single-stage is given")

    proposer_model = load_proposer(args.proposer) if oracle is None else None
    classifier_model = load_classifier(args.classifier) if oracle is None and pcfg.two_stage else None

    caches, stats = [], []
    for image_id, path in _infer_inputs(args):
        source = RasterSource(path, image_id)
        if oracle is not None:
            anns = oracle.get(image_id, [])
            proposer = GroundTruthProposer(anns, cfg["data.box_size"], image_size=(source.width, source.height))
            classifier = GroundTruthClassifier(anns)
        else:
            proposer = ModelProposer(proposer_model, pcfg.conf_threshold, pcfg.nms_iou)
            classifier = ModelClassifier(classifier_model, batch_size=pcfg.classifier_batch) if classifier_model else None
        result = run_wsi(source, proposer, classifier, pcfg)
        write_detections_csv(image_id, result.proposals, result.detections, ctx.path(f"{image_id}_detections.csv"))
        if args.overlay:
            render_overlay(source.pixels, result.detections, ctx.path(f"{image_id}_overlay.png"))
        caches.append(result.cache)
        stats.append(result.stats)

    save_caches(caches, args.cache_out or ctx.path("cache.json"))
    pd.DataFrame([asdict(s) for s in stats]).to_csv(ctx.path("stats.csv"), index=False)
    database.record_stage_counts(ctx.run_id, stats, ctx.ledger)
    for s in stats:
        print(f"{s.image_id}: patches={s.patches} proposals={s.proposals} rejected={s.rejected} "
              f"survivors={s.survivors} final={s.final}")
    return 0


def _detection_files(paths: List[str]) -> List[str]:
    files = []
    for p in paths:
        if os.path.isdir(p):
            files.extend(sorted(glob.glob(os.path.join(p, "*_detections.csv"))))
        elif os.path.exists(p):
            files.append(p)
        else:
            raise FileNotFoundError(f"Detections not found: {p}")
    return files


def cmd_evaluate(args, cfg: RunConfig, ctx: RunContext) -> int:
    rule = parse_rule(args.rule) if args.rule else match_rule(cfg)
    dets: Dict[str, list] = {}
    for path in _detection_files(args.dets):
        for image_id, items in read_detections_csv(path, args.stage).items():
            dets.setdefault(image_id, []).extend(items)
    report = evaluate(dets, _group_annotations(args.gt), rule)

    write_report_csv(report, ctx.path("report.csv"))
    table = format_table([(args.name, report.tp, report.fp, report.fn)])
    with open(ctx.path("report.txt"), "w") as f:
        f.write(table + "\n")
    database.record_eval_rows(ctx.run_id, report_frame(report).to_dict("records"), ctx.ledger)
    print(table)
    print(summary_line(report.precision, report.recall, report.f1))
    return 0


def cmd_sweep(args, cfg: RunConfig, ctx: RunContext) -> int:
    caches = load_caches(args.cache)
    confs = _floats(args.conf) if args.conf else [cfg["proposer.conf_threshold"]]
    cls_thrs = _floats(args.cls) if args.cls else [cfg["classifier.threshold"]]
    merges = _floats(args.merge) if args.merge else [cfg["pipeline.merge_iou"]]
    rule = parse_rule(args.rule) if args.rule else match_rule(cfg)
    table = sweep_thresholds(caches, _group_annotations(args.gt), itertools.product(confs, cls_thrs, merges), rule)
    table.to_csv(ctx.path("sweep.csv"), index=False)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "tile": cmd_tile,
    "train-proposer": cmd_train_proposer,
    "train-classifier": cmd_train_classifier,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def build_parser() -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", help="TOML config file or a previous run.json")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="seed for every RNG stream")
    common.add_argument("--workers", type=int, help="worker pool size")
    common.add_argument("--out", help="output folder (paths.out)")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = CliParser(prog="mitosis", description="Two-stage mitosis detection")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic blob corpus")
    p.add_argument("--n", type=int, help="number of images (synth.n_images)")
    p.add_argument("--size", type=int, help="image side in pixels (synth.size)")
    p.add_argument("--blobs", type=int, help="planted blobs per image (synth.blobs)")
    p.set_defaults(extra_overrides=lambda a: [(k, v) for k, v in (("synth.n_images", a.n), ("synth.size", a.size),
                                                                   ("synth.blobs", a.blobs)) if v is not None])

    p = sub.add_parser("tile", parents=[common], help="dump the patch grid of one image")
    p.add_argument("--image", required=True)

    p = sub.add_parser("train-proposer", parents=[common], help="train the stage-1 proposal network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--no-augment", action="store_true")

    p = sub.add_parser("train-classifier", parents=[common], help="train the stage-2 candidate classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--proposer", help="proposer checkpoint used to mine hard negatives")
    p.add_argument("--no-augment", action="store_true")

    p = sub.add_parser("infer", parents=[common], help="run the two-stage pipeline over whole images")
    p.add_argument("--image", action="append", help="image file (repeatable)")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--proposer", help="proposer checkpoint")
    p.add_argument("--classifier", help="classifier checkpoint")
    p.add_argument("--oracle-gt", help="annotation CSV driving ground-truth stand-ins for both stages")
    p.add_argument("--single-stage", action="store_true", help="skip the classifier")
    p.add_argument("--overlay", action="store_true", help="render final detections as green boxes")
    p.add_argument("--cache-out", help="proposal cache path (default <out>/cache.json)")

    p = sub.add_parser("evaluate", parents=[common], help="match detections against annotations")
    p.add_argument("--dets", required=True, nargs="+", help="detection CSV files or folders")
    p.add_argument("--gt", required=True, help="annotation CSV")
    p.add_argument("--rule", help="center:<px> or iou:<thr> (eval.rule)")
    p.add_argument("--stage", default="final", choices=["proposal", "final"])
    p.add_argument("--name", default="detections", help="row label in the text table")

    p = sub.add_parser("sweep", parents=[common], help="re-threshold cached proposals")
    p.add_argument("--cache", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--conf", help="comma-separated confidence thresholds")
    p.add_argument("--cls", help="comma-separated classifier thresholds")
    p.add_argument("--merge", help="comma-separated merge IoU thresholds")
    p.add_argument("--rule")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging(args.verbose)
    status = "failed"
    ctx = None
    try:
        cfg = resolve_config(args)
        seed_everything(cfg["seed"])
        ctx = RunContext(args.command, cfg, argv)
        code = COMMANDS[args.command](args, cfg, ctx)
        status = "ok"
        return code
    except ValueError as e:
        logger.error(f"❌ {args.command}: {e}")
        return 1
    except Exception as e:
        logger.exception(f"❌ {args.command} failed: {e}")
        return 2
    finally:
        if ctx is not None:
            database.end_run(ctx.run_id, status, ctx.ledger)


if __name__ == "__main__":
    sys.exit(main())
