"""Command-line entry point: ``tlbench <subcommand> --config PATH``.

Every subcommand reads the same configuration document and writes under
``<out>/<subcommand>``. Exit codes: 0 on success, 1 on a domain error, 2 on
a usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import data_model as dm
from .config import STAGING_ENV, RunConfig, load_config, save_config, subcommand_seed
from .errors import EmptyDatasetError, MissingArtifactError, TlbenchError, UndefinedAUCError
from .evaluation import evaluate_scores, roc_and_auc, write_leaderboard, write_report_dir
from .evaluation.fixtures import PUBLISHED_METRICS, write_published_reports
from .evaluation.report import load_reports, markdown_summary
from .explain import grad_cam, overlay, save_heatmap
from .modelzoo import build_from_spec, load_checkpoint, save_checkpoint
from .pipeline import BatchStream, decode_and_preprocess, execute_plan, plan_balancing
from .synth import generate_corpus
from .trainer import set_global_seed, train
from .tuner import hyperband_schedule, make_training_objective, run_search

log = logging.getLogger("tlbench")

SUBCOMMANDS = ("curate", "synth", "train", "tune", "evaluate", "explain", "report")
SPLITS = ("train", "val", "test")


class Run:
    """Resolved paths for one invocation."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.out = Path(config.out)

    def dir(self, name: str) -> Path:
        path = self.out / name
        path.mkdir(parents=True, exist_ok=True)
        return path

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(str(path), producer)
        return path

    def split_manifest(self, split: str) -> dm.DatasetManifest:
        path = self.require(self.out / "curate" / f"{split}.csv", "curate")
        return dm.load_manifest(path)

    def stream(self, split: str, shuffle: bool) -> BatchStream:
        manifest = self.split_manifest(split)
        if len(manifest) == 0:
            raise EmptyDatasetError(f"the {split} split is empty; adjust data.split.fractions")
        return BatchStream(
            manifest,
            self.config.batching_config(),
            shuffle=shuffle,
            target_size=tuple(self.config.pipeline.image_size),
            num_classes=self.config.model.head.num_classes,
        )

    def staging_dir(self) -> Path:
        return Path(os.environ.get(STAGING_ENV) or self.out / "curate" / "staging")

    def model_name(self) -> str:
        return self.config.eval.model_name or self.config.model.backbone


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(run: Run, args) -> dict:
    """Generate the synthetic ellipse corpus."""
    out = run.dir("synth")
    manifest = generate_corpus(out, run.config.synth_config())
    return {"images": len(manifest), "manifest": str(out / "manifest.csv"),
            **manifest.summary()}


def curate_manifest(
    manifest: dm.DatasetManifest, config: RunConfig, curation_log: dm.CurationLog
) -> dm.DatasetManifest:
    """Impute, group, filter and undersample (everything before the split)."""
    manifest = dm.impute_age(manifest, config.data.imputation, curation_log)
    manifest = dm.impute_sex(manifest, curation_log)
    manifest = dm.assign_age_groups(manifest, curation_log)
    manifest = dm.drop_low_sample_countries(manifest, config.data.min_country_count,
                                            curation_log)
    if config.data.caps:
        manifest = dm.undersample(manifest, config.data.caps,
                                  subcommand_seed(config.seed, "undersample"), curation_log)
    return manifest


def cmd_curate(run: Run, args) -> dict:
    """Impute, group, filter, undersample, split and optionally balance."""
    cfg = run.config
    source = Path(cfg.data.manifest) if cfg.data.manifest else run.out / "synth" / "manifest.csv"
    run.require(source, "synth")
    out = run.dir("curate")
    curation_log = dm.CurationLog()
    curated = curate_manifest(dm.load_manifest(source), cfg, curation_log)
    dm.write_manifest(curated, out / "curated.csv")
    parts = list(dm.stratified_split(curated, cfg.split_spec(), curation_log))

    balancing = cfg.pipeline.balancing
    if balancing.enabled:
        plan = plan_balancing(parts[0].cell_counts(), balancing.targets,
                              balancing.allow_downsample)
        parts[0] = execute_plan(parts[0], plan, cfg.augmentation_policy(), run.staging_dir(),
                                tuple(cfg.pipeline.image_size))
        curation_log.add("balance", plan.total_synth, split="train",
                         targets=",".join(f"{k}:{v}" for k, v in sorted(balancing.targets.items())))
        (out / "balancing_plan.txt").write_text(plan.summary() + "\n")

    for name, part in zip(SPLITS, parts):
        dm.write_manifest(part, out / f"{name}.csv")
    curation_log.write(out / "curation.log")
    summary = {"curated": curated.summary(), **{n: len(p) for n, p in zip(SPLITS, parts)}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return {**{n: len(p) for n, p in zip(SPLITS, parts)}, "actions": len(curation_log)}


def cmd_train(run: Run, args) -> dict:
    """Fine-tune the configured model on the train split."""
    cfg = run.config
    train_stream = run.stream("train", shuffle=True)
    val_stream = run.stream("val", shuffle=False)
    out = run.dir("train")
    seed = cfg.train_seed()
    set_global_seed(seed, threads=cfg.train.threads)
    spec = cfg.model_spec()
    model = build_from_spec(spec)
    model, history = train(model, train_stream, val_stream,
                           cfg.train_config(out / "checkpoints"), spec=spec, reseed=False)
    save_checkpoint(model, spec, out / "model.pt", seed,
                    {"best_epoch": history.metadata["best_epoch"]})
    history.to_csv(out / "history.csv")
    history.plot(out / "curves.png")
    best = history.rows[history.metadata["best_epoch"] - 1]
    return {"epochs": len(history.rows), "best_epoch": history.metadata["best_epoch"],
            "val_loss": best["val_loss"], "val_acc": best["val_acc"]}


def cmd_tune(run: Run, args) -> dict:
    """Run the Hyperband search."""
    cfg = run.config
    train_stream = run.stream("train", shuffle=True)
    val_stream = run.stream("val", shuffle=False)
    objective = make_training_objective(train_stream, val_stream, cfg.model_spec(),
                                        cfg.train_config())
    schedule = hyperband_schedule(cfg.tune.max_epochs, cfg.tune.eta)
    out = run.dir("tune")
    best, trials = run_search(cfg.search_space(), objective, schedule,
                              seed=subcommand_seed(cfg.seed, "tune"), tuning_dir=out,
                              workers=cfg.tune.workers)
    (out / "best.json").write_text(json.dumps(best, indent=2))
    return {"trials": len(trials), "best": best}


def _score(model, stream: BatchStream) -> np.ndarray:
    parts = []
    with torch.no_grad():
        for batch in stream.epoch(1):
            parts.append(model.predict_proba(batch.images).numpy())
    return np.concatenate(parts).astype(np.float64)


def cmd_evaluate(run: Run, args) -> dict:
    """Score the trained model and write its report directory."""
    cfg = run.config
    reports_dir = run.dir("reports")
    if args.published_fixtures:
        write_published_reports(reports_dir)
        reports = load_reports(reports_dir)
        write_leaderboard(reports, reports_dir / "leaderboard.csv")
        return {"reports": len(reports), "leaderboard": str(reports_dir / "leaderboard.csv")}

    model_path = run.require(run.out / "train" / "model.pt", "train")
    model, spec, meta = load_checkpoint(model_path)
    stream = run.stream(cfg.eval.split, shuffle=False)
    scores = _score(model, stream)
    y = stream.labels
    num_classes = spec.head.num_classes
    report = evaluate_scores(y, scores, num_classes, cfg.eval.threshold)
    roc = None
    if num_classes == 2:
        try:
            roc = roc_and_auc(y, scores.reshape(-1))
        except UndefinedAUCError:
            pass
    names = ["normal", "covid"] if num_classes == 2 else ["normal", "covid", "other_pneumonia"]
    name = run.model_name()
    sequence = list(PUBLISHED_METRICS).index(name) if name in PUBLISHED_METRICS else len(PUBLISHED_METRICS)
    write_report_dir(reports_dir / name, name, report, roc, names, sequence,
                     provenance={"checkpoint": str(model_path), "seed": meta.get("seed"),
                                 "split": cfg.eval.split, "threshold": cfg.eval.threshold},
                     plots=cfg.eval.plots)
    write_leaderboard(load_reports(reports_dir), reports_dir / "leaderboard.csv")
    return {"model": name, "accuracy": report.accuracy, "auc": report.auc, "f1": report.f1}


def cmd_explain(run: Run, args) -> dict:
    """Write Grad-CAM overlays for covid images of a split, or for one --image."""
    cfg = run.config
    if args.checkpoint is not None:
        model_path = run.require(args.checkpoint, "train")
    else:
        model_path = run.require(run.out / "train" / "model.pt", "train")
    model, spec, _ = load_checkpoint(model_path)
    if args.image is not None:
        refs = [str(run.require(args.image, "synth"))]
    else:
        manifest = run.split_manifest(cfg.explain.split)
        refs = [r.image_ref for r in manifest if r.label == "covid"][: cfg.explain.num_images]
        if not refs:
            raise EmptyDatasetError(f"no covid images in the {cfg.explain.split} split to explain")
    out = run.dir("explain")
    entries = []
    for ref in refs:
        image = decode_and_preprocess(ref, tuple(cfg.pipeline.image_size))
        heatmap = grad_cam(model, image, layer=cfg.explain.layer)
        stem = Path(ref).stem
        overlay(image, heatmap, cfg.explain.alpha, out / f"{stem}_overlay.png", cfg.explain.cmap)
        save_heatmap(heatmap, out / f"{stem}_heatmap.png", cfg.explain.cmap)
        entries.append({"image_ref": ref, "layer": heatmap.layer,
                        "target": heatmap.target, "zero_gradient": heatmap.zero_gradient})
    (out / "explain.json").write_text(json.dumps(entries, indent=2))
    return {"images": len(entries), "layer": entries[0]["layer"]}


def cmd_report(run: Run, args) -> dict:
    """Aggregate stored reports into the leaderboard and a summary."""
    reports_dir = run.out / "reports"
    reports = load_reports(reports_dir)
    write_leaderboard(reports, reports_dir / "leaderboard.csv")
    (reports_dir / "summary.md").write_text(markdown_summary(reports))
    return {"reports": len(reports), "leaderboard": str(reports_dir / "leaderboard.csv")}


COMMANDS: dict[str, Callable[[Run, argparse.Namespace], dict]] = {
    "curate": cmd_curate,
    "synth": cmd_synth,
    "train": cmd_train,
    "tune": cmd_tune,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tlbench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=(COMMANDS[name].__doc__ or name).splitlines()[0])
        p.add_argument("--config", required=True, type=Path, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the top-level seed")
        p.add_argument("--out", type=Path, default=None, help="override the output directory")
        if name == "evaluate":
            p.add_argument("--published-fixtures", action="store_true",
                           help="store the published per-backbone metrics as reports")
        if name == "explain":
            p.add_argument("--image", type=Path, default=None, help="explain this image only")
            p.add_argument("--checkpoint", type=Path, default=None,
                           help="model checkpoint (default: <out>/train/model.pt)")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["out"] = str(args.out)
    if updates:
        config = RunConfig.from_json(config.model_copy(update=updates).to_json())
    return config


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        run = Run(config)
        save_config(config, run.dir(args.command) / "config.json")
        result = COMMANDS[args.command](run, args)
    except TlbenchError as exc:
        print(f"tlbench {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, **result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
