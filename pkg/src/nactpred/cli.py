"""Command-line entry points: generate, train, evaluate, report.

All commands read an optional JSON config file with sections ``data``,
``split``, ``model``, ``train`` and ``eval``; missing sections fall back
to defaults.  Domain failures exit non-zero after printing a one-line
JSON error object to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from . import metrics
from .data import DatasetManifest, SynthConfig, VolumeFormatError
from .encoder import EncoderConfig
from .model import (CheckpointError, ModelConfig, ResponseModel,
                    load_checkpoint, save_checkpoint)
from .training import TrainConfig, fit

__all__ = ["main", "cli_generate", "cli_train", "cli_evaluate", "cli_report"]


class CliError(ValueError):
    """A user-facing command failure with a clean message."""


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise CliError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise CliError("config root must be a JSON object")
    return raw


def _model_config(section: dict) -> ModelConfig:
    section = dict(section)
    encoder = EncoderConfig(**section.pop("encoder", {}))
    return ModelConfig(encoder=encoder, **section)


def _train_config(section: dict, seed_override: int | None) -> TrainConfig:
    cfg = TrainConfig.from_dict(section)
    if seed_override is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": seed_override})
    return cfg


def _load_manifest(path: str) -> tuple[DatasetManifest, Path]:
    manifest_path = Path(path)
    if not manifest_path.exists():
        raise CliError(f"dataset manifest not found: {path}")
    return DatasetManifest.load(manifest_path), manifest_path.parent


def _score_split(model: ResponseModel, volumes) -> tuple[metrics.ScoredCohort, list]:
    rows, attention = [], []
    for item in volumes:
        prob, record = model.predict_proba(item.voxels)
        rows.append({"id": item.patient_id, "probability": prob,
                     "label": int(item.label)})
        attention.append((item.patient_id, record.weights))
    return metrics.ScoredCohort.from_records(rows), attention


def cli_generate(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    data_section = dict(config.get("data", {}))
    if args.seed is not None:
        data_section["seed"] = args.seed
    if "n_patients" not in data_section:
        raise CliError("config must set data.n_patients")
    synth = SynthConfig(**data_section)

    out_dir = Path(args.out)
    manifest = datamod.generate_synthetic(synth, out_dir)
    split_section = config.get("split", {})
    manifest = datamod.split_dataset(
        manifest,
        fractions=tuple(split_section.get("fractions", (0.6, 0.2, 0.2))),
        seed=int(split_section.get("seed", synth.seed)))
    manifest.save(out_dir / "manifest.json")
    sizes = {name: sum(1 for p in manifest.patients if p.split == name)
             for name in datamod.SPLIT_NAMES}
    print(json.dumps({"manifest": str(out_dir / "manifest.json"),
                      "patients": len(manifest.patients), "splits": sizes,
                      "warnings": manifest.warnings}))
    return 0


def cli_train(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    manifest, base = _load_manifest(args.dataset)
    train_cfg = _train_config(config.get("train", {}), args.seed)
    model_cfg = _model_config(config.get("model", {}))
    if model_cfg.max_slices < manifest.slices:
        raise CliError(f"model max_slices {model_cfg.max_slices} is smaller "
                       f"than dataset slice count {manifest.slices}")

    train_data = datamod.load_split(manifest, base, "train")
    val_data = datamod.load_split(manifest, base, "val")
    if not train_data or not val_data:
        raise CliError("dataset manifest has no train/val splits; "
                       "run generate (or split_dataset) first")

    model = ResponseModel.initialize(model_cfg, seed=train_cfg.seed)
    result = fit(model, train_data, val_data, train_cfg)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "model.ckpt"
    save_checkpoint(ckpt, model, epoch=result.best_epoch,
                    metric=result.best_score,
                    extra={"train": train_cfg.to_dict()})
    with open(out_dir / "training_log.jsonl", "w", encoding="utf-8") as fh:
        for record in result.history:
            fh.write(json.dumps(record) + "\n")
    print(json.dumps({"checkpoint": str(ckpt), "epochs_run": len(result.history),
                      "best_epoch": result.best_epoch,
                      "best_val_f1": result.best_score,
                      "stopped_early": result.stopped_early}))
    return 0


def cli_evaluate(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    eval_cfg = dict(config.get("eval", {}))
    manifest, base = _load_manifest(args.dataset)
    model, _ = load_checkpoint(args.checkpoint)

    val_cohort, _ = _score_split(model, datamod.load_split(manifest, base, "val"))
    target = datamod.load_split(manifest, base, args.split)
    if not target:
        raise CliError(f"split {args.split!r} is empty")
    cohort, attention = _score_split(model, target)
    threshold = metrics.select_threshold(val_cohort)

    baseline = None
    if args.baseline_checkpoint:
        baseline_model, _ = load_checkpoint(args.baseline_checkpoint)
        baseline, _ = _score_split(baseline_model, target)

    report = metrics.build_report(
        cohort, threshold, baseline=baseline, attention=attention,
        split=args.split,
        n_resamples=int(eval_cfg.get("n_resamples", 2000)),
        seed=int(eval_cfg.get("seed", 0)),
        n_bins=int(eval_cfg.get("n_bins", 5)),
        low_band=float(eval_cfg.get("low_band", 0.1)),
        high_band=float(eval_cfg.get("high_band", 0.25)))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    metrics.write_cohort(out_dir / "val_scores.jsonl", val_cohort)
    metrics.write_cohort(out_dir / f"{args.split}_scores.jsonl", cohort)
    print(json.dumps({"report": str(report_path), "threshold": threshold,
                      "n_patients": len(cohort)}))
    return 0


def cli_report(args: argparse.Namespace) -> int:
    path = Path(args.input)
    if not path.exists():
        raise CliError(f"report input not found: {args.input}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"report input is not valid JSON: {exc}") from exc
    if {"tp", "fp", "tn", "fn"} <= set(payload):
        cm = metrics.ConfusionMatrix(tp=int(payload["tp"]), fp=int(payload["fp"]),
                                     tn=int(payload["tn"]), fn=int(payload["fn"]))
        print(metrics.render_point_metrics(cm))
        return 0
    if payload.get("format") == "nactpred.report.v1":
        print(metrics.render_report(payload))
        return 0
    raise CliError("input is neither a metrics report nor a confusion matrix")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nactpred",
        description="Lesion-mask response prediction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="emit a synthetic dataset + manifest")
    gen.add_argument("--config", help="JSON config (data/split sections)")
    gen.add_argument("--seed", type=int, help="override data.seed")
    gen.add_argument("--out", required=True, help="output directory")
    gen.set_defaults(func=cli_generate)

    train = sub.add_parser("train", help="fit a model on a dataset")
    train.add_argument("--config", help="JSON config (model/train sections)")
    train.add_argument("--seed", type=int, help="override train.seed")
    train.add_argument("--dataset", required=True, help="manifest path")
    train.add_argument("--out", required=True, help="output directory")
    train.set_defaults(func=cli_train)

    ev = sub.add_parser("evaluate", help="score a split and emit the report")
    ev.add_argument("--config", help="JSON config (eval section)")
    ev.add_argument("--dataset", required=True, help="manifest path")
    ev.add_argument("--checkpoint", required=True, help="model checkpoint")
    ev.add_argument("--baseline-checkpoint",
                    help="second checkpoint for the paired comparison")
    ev.add_argument("--split", choices=list(datamod.SPLIT_NAMES), default="test")
    ev.add_argument("--out", required=True, help="output directory")
    ev.set_defaults(func=cli_evaluate)

    rep = sub.add_parser("report", help="render a report (or confusion matrix)")
    rep.add_argument("input", help="report.json or confusion-matrix JSON")
    rep.set_defaults(func=cli_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, CheckpointError, VolumeFormatError,
            metrics.UndefinedMetricError, ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
