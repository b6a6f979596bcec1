"""Command line: ``gflowmask {gen-data|train|eval|ood|saliency} --config <path> [flags]``.

Exit codes: 0 success, 2 bad config or dataset, 3 numerical divergence,
4 snapshot missing or incompatible with the config.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .autograd import NonFiniteError
from .config import ConfigError, RunConfig, load_config
from .data import (
    DatasetError,
    ImageSample,
    NoiseSpec,
    SyntheticConfig,
    encode_pgm,
    encode_ppm,
    generate_synthetic,
)
from .metrics import build_report, compare_ood, sample_entropy
from .saliency import grad_cam, overlay
from .snapshot import SnapshotError

log = logging.getLogger("gflowmask")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_SNAPSHOT = 0, 2, 3, 4


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _snapshot_path(cfg: RunConfig, args) -> Path:
    return Path(args.snapshot) if args.snapshot else Path(cfg.output_dir) / pipeline.SNAPSHOT_NAME


def _split(cfg: RunConfig, given: str | None, default: str) -> Path:
    return Path(given) if given else Path(cfg.data.root) / default


def _load(cfg: RunConfig, path: Path) -> pipeline.ArrayDataset:
    return pipeline.load_arrays(path, cfg.backbone.n_classes, cfg.backbone.input_size)


def _report_config(cfg: RunConfig, dataset: Path, passes: int, noise: NoiseSpec | None) -> dict:
    return {
        "seed": cfg.seed,
        "backbone": cfg.backbone.kind,
        "mask_mode": cfg.gflowout.mask_mode.value,
        "pi": cfg.gflowout.pi,
        "passes": passes,
        "ece_bins": cfg.eval.ece_bins,
        "noise": str(noise) if noise else None,
        "dataset": dataset.name,
    }


def cmd_gen_data(cfg: RunConfig, args) -> int:
    d = cfg.data
    syn = SyntheticConfig(
        seed=cfg.seed,
        n_classes=d.n_classes,
        per_class_counts=d.per_class_counts,
        ood_per_class_counts=d.ood_per_class_counts,
        image_size=d.image_size,
        test_fraction=d.test_fraction,
        ood_shift=d.ood_shift,
        brightness_shift=d.brightness_shift,
    )
    out = generate_synthetic(syn, args.out or d.root)
    for name, path in out.items():
        log.info("wrote %s split to %s", name, path)
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    root = Path(args.dataset) if args.dataset else Path(cfg.data.root)
    train_data = _load(cfg, root / "train")
    test_data = _load(cfg, root / "test") if (root / "test" / "manifest.csv").is_file() else None
    out = Path(cfg.output_dir)

    def progress(rec):
        log.info("epoch %d ce=%.4f tb=%.4f train_acc=%.1f test_acc=%.1f",
                 rec.epoch, rec.ce_loss, rec.tb_loss, rec.train_acc, rec.test_acc)

    model, gfo, history = pipeline.train(cfg, train_data, test_data, on_epoch=progress)
    _write(out / pipeline.TRAIN_LOG_NAME, pipeline.format_log(history))
    path = pipeline.save_snapshot(out / pipeline.SNAPSHOT_NAME, cfg, model, gfo)
    log.info("snapshot written to %s", path)
    return EXIT_OK


def _evaluate(cfg, model, gfo, path: Path, passes: int, noise: NoiseSpec | None):
    data = _load(cfg, path)
    preds = pipeline.predict(cfg, model, gfo, data, passes, noise)
    report = build_report(preds, cfg.backbone.n_classes, cfg.eval.ece_bins, _report_config(cfg, path, passes, noise))
    return data, preds, report


def cmd_eval(cfg: RunConfig, args) -> int:
    model, gfo = pipeline.load_model(cfg, _snapshot_path(cfg, args))
    path = _split(cfg, args.dataset, "test")
    noise = NoiseSpec.parse(args.noise) if args.noise else None
    passes = args.passes or cfg.eval.passes
    _, _, report = _evaluate(cfg, model, gfo, path, passes, noise)
    stem = f"report_{path.name}" + (f"_{noise.kind}_{noise.amount:g}" if noise else "")
    out = Path(args.out) if args.out else Path(cfg.output_dir) / f"{stem}.json"
    _write(out, _json(report.to_dict()))
    cols = ["bin_low", "bin_high", "count", "avg_conf", "accuracy", "gap"]
    _write(out.with_suffix(".bins.csv"), _csv(cols, [[r[c] for c in cols] for r in report.calibration]))
    log.info("accuracy %.2f%% ece %.4f mean entropy %.4f -> %s",
             report.accuracy, report.ece, report.entropy["mean"], out)
    return EXIT_OK


def cmd_ood(cfg: RunConfig, args) -> int:
    model, gfo = pipeline.load_model(cfg, _snapshot_path(cfg, args))
    passes = args.passes or cfg.eval.passes
    id_path = _split(cfg, args.dataset, "test")
    ood_path = _split(cfg, args.ood_dataset, "ood")
    _, id_preds, id_report = _evaluate(cfg, model, gfo, id_path, passes, None)
    _, ood_preds, ood_report = _evaluate(cfg, model, gfo, ood_path, passes, None)
    comparison = compare_ood(id_report.to_dict(), ood_report.to_dict())
    for tag, rep in (("id", id_report), ("ood", ood_report)):
        comparison[f"{tag}_argmin_id"] = rep.entropy["argmin_id"]
        comparison[f"{tag}_argmax_id"] = rep.entropy["argmax_id"]
        comparison[f"{tag}_entropy"] = rep.entropy
    comparison["config"] = {**_report_config(cfg, id_path, passes, None), "ood_dataset": ood_path.name}
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "ood_comparison.json"
    _write(out, _json(comparison))
    rows = [
        [split, p.id, p.label, p.prediction, repr(sample_entropy(p))]
        for split, preds in (("id", id_preds), ("ood", ood_preds))
        for p in preds
    ]
    _write(out.with_name(out.stem + "_entropy.csv"), _csv(["split", "id", "label", "prediction", "entropy"], rows))
    log.info("mean entropy id %.4f ood %.4f (ood higher: %s)", comparison["mean_entropy_id"],
             comparison["mean_entropy_ood"], comparison["ood_entropy_higher"])
    return EXIT_OK


def cmd_saliency(cfg: RunConfig, args) -> int:
    model, gfo = pipeline.load_model(cfg, _snapshot_path(cfg, args))
    path = _split(cfg, args.dataset, "test")
    data = _load(cfg, path)
    preds = pipeline.predict(cfg, model, gfo, data, args.passes or cfg.eval.passes)
    entropies = np.array([sample_entropy(p) for p in preds])
    order = np.argsort(entropies, kind="stable")
    top = min(args.top, len(order))
    picks = [("min", r, int(i)) for r, i in enumerate(order[:top])]
    picks += [("max", r, int(i)) for r, i in enumerate(order[::-1][:top])]
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "saliency"
    out.mkdir(parents=True, exist_ok=True)
    for tag, rank, i in picks:
        p = preds[i]
        heat = grad_cam(model, data.x[i], p.prediction, args.site, gfo)
        base = f"{tag}{rank}_{p.id}_H{entropies[i]:.4f}"
        (out / f"{base}_heatmap.pgm").write_bytes(encode_pgm(heat.values))
        img = ImageSample(data.raw[i], p.label, p.id)
        (out / f"{base}_overlay.ppm").write_bytes(encode_ppm(overlay(heat, img).pixels))
        log.info("%s: class %d entropy %.4f", base, p.prediction, entropies[i])
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ood": cmd_ood,
    "saliency": cmd_saliency,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gflowmask", description="Learned dropout masks with uncertainty evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--out", help="output path (directory for gen-data/saliency, file otherwise)")
        p.add_argument("-q", "--quiet", action="store_true")
        if name == "train":
            p.add_argument("--dataset", help="dataset root holding train/ and test/ (default: data.root)")
        if name in ("eval", "ood", "saliency"):
            p.add_argument("--snapshot", help="model snapshot (default: <output_dir>/model.gfmk)")
            p.add_argument("--dataset", help="dataset split directory (default: <data.root>/test)")
            p.add_argument("--passes", type=int, help="stochastic forward passes K")
        if name == "eval":
            p.add_argument("--noise", help="noise applied after preprocessing, e.g. gaussian:0.1")
        if name == "ood":
            p.add_argument("--ood-dataset", help="shifted split directory (default: <data.root>/ood)")
        if name == "saliency":
            p.add_argument("--top", type=int, default=1, help="N lowest- and N highest-entropy samples")
            p.add_argument("--site", help="dropout site to explain (default: last)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if getattr(args, "passes", None) is not None and args.passes < 1:
            raise ConfigError("--passes must be at least 1")
        if getattr(args, "top", 1) < 1:
            raise ConfigError("--top must be at least 1")
        if getattr(args, "noise", None):
            try:
                NoiseSpec.parse(args.noise)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, DatasetError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        log.error("numerical divergence: %s", exc)
        return EXIT_DIVERGED
    except SnapshotError as exc:
        log.error("%s", exc)
        return EXIT_SNAPSHOT
