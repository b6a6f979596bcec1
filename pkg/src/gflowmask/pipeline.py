"""Training and evaluation runs driven by a :class:`RunConfig`.

Randomness comes from the run seed alone, split into named sub-streams so
that, for example, changing the mask mode never changes the data order or
the backbone initialisation.  Evaluation randomness (mask sampling and test
noise) is keyed by sample position, so results do not depend on how samples
are chunked or spread across threads.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import snapshot
from .autograd import no_grad
from .config import MaskMode, RunConfig
from .data import DatasetError, NoiseSpec, PreprocessConfig, add_noise_normalized, load_dataset, preprocess
from .gflowout import GFlowOut, predictive_passes, train_step
from .metrics import PredictiveDistribution
from .nn import Backbone, build_backbone, softmax_np
from .optim import Adam

STREAMS = {"init": 1, "order": 2, "mask": 3, "noise": 4, "eval": 5}
SNAPSHOT_NAME = "model.gfmk"
TRAIN_LOG_NAME = "train_log.csv"


def stream(seed: int, name: str, *key: int) -> np.random.Generator:
    """Generator for sub-stream ``name`` of ``seed``, optionally keyed further (e.g. by sample index)."""
    return np.random.default_rng([seed, STREAMS[name], *key])


@dataclass
class ArrayDataset:
    x: np.ndarray  # N, 3, crop, crop (normalised)
    y: np.ndarray
    ids: list[str]
    raw: list  # cropped ImageSample pixels, kept for overlays

    def __len__(self) -> int:
        return len(self.y)


def load_arrays(path: str | Path, n_classes: int, crop: int) -> ArrayDataset:
    pcfg = PreprocessConfig(crop=crop)
    xs, ys, ids, raw = [], [], [], []
    for s in load_dataset(path):
        if s.label >= n_classes:
            raise DatasetError(f"{path}: sample {s.id} has label {s.label} >= n_classes {n_classes}")
        xs.append(preprocess(s, pcfg))
        ys.append(s.label)
        ids.append(s.id)
        top, left = (s.pixels.shape[0] - crop) // 2, (s.pixels.shape[1] - crop) // 2
        raw.append(s.pixels[top : top + crop, left : left + crop])
    if not xs:
        raise DatasetError(f"{path}: dataset is empty")
    return ArrayDataset(np.stack(xs), np.array(ys), ids, raw)


def build(cfg: RunConfig) -> tuple[Backbone, GFlowOut]:
    rng = stream(cfg.seed, "init")
    model = build_backbone(cfg.backbone, rng)
    gfo = GFlowOut(cfg.backbone, cfg.gflowout, rng)
    return model, gfo


def all_params(model: Backbone, gfo: GFlowOut) -> dict:
    return {**model.params, **gfo.params}


def snapshot_meta(cfg: RunConfig) -> dict:
    return {
        "backbone": cfg.backbone.model_dump(mode="json"),
        "mask_mode": MaskMode(cfg.gflowout.mask_mode).value,
        "pi": cfg.gflowout.pi,
        "config": cfg.model_dump(mode="json", exclude={"data": {"root"}, "output_dir": True}),
    }


def save_snapshot(path, cfg: RunConfig, model: Backbone, gfo: GFlowOut) -> Path:
    tensors = {k: p.data for k, p in all_params(model, gfo).items()}
    return snapshot.save(path, tensors, snapshot_meta(cfg))


def load_model(cfg: RunConfig, path) -> tuple[Backbone, GFlowOut]:
    """Rebuild the configured model and fill it from a snapshot; raises SnapshotError on mismatch."""
    tensors, meta = snapshot.load(path)
    expect = snapshot_meta(cfg)
    for key in ("backbone", "mask_mode", "pi"):
        if key in meta and meta[key] != expect[key]:
            raise snapshot.SnapshotError(f"{path}: snapshot {key} {meta[key]!r} != config {expect[key]!r}")
    model, gfo = build(cfg)
    snapshot.assign(all_params(model, gfo), tensors)
    return model, gfo


def point_accuracy(model: Backbone, gfo: GFlowOut, data: ArrayDataset, batch_size: int = 100) -> float:
    correct = 0
    with no_grad():
        for lo in range(0, len(data), batch_size):
            logits = model(data.x[lo : lo + batch_size], gfo.expected())
            correct += int((logits.data.argmax(axis=1) == data.y[lo : lo + batch_size]).sum())
    return 100.0 * correct / len(data)


@dataclass
class EpochRecord:
    epoch: int
    ce_loss: float
    tb_loss: float
    train_acc: float
    test_acc: float


def train(cfg: RunConfig, train_data: ArrayDataset, test_data: ArrayDataset | None = None,
          on_epoch=None) -> tuple[Backbone, GFlowOut, list[EpochRecord]]:
    """Joint classifier/policy training; raises NonFiniteError on divergence."""
    model, gfo = build(cfg)
    tc = cfg.train
    model_opt = Adam(model.params, lr=tc.lr)
    policy_opt = Adam(gfo.params, lr=tc.policy_lr) if gfo.params else None
    order, mask_rng = stream(cfg.seed, "order"), stream(cfg.seed, "mask")
    n = len(train_data)
    log: list[EpochRecord] = []
    for epoch in range(1, tc.epochs + 1):
        perm = order.permutation(n)
        ce_sum = tb_sum = 0.0
        correct = 0
        for lo in range(0, n, tc.batch_size):
            idx = perm[lo : lo + tc.batch_size]
            res = train_step(model, gfo, train_data.x[idx], train_data.y[idx], mask_rng,
                             model_opt, policy_opt, cfg.gflowout.lambda_tb)
            ce_sum += res.ce_loss * res.n
            tb_sum += res.tb_loss * res.n
            correct += res.correct
        test_acc = point_accuracy(model, gfo, test_data) if test_data is not None else float("nan")
        rec = EpochRecord(epoch, ce_sum / n, tb_sum / n, 100.0 * correct / n, test_acc)
        log.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return model, gfo, log


def format_log(log: list[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "ce_loss", "tb_loss", "train_acc", "test_acc"])
    for r in log:
        w.writerow([r.epoch, repr(r.ce_loss), repr(r.tb_loss), repr(r.train_acc), repr(r.test_acc)])
    return buf.getvalue()


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("GFLOWMASK_THREADS", "1")))
    except ValueError:
        return 1


def predict(
    cfg: RunConfig,
    model: Backbone,
    gfo: GFlowOut,
    data: ArrayDataset,
    passes: int | None = None,
    noise: NoiseSpec | None = None,
    threads: int | None = None,
) -> list[PredictiveDistribution]:
    """Multi-pass predictions in sample order.

    Chunk boundaries come from ``eval.batch_size`` only and each sample owns
    its noise and mask generators, so the output is independent of the
    thread count.
    """
    K = passes or cfg.eval.passes
    x = data.x
    if noise is not None:
        x = np.stack([add_noise_normalized(xi, noise, stream(cfg.seed, "noise", i)) for i, xi in enumerate(x)])
    bs = cfg.eval.batch_size
    chunks = [(lo, min(lo + bs, len(data))) for lo in range(0, len(data), bs)]

    def run(chunk):
        lo, hi = chunk
        rngs = [stream(cfg.seed, "eval", i) for i in range(lo, hi)]
        return predictive_passes(model, gfo, x[lo:hi], data.y[lo:hi], rngs, K, data.ids[lo:hi])

    n_threads = threads or eval_threads()
    if n_threads == 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            parts = list(pool.map(run, chunks))
    return [p for part in parts for p in part]


def point_probs(model: Backbone, gfo: GFlowOut, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return softmax_np(model(x, gfo.expected()).data)
