"""Training loop with early stopping, macro-F1 evaluation overall and
per depth bucket, repetition averaging, and the partial-context sweep."""

from __future__ import annotations

import json
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .errors import EmptyTestSet, EmptyTrainSet, LengthMismatch, NonFiniteLoss
from .ingest import Dataset
from .thread_model import STANCE_LABELS, SubBranch, depth, depth_bucket, sub_branch


@dataclass(frozen=True)
class TrainConfig:
    lr_encoder: float = 1e-5
    lr_head: float = 1e-4
    batch_size: int = 16
    patience_batches: int = 500
    eval_every_batches: int = 50
    dev_fraction: float = 0.1
    repetitions: int = 10
    seed: int = 0
    max_batches: Optional[int] = None

    def __post_init__(self):
        if self.patience_batches < self.eval_every_batches:
            raise ValueError("patience_batches must be >= eval_every_batches")


class Trainable(Protocol):
    """What the loop needs from a model: step on a batch, predict, snapshot."""

    def train_batch(self, batch: Sequence[tuple[SubBranch, str]]) -> float: ...

    def predict_labels(self, branches: Sequence[SubBranch]) -> list[str]: ...

    def state_dict(self) -> dict: ...

    def load_state_dict(self, state: dict) -> None: ...


def macro_f1(golds: Sequence[str], preds: Sequence[str]) -> float:
    """Unweighted mean of per-class F1 over the three stance classes.

    A class with neither gold nor predicted positives contributes 0.
    """
    if len(golds) != len(preds):
        raise LengthMismatch(f"{len(golds)} golds vs {len(preds)} preds")
    if not golds:
        raise LengthMismatch("empty label lists")
    f1s = []
    for cls in STANCE_LABELS:
        tp = sum(1 for g, p in zip(golds, preds) if g == cls and p == cls)
        fp = sum(1 for g, p in zip(golds, preds) if g != cls and p == cls)
        fn = sum(1 for g, p in zip(golds, preds) if g == cls and p != cls)
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return sum(f1s) / len(f1s)


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)

    def add(self, batch: int, dev_f1: float, loss: float) -> None:
        self.records.append(
            {"batch": batch, "dev_f1": dev_f1, "loss": loss, "timestamp": time.time()}
        )

    def best_dev_f1(self) -> float:
        return max((r["dev_f1"] for r in self.records), default=float("nan"))

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as f:
            for r in self.records:
                f.write(json.dumps(r) + "\n")


def _dev_split(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Carve a thread-level dev slice out of the train set."""
    threads = sorted(ds.threads, key=lambda t: t.thread_id)
    rng = random.Random(seed ^ 0x5EED)
    rng.shuffle(threads)
    n_dev = max(1, round(fraction * len(threads))) if len(threads) > 1 else 0
    dev = Dataset(threads=threads[:n_dev], target_ids=ds.target_ids)
    fit = Dataset(threads=threads[n_dev:], target_ids=ds.target_ids)
    if not fit.examples():  # tiny corpora: train on everything, eval dev on it too
        return ds, ds
    return fit, (dev if dev.examples() else fit)


def train(
    model: Trainable,
    train_ds: Dataset,
    cfg: TrainConfig,
) -> tuple[Trainable, TrainingLog]:
    """Batched training with dev-based early stopping.

    Dev macro-F1 is computed every ``eval_every_batches`` batches; training
    halts once ``patience_batches`` consecutive batches pass without a
    strictly better dev score, and the best-dev parameters are restored.
    """
    fit_ds, dev_ds = _dev_split(train_ds, cfg.dev_fraction, cfg.seed)
    examples = fit_ds.example_branches()
    if not examples:
        raise EmptyTrainSet("no labeled instances in the train split")
    dev_examples = dev_ds.example_branches()
    dev_branches = [b for b, _ in dev_examples]
    dev_golds = [lbl for _, lbl in dev_examples]

    rng = random.Random(cfg.seed)
    log = TrainingLog()
    best_f1 = -math.inf
    best_state: Optional[dict] = None
    best_batch = 0
    batch_no = 0
    loss = float("nan")

    while True:
        batch_no += 1
        batch = [examples[rng.randrange(len(examples))] for _ in range(cfg.batch_size)]
        loss = model.train_batch(batch)
        if not math.isfinite(loss):
            raise NonFiniteLoss(f"loss {loss} at batch {batch_no}")

        if batch_no % cfg.eval_every_batches == 0:
            dev_f1 = macro_f1(dev_golds, model.predict_labels(dev_branches))
            log.add(batch_no, dev_f1, loss)
            if dev_f1 > best_f1:
                best_f1 = dev_f1
                best_state = model.state_dict()
                best_batch = batch_no

        if batch_no - best_batch >= cfg.patience_batches and best_state is not None:
            break
        if cfg.max_batches is not None and batch_no >= cfg.max_batches:
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    return model, log


@dataclass
class EvalReport:
    """Aggregated evaluation over one or more repetitions."""

    macro_f1_mean: float
    macro_f1_std: float
    per_bucket: dict[str, tuple[float, float]]  # bucket -> (mean, std)
    bucket_counts: dict[str, int]
    confusion: list[list[int]]  # 3x3, rows gold / cols pred, last repetition
    repetitions: int
    runtime_s: float

    def to_dict(self) -> dict:
        return {
            "macro_f1": {"mean": self.macro_f1_mean, "std": self.macro_f1_std},
            "per_bucket": {
                b: {"mean": m, "std": s} for b, (m, s) in self.per_bucket.items()
            },
            "bucket_counts": self.bucket_counts,
            "confusion": self.confusion,
            "class_order": list(STANCE_LABELS),
            "repetitions": self.repetitions,
            "runtime_s": self.runtime_s,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")


def _single_eval(model: Trainable, test_ds: Dataset) -> dict:
    pairs = test_ds.examples()
    if not pairs:
        raise EmptyTestSet("no labeled instances in the test split")
    branches = [sub_branch(t, inst.instance_id) for t, inst in pairs]
    golds = [inst.label for _, inst in pairs]
    buckets = [depth_bucket(depth(t, inst.instance_id)) for t, inst in pairs]
    preds = model.predict_labels(branches)

    confusion = [[0] * 3 for _ in range(3)]
    for g, p in zip(golds, preds):
        confusion[STANCE_LABELS.index(g)][STANCE_LABELS.index(p)] += 1

    per_bucket = {}
    bucket_counts = {}
    for b in sorted(set(buckets)):
        idx = [i for i, bb in enumerate(buckets) if bb == b]
        bucket_counts[b] = len(idx)
        per_bucket[b] = macro_f1([golds[i] for i in idx], [preds[i] for i in idx])
    return {
        "overall": macro_f1(golds, preds),
        "per_bucket": per_bucket,
        "bucket_counts": bucket_counts,
        "confusion": confusion,
    }


def evaluate(model: Trainable, test_ds: Dataset) -> EvalReport:
    """Single-repetition evaluation; buckets with no instances are absent."""
    start = time.monotonic()
    r = _single_eval(model, test_ds)
    return EvalReport(
        macro_f1_mean=r["overall"],
        macro_f1_std=0.0,
        per_bucket={b: (v, 0.0) for b, v in r["per_bucket"].items()},
        bucket_counts=r["bucket_counts"],
        confusion=r["confusion"],
        repetitions=1,
        runtime_s=time.monotonic() - start,
    )


def _mean_std(values: list[float]) -> tuple[float, float]:
    mean = sum(values) / len(values)
    var = sum((v - mean) ** 2 for v in values) / len(values)
    return mean, math.sqrt(var)


def run_experiment(
    make_model: Callable[[int], Trainable],
    train_ds: Dataset,
    test_ds: Dataset,
    cfg: TrainConfig,
) -> EvalReport:
    """Train/evaluate ``cfg.repetitions`` times with seeds seed+r; aggregate."""
    start = time.monotonic()
    overalls: list[float] = []
    bucket_scores: dict[str, list[float]] = {}
    last = None
    for r in range(cfg.repetitions):
        rep_cfg = TrainConfig(**{**cfg.__dict__, "seed": cfg.seed + r})
        model = make_model(cfg.seed + r)
        model, _ = train(model, train_ds, rep_cfg)
        last = _single_eval(model, test_ds)
        overalls.append(last["overall"])
        for b, v in last["per_bucket"].items():
            bucket_scores.setdefault(b, []).append(v)
    mean, std = _mean_std(overalls)
    return EvalReport(
        macro_f1_mean=mean,
        macro_f1_std=std,
        per_bucket={b: _mean_std(vs) for b, vs in sorted(bucket_scores.items())},
        bucket_counts=last["bucket_counts"],
        confusion=last["confusion"],
        repetitions=cfg.repetitions,
        runtime_s=time.monotonic() - start,
    )


def partial_context_sweep(
    make_model: Callable[[Optional[int], int], Trainable],
    train_ds: Dataset,
    test_ds: Dataset,
    cfg: TrainConfig,
    ks: Sequence[Optional[int]] = (0, 1, 2, None),
) -> dict[Optional[int], EvalReport]:
    """Train and evaluate with each context budget k (None = full branch)."""
    return {
        k: run_experiment(lambda seed, k=k: make_model(k, seed), train_ds, test_ds, cfg)
        for k in ks
    }
