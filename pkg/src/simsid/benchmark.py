"""End-to-end synthetic benchmark: train on normals, score the test split.

The benchmark split is 400 normal training images and 100 + 100
validation and test images. ``BENCHMARK`` holds the training settings
used for the recorded results in ``results/``; they differ from the
:class:`~simsid.training.TrainConfig` defaults, which describe the long
schedule, so that a run fits in 30 epochs and 30 minutes on one CPU core.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .data import DatasetSplit, contaminate_training_set, labels, stack, synthetic_split
from .scoring import anomaly_score, raw_score, roc_auc
from .training import TrainConfig, train

N_TRAIN = 400
PER_CLASS = 100
MAX_EPOCHS = 30
MAX_SECONDS = 30 * 60

BENCHMARK = TrainConfig(epochs=12, batch_size=8, lr_max=1e-3, lr_min=2e-5, memory_lr_scale=10.0, translate=0.01,
                        patience=0)


@dataclass
class BenchmarkResult:
    auc: float
    mean_normal: float
    mean_abnormal: float
    per_kind: dict[str, float]
    contamination: float
    grid: tuple[int, int]
    epochs: int
    best_epoch: int
    seconds: float

    def to_json(self) -> str:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "BenchmarkResult":
        d = json.loads(text)
        d["grid"] = tuple(d["grid"])
        return cls(**d)


def benchmark_split(contamination: float = 0.0, seed: int = 0) -> DatasetSplit:
    split = synthetic_split(N_TRAIN, PER_CLASS, PER_CLASS, seed=seed, pool=int(round(contamination * N_TRAIN)))
    if contamination:
        split = contaminate_training_set(split, contamination, seed)
    return split.validate()


def run_benchmark(config: TrainConfig = BENCHMARK, contamination: float = 0.0, seed: int = 0,
                  out_dir: str | os.PathLike | None = None, **overrides) -> BenchmarkResult:
    """Train with ``config`` (plus ``overrides``) and score the test split."""
    config = replace(config, **overrides) if overrides else config
    split = benchmark_split(contamination, seed)
    res = train(config, split, out_dir)
    test_x, y = stack(split.test), labels(split.test)
    a = anomaly_score(raw_score(res.model, test_x), res.calibration)
    kinds = np.array([s.anomaly.kind if s.anomaly else "" for s in split.test])
    per_kind = {}
    for k in sorted(set(kinds) - {""}):
        keep = (kinds == k) | (y == 0)
        per_kind[k] = roc_auc(a[keep], y[keep])
    result = BenchmarkResult(roc_auc(a, y), float(a[y == 0].mean()), float(a[y == 1].mean()), per_kind,
                             contamination, tuple(config.grid), len(res.log), res.best_epoch, res.seconds)
    if out_dir is not None:
        (Path(out_dir) / "benchmark.json").write_text(result.to_json())
    return result
