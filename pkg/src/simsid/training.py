"""Objective, augmentation, and the alternating adversarial training loop.

Generator side (encoder, in-painting block, both generators, memories)
minimizes

    lambda_t * L_t + lambda_s * L_s + lambda_dist * L_dist + lambda_gen * L_gen

on even steps; the discriminator maximizes L_dis (weighted by lambda_dis)
on every step. Log-probabilities are computed from logits with softplus,
so no ``log(sigmoid(.))`` ever underflows.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from .autodiff import Adam, NonFiniteError, Tensor, cosine_lr, no_grad, ops
from .checkpoint import save_checkpoint
from .data import DatasetSplit, labels, stack
from .networks import ModelConfig, SimSIDModel, as_batch
from .scoring import CalibrationStats, calibrate, raw_score, roc_auc

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "L_t", "L_s", "L_dist", "L_gen", "L_dis", "lr", "val_auc")


@dataclass(frozen=True)
class LossWeights:
    t: float = 0.01
    s: float = 10.0
    dist: float = 0.001
    gen: float = 0.005
    dis: float = 0.005

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"loss weight {f.name} must be a finite non-negative number, got {v}")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr_max: float = 1e-4
    lr_min: float = 2e-5
    weight_decay: float = 1e-5
    gen_period: int = 2
    seed: int = 0
    grid: tuple[int, int] = (4, 4)
    items: int = 100
    top_k: int = 5
    translate: float = 0.05
    scale_range: tuple[float, float] = (0.95, 1.05)
    patience: int = 20
    metric: str = "auc"
    memory_lr_scale: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        self.scale_range = tuple(float(s) for s in self.scale_range)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.epochs < 1 or self.batch_size < 1 or self.gen_period < 1:
            raise ValueError("epochs, batch_size and gen_period must be positive")
        if self.memory_lr_scale <= 0:
            raise ValueError(f"memory_lr_scale must be positive, got {self.memory_lr_scale}")
        if self.patience < 0:
            raise ValueError(f"patience must be >= 0, got {self.patience}")
        if self.metric != "auc":
            raise ValueError(f"only the 'auc' validation metric is supported, got {self.metric!r}")

    def model_config(self, **overrides) -> ModelConfig:
        return ModelConfig(grid=self.grid, items=self.items, top_k=self.top_k, seed=self.seed, **overrides)


# -- augmentation ------------------------------------------------------------------


def apply_affine(image: np.ndarray, shift: tuple[float, float], scale: float) -> np.ndarray:
    """Scale about the image center, then translate content by ``shift`` (rows, cols) pixels.

    Bilinear resampling; pixels mapped from outside the frame take the
    image's minimum value.
    """
    image = np.asarray(image, dtype=np.float64)
    c = (np.array(image.shape, dtype=np.float64) - 1.0) / 2.0
    matrix = np.eye(2) / scale
    offset = c - (c + np.asarray(shift, dtype=np.float64)) / scale
    return ndimage.affine_transform(image, matrix, offset=offset, order=1, mode="constant", cval=float(image.min()))


def augment(image: np.ndarray, rng: np.random.Generator, translate: float = 0.05,
            scale_range: tuple[float, float] = (0.95, 1.05)) -> np.ndarray:
    h, w = image.shape
    shift = (rng.uniform(-translate, translate) * h, rng.uniform(-translate, translate) * w)
    return apply_affine(image, shift, rng.uniform(*scale_range))


# -- losses ---------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    L_t: Tensor
    L_s: Tensor
    L_dist: Tensor
    L_gen: Tensor
    L_dis: Tensor
    gen_total: Tensor
    dis_total: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("L_t", "L_s", "L_dist", "L_gen", "L_dis")}


def _component(name: str, fn):
    try:
        out = fn()
    except NonFiniteError as exc:
        raise NonFiniteError(f"loss component {name} is not finite: {exc}") from exc
    if not math.isfinite(float(out.data)):
        raise NonFiniteError(f"loss component {name} is not finite ({float(out.data)})")
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = ops.sub(a, b)
    return ops.mean(ops.mul(d, d))


def log_d(logits: Tensor) -> Tensor:
    """log sigmoid(l) = -softplus(-l)."""
    return ops.scale(ops.softplus(ops.scale(logits, -1.0)), -1.0)


def log_one_minus_d(logits: Tensor) -> Tensor:
    """log(1 - sigmoid(l)) = -softplus(l)."""
    return ops.scale(ops.softplus(logits), -1.0)


def distillation(levels_t: list[Tensor], levels_s: list[Tensor]) -> Tensor:
    """Sum over levels of the mean squared feature gap; teacher features are detached."""
    total = None
    for zt, zs in zip(levels_t, levels_s, strict=True):
        term = mse(ops.stop_gradient(zt), zs)
        total = term if total is None else ops.add(total, term)
    return total


@dataclass
class GeneratorOutputs:
    teacher: Tensor
    student: Tensor
    levels_t: list[Tensor]
    levels_s: list[Tensor]


def generator_forward(model: SimSIDModel, images: Tensor, bypass: bool = False) -> GeneratorOutputs:
    feats, skips = model.encode(images)
    b = images.shape[0]
    teacher, lt = model.teacher_decode(feats, skips, b)
    student, ls = model.student_decode(feats, skips, b, bypass=bypass)
    return GeneratorOutputs(teacher, student, lt, ls)


def discriminator_pair(model: SimSIDModel, real: Tensor, fake: Tensor) -> tuple[Tensor, Tensor]:
    """Logits of real and fake images from one discriminator pass over both.

    Batch-norm statistics are shared by the two halves, so the
    discriminator cannot tell them apart from the batch statistics alone.
    """
    logits = model.disc_logits(ops.concat(real, fake, axis=0))
    n = real.shape[0]
    return ops.getitem(logits, slice(0, n)), ops.getitem(logits, slice(n, None))


def compute_losses(model: SimSIDModel, images, weights: LossWeights = LossWeights(),
                   outputs: GeneratorOutputs | None = None) -> LossBreakdown:
    """All five terms for one batch.

    ``L_dis`` sees the student output through :func:`ops.detach`, so its
    gradient never reaches the generator side; ``L_gen`` is built from a
    separate discriminator pass that does keep the generator path.
    """
    x = as_batch(images)
    out = outputs or generator_forward(model, x)
    L_t = _component("L_t", lambda: mse(x, out.teacher))
    L_s = _component("L_s", lambda: mse(x, out.student))
    L_dist = _component("L_dist", lambda: distillation(out.levels_t, out.levels_s))
    real_l, fake_l = discriminator_pair(model, x, ops.detach(out.student))
    L_dis = _component("L_dis", lambda: ops.add(ops.mean(log_d(real_l)), ops.mean(log_one_minus_d(fake_l))))
    _, fake_g = discriminator_pair(model, x, out.student)
    L_gen = _component("L_gen", lambda: ops.mean(log_one_minus_d(fake_g)))
    w = weights
    gen_total = ops.add(
        ops.add(ops.scale(L_t, w.t), ops.scale(L_s, w.s)),
        ops.add(ops.scale(L_dist, w.dist), ops.scale(L_gen, w.gen)),
    )
    dis_total = ops.scale(L_dis, -w.dis)
    return LossBreakdown(L_t, L_s, L_dist, L_gen, L_dis, gen_total, dis_total)


# -- one step ---------------------------------------------------------------------


@dataclass
class Optimizers:
    """Adam for the generator side, its memory items, and the discriminator.

    Adam moves every element by at most about ``lr`` per step, so memory
    items, which start far from the features they must match, get their
    own learning rate ``lr * memory_lr_scale``.
    """

    generator: Adam
    memory: Adam
    discriminator: Adam
    memory_lr_scale: float = 1.0

    @classmethod
    def for_model(cls, model: SimSIDModel, lr: float, weight_decay: float,
                  memory_lr_scale: float = 1.0) -> "Optimizers":
        mem = [m.blocks for m in model.memories()]
        mem_ids = {id(p) for p in mem}
        rest = [p for p in model.generator_parameters() if id(p) not in mem_ids]
        return cls(Adam(rest, lr, weight_decay), Adam(mem, lr * memory_lr_scale, weight_decay),
                   Adam(model.discriminator_parameters(), lr, weight_decay), memory_lr_scale)

    def set_lr(self, lr: float) -> None:
        self.generator.lr = lr
        self.memory.lr = lr * self.memory_lr_scale
        self.discriminator.lr = lr


def is_generator_step(step: int, period: int = 2) -> bool:
    return step % period == 0


def train_step(model: SimSIDModel, images, opt: Optimizers, step: int,
               weights: LossWeights = LossWeights(), gen_period: int = 2) -> dict[str, float]:
    """One discriminator update, plus a generator update when ``step % gen_period == 0``.

    Returns the loss values that were computed this step (generator terms
    only on generator steps).
    """
    x = as_batch(images)
    model.train()
    update_g = is_generator_step(step, gen_period)
    if update_g:
        out = generator_forward(model, x)
        fake = ops.detach(out.student)
    else:
        with no_grad():
            feats, skips = model.encode(x)
            fake, _ = model.student_decode(feats, skips, x.shape[0])
        fake = Tensor(fake.data)

    # discriminator: descend -lambda_dis * L_dis on real vs detached fake
    real_l, fake_l = discriminator_pair(model, x, fake)
    L_dis = _component("L_dis", lambda: ops.add(ops.mean(log_d(real_l)), ops.mean(log_one_minus_d(fake_l))))
    opt.discriminator.zero_grad()
    ops.scale(L_dis, -weights.dis).backward()
    opt.discriminator.step()
    values = {"L_dis": float(L_dis.data)}
    if not update_g:
        return values

    L_t = _component("L_t", lambda: mse(x, out.teacher))
    L_s = _component("L_s", lambda: mse(x, out.student))
    L_dist = _component("L_dist", lambda: distillation(out.levels_t, out.levels_s))
    _, fake_g = discriminator_pair(model, x, out.student)
    L_gen = _component("L_gen", lambda: ops.mean(log_one_minus_d(fake_g)))
    total = ops.add(
        ops.add(ops.scale(L_t, weights.t), ops.scale(L_s, weights.s)),
        ops.add(ops.scale(L_dist, weights.dist), ops.scale(L_gen, weights.gen)),
    )
    opt.generator.zero_grad()
    opt.memory.zero_grad()
    total.backward()
    # the generator objective also reaches D's parameters; that gradient is discarded
    opt.discriminator.zero_grad()
    opt.generator.step()
    opt.memory.step()
    values.update(L_t=float(L_t.data), L_s=float(L_s.data), L_dist=float(L_dist.data), L_gen=float(L_gen.data))
    return values


# -- the loop -----------------------------------------------------------------------


@dataclass
class TrainResult:
    model: SimSIDModel
    calibration: CalibrationStats
    log: list[dict]
    best_epoch: int
    best_auc: float
    best_record: list[float]  # best validation AUC seen so far, per epoch
    checkpoint: Path | None
    seconds: float
    epoch_seconds: list[float] = field(default_factory=list)


def write_log(path: str | os.PathLike, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_log(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def _snapshot(model: SimSIDModel) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_arrays().items()}


def _restore(model: SimSIDModel, snap: dict[str, np.ndarray]) -> None:
    for k, v in model.state_arrays().items():
        v[...] = snap[k]


def train(config: TrainConfig, split: DatasetSplit, out_dir: str | os.PathLike | None = None,
          model_config: ModelConfig | None = None, progress: Callable[[dict], None] | None = None,
          eval_batch: int = 50) -> TrainResult:
    """Train, track the best validation AUC, restore that state and calibrate it.

    With ``out_dir`` set, the best checkpoint (``best.ckpt``) and the
    per-epoch log (``train_log.csv``) are written there; the checkpoint is
    rewritten on every improvement so an interrupted run keeps its best
    state.
    """
    if not split.train or not split.val:
        raise ValueError("training and validation splits must be non-empty")
    val_y = labels(split.val)
    if val_y.min() == val_y.max():
        raise ValueError("validation split needs both normal and abnormal samples")
    model = SimSIDModel(model_config or config.model_config())
    opt = Optimizers.for_model(model, config.lr_max, config.weight_decay, config.memory_lr_scale)
    train_x = stack(split.train)
    val_x = stack(split.val)
    order_rng = np.random.default_rng([config.seed, 3])
    aug_rng = np.random.default_rng([config.seed, 2])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "best.ckpt" if out is not None else None

    rows, record, epoch_seconds = [], [], []
    best_auc, best_epoch, best_state, stale = -math.inf, -1, None, 0
    step = 0
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        te = time.perf_counter()
        lr = cosine_lr(epoch, config.epochs, config.lr_max, config.lr_min)
        opt.set_lr(lr)
        sums: dict[str, list[float]] = {k: [] for k in LOG_COLUMNS[1:6]}
        perm = order_rng.permutation(len(train_x))
        for lo in range(0, len(perm), config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            if len(idx) < 2:
                continue  # batch statistics need two samples
            batch = np.stack([augment(train_x[i], aug_rng, config.translate, config.scale_range) for i in idx])
            for k, v in train_step(model, batch, opt, step, config.weights, config.gen_period).items():
                sums[k].append(v)
            step += 1
        val_auc = roc_auc(raw_score(model, val_x, eval_batch), val_y)
        row = {"epoch": epoch, **{k: float(np.mean(v)) if v else float("nan") for k, v in sums.items()},
               "lr": lr, "val_auc": val_auc}
        rows.append(row)
        improved = val_auc > best_auc
        if improved:
            best_auc, best_epoch, stale = val_auc, epoch, 0
            best_state = _snapshot(model)
            if ckpt is not None:
                save_checkpoint(ckpt, model, None, {"epoch": epoch, "val_auc": val_auc})
        else:
            stale += 1
        record.append(best_auc)
        epoch_seconds.append(time.perf_counter() - te)
        if out is not None:
            write_log(out / "train_log.csv", rows)
        if progress is not None:
            progress({**row, "seconds": epoch_seconds[-1], "best_auc": best_auc})
        log.info("epoch %d  val_auc %.4f  best %.4f (epoch %d)  %.1fs", epoch, val_auc, best_auc, best_epoch,
                 epoch_seconds[-1])
        if config.patience and stale >= config.patience:
            log.info("early stop: no improvement for %d epochs", stale)
            break

    _restore(model, best_state)
    model.eval()
    stats = calibrate(model, train_x, eval_batch)
    if ckpt is not None:
        save_checkpoint(ckpt, model, stats, {"epoch": best_epoch, "val_auc": best_auc})
    return TrainResult(model, stats, rows, best_epoch, best_auc, record, ckpt, time.perf_counter() - t0,
                       epoch_seconds)


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["grid"] = list(config.grid)
    d["scale_range"] = list(config.scale_range)
    return d
