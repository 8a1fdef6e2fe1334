"""``simsid <gen-synth|train|eval|score|ablate> [--config FILE] [--key value ...]``

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import csv
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, parse_value, resolve
from .data import (DataError, DatasetSplit, IMAGE_SUFFIXES, contaminate_training_set, export_split, labels,
                   load_image_dir, read_image, stack, synthetic_split)
from .scoring import (CalibrationError, EvalReport, ThresholdPolicy, anomaly_score, raw_score,
                      threshold_metrics, write_curve_csv, write_metrics, write_scores_csv)
from .svg import line_plot, write_svg
from .training import config_dict, train

log = logging.getLogger("simsid")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("gen-synth", "train", "eval", "score", "ablate")
SWEEPABLE = {"grid": "grid", "patch": "grid", "top_k": "top_k", "topk": "top_k", "items": "items",
             "contamination": "contamination"}


class UsageError(Exception):
    pass


def parse_args(argv: list[str]) -> tuple[str, RunConfig]:
    if not argv or argv[0] in ("-h", "--help"):
        raise UsageError("usage: " + __doc__.strip().splitlines()[0].strip("`"))
    command, rest = argv[0], argv[1:]
    if command not in COMMANDS:
        raise UsageError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    file, flags, i = None, {}, 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}; options look like --key value")
        key = tok[2:].replace("-", "_")
        has_value = i + 1 < len(rest) and not rest[i + 1].startswith("--")
        if key == "force" and not has_value:
            flags["force"] = "true"
            i += 1
            continue
        if not has_value:
            raise UsageError(f"option {tok} needs a value")
        if key == "config":
            file = rest[i + 1]
        else:
            flags[key] = rest[i + 1]
        i += 2
    if file is not None and not Path(file).is_file():
        raise UsageError(f"config file {file} not found")
    return command, resolve(file, flags)


# -- data plumbing --------------------------------------------------------------------


def _halves(total: int, what: str) -> int:
    if total < 2 or total % 2:
        raise ConfigError(f"{what} must be an even number >= 2 (half normal, half abnormal), got {total}")
    return total // 2


def load_split(cfg: RunConfig) -> DatasetSplit:
    if cfg.data == "synthetic":
        split = synthetic_split(cfg.n_train, _halves(cfg.n_val, "n_val"), _halves(cfg.n_test, "n_test"), cfg.seed,
                                pool=int(round(cfg.contamination * cfg.n_train)))
    else:
        split = load_image_dir(cfg.data)
    if cfg.contamination:
        if not split.pool:
            raise DataError("contamination needs synthetic data (a directory source has no abnormal pool)")
        split = contaminate_training_set(split, cfg.contamination, cfg.seed)
    return split.validate()


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise DataError(f"output directory {path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _write_resolved(cfg: RunConfig, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}.config").write_text(cfg.to_text())


# -- commands -------------------------------------------------------------------------------


def cmd_gen_synth(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    _prepare_out(out, cfg.force)
    split = load_split(replace(cfg, data="synthetic"))
    counts = export_split(split, out)
    _write_resolved(cfg, out, "gen-synth")
    for key in sorted(counts):
        print(f"{key} {counts[key]}")
    print(f"total {sum(counts.values())}")
    return EXIT_OK


def run_training(cfg: RunConfig, out: Path, split: DatasetSplit | None = None):
    split = split or load_split(cfg)
    tc = cfg.train_config()
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, out, "train")
    return train(tc, split, out, eval_batch=cfg.eval_batch,
                 progress=lambda r: log.info("epoch %d val_auc %.4f lr %.2e %.1fs", r["epoch"], r["val_auc"],
                                             r["lr"], r["seconds"]))


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    result = run_training(cfg, out)
    print(f"checkpoint {result.checkpoint}")
    print(f"best_epoch {result.best_epoch} val_auc {result.best_auc:.6f}")
    print(f"mu {result.calibration.mu!r} sigma {result.calibration.sigma!r}")
    return EXIT_OK


def _checkpoint_path(cfg: RunConfig) -> Path:
    path = Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / "best.ckpt"
    if not path.is_file():
        raise DataError(f"checkpoint {path} not found")
    return path


def _load_model(cfg: RunConfig):
    model, stats, _ = load_checkpoint(_checkpoint_path(cfg))
    mc = model.config
    mismatch = {k: (getattr(mc, k), getattr(cfg, k)) for k in ("grid", "items", "top_k")
                if tuple(np.atleast_1d(getattr(mc, k))) != tuple(np.atleast_1d(getattr(cfg, k)))}
    if mismatch:
        raise CheckpointError(f"checkpoint does not match the run config (checkpoint, config): {mismatch}")
    if stats is None:
        raise CheckpointError("checkpoint carries no calibration; it is an intermediate training snapshot")
    return model, stats


def evaluate(model, stats, split: DatasetSplit, threshold: str, batch: int = 50) -> EvalReport:
    """Best-F1 threshold picked on validation (or fixed), then applied to test."""
    if threshold == "best_f1":
        val_a = anomaly_score(raw_score(model, stack(split.val), batch), stats)
        tau = threshold_metrics(val_a, labels(split.val)).threshold
    else:
        tau = float(threshold)
    raw = raw_score(model, stack(split.test), batch)
    report = threshold_metrics(anomaly_score(raw, stats), labels(split.test), ThresholdPolicy.fixed(tau))
    report.raw = raw
    report.ids = [s.source_id for s in split.test]
    return report


def write_report(report: EvalReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_scores_csv(out / "scores.csv", report)
    write_metrics(out / "metrics.txt", report.metrics())
    fpr, tpr = report.roc
    prec, rec = report.pr
    write_curve_csv(out / "roc.csv", ("fpr", "tpr"), fpr, tpr)
    write_curve_csv(out / "pr.csv", ("recall", "precision"), rec, prec)
    write_svg(out / "roc.svg", line_plot([(f"AUC {report.auc:.3f}", fpr, tpr)], "ROC", "false positive rate",
                                         "true positive rate", (0, 1), (0, 1), diagonal=True))
    write_svg(out / "pr.svg", line_plot([("PR", rec, prec)], "Precision-recall", "recall", "precision",
                                        (0, 1), (0, 1)))


def cmd_eval(cfg: RunConfig) -> int:
    model, stats = _load_model(cfg)
    split = load_split(cfg)
    report = evaluate(model, stats, split, cfg.threshold, cfg.eval_batch)
    out = Path(cfg.out) / "eval"
    write_report(report, out)
    _write_resolved(cfg, out, "eval")
    for k, v in report.metrics().items():
        print(f"{k}={v}")
    return EXIT_OK


def cmd_score(cfg: RunConfig) -> int:
    if not cfg.image:
        raise ConfigError("score needs --image PATH (a file or a directory)")
    model, stats = _load_model(cfg)
    target = Path(cfg.image)
    if target.is_dir():
        paths = sorted(p for p in target.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not paths:
            raise DataError(f"no images in {target}")
    elif target.is_file():
        paths = [target]
    else:
        raise DataError(f"image path {target} does not exist")
    images = []
    for p in paths:
        try:
            images.append(read_image(p))
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read image {p}: {exc}") from exc
    raw = raw_score(model, np.stack(images), cfg.eval_batch)
    for p, r in zip(paths, raw):
        r = float(r)
        a = anomaly_score(r, stats)
        prefix = f"{p} " if target.is_dir() else ""
        print(f"{prefix}raw={r!r} A={a!r}")
    return EXIT_OK


def parse_sweep(spec: str) -> tuple[str, list]:
    if not spec.strip():
        raise ConfigError("empty sweep spec; use e.g. --sweep grid=1,2,4,8")
    key, sep, values = spec.partition("=")
    key = key.strip().replace("-", "_")
    if not sep or key not in SWEEPABLE:
        raise ConfigError(f"sweep must look like KEY=v1,v2,... with KEY in {sorted(SWEEPABLE)}, got {spec!r}")
    field = SWEEPABLE[key]
    items = [v for v in values.split(",") if v.strip()]
    if not items:
        raise ConfigError(f"sweep {spec!r} lists no values")
    return field, [parse_value(field, v) for v in items]


def cmd_ablate(cfg: RunConfig) -> int:
    field, values = parse_sweep(cfg.sweep)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, out, "ablate")
    rows = []
    for v in values:
        label = "x".join(map(str, v)) if isinstance(v, tuple) else str(v)
        cell_dir = out / f"{field}-{label}"
        try:
            cell = replace(cfg, **{field: v})
            result = run_training(cell, cell_dir)
            report = evaluate(result.model, result.calibration, load_split(cell), cell.threshold, cell.eval_batch)
            write_report(report, cell_dir / "eval")
            rows.append({"setting": f"{field}={label}", "auc": report.auc, "acc": report.accuracy, "f1": report.f1,
                         "status": "ok"})
        except Exception as exc:  # a failed cell must not stop the sweep
            log.error("sweep cell %s=%s failed: %s", field, label, exc)
            rows.append({"setting": f"{field}={label}", "auc": float("nan"), "acc": float("nan"),
                         "f1": float("nan"), "status": f"failed: {type(exc).__name__}"})
        print(f"{rows[-1]['setting']} auc={rows[-1]['auc']:.4f} status={rows[-1]['status']}", flush=True)
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("setting", "auc", "acc", "f1", "status"))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    xs = list(range(len(rows)))
    svg = line_plot([(m, xs, [r[m] for r in rows]) for m in ("auc", "acc", "f1")],
                    f"sweep over {field}", f"{field} (cell index: " + ", ".join(r["setting"].split("=")[1]
                                                                                  for r in rows) + ")",
                    "score", ylim=(0, 1), markers=True)
    write_svg(out / "results.svg", svg)
    return EXIT_OK if any(r["status"] == "ok" for r in rows) else EXIT_NUMERIC


HANDLERS = {"gen-synth": cmd_gen_synth, "train": cmd_train, "eval": cmd_eval, "score": cmd_score,
            "ablate": cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        command, cfg = parse_args(argv)
    except (UsageError, ValueError, TypeError) as exc:
        print(f"simsid: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, cfg.log_level.upper(), logging.INFO),
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return HANDLERS[command](cfg)
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"simsid: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, CalibrationError, FloatingPointError) as exc:
        print(f"simsid: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:  # ConfigError and invalid settings
        print(f"simsid: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
