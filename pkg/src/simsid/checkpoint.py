"""Single-file checkpoints: model config, calibration, every parameter and buffer.

Layout: 8-byte magic, uint32 format version, uint64 header length, a JSON
header, then the raw little-endian float64 payload. The header lists each
array's name, shape, byte offset and a CRC32 of its bytes. Adam moments
are stored next to each parameter, so a checkpoint can resume training. Files are
written to a temporary sibling and renamed into place, so a crash never
leaves a truncated checkpoint under the final name.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .networks import ModelConfig, SimSIDModel
from .scoring import CalibrationStats

MAGIC = b"SIMSIDCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, model: SimSIDModel, calibration: CalibrationStats | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    arrays = _all_arrays(model)
    records, blobs, offset = [], [], 0
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype="<f8").tobytes()
        records.append({"name": name, "shape": list(arrays[name].shape), "offset": offset,
                        "nbytes": len(data), "crc32": zlib.crc32(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "config": model.config.to_dict(),
        "calibration": None if calibration is None else
        {"mu": calibration.mu, "sigma": calibration.sigma, "count": calibration.count},
        "extra": extra or {},
        "adam_steps": {n: p.step for n, p in model.named_parameters()},
        "arrays": records,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC + struct.pack("<IQ", VERSION, len(head)) + head)
            for blob in blobs:
                fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _all_arrays(model: SimSIDModel) -> dict[str, np.ndarray]:
    arrays = model.state_arrays()
    for n, p in model.named_parameters():
        arrays[f"adam_m:{n}"] = p.m
        arrays[f"adam_v:{n}"] = p.v
    return arrays


def read_header(path: str | os.PathLike) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        pre = fh.read(len(MAGIC) + 12)
        if len(pre) < len(MAGIC) + 12 or pre[: len(MAGIC)] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<IQ", pre[len(MAGIC) :])
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        try:
            header = json.loads(fh.read(hlen))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    return header, len(pre) + hlen


def load_checkpoint(path: str | os.PathLike, expected: ModelConfig | None = None):
    """Returns ``(model, calibration, extra)``.

    With ``expected`` given, a checkpoint built for any other model config
    is rejected instead of being loaded.
    """
    header, start = read_header(path)
    config = ModelConfig(**header["config"])
    if expected is not None and config.to_dict() != expected.to_dict():
        diff = {k: (v, expected.to_dict()[k]) for k, v in config.to_dict().items() if expected.to_dict()[k] != v}
        raise CheckpointError(f"{path}: checkpoint config does not match (checkpoint, requested): {diff}")
    model = SimSIDModel(config)
    targets = _all_arrays(model)
    names = {r["name"] for r in header["arrays"]}
    # Adam moments are optional: inference-only files may leave them out
    required = set(model.state_arrays())
    if not required <= names or not names <= set(targets):
        raise CheckpointError(f"{path}: array set differs from the model ({sorted(names ^ set(targets))[:5]} ...)")
    with open(path, "rb") as fh:
        fh.seek(start)
        payload = fh.read()
    for r in header["arrays"]:
        data = payload[r["offset"] : r["offset"] + r["nbytes"]]
        if len(data) != r["nbytes"] or zlib.crc32(data) != r["crc32"]:
            raise CheckpointError(f"{path}: array {r['name']} is truncated or corrupt")
        dst = targets[r["name"]]
        if list(dst.shape) != r["shape"]:
            raise CheckpointError(f"{path}: array {r['name']} has shape {r['shape']}, model expects {dst.shape}")
        dst[...] = np.frombuffer(data, dtype="<f8").reshape(dst.shape)
    steps = header.get("adam_steps", {})
    for n, p in model.named_parameters():
        p.step = int(steps.get(n, 0))
    cal = header.get("calibration")
    calibration = None if cal is None else CalibrationStats(cal["mu"], cal["sigma"], cal["count"])
    model.eval()
    return model, calibration, header.get("extra", {})
