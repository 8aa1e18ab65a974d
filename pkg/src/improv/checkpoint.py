"""Fixed little-endian checkpoint layout.

::

    b"IMPV"                      magic
    u32 version                  (FORMAT_VERSION)
    u32 n, n bytes               UTF-8 JSON header: model_config, train_config,
                                 step, optimizer_step, rng_state
    u32 count                    number of parameter blobs
    count x blob                 parameters, in model order
    count x blob                 AdamW first moments, same order
    count x blob                 AdamW second moments, same order

    blob := u16 name_len, name (UTF-8), u8 ndim, ndim x u32 extent,
            prod(extent) x f32 little-endian
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"IMPV"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointData:
    model_config: dict
    train_config: dict
    step: int
    optimizer_step: int
    rng_state: dict
    params: dict[str, np.ndarray]
    moments_m: dict[str, np.ndarray]
    moments_v: dict[str, np.ndarray]


def _write_blob(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint at byte {fh.tell()}")
    return data


def _read_blob(fh: BinaryIO) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, n).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
    return name, arr.astype(np.float32)


def write_checkpoint(path, data: CheckpointData) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    header = json.dumps({
        "model_config": data.model_config,
        "train_config": data.train_config,
        "step": data.step,
        "optimizer_step": data.optimizer_step,
        "rng_state": data.rng_state,
    }, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(data.params)))
    for section in (data.params, data.moments_m, data.moments_v):
        for name in data.params:
            _write_blob(buf, name, section[name])
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: not an IMPV checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        header = json.loads(_read_exact(fh, n).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        sections = []
        for _ in range(3):
            sections.append(dict(_read_blob(fh) for _ in range(count)))
    return CheckpointData(header["model_config"], header["train_config"], header["step"],
                          header["optimizer_step"], header["rng_state"], *sections)


def save_checkpoint(path, trainer) -> None:
    data = CheckpointData(
        model_config=trainer.model.config.to_dict(),
        train_config=trainer.cfg.to_dict(),
        step=trainer.step,
        optimizer_step=trainer.opt.step_count,
        rng_state=trainer.rng.bit_generator.state,
        params=trainer.model.state_dict(),
        moments_m=trainer.opt.m,
        moments_v=trainer.opt.v,
    )
    write_checkpoint(path, data)


def load_model(path):
    from .model import ImprovModel, ModelConfig

    data = read_checkpoint(path)
    model = ImprovModel(ModelConfig(**data.model_config))
    model.load_state_dict(data.params)
    return model


def load_trainer(path, corpus=None, train_config=None):
    from .model import ImprovModel, ModelConfig
    from .trainer import TrainConfig, Trainer

    data = read_checkpoint(path)
    model = ImprovModel(ModelConfig(**data.model_config))
    model.load_state_dict(data.params)
    cfg = train_config or TrainConfig(**data.train_config)
    trainer = Trainer(model, cfg, corpus)
    trainer.opt.load_state({"step": data.optimizer_step, "m": data.moments_m, "v": data.moments_v})
    trainer.step = data.step
    trainer.rng.bit_generator.state = data.rng_state
    return trainer
