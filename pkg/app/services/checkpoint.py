"""
Binary checkpoint file.

Layout (little-endian):
    b"SMBA" | u32 version | u32 header length | JSON header | float32 blobs

The JSON header carries the frontend/model/train configs, step, epoch, best
WER, the vocabulary hash and an index of (name, shape) entries. Blobs follow
in index order: all parameters, then the optimizer's first moments, then its
second moments when `has_optimizer` is set.
"""
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from pydantic import ValidationError

from app.errors import CheckpointError, ShapeError
from app.models import FrontendConfig, ModelConfig, TrainConfig
from app.services.optim import OptimizerState
from app.services.samba import SambaASR

MAGIC = b"SMBA"
VERSION = 1
_PREFIX = struct.Struct("<4sII")
_DTYPE = np.dtype("<f4")

PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    frontend: FrontendConfig
    model: ModelConfig
    train: TrainConfig
    params: Dict[str, np.ndarray]
    optimizer: Optional[OptimizerState]
    step: int
    epoch: int
    vocab_hash: str
    best_wer: Optional[float] = None

    def build_model(self, scan_partition: int = 0, scan_workers: int = 1) -> SambaASR:
        model = SambaASR(self.model, seed=self.train.seed, scan_partition=scan_partition, scan_workers=scan_workers)
        try:
            model.store.load_arrays(self.params)
        except (KeyError, ShapeError) as e:
            raise CheckpointError(f"checkpoint parameters do not fit the model: {e}") from e
        return model


def save_checkpoint(path: PathLike, model: SambaASR, frontend: FrontendConfig, train: TrainConfig,
                    optimizer: Optional[OptimizerState], step: int, epoch: int, vocab_hash: str,
                    best_wer: Optional[float] = None):
    arrays = model.store.arrays()
    index = [[name, list(arr.shape)] for name, arr in arrays.items()]
    header = {
        "frontend": frontend.model_dump(),
        "model": model.cfg.model_dump(),
        "train": train.model_dump(),
        "step": step,
        "epoch": epoch,
        "best_wer": best_wer,
        "vocab_hash": vocab_hash,
        "has_optimizer": optimizer is not None,
        "optimizer_step": optimizer.step if optimizer else 0,
        "index": index,
    }
    blobs: List[bytes] = [np.ascontiguousarray(arr, dtype=_DTYPE).tobytes() for arr in arrays.values()]
    if optimizer is not None:
        for moments in (optimizer.m, optimizer.v):
            blobs += [np.ascontiguousarray(moments.get(name, np.zeros_like(arr)), dtype=_DTYPE).tobytes()
                      for name, arr in arrays.items()]

    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    tmp.replace(path)


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")

    body = _PREFIX.size + header_len
    try:
        header = json.loads(raw[_PREFIX.size:body].decode("utf-8"))
        frontend = FrontendConfig(**header["frontend"])
        model_cfg = ModelConfig(**header["model"])
        train_cfg = TrainConfig(**header["train"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValidationError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e

    offset = body

    def read_group() -> Dict[str, np.ndarray]:
        nonlocal offset
        group = {}
        for name, shape in header["index"]:
            n = int(np.prod(shape)) * _DTYPE.itemsize
            if offset + n > len(raw):
                raise CheckpointError(f"{path}: truncated at {name}")
            group[name] = np.frombuffer(raw, dtype=_DTYPE, count=n // _DTYPE.itemsize,
                                        offset=offset).astype(np.float64).reshape(shape)
            offset += n
        return group

    params = read_group()
    optimizer = None
    if header.get("has_optimizer"):
        optimizer = OptimizerState(m=read_group(), v=read_group(), step=int(header["optimizer_step"]))
    return Checkpoint(frontend=frontend, model=model_cfg, train=train_cfg, params=params, optimizer=optimizer,
                      step=int(header["step"]), epoch=int(header["epoch"]), vocab_hash=header["vocab_hash"],
                      best_wer=header.get("best_wer"))
