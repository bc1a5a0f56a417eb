from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from ml.autodiff.parameters import ParameterSet
from ml.autodiff.tensor import Tensor
from ml.config import FusionLocation, MixerKind, PredictorArch
from ml.errors import CheckpointError
from ml.mixers.fusion import MixerModel
from ml.predictors.toy import BasePredictorModel

MAGIC = b"TEDK"
FORMAT_VERSION = 1

PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, str] = field(default_factory=dict)


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """Magic, version, tensor table (name, dims, f32 LE data), then key-sorted metadata."""
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(ckpt.tensors))]
    for name, array in ckpt.tensors.items():
        array = np.asarray(array)
        parts.append(_pack_str(name))
        parts.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    parts.append(struct.pack("<I", len(ckpt.metadata)))
    for key in sorted(ckpt.metadata):
        parts.append(_pack_str(key))
        parts.append(_pack_str(str(ckpt.metadata[key])))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.buf):
            raise CheckpointError(
                f"Checkpoint truncated while reading {what} at byte {self.pos} "
                f"(needs {size} bytes, {len(self.buf) - self.pos} left)"
            )
        chunk = self.buf[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def text(self, what: str) -> str:
        raw = self.take(self.u32(f"{what} length"), what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{what} is not valid UTF-8") from exc


def decode_checkpoint(buf: bytes) -> Checkpoint:
    reader = _Reader(buf)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"Not a checkpoint: magic {magic!r}, expected {MAGIC!r}")
    version = reader.u32("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"Unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
        )

    ckpt = Checkpoint()
    for _ in range(reader.u32("tensor count")):
        name = reader.text("tensor name")
        if name in ckpt.tensors:
            raise CheckpointError(f"Duplicate tensor name '{name}'")
        ndim = reader.u32(f"rank of '{name}'")
        shape = tuple(reader.u32(f"shape of '{name}'") for _ in range(ndim))
        size = int(np.prod(shape, dtype=np.int64))
        raw = reader.take(4 * size, f"data of '{name}'")
        ckpt.tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    for _ in range(reader.u32("metadata count")):
        key = reader.text("metadata key")
        ckpt.metadata[key] = reader.text(f"metadata value of '{key}'")
    if reader.pos != len(buf):
        raise CheckpointError(f"{len(buf) - reader.pos} trailing bytes after checkpoint")
    return ckpt


def save_checkpoint(path: PathLike, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(ckpt))
    return path


def load_checkpoint(path: PathLike) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"Cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buf)


def _tensors(params: ParameterSet) -> Dict[str, np.ndarray]:
    return {name: t.data for name, t in params.items()}


def _params(tensors: Dict[str, np.ndarray]) -> ParameterSet:
    params = ParameterSet()
    for name, array in tensors.items():
        params.add(name, Tensor(array, requires_grad=True))
    return params


def _require(ckpt: Checkpoint, *keys: str) -> List[str]:
    missing = [k for k in keys if k not in ckpt.metadata]
    if missing:
        raise CheckpointError(f"Checkpoint metadata lacks {missing}")
    return [ckpt.metadata[k] for k in keys]


def predictor_checkpoint(
    model: BasePredictorModel, metadata: Optional[Dict[str, str]] = None
) -> Checkpoint:
    meta = {
        "model_type": "predictor",
        "arch": model.arch.model_dump_json(),
        "feature_channels": str(model.feature_channels),
        "kappa": repr(float(model.kappa)),
        "seed": str(model.seed),
    }
    meta.update(metadata or {})
    return Checkpoint(tensors=_tensors(model.params), metadata=meta)


def predictor_from_checkpoint(ckpt: Checkpoint) -> BasePredictorModel:
    model_type, arch, channels, kappa, seed = _require(
        ckpt, "model_type", "arch", "feature_channels", "kappa", "seed"
    )
    if model_type != "predictor":
        raise CheckpointError(f"Expected a predictor checkpoint, got '{model_type}'")
    return BasePredictorModel(
        params=_params(ckpt.tensors),
        arch=PredictorArch.model_validate_json(arch),
        feature_channels=int(channels),
        kappa=float(kappa),
        seed=int(seed),
    )


def mixer_checkpoint(mixer: MixerModel, metadata: Optional[Dict[str, str]] = None) -> Checkpoint:
    meta = {
        "model_type": "mixer",
        "kind": mixer.kind.value,
        "location": mixer.fusion_location.value,
        "order": ",".join(str(i) for i in mixer.order),
        "average": "true" if mixer.average else "false",
        "num_predictors": str(mixer.num_predictors),
        "channels": str(mixer.channels),
        "kappa": repr(float(mixer.kappa)),
    }
    meta.update(metadata or {})
    return Checkpoint(tensors=_tensors(mixer.params), metadata=meta)


def mixer_from_checkpoint(ckpt: Checkpoint) -> MixerModel:
    model_type, kind, location, order, average, k, channels, kappa = _require(
        ckpt,
        "model_type",
        "kind",
        "location",
        "order",
        "average",
        "num_predictors",
        "channels",
        "kappa",
    )
    if model_type != "mixer":
        raise CheckpointError(f"Expected a mixer checkpoint, got '{model_type}'")
    return MixerModel(
        kind=MixerKind(kind),
        params=_params(ckpt.tensors),
        kappa=float(kappa),
        fusion_location=FusionLocation(location),
        order=[int(i) for i in order.split(",") if i],
        num_predictors=int(k),
        channels=int(channels),
        average=average == "true",
    )


def save_predictor(
    path: PathLike, model: BasePredictorModel, metadata: Optional[Dict[str, str]] = None
) -> Path:
    return save_checkpoint(path, predictor_checkpoint(model, metadata))


def load_predictor(path: PathLike) -> Tuple[BasePredictorModel, Dict[str, str]]:
    ckpt = load_checkpoint(path)
    return predictor_from_checkpoint(ckpt), ckpt.metadata


def save_mixer(
    path: PathLike, mixer: MixerModel, metadata: Optional[Dict[str, str]] = None
) -> Path:
    return save_checkpoint(path, mixer_checkpoint(mixer, metadata))


def load_mixer(path: PathLike) -> Tuple[MixerModel, Dict[str, str]]:
    ckpt = load_checkpoint(path)
    return mixer_from_checkpoint(ckpt), ckpt.metadata
