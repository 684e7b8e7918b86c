"""Localisation network builders, frame prediction and checkpoints.

Three architectures are available through the model registry:

* ``waveloc_gtf``  - fixed gammatone front end with per-band 2-D and 1-D stacks
* ``waveloc_conv`` - learned 1x256 front end with joint convolution stacks
* ``gcc_baseline`` - two-hidden-layer network over GCC-PHAT features

Class index ``i`` stands for azimuth ``-90 + 5 i`` degrees.
"""

from __future__ import annotations

import enum
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union

import numpy as np
import yaml

from waveloc.errors import CheckpointError, ConfigurationError, InputError
from waveloc.utils import tensor_nn as nn
from waveloc.utils.audio_dsp import (
    FRAME_LENGTH,
    GCC_MAX_LAG,
    BinauralFrame,
    GammatoneKernelBank,
    GccFeature,
    design_gammatone_bank,
)
from waveloc.utils.paths import PathLike, atomic_write_bytes

logger = logging.getLogger(__name__)

NUM_CLASSES = 37
AZIMUTH_STEP = 5
AZIMUTH_MIN = -90
HIDDEN_UNITS = 1024
DROPOUT_RATE = 0.5

CHECKPOINT_MAGIC = b"WLOC"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")


class ModelKind(str, enum.Enum):
    WAVELOC_GTF = "waveloc_gtf"
    WAVELOC_CONV = "waveloc_conv"
    GCC_BASELINE = "gcc_baseline"


@dataclass(frozen=True)
class ModelConfig:
    kind: ModelKind
    gtf_band_kernels_2d: int = 6
    gtf_band_kernels_1d: int = 6
    seed: int = 0

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "kind", ModelKind(self.kind))
        except ValueError as exc:
            raise ConfigurationError(f"unknown model kind: {self.kind}") from exc
        if self.gtf_band_kernels_2d < 1 or self.gtf_band_kernels_1d < 1:
            raise ConfigurationError("per-band kernel counts must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["kind"] = self.kind.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        if "kind" not in known:
            raise ConfigurationError("model config needs a kind")
        return cls(**known)


def class_to_azimuth(index: int) -> int:
    if not 0 <= index < NUM_CLASSES:
        raise InputError(f"class index {index} outside [0, {NUM_CLASSES - 1}]")
    return AZIMUTH_MIN + AZIMUTH_STEP * int(index)


def azimuth_to_class(azimuth: float) -> int:
    index = (azimuth - AZIMUTH_MIN) / AZIMUTH_STEP
    if not float(index).is_integer() or not 0 <= index < NUM_CLASSES:
        raise InputError(f"azimuth {azimuth} is not on the 5 degree grid")
    return int(index)


def grid_azimuths() -> List[int]:
    return [class_to_azimuth(i) for i in range(NUM_CLASSES)]


def _require_kind(config: ModelConfig, kind: ModelKind) -> None:
    if config.kind != kind:
        raise ConfigurationError(f"config kind {config.kind.value} != {kind.value}")


def _classifier_head(
    n_in: int, rng: np.random.Generator, hidden: str
) -> List[nn.LayerNode]:
    return [
        nn.dense_node(n_in, HIDDEN_UNITS, rng, activation=hidden),
        nn.dropout_node(DROPOUT_RATE),
        nn.dense_node(HIDDEN_UNITS, HIDDEN_UNITS, rng, activation=hidden),
        nn.dropout_node(DROPOUT_RATE),
        nn.dense_node(HIDDEN_UNITS, NUM_CLASSES, rng),
        nn.simple_node("softmax"),
    ]


def _graph(
    config: ModelConfig, nodes: List[nn.LayerNode], input_shape
) -> nn.ModelGraph:
    return nn.ModelGraph(
        nodes,
        input_shape=input_shape,
        num_classes=NUM_CLASSES,
        seed=config.seed,
        info={"kind": config.kind.value, "config": config.to_dict()},
    )


def build_waveloc_gtf(
    config: ModelConfig, bank: Optional[GammatoneKernelBank] = None
) -> nn.ModelGraph:
    """Gammatone front end, peak normalisation, per-band stacks, dense head.

    The per-band 2x18 and 1x6 stacks are grouped convolutions with one group
    per gammatone band, so the flattened output is the concatenation of the 32
    band outputs in band order.
    """
    _require_kind(config, ModelKind.WAVELOC_GTF)
    bank = bank or design_gammatone_bank()
    bands = len(bank)
    n2d, n1d = config.gtf_band_kernels_2d, config.gtf_band_kernels_1d
    rng = np.random.default_rng(config.seed)
    nodes = [
        nn.conv_node(
            "time_conv",
            1,
            bands,
            FRAME_LENGTH,
            rng,
            bias=False,
            trainable=False,
            weight=bank.kernels[:, None, None, :],
        ),
        nn.simple_node("peak_normalise"),
        nn.pool_node(2),
        nn.conv_node(
            "ear_conv2d", bands, bands * n2d, 18, rng, groups=bands, activation="relu"
        ),
        nn.pool_node(4),
        nn.conv_node(
            "conv1d", bands * n2d, bands * n1d, 6, rng, groups=bands, activation="relu"
        ),
        nn.pool_node(4),
        nn.simple_node("flatten_concat"),
    ]
    flat = bands * n1d * (FRAME_LENGTH // 2 // 4 // 4)
    nodes += _classifier_head(flat, rng, "relu")
    return _graph(config, nodes, (2, FRAME_LENGTH))


def build_waveloc_conv(config: ModelConfig) -> nn.ModelGraph:
    """Learned 64x(1x256) front end followed by joint 2x18 and 1x6 stacks."""
    _require_kind(config, ModelKind.WAVELOC_CONV)
    rng = np.random.default_rng(config.seed)
    nodes = [
        nn.conv_node("time_conv", 1, 64, 256, rng),
        nn.pool_node(2),
        nn.conv_node("ear_conv2d", 64, 64, 18, rng, activation="relu"),
        nn.pool_node(4),
        nn.conv_node("conv1d", 64, 64, 6, rng, activation="relu"),
        nn.pool_node(4),
        nn.simple_node("flatten_concat"),
    ]
    flat = 64 * (FRAME_LENGTH // 2 // 4 // 4)
    nodes += _classifier_head(flat, rng, "relu")
    return _graph(config, nodes, (2, FRAME_LENGTH))


def build_gcc_baseline(config: ModelConfig) -> nn.ModelGraph:
    _require_kind(config, ModelKind.GCC_BASELINE)
    rng = np.random.default_rng(config.seed)
    features = 2 * GCC_MAX_LAG + 1
    return _graph(config, _classifier_head(features, rng, "sigmoid"), (features,))


ModelBuilder = Callable[[ModelConfig], nn.ModelGraph]


class ModelRegistry:
    """Maps model kinds to their builder functions."""

    def __init__(self) -> None:
        self._builders: Dict[ModelKind, ModelBuilder] = {}

    def register(self, kind: ModelKind, builder: ModelBuilder) -> None:
        self._builders[ModelKind(kind)] = builder
        logger.debug("registered model builder: %s", ModelKind(kind).value)

    def build(self, config: ModelConfig) -> nn.ModelGraph:
        try:
            builder = self._builders[config.kind]
        except KeyError:
            available = ", ".join(k.value for k in self._builders) or "none"
            raise ConfigurationError(
                f"no builder for {config.kind.value}; available: {available}"
            ) from None
        return builder(config)

    def kinds(self) -> List[str]:
        return [kind.value for kind in self._builders]


_global_registry = ModelRegistry()
_global_registry.register(ModelKind.WAVELOC_GTF, build_waveloc_gtf)
_global_registry.register(ModelKind.WAVELOC_CONV, build_waveloc_conv)
_global_registry.register(ModelKind.GCC_BASELINE, build_gcc_baseline)


def get_registry() -> ModelRegistry:
    return _global_registry


def build_model(config: ModelConfig) -> nn.ModelGraph:
    return _global_registry.build(config)


def model_kind(model: nn.ModelGraph) -> ModelKind:
    try:
        return ModelKind(model.info["kind"])
    except (KeyError, ValueError) as exc:
        raise InputError("model carries no known kind") from exc


def count_parameters(model: nn.ModelGraph, trainable_only: bool = True) -> int:
    return sum(
        node.params[role].size
        for _, node, role in model.named_tensors()
        if node.trainable or not trainable_only
    )


def predict_batch(
    model: nn.ModelGraph, batch: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    """Posteriors for a stack of frames (or GCC features), in inference mode."""
    batch = np.asarray(batch)
    if len(batch) == 0:
        return np.zeros((0, model.num_classes), dtype=model.dtype)
    parts = [
        nn.forward(model, batch[start : start + batch_size], mode="infer")
        for start in range(0, len(batch), batch_size)
    ]
    return np.concatenate(parts, axis=0)


def predict_frame(
    model: nn.ModelGraph, frame: Union[BinauralFrame, GccFeature]
) -> np.ndarray:
    """Return the 37-class posterior for one frame."""
    expects_gcc = model_kind(model) is ModelKind.GCC_BASELINE
    if expects_gcc and not isinstance(frame, GccFeature):
        raise InputError("the GCC baseline expects a GccFeature")
    if not expects_gcc and not isinstance(frame, BinauralFrame):
        raise InputError(f"{model_kind(model).value} expects a BinauralFrame")
    data = frame.values if expects_gcc else frame.data
    return nn.forward(model, data[None], mode="infer")[0]


def save_checkpoint(
    model: nn.ModelGraph, path: PathLike, metadata: Optional[Dict[str, Any]] = None
) -> Path:
    """Write ``model`` as a WLOC checkpoint.

    Layout: magic ``WLOC``, uint32 version, uint64 header length (all little
    endian), a YAML header, then float32 little-endian tensor payloads in
    header order.
    """
    kind = model_kind(model)
    tensors = []
    payloads = []
    offset = 0
    for name, node, role in model.named_tensors():
        data = np.ascontiguousarray(node.params[role], dtype="<f4").tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(node.params[role].shape),
                "offset": offset,
                "nbytes": len(data),
                "trainable": bool(node.trainable),
            }
        )
        payloads.append(data)
        offset += len(data)
    header = {
        "kind": kind.value,
        "config": model.info.get("config", {}),
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "tensors": tensors,
        "metadata": dict(metadata or model.info.get("metadata", {})),
    }
    header_bytes = yaml.safe_dump(header, sort_keys=False).encode("utf-8")
    blob = b"".join(
        [
            _PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)),
            header_bytes,
            *payloads,
        ]
    )
    logger.info(
        "saving %s checkpoint (%d tensors) to %s", kind.value, len(tensors), path
    )
    return atomic_write_bytes(path, blob)


def read_checkpoint_header(blob: bytes) -> Dict[str, Any]:
    if len(blob) < _PREAMBLE.size:
        raise CheckpointError("checkpoint truncated before header")
    magic, version, header_len = _PREAMBLE.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, not a WLOC checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    end = _PREAMBLE.size + header_len
    if len(blob) < end:
        raise CheckpointError("checkpoint truncated inside header")
    try:
        header = yaml.safe_load(blob[_PREAMBLE.size : end].decode("utf-8"))
    except (UnicodeDecodeError, yaml.YAMLError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    if not isinstance(header, dict) or "tensors" not in header:
        raise CheckpointError("checkpoint header has no tensor index")
    header["_payload_start"] = end
    return header


def load_checkpoint(path: PathLike) -> nn.ModelGraph:
    """Rebuild the model described by a checkpoint and load its tensors.

    Raises:
        CheckpointError: on bad magic or version, truncation, or a tensor whose
            name, shape or trainable flag disagrees with the rebuilt model.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    header = read_checkpoint_header(blob)
    try:
        config = ModelConfig.from_dict(header.get("config") or {"kind": header["kind"]})
    except (ConfigurationError, KeyError, TypeError) as exc:
        raise CheckpointError(f"invalid model config in checkpoint: {exc}") from exc
    model = build_model(config)
    start = header["_payload_start"]
    expected = list(model.named_tensors())
    entries = header["tensors"]
    if len(entries) != len(expected):
        raise CheckpointError(
            f"checkpoint lists {len(entries)} tensors, model has {len(expected)}"
        )
    for entry, (name, node, role) in zip(entries, expected):
        if entry.get("name") != name:
            raise CheckpointError(f"tensor {entry.get('name')}: expected {name}")
        shape = tuple(entry["shape"])
        if shape != node.params[role].shape:
            raise CheckpointError(
                f"tensor {name}: shape {shape} != {node.params[role].shape}"
            )
        if bool(entry.get("trainable")) != node.trainable:
            raise CheckpointError(f"tensor {name}: trainable flag mismatch")
        begin = start + int(entry["offset"])
        nbytes = int(entry["nbytes"])
        if nbytes != int(np.prod(shape)) * 4:
            raise CheckpointError(f"tensor {name}: {nbytes} bytes for shape {shape}")
        if begin + nbytes > len(blob):
            raise CheckpointError(f"tensor {name}: checkpoint truncated")
        values = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=begin)
        node.params[role] = values.reshape(shape).astype(model.dtype)
    model.info["metadata"] = header.get("metadata") or {}
    logger.info("loaded %s checkpoint from %s", config.kind.value, path)
    return model
