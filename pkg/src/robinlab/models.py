"""Parameterized classifiers (MLP, small CNN) with a bit-exact checkpoint format.

A model is a layer list plus a named parameter map. ``forward`` builds the
computation on the gradient tape; ``predict``/``logits_of`` run detached.
Checkpoints are a little-endian binary container (extension ``.rbn``).
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "Dense",
    "Conv",
    "Relu",
    "Flatten",
    "ModelSpec",
    "Parameters",
    "CheckpointError",
    "BadMagicError",
    "VersionError",
    "TruncatedError",
    "mlp_spec",
    "cnn_spec",
    "describe_spec",
    "parse_spec",
    "classification_loss",
    "init_model",
    "forward",
    "logits_of",
    "predict",
    "predict_from_logits",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"RBN1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel: int
    padding: int = 0


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Dense, Conv, Relu, Flatten]


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer descriptors plus the per-example input shape.

    input_shape excludes the batch axis: (features,) for dense stacks,
    (channels, height, width) for convolutional ones. Construction checks
    that adjacent layer dimensions compose.
    """

    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]
    output_dim: int = field(init=False)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.input_shape)
        if not shape or any(s < 1 for s in shape):
            raise ValueError(f"invalid input shape {self.input_shape}")
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if len(shape) != 1 or shape[0] != layer.in_dim:
                    raise ValueError(
                        f"layer {i}: dense(in={layer.in_dim}) cannot follow shape {shape}")
                shape = (layer.out_dim,)
            elif isinstance(layer, Conv):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ValueError(
                        f"layer {i}: conv(in={layer.in_channels}) cannot follow shape {shape}")
                h = shape[1] + 2 * layer.padding - layer.kernel + 1
                w = shape[2] + 2 * layer.padding - layer.kernel + 1
                if h < 1 or w < 1:
                    raise ValueError(f"layer {i}: kernel {layer.kernel} exceeds input {shape}")
                shape = (layer.out_channels, h, w)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif not isinstance(layer, Relu):
                raise TypeError(f"unknown layer {layer!r}")
        if len(shape) != 1:
            raise ValueError(f"model must end with a dense stage, final shape {shape}")
        if shape[0] < 1:
            raise ValueError("output_dim must be >= 1")
        object.__setattr__(self, "output_dim", shape[0])


@dataclass
class Parameters:
    """Named map layer-id -> Tensor, plus the seed used at initialization."""

    tensors: dict[str, Tensor]
    seed: int | None = None

    def detached(self) -> "Parameters":
        """Share buffers but drop gradient participation (for attacks/eval)."""
        return Parameters({k: t.detached() for k, t in self.tensors.items()}, self.seed)

    def copy(self) -> "Parameters":
        return Parameters(
            {k: Tensor(t.data.copy(), requires_grad=t.requires_grad)
             for k, t in self.tensors.items()},
            self.seed)


def mlp_spec(in_dim: int, hidden: tuple[int, ...], out_dim: int) -> ModelSpec:
    """Fully-connected ReLU stack, e.g. mlp_spec(2, (64, 64), k)."""
    layers: list[Layer] = []
    prev = in_dim
    for h in hidden:
        layers += [Dense(prev, h), Relu()]
        prev = h
    layers.append(Dense(prev, out_dim))
    return ModelSpec(tuple(layers), (in_dim,))


def cnn_spec(in_channels: int, height: int, width: int, out_dim: int,
             channels: tuple[int, ...] = (8, 16), kernel: int = 3) -> ModelSpec:
    """Small conv-relu stack ending in a single dense readout."""
    layers: list[Layer] = []
    c, h, w = in_channels, height, width
    for oc in channels:
        layers += [Conv(c, oc, kernel), Relu()]
        c, h, w = oc, h - kernel + 1, w - kernel + 1
    layers += [Flatten(), Dense(c * h * w, out_dim)]
    return ModelSpec(tuple(layers), (in_channels, height, width))


def init_model(spec: ModelSpec, seed: int) -> Parameters:
    """He-style init: weights ~ N(0, 2/fan_in), biases zero. Deterministic."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            std = np.sqrt(2.0 / layer.in_dim)
            tensors[f"layer{i}.weight"] = Tensor(
                rng.normal(0.0, std, size=(layer.in_dim, layer.out_dim)),
                requires_grad=True)
            tensors[f"layer{i}.bias"] = Tensor(
                np.zeros(layer.out_dim), requires_grad=True)
        elif isinstance(layer, Conv):
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            std = np.sqrt(2.0 / fan_in)
            tensors[f"layer{i}.weight"] = Tensor(
                rng.normal(0.0, std, size=(layer.out_channels, layer.in_channels,
                                           layer.kernel, layer.kernel)),
                requires_grad=True)
            tensors[f"layer{i}.bias"] = Tensor(
                np.zeros(layer.out_channels), requires_grad=True)
    return Parameters(tensors, seed)


def forward(spec: ModelSpec, params: Parameters, x: Tensor) -> Tensor:
    """Logits for a batch; recorded on the tape when gradients are requested."""
    expect = (x.shape[0],) + spec.input_shape if x.data.ndim > 1 else spec.input_shape
    if x.shape != expect:
        raise ad.DimensionError(
            f"forward: input shape {x.shape}, model expects {expect}")
    h = x
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            h = ad.add_bias(ad.matmul(h, params.tensors[f"layer{i}.weight"]),
                            params.tensors[f"layer{i}.bias"])
        elif isinstance(layer, Conv):
            h = ad.conv2d(h, params.tensors[f"layer{i}.weight"],
                          params.tensors[f"layer{i}.bias"], padding=layer.padding)
        elif isinstance(layer, Relu):
            h = ad.relu(h)
        elif isinstance(layer, Flatten):
            h = ad.flatten(h)
    return h


def logits_of(spec: ModelSpec, params: Parameters, x: np.ndarray) -> np.ndarray:
    """Detached forward pass on a plain array (no tape)."""
    return forward(spec, params.detached(), ad.constant(x)).data


def predict_from_logits(logits: np.ndarray) -> np.ndarray:
    """argmax with ties broken toward the lowest class index.

    Single-logit outputs (n,1) are scored as class 1 iff the logit is
    strictly positive.
    """
    if logits.ndim != 2:
        raise ad.DimensionError(f"predict: logits rank {logits.ndim}, need 2")
    if logits.shape[1] == 1:
        return (logits[:, 0] > 0.0).astype(np.int64)
    return logits.argmax(axis=1).astype(np.int64)


def predict(spec: ModelSpec, params: Parameters, x: np.ndarray) -> np.ndarray:
    return predict_from_logits(logits_of(spec, params, x))


def classification_loss(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy; single-logit outputs are lifted to a 2-class pair so
    the sigmoid binary loss and the multiclass loss share one code path."""
    if logits.shape[1] == 1:
        logits = ad.pair_logits(logits)
    return ad.softmax_cross_entropy(logits, labels, reduction=reduction)


def describe_spec(spec: ModelSpec) -> str:
    """Compact text form, e.g. "dense:2:64|relu|dense:64:1@input=2"."""
    parts = []
    for layer in spec.layers:
        if isinstance(layer, Dense):
            parts.append(f"dense:{layer.in_dim}:{layer.out_dim}")
        elif isinstance(layer, Conv):
            parts.append(f"conv:{layer.in_channels}:{layer.out_channels}"
                         f":{layer.kernel}:{layer.padding}")
        elif isinstance(layer, Relu):
            parts.append("relu")
        else:
            parts.append("flatten")
    return "|".join(parts) + "@input=" + "x".join(str(d) for d in spec.input_shape)


def parse_spec(text: str) -> ModelSpec:
    body, _, tail = text.partition("@input=")
    if not tail:
        raise ValueError(f"spec string {text!r} lacks an @input= suffix")
    input_shape = tuple(int(d) for d in tail.split("x"))
    layers: list[Layer] = []
    for part in body.split("|"):
        fields = part.split(":")
        if fields[0] == "dense":
            layers.append(Dense(int(fields[1]), int(fields[2])))
        elif fields[0] == "conv":
            layers.append(Conv(int(fields[1]), int(fields[2]),
                               int(fields[3]), int(fields[4])))
        elif fields[0] == "relu":
            layers.append(Relu())
        elif fields[0] == "flatten":
            layers.append(Flatten())
        else:
            raise ValueError(f"unknown layer {part!r} in spec string")
    return ModelSpec(tuple(layers), input_shape)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def save_checkpoint(params: Parameters) -> bytes:
    """Serialize: magic "RBN1", version u32, count u32, then per tensor
    name length u32 + UTF-8 name, rank u32, dims u32 each, float64 LE payload.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(params.tensors)))
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.data.ndim))
        for d in t.data.shape:
            buf.write(struct.pack("<I", d))
        buf.write(t.data.astype("<f8", copy=False).tobytes(order="C"))
    return buf.getvalue()


def _read(buf: io.BytesIO, n: int, what: str) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise TruncatedError(f"checkpoint truncated while reading {what}")
    return raw


def load_checkpoint(data: bytes) -> Parameters:
    buf = io.BytesIO(data)
    magic = _read(buf, 4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad checkpoint magic {magic!r}")
    version, count = struct.unpack("<II", _read(buf, 8, "header"))
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read(buf, 4, "name length"))
        name = _read(buf, name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", _read(buf, 4, "rank"))
        dims = struct.unpack(f"<{rank}I", _read(buf, 4 * rank, "dims")) if rank else ()
        size = int(np.prod(dims)) if rank else 1
        payload = _read(buf, 8 * size, f"payload of {name}")
        arr = np.frombuffer(payload, dtype="<f8").reshape(dims)
        tensors[name] = Tensor(arr, requires_grad=True)
    if buf.read(1):
        raise CheckpointError("trailing bytes after final tensor")
    return Parameters(tensors, seed=None)
