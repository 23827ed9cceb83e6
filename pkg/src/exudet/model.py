"""Model assembly, parameter accounting and checkpoint serialization.

The default architecture is two small convolutional blocks (9 and 18 filters,
3x3 kernels, each followed by optional batch norm, ReLU and 2x2 max pooling)
feeding a 90-40-2 fully connected head.  With batch norm enabled the network
holds 4,729,568 parameters.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict, fields
from typing import BinaryIO, Iterator, Optional

import numpy as np

from . import tensor
from .errors import ConfigError, FormatError, ShapeError, StateError
from .layers import (
    BatchNorm2d,
    Conv2d,
    Dropout,
    Flatten,
    Layer,
    Linear,
    MaxPool2d,
    ReLU,
)

CHECKPOINT_MAGIC = b"EXCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelSpec:
    """Declarative architecture description; defaults give the full network."""

    input_shape: tuple = (3, 224, 224)
    conv1_filters: int = 9
    conv2_filters: int = 18
    kernel_size: int = 3
    pool_size: int = 2
    fc1_units: int = 90
    fc2_units: int = 40
    classes: int = 2
    use_batchnorm: bool = True
    dropout_rate: float = 0.0

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ConfigError(f"input_shape must be (C,H,W) >= 1, got {self.input_shape}")
        for name in ("conv1_filters", "conv2_filters", "kernel_size", "pool_size",
                     "fc1_units", "fc2_units"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        self.flattened_units()  # reject inputs too small for the conv stack

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        expected = {f.name for f in fields(cls)}
        if set(d) != expected:
            raise FormatError(
                f"bad model spec keys: missing {sorted(expected - set(d))}, "
                f"unknown {sorted(set(d) - expected)}")
        try:
            return cls(**{k: (tuple(v) if k == "input_shape" else v) for k, v in d.items()})
        except (TypeError, ConfigError) as exc:
            raise FormatError(f"bad model spec: {exc}") from exc

    def flattened_units(self) -> int:
        """Feature count entering the first fully connected layer."""
        c, h, w = self.input_shape
        for _ in range(2):
            h, w = (d - (self.kernel_size - 1) for d in (h, w))
            if h < 1 or w < 1:
                raise ConfigError(f"input {self.input_shape} too small for two conv blocks")
            h, w = h // self.pool_size, w // self.pool_size
            if h < 1 or w < 1:
                raise ConfigError(f"input {self.input_shape} too small for two pool stages")
        return self.conv2_filters * h * w


class Model:
    """Ordered layer pipeline with whole-model forward/backward and modes."""

    def __init__(self, spec: ModelSpec, stages: list, dtype):
        self.spec = spec
        self.stages = stages  # list of (name, Layer)
        self.dtype = np.dtype(dtype)
        self.training = True

    def train(self):
        self.training = True
        for _, layer in self.stages:
            layer.train()

    def eval(self):
        self.training = False
        for _, layer in self.stages:
            layer.eval()

    def layer(self, name: str) -> Layer:
        for n, layer in self.stages:
            if n == name:
                return layer
        raise KeyError(name)

    def parameters(self) -> Iterator[tuple]:
        """Yield (path, Parameter) in network order, e.g. ('conv1.weight', p)."""
        for name, layer in self.stages:
            for p in layer.parameters():
                yield f"{name}.{p.name}", p

    def state_tensors(self) -> list:
        """Every array a checkpoint must persist: parameters + running stats."""
        out = []
        for name, layer in self.stages:
            for p in layer.parameters():
                out.append((f"{name}.{p.name}", p.data))
            if isinstance(layer, BatchNorm2d):
                out.append((f"{name}.running_mean", layer.running_mean))
                out.append((f"{name}.running_var", layer.running_var))
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        expected = (x.shape[0],) + self.spec.input_shape
        if x.ndim != 4 or x.shape != expected:
            raise ShapeError(f"batch shape {x.shape} != {expected}")
        self._forwarded = True
        for _, layer in self.stages:
            x = layer.forward(x)
        return x

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        if not getattr(self, "_forwarded", False):
            raise StateError("Model backward called before forward")
        grad = dlogits
        for _, layer in reversed(self.stages):
            grad = layer.backward(grad)
        return grad

    def output_shapes(self) -> list:
        """(stage name, per-sample output shape) chain, input row included."""
        c, h, w = self.spec.input_shape
        rows = [("input", (c, h, w))]
        shape: tuple = (c, h, w)
        for name, layer in self.stages:
            if isinstance(layer, Conv2d):
                ho, wo = tensor.conv_output_hw(shape[1:], (layer.kernel_size,) * 2, 1)
                shape = (layer.out_channels, ho, wo)
            elif isinstance(layer, MaxPool2d):
                shape = (shape[0], shape[1] // layer.window, shape[2] // layer.window)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Linear):
                shape = (layer.out_features,)
            rows.append((name, shape))
        return rows


def build_model(spec: ModelSpec, seed: int = 0, precision="single") -> Model:
    """Instantiate the pipeline: conv blocks, FC head, optional norm/dropout.

    All weight draws derive from ``seed``; dropout layers get their own
    deterministic substreams so identical seeds give identical runs.
    """
    dtype = tensor.resolve_dtype(precision)
    root = np.random.SeedSequence(seed)
    init_ss, drop1_ss, drop2_ss = root.spawn(3)
    rng = np.random.default_rng(init_ss)

    k = spec.kernel_size
    stages: list = []
    stages.append(("conv1", Conv2d(spec.input_shape[0], spec.conv1_filters, k,
                                   rng=rng, dtype=dtype)))
    if spec.use_batchnorm:
        stages.append(("bn1", BatchNorm2d(spec.conv1_filters, dtype=dtype)))
    stages.append(("relu1", ReLU()))
    stages.append(("pool1", MaxPool2d(spec.pool_size)))
    stages.append(("conv2", Conv2d(spec.conv1_filters, spec.conv2_filters, k,
                                   rng=rng, dtype=dtype)))
    if spec.use_batchnorm:
        stages.append(("bn2", BatchNorm2d(spec.conv2_filters, dtype=dtype)))
    stages.append(("relu2", ReLU()))
    stages.append(("pool2", MaxPool2d(spec.pool_size)))
    stages.append(("flatten", Flatten()))
    stages.append(("fc1", Linear(spec.flattened_units(), spec.fc1_units,
                                 rng=rng, dtype=dtype)))
    stages.append(("relu3", ReLU()))
    if spec.dropout_rate > 0:
        stages.append(("drop1", Dropout(spec.dropout_rate,
                                        rng=np.random.default_rng(drop1_ss))))
    stages.append(("fc2", Linear(spec.fc1_units, spec.fc2_units, rng=rng, dtype=dtype)))
    stages.append(("relu4", ReLU()))
    if spec.dropout_rate > 0:
        stages.append(("drop2", Dropout(spec.dropout_rate,
                                        rng=np.random.default_rng(drop2_ss))))
    stages.append(("out", Linear(spec.fc2_units, spec.classes, rng=rng, dtype=dtype)))
    return Model(spec, stages, dtype)


# --- parameter accounting ----------------------------------------------------

DISPLAY_NAMES = {
    "input": "Input",
    "conv1": "Conv-1",
    "bn1": "BatchNorm2d",
    "relu1": "ReLU",
    "pool1": "Max-Pool",
    "conv2": "Conv-2",
    "bn2": "BatchNorm2d",
    "relu2": "ReLU",
    "pool2": "Max-Pool",
    "flatten": "Flatten",
    "fc1": "FullyConv1",
    "relu3": "ReLU",
    "drop1": "Dropout",
    "fc2": "FullyConv2",
    "relu4": "ReLU",
    "drop2": "Dropout",
    "out": "Output",
}


@dataclass
class ParamRow:
    name: str
    output_shape: tuple
    params: Optional[int]  # None renders as "---"


@dataclass
class ParamReport:
    rows: list
    total: int

    def format_table(self) -> str:
        lines = [f"{'Layer':<14} {'Output Shape':<16} {'Parameters':>12}"]
        for row in self.rows:
            if len(row.output_shape) == 3:
                shape = f"{row.output_shape[0]}, {row.output_shape[1]}x{row.output_shape[2]}"
            else:
                shape = str(row.output_shape[0])
            params = "---" if row.params is None else f"{row.params:,}"
            lines.append(f"{row.name:<14} {shape:<16} {params:>12}")
        lines.append(f"{'Total':<14} {'':<16} {self.total:>12,}")
        return "\n".join(lines)


def count_parameters(model: Model) -> ParamReport:
    """Per-stage parameter counts plus total.

    Batch-norm rows count gamma, beta and the running mean/variance (4 values
    per channel) even though only gamma and beta receive gradients; this keeps
    the per-layer figures aligned with how summary tools usually report them.
    """
    rows = []
    for name, shape in model.output_shapes():
        if name == "input":
            rows.append(ParamRow(DISPLAY_NAMES["input"], shape, None))
            continue
        layer = model.layer(name)
        count: Optional[int]
        if isinstance(layer, (Conv2d, Linear)):
            count = layer.weight.data.size + layer.bias.data.size
        elif isinstance(layer, BatchNorm2d):
            count = 4 * layer.num_channels
        else:
            count = None
        rows.append(ParamRow(DISPLAY_NAMES.get(name, name), shape, count))
    total = sum(r.params for r in rows if r.params is not None)
    return ParamReport(rows=rows, total=total)


# --- checkpoints --------------------------------------------------------------
#
# Checkpoint layout (integers little-endian):
#
#   bytes 0..3  magic "EXCK"
#   u32         format version (1)
#   u64         header length in bytes
#   bytes       header: UTF-8 JSON {"precision": ..., "seed": ..., "spec": {...}}
#               with sorted keys and no whitespace
#   u64         tensor count
#   per tensor: u64 name length, UTF-8 name, u64 blob length, tensor blob
#               in the EXT1 stream format (see tensor module)


def save_checkpoint(model: Model, dest: BinaryIO | str, *, seed: int = 0) -> None:
    if isinstance(dest, str):
        with open(dest, "wb") as fh:
            save_checkpoint(model, fh, seed=seed)
        return
    precision = "double" if model.dtype == np.float64 else "single"
    header = json.dumps(
        {"precision": precision, "seed": seed, "spec": model.spec.to_dict()},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    dest.write(CHECKPOINT_MAGIC)
    dest.write(struct.pack("<I", CHECKPOINT_VERSION))
    dest.write(struct.pack("<Q", len(header)))
    dest.write(header)
    tensors = model.state_tensors()
    dest.write(struct.pack("<Q", len(tensors)))
    for name, arr in tensors:
        blob = io.BytesIO()
        tensor.save_tensor(arr, blob)
        raw = blob.getvalue()
        encoded = name.encode("utf-8")
        dest.write(struct.pack("<Q", len(encoded)))
        dest.write(encoded)
        dest.write(struct.pack("<Q", len(raw)))
        dest.write(raw)


def checkpoint_bytes(model: Model, *, seed: int = 0) -> bytes:
    buf = io.BytesIO()
    save_checkpoint(model, buf, seed=seed)
    return buf.getvalue()


def _read_exact(src: BinaryIO, count: int) -> bytes:
    data = src.read(count)
    if len(data) != count:
        raise FormatError(f"truncated checkpoint: wanted {count} bytes, got {len(data)}")
    return data


def load_checkpoint(src: BinaryIO | str) -> Model:
    """Rebuild a model from a checkpoint; every tensor restored bit-exactly."""
    if isinstance(src, str):
        with open(src, "rb") as fh:
            return load_checkpoint(fh)
    if _read_exact(src, 4) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic (expected EXCK)")
    (version,) = struct.unpack("<I", _read_exact(src, 4))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<Q", _read_exact(src, 8))
    try:
        header = json.loads(_read_exact(src, header_len).decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        precision = header["precision"]
        seed = header.get("seed", 0)
    except (KeyError, ValueError, ConfigError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from exc

    loaded = {}
    (count,) = struct.unpack("<Q", _read_exact(src, 8))
    for _ in range(count):
        (name_len,) = struct.unpack("<Q", _read_exact(src, 8))
        name = _read_exact(src, name_len).decode("utf-8")
        (blob_len,) = struct.unpack("<Q", _read_exact(src, 8))
        loaded[name] = tensor.load_tensor_bytes(_read_exact(src, blob_len))

    model = build_model(spec, seed=seed, precision=precision)
    expected = model.state_tensors()
    expected_names = [name for name, _ in expected]
    if sorted(loaded) != sorted(expected_names):
        raise FormatError(
            f"checkpoint tensors {sorted(loaded)} do not match the embedded "
            f"spec's layout {sorted(expected_names)}")
    for name, arr in expected:
        src_arr = loaded[name]
        if src_arr.shape != arr.shape:
            raise FormatError(
                f"tensor {name} has shape {src_arr.shape}, spec requires {arr.shape}")
        arr[...] = src_arr.astype(model.dtype, copy=False)
    return model
