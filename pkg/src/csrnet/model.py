"""CSRNet layer graphs, forward/backward execution and weight files."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import CorruptFileError, WeightShapeError
from .tensor import (DTYPE, ConvSpec, ConvWeights, PoolIndices, as_tensor4, conv2d_backward,
                     conv2d_forward, effective_kernel_size, maxpool2x2_backward,
                     maxpool2x2_forward, relu_backward, relu_forward)

INIT_STD = 0.01


@dataclass(frozen=True)
class Conv:
    k: int
    out_channels: int
    dilation: int = 1
    relu: bool = True

    def __str__(self):
        return f"conv{self.k}-{self.out_channels}-{self.dilation}"


@dataclass(frozen=True)
class MaxPool2x2:
    def __str__(self):
        return "max-pooling"


LayerSpec = Union[Conv, MaxPool2x2]


@dataclass(frozen=True)
class NetworkConfig:
    name: str
    layers: tuple
    input_channels: int = 3

    def conv_specs(self) -> list[ConvSpec]:
        """ConvSpec per conv layer, in order, with channel counts threaded through."""
        specs, channels = [], self.input_channels
        for layer in self.layers:
            if isinstance(layer, Conv):
                specs.append(ConvSpec(channels, layer.out_channels, layer.k, layer.dilation))
                channels = layer.out_channels
        return specs

    @property
    def pool_count(self) -> int:
        return sum(isinstance(layer, MaxPool2x2) for layer in self.layers)


def _conv_block(*widths, dilation=1):
    return [Conv(3, wd, dilation) for wd in widths]


M = MaxPool2x2()
FRONT_END = (_conv_block(64, 64) + [M] + _conv_block(128, 128) + [M]
             + _conv_block(256, 256, 256) + [M] + _conv_block(512, 512, 512))
BACK_END_WIDTHS = (512, 512, 512, 256, 128, 64)
BACK_END_DILATIONS = {
    "A": (1, 1, 1, 1, 1, 1),
    "B": (2, 2, 2, 2, 2, 2),
    "C": (2, 2, 2, 4, 4, 4),
    "D": (4, 4, 4, 4, 4, 4),
}
OUTPUT_LAYER = Conv(1, 1, 1, relu=False)


def build_config(name: str) -> NetworkConfig:
    """Built-in networks: CSRNet columns A-D, or the small 'table1' reference net."""
    key = name.strip()
    if key.upper() in BACK_END_DILATIONS:
        key = key.upper()
        back = [Conv(3, wd, r) for wd, r in zip(BACK_END_WIDTHS, BACK_END_DILATIONS[key])]
        return NetworkConfig(key, tuple(FRONT_END + back + [OUTPUT_LAYER]))
    if key.lower() in ("table1", "table1ref"):
        # CR(32,3)-M-CR(64,3)-M-CR(64,3)-M-CR(32,3)-CR(32,3)-CR(1,1)
        layers = [Conv(3, 32), M, Conv(3, 64), M, Conv(3, 64), M, Conv(3, 32), Conv(3, 32),
                  OUTPUT_LAYER]
        return NetworkConfig("table1", tuple(layers))
    raise ValueError(f"unknown network config {name!r} (expected A, B, C, D or table1)")


def param_count(config: NetworkConfig, include_bias: bool = False) -> int:
    total = 0
    for spec in config.conv_specs():
        total += spec.in_channels * spec.out_channels * spec.kernel_size ** 2
        if include_bias:
            total += spec.out_channels
    return total


def receptive_field(config: NetworkConfig) -> list[int]:
    """Receptive field on the input grid after each layer."""
    rf, jump, out = 1, 1, []
    for layer in config.layers:
        if isinstance(layer, Conv):
            rf += (effective_kernel_size(layer.k, layer.dilation) - 1) * jump
        else:
            rf += jump
            jump *= 2
        out.append(rf)
    return out


@dataclass
class ParamStore:
    layers: list  # ConvWeights per conv layer

    def __len__(self):
        return len(self.layers)

    def copy(self) -> "ParamStore":
        return ParamStore([ConvWeights(w.kernel.copy(), w.bias.copy()) for w in self.layers])

    def check(self, config: NetworkConfig):
        specs = config.conv_specs()
        if len(specs) != len(self.layers):
            raise WeightShapeError(
                f"config {config.name} has {len(specs)} conv layers, store has {len(self.layers)}")
        for idx, (spec, w) in enumerate(zip(specs, self.layers)):
            try:
                w.check(spec)
            except ValueError as exc:
                raise WeightShapeError(f"layer {idx}: {exc}") from None

    def astype(self, dtype) -> "ParamStore":
        return ParamStore([ConvWeights(w.kernel.astype(dtype), w.bias.astype(dtype))
                           for w in self.layers])


def zero_params(config: NetworkConfig, dtype=DTYPE) -> ParamStore:
    return ParamStore([ConvWeights.zeros(spec, dtype) for spec in config.conv_specs()])


def init_weights(config: NetworkConfig, seed: int, std: float = INIT_STD) -> ParamStore:
    """Kernels ~ N(0, std^2) drawn layer by layer from one seeded generator; zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for spec in config.conv_specs():
        k = spec.kernel_size
        kernel = rng.normal(0.0, std, size=(spec.out_channels, spec.in_channels, k, k))
        layers.append(ConvWeights(kernel.astype(DTYPE), np.zeros(spec.out_channels, dtype=DTYPE)))
    return ParamStore(layers)


@dataclass
class Tape:
    """Everything backward() needs from a forward pass."""
    config: NetworkConfig
    params: ParamStore
    output_shape: tuple
    # per layer: ("conv", idx, spec, input, pre_relu or None) or ("pool", indices)
    records: list = field(default_factory=list)


def forward(config: NetworkConfig, params: ParamStore, x: np.ndarray,
            keep_intermediates: bool = False) -> tuple[np.ndarray, Optional[Tape]]:
    x = as_tensor4(x)
    if x.shape[1] != config.input_channels:
        raise ValueError(f"input has {x.shape[1]} channels, config expects {config.input_channels}")
    need = 2 ** config.pool_count
    if x.shape[2] < need or x.shape[3] < need:
        raise ValueError(
            f"input {x.shape[2]}x{x.shape[3]} too small for {config.pool_count} poolings (need >= {need})")
    params.check(config)
    specs = config.conv_specs()
    records = [] if keep_intermediates else None
    conv_idx = 0
    for layer in config.layers:
        if isinstance(layer, Conv):
            spec = specs[conv_idx]
            y = conv2d_forward(x, spec, params.layers[conv_idx])
            if records is not None:
                records.append(("conv", conv_idx, spec, x, y if layer.relu else None))
            x = relu_forward(y) if layer.relu else y
            conv_idx += 1
        else:
            x, idx = maxpool2x2_forward(x)
            if records is not None:
                records.append(("pool", idx))
    tape = Tape(config, params, x.shape, records) if keep_intermediates else None
    return x, tape


def backward(tape: Tape, grad_output: np.ndarray) -> ParamStore:
    """Parameter gradients for a forward pass recorded with keep_intermediates."""
    if tape is None:
        raise ValueError("backward needs a tape from forward(..., keep_intermediates=True)")
    grad = np.asarray(grad_output)
    if grad.shape != tape.output_shape:
        raise ValueError(f"grad_output shape {grad.shape} != network output shape {tape.output_shape}")
    grads: list = [None] * len(tape.params)
    for rec in reversed(tape.records):
        if rec[0] == "pool":
            grad = maxpool2x2_backward(rec[1], grad)
            continue
        _, idx, spec, inp, pre_relu = rec
        if pre_relu is not None:
            grad = relu_backward(pre_relu, grad)
        grad, gk, gb = conv2d_backward(inp, spec, tape.params.layers[idx], grad)
        grads[idx] = ConvWeights(gk, gb)
    return ParamStore(grads)


def predict_density(config: NetworkConfig, params: ParamStore, image: np.ndarray) -> np.ndarray:
    """Single-image density map with negatives clamped to zero."""
    out, _ = forward(config, params, image)
    return np.maximum(out[0, 0], 0.0)


# --- weight files -----------------------------------------------------------
# "CSRW", u32 version, u32 layer_count, then per layer:
# u32 out, u32 in, u32 k, out*in*k*k f32 kernel, out f32 bias (all little-endian)

WEIGHT_MAGIC = b"CSRW"
WEIGHT_VERSION = 1


def save_weights(store: ParamStore, path: Union[str, Path]):
    parts = [WEIGHT_MAGIC, struct.pack("<II", WEIGHT_VERSION, len(store.layers))]
    for w in store.layers:
        out_c, in_c, k, k2 = w.kernel.shape
        if k != k2:
            raise ValueError("only square kernels can be stored")
        parts.append(struct.pack("<III", out_c, in_c, k))
        parts.append(np.ascontiguousarray(w.kernel, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(w.bias, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_weights(path: Union[str, Path], config: Optional[NetworkConfig] = None) -> ParamStore:
    data = Path(path).read_bytes()
    pos = 0

    def take(nbytes: int, what: str) -> bytes:
        nonlocal pos
        if pos + nbytes > len(data):
            raise CorruptFileError(f"{path}: truncated while reading {what}")
        chunk = data[pos:pos + nbytes]
        pos += nbytes
        return chunk

    if take(4, "magic") != WEIGHT_MAGIC:
        raise CorruptFileError(f"{path}: bad magic, not a CSRW weight file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != WEIGHT_VERSION:
        raise CorruptFileError(f"{path}: unsupported weight file version {version}")
    layers = []
    for idx in range(count):
        out_c, in_c, k = struct.unpack("<III", take(12, f"layer {idx} header"))
        n = out_c * in_c * k * k
        kernel = np.frombuffer(take(4 * n, f"layer {idx} kernel"), dtype="<f4")
        bias = np.frombuffer(take(4 * out_c, f"layer {idx} bias"), dtype="<f4")
        layers.append(ConvWeights(kernel.reshape(out_c, in_c, k, k).astype(DTYPE),
                                  bias.astype(DTYPE)))
    if pos != len(data):
        raise CorruptFileError(f"{path}: {len(data) - pos} trailing bytes after last layer")
    store = ParamStore(layers)
    if config is not None:
        store.check(config)
    return store
