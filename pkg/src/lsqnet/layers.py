"""Quantized linear/conv layers, reference models, and checkpoints.

Layers quantize their input activations and their weights through
learnable per-layer step sizes before the matmul or convolution, keep
normalization and biases in full precision, and follow the boundary
policy: the first and last matmul-bearing layers always run at the
boundary precision (8-bit by default) regardless of the interior
precision.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .quantizer import (QuantSpec, StepSizeParam, gscale_value, init_step_size,
                        quantize)
from .tensor import Tensor, conv2d

SUPPORTED_BITS = (2, 3, 4, 8)
CKPT_MAGIC = b"LSQC\x01\x00"
CKPT_VERSION = 1


class BatchNorm:
    """Per-feature normalization with batch stats in training, running at eval."""

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        is_conv = x.data.ndim == 4
        axes = (0, 2, 3) if is_conv else (0,)
        pshape = (1, self.num_features, 1, 1) if is_conv else (self.num_features,)
        gamma = self.gamma.reshape(pshape) if is_conv else self.gamma
        beta = self.beta.reshape(pshape) if is_conv else self.beta
        if training:
            mu = x.mean(axis=axes, keepdims=True)
            d = x - mu
            var = (d * d).mean(axis=axes, keepdims=True)
            xhat = d / (var + self.eps).sqrt()
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
            self.running_var = (1 - m) * self.running_var + m * var.data.reshape(-1)
        else:
            rm = Tensor(self.running_mean.reshape(pshape))
            rv = Tensor(self.running_var.reshape(pshape))
            xhat = (x - rm) / (rv + self.eps).sqrt()
        return xhat * gamma + beta


@dataclass
class QuantizedLayer:
    """One matmul-bearing layer with optional input/weight quantizers."""

    kind: str  # "linear" | "conv"
    name: str
    weight: Tensor
    bias: Tensor
    weight_step: Optional[StepSizeParam] = None
    weight_spec: Optional[QuantSpec] = None
    act_step: Optional[StepSizeParam] = None
    act_spec: Optional[QuantSpec] = None
    norm: Optional[BatchNorm] = None
    activation: str = "none"  # "relu" | "none"
    stride: int = 1
    padding: int = 0
    gscale_mode: str = "nqp"  # gradient-scale policy for this layer's steps
    gscale_mult: float = 1.0

    @property
    def quantized(self) -> bool:
        return self.weight_step is not None

    @property
    def n_weights(self) -> int:
        return self.weight.size

    def quantized_operands(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Quantize the layer input and weights for the training path."""
        if self.act_step is not None:
            if not self.act_step.initialized:
                n_features = x.size // x.shape[0]
                self.act_step.initialize_from(x.data, self.act_spec.qp, n_features)
                self.act_step.grad_scale = self.gscale_mult * gscale_value(
                    self.gscale_mode, n_features, self.act_spec.qp)
            x = quantize(x, self.act_step, self.act_spec)
        if self.weight_step is not None:
            w = quantize(self.weight, self.weight_step, self.weight_spec)
        else:
            w = self.weight
        return x, w

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        x, w = self.quantized_operands(x)
        if self.kind == "linear":
            if x.data.ndim != 2:
                x = x.flatten2d()
            z = x @ w + self.bias
        elif self.kind == "conv":
            z = conv2d(x, w, self.stride, self.padding) + self.bias.reshape(1, -1, 1, 1)
        else:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.norm is not None:
            z = self.norm.forward(z, training)
        if self.activation == "relu":
            z = z.relu()
        return z


@dataclass
class ModelConfig:
    """Architecture plus precision policy for one model."""

    arch: str = "mlp"  # "mlp" | "cnn"
    input_dim: int = 784  # mlp flat input size
    input_shape: tuple = (1, 8, 8)  # cnn (C, H, W)
    hidden: tuple = (256, 128)
    conv_channels: tuple = (32, 64)
    kernel: int = 3
    conv_stride: int = 2
    fc_hidden: int = 64
    classes: int = 10
    bits: Optional[int] = None  # interior precision; None = full precision
    boundary_bits: int = 8

    def validate(self) -> None:
        if self.arch not in ("mlp", "cnn"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.bits is not None and self.bits not in SUPPORTED_BITS:
            raise ValueError(f"unsupported precision {self.bits}; pick from {SUPPORTED_BITS}")
        if self.boundary_bits not in SUPPORTED_BITS:
            raise ValueError(f"unsupported boundary precision {self.boundary_bits}")
        if self.classes < 2:
            raise ValueError("need at least two classes")

    def to_dict(self) -> dict:
        return {
            "arch": self.arch, "input_dim": self.input_dim,
            "input_shape": list(self.input_shape), "hidden": list(self.hidden),
            "conv_channels": list(self.conv_channels), "kernel": self.kernel,
            "conv_stride": self.conv_stride, "fc_hidden": self.fc_hidden,
            "classes": self.classes, "bits": self.bits,
            "boundary_bits": self.boundary_bits,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("input_shape", "hidden", "conv_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class QuantizedModel:
    """Ordered quantized layers behind a single forward pass."""

    def __init__(self, layers: list[QuantizedLayer], config: ModelConfig):
        self.layers = layers
        self.config = config

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def parameters(self) -> list[tuple[str, Tensor, str]]:
        """(name, tensor, kind) for every learnable tensor.

        Kinds: "weight", "bias", "norm", "step". Step sizes for
        activations appear even before lazy initialization so the
        optimizer can hold state for them.
        """
        params = []
        for layer in self.layers:
            params.append((f"{layer.name}.weight", layer.weight, "weight"))
            params.append((f"{layer.name}.bias", layer.bias, "bias"))
            if layer.norm is not None:
                params.append((f"{layer.name}.norm.gamma", layer.norm.gamma, "norm"))
                params.append((f"{layer.name}.norm.beta", layer.norm.beta, "norm"))
            if layer.weight_step is not None:
                params.append((f"{layer.name}.weight_step", layer.weight_step.step, "step"))
            if layer.act_step is not None:
                params.append((f"{layer.name}.act_step", layer.act_step.step, "step"))
        return params

    def zero_grad(self) -> None:
        for _, t, _ in self.parameters():
            t.zero_grad()

    # -- state ----------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, t, _ in self.parameters():
            out[name] = t.data
        for layer in self.layers:
            if layer.norm is not None:
                out[f"{layer.name}.norm.running_mean"] = layer.norm.running_mean
                out[f"{layer.name}.norm.running_var"] = layer.norm.running_var
        return out

    def step_params(self) -> dict[str, StepSizeParam]:
        out = {}
        for layer in self.layers:
            if layer.weight_step is not None:
                out[f"{layer.name}.weight_step"] = layer.weight_step
            if layer.act_step is not None:
                out[f"{layer.name}.act_step"] = layer.act_step
        return out

    def meta_state(self) -> dict:
        return {
            name: {"initialized": p.initialized, "grad_scale": p.grad_scale,
                   "owner": p.owner, "count": p.count}
            for name, p in self.step_params().items()
        }

    def load_state(self, arrays: dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
        own = self.state_arrays()
        for name, arr in arrays.items():
            if name not in own:
                raise KeyError(f"unknown state entry {name!r}")
            if own[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{own[name].shape} vs {arr.shape}")
            own[name][...] = arr
        if meta:
            steps = self.step_params()
            for name, m in meta.items():
                steps[name].initialized = bool(m["initialized"])
                steps[name].grad_scale = float(m["grad_scale"])
                steps[name].owner = m.get("owner", steps[name].owner)
                steps[name].count = int(m.get("count", steps[name].count))


def _init_weight(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _make_layer(kind: str, name: str, weight: np.ndarray, out_features: int,
                bits: Optional[int], norm: bool, activation: str,
                stride: int = 1, padding: int = 0) -> QuantizedLayer:
    layer = QuantizedLayer(
        kind=kind, name=name,
        weight=Tensor(weight, requires_grad=True),
        bias=Tensor(np.zeros(out_features), requires_grad=True),
        norm=BatchNorm(out_features) if norm else None,
        activation=activation, stride=stride, padding=padding)
    if bits is not None:
        layer.weight_spec = QuantSpec(bits, signed=True)
        layer.act_spec = QuantSpec(bits, signed=False)
        wstep = StepSizeParam(step=Tensor(1.0, requires_grad=True), owner="weight")
        wstep.initialize_from(weight, layer.weight_spec.qp, weight.size)
        layer.weight_step = wstep
        layer.act_step = StepSizeParam.uninitialized(owner="activation")
    return layer


def conv_output_hw(h: int, w: int, kernel: int, stride: int, padding: int) -> tuple[int, int]:
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError("convolution output collapsed to zero extent")
    return oh, ow


def layer_precisions(cfg: ModelConfig, n_layers: int) -> list[Optional[int]]:
    """Per-layer bit widths under the first/last boundary policy."""
    if cfg.bits is None:
        return [None] * n_layers
    bits = [cfg.bits] * n_layers
    bits[0] = cfg.boundary_bits
    bits[-1] = cfg.boundary_bits
    return bits


def build_model(cfg: ModelConfig, rng: Optional[np.random.Generator] = None) -> QuantizedModel:
    cfg.validate()
    rng = rng or np.random.default_rng(0)
    layers: list[QuantizedLayer] = []
    if cfg.arch == "mlp":
        dims = [cfg.input_dim, *cfg.hidden, cfg.classes]
        n = len(dims) - 1
        prec = layer_precisions(cfg, n)
        for i in range(n):
            last = i == n - 1
            w = _init_weight(rng, (dims[i], dims[i + 1]), dims[i])
            layers.append(_make_layer(
                "linear", f"layer{i}", w, dims[i + 1], prec[i],
                norm=not last, activation="none" if last else "relu"))
    else:
        c, h, w = cfg.input_shape
        c1, c2 = cfg.conv_channels
        k, st = cfg.kernel, cfg.conv_stride
        n = 4
        prec = layer_precisions(cfg, n)
        w0 = _init_weight(rng, (c1, c, k, k), c * k * k)
        layers.append(_make_layer("conv", "layer0", w0, c1, prec[0],
                                  norm=True, activation="relu", stride=st, padding=1))
        h1, w1 = conv_output_hw(h, w, k, st, 1)
        w1_ = _init_weight(rng, (c2, c1, k, k), c1 * k * k)
        layers.append(_make_layer("conv", "layer1", w1_, c2, prec[1],
                                  norm=True, activation="relu", stride=st, padding=1))
        h2, w2 = conv_output_hw(h1, w1, k, st, 1)
        flat = c2 * h2 * w2
        w2_ = _init_weight(rng, (flat, cfg.fc_hidden), flat)
        layers.append(_make_layer("linear", "layer2", w2_, cfg.fc_hidden, prec[2],
                                  norm=True, activation="relu"))
        w3_ = _init_weight(rng, (cfg.fc_hidden, cfg.classes), cfg.fc_hidden)
        layers.append(_make_layer("linear", "layer3", w3_, cfg.classes, prec[3],
                                  norm=False, activation="none"))
    return QuantizedModel(layers, cfg)


def apply_gscale_policy(model: QuantizedModel, mode: str, mult: float = 1.0) -> None:
    """Set the step-size gradient-scale policy on every quantized layer.

    Already-initialized step sizes are rescaled immediately; lazy
    activation steps pick the policy up when they initialize.
    """
    for layer in model.layers:
        if layer.weight_step is None:
            continue
        layer.gscale_mode = mode
        layer.gscale_mult = mult
        layer.weight_step.grad_scale = mult * gscale_value(
            mode, layer.n_weights, layer.weight_spec.qp)
        if layer.act_step is not None and layer.act_step.initialized:
            layer.act_step.grad_scale = mult * gscale_value(
                mode, layer.act_step.count, layer.act_spec.qp)


def config_hash(cfg_dict: dict) -> str:
    payload = json.dumps(cfg_dict, sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, model: QuantizedModel, epoch: int = 0,
                    optimizer_state: Optional[dict] = None,
                    cfg_hash: str = "") -> None:
    """Versioned binary container: JSON header + little-endian raw arrays."""
    arrays = dict(model.state_arrays())
    if optimizer_state:
        for name, arr in optimizer_state.items():
            arrays[f"opt.{name}"] = arr
    entries = []
    blob = bytearray()
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": len(blob), "nbytes": arr.nbytes})
        blob += np.ascontiguousarray(arr).astype("<f8").tobytes()
    header = {
        "version": CKPT_VERSION,
        "epoch": epoch,
        "config_hash": cfg_hash,
        "config": model.config.to_dict(),
        "steps": model.meta_state(),
        "entries": entries,
    }
    hjson = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(hjson)))
        f.write(hjson)
        f.write(bytes(blob))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (header, arrays) from a checkpoint file."""
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
        blob = f.read()
    if header.get("version") != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    arrays = {}
    for e in header["entries"]:
        arr = np.frombuffer(blob, dtype="<f8", count=e["nbytes"] // 8,
                            offset=e["offset"]).astype(np.float64)
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path) -> tuple[QuantizedModel, dict]:
    """Rebuild a model (and header) from a checkpoint file."""
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    model = build_model(cfg)
    model_arrays = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    model.load_state(model_arrays, header.get("steps"))
    header["optimizer_state"] = {
        k[len("opt."):]: v for k, v in arrays.items() if k.startswith("opt.")}
    return model, header


def load_full_precision(model: QuantizedModel, ckpt_path) -> QuantizedModel:
    """Initialize a quantized model from a full-precision checkpoint.

    Weights, biases, and normalization state are copied; weight step
    sizes are re-derived from the loaded weights and activation step
    sizes are reset to initialize lazily on the first batch.
    """
    _, arrays = read_checkpoint(ckpt_path)
    own = model.state_arrays()
    for name, arr in arrays.items():
        if name.startswith("opt.") or name.endswith("_step"):
            continue
        if name not in own:
            raise ValueError(f"checkpoint entry {name!r} has no home in this model")
        if own[name].shape != arr.shape:
            raise ValueError(f"shape mismatch for {name}: "
                             f"{own[name].shape} vs {arr.shape}")
        own[name][...] = arr
    for layer in model.layers:
        if layer.weight_step is not None:
            layer.weight_step.initialize_from(
                layer.weight.data, layer.weight_spec.qp, layer.weight.size)
        if layer.act_step is not None:
            layer.act_step.initialized = False
    return model
