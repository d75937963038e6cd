"""Integer deployment path: export, int arithmetic forward, equivalence.

A trained model exports to integer weight codes plus per-layer step
sizes. Inference then quantizes each layer input to integer codes, runs
the matmul/convolution in integer arithmetic, and applies a single
per-feature rescale into which the step sizes, bias, and normalization
have been folded. The result is algebraically identical to the training
path's eval-mode forward, up to float roundoff.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .layers import ModelConfig, QuantizedModel
from .tensor import _im2col

INT32_MAX = 2 ** 31 - 1
INT_MAGIC = b"LSQI\x01\x00"
INT_VERSION = 1


class ExportError(RuntimeError):
    pass


@dataclass
class IntLayer:
    kind: str  # "linear" | "conv"
    name: str
    weight_codes: np.ndarray  # int32, within [-qn_w, qp_w]
    weight_shape: tuple
    s_w: float
    s_x: float
    bits_w: int
    bits_x: int
    qn_w: int
    qp_w: int
    qp_x: int  # activations are unsigned: qn_x = 0
    scale: np.ndarray  # per output feature, folds s_w*s_x and normalization
    shift: np.ndarray  # per output feature, folds bias and normalization
    activation: str = "none"
    stride: int = 1
    padding: int = 0


@dataclass
class IntModel:
    layers: list[IntLayer]
    config: ModelConfig
    meta: dict = field(default_factory=dict)


def pack_codes(codes: np.ndarray, bits: int, offset: int) -> bytes:
    """Bit-pack integer codes at `bits` bits each, after adding `offset`.

    Produces exactly ceil(n*bits/8) bytes; this is the payload the model
    size accounting is measured on.
    """
    shifted = (codes.reshape(-1).astype(np.int64) + offset)
    if shifted.min() < 0 or shifted.max() >= 2 ** bits:
        raise ExportError("codes do not fit the declared bit width")
    bit_matrix = ((shifted[:, None] >> np.arange(bits - 1, -1, -1)) & 1).astype(np.uint8)
    return np.packbits(bit_matrix.reshape(-1)).tobytes()


def unpack_codes(payload: bytes, bits: int, offset: int, count: int) -> np.ndarray:
    bit_stream = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))[:count * bits]
    bit_matrix = bit_stream.reshape(count, bits).astype(np.int64)
    weights = bit_matrix @ (1 << np.arange(bits - 1, -1, -1, dtype=np.int64))
    return (weights - offset).astype(np.int32)


def export_int(model: QuantizedModel) -> IntModel:
    """Quantize weights once to integers and fold the float epilogue.

    Requires a fully quantized model with initialized step sizes; the
    worst-case integer accumulation is bounds-checked against the 32-bit
    accumulator width here, at export time.
    """
    layers = []
    for layer in model.layers:
        if layer.weight_step is None or layer.act_step is None:
            raise ExportError(f"{layer.name}: not a quantized layer; nothing to export")
        if not (layer.weight_step.initialized and layer.act_step.initialized):
            raise ExportError(f"{layer.name}: step sizes not initialized "
                              "(train or run a forward batch first)")
        s_w, s_x = layer.weight_step.value, layer.act_step.value
        if not (np.isfinite(s_w) and np.isfinite(s_x) and s_w > 0 and s_x > 0):
            raise ExportError(f"{layer.name}: bad step sizes s_w={s_w}, s_x={s_x}")
        wspec, aspec = layer.weight_spec, layer.act_spec
        codes = np.rint(np.clip(layer.weight.data / s_w, -wspec.qn, wspec.qp))
        codes = codes.astype(np.int32)

        # Worst-case |accumulator|: per-output sum of |w codes| times the
        # largest activation code.
        if layer.kind == "linear":
            col_sums = np.abs(codes.astype(np.int64)).sum(axis=0)
        else:
            col_sums = np.abs(codes.astype(np.int64)).reshape(codes.shape[0], -1).sum(axis=1)
        worst = int(col_sums.max()) * aspec.qp
        if worst > INT32_MAX:
            raise ExportError(f"{layer.name}: worst-case accumulation {worst} "
                              "overflows a 32-bit accumulator")

        rescale = s_w * s_x
        n_out = layer.bias.size
        if layer.norm is not None:
            bn = layer.norm
            bn_scale = bn.gamma.data / np.sqrt(bn.running_var + bn.eps)
            scale = rescale * bn_scale
            shift = (layer.bias.data - bn.running_mean) * bn_scale + bn.beta.data
        else:
            scale = np.full(n_out, rescale)
            shift = layer.bias.data.copy()
        layers.append(IntLayer(
            kind=layer.kind, name=layer.name,
            weight_codes=codes, weight_shape=tuple(codes.shape),
            s_w=s_w, s_x=s_x,
            bits_w=wspec.bits, bits_x=aspec.bits,
            qn_w=wspec.qn, qp_w=wspec.qp, qp_x=aspec.qp,
            scale=np.asarray(scale, dtype=np.float64),
            shift=np.asarray(shift, dtype=np.float64),
            activation=layer.activation,
            stride=layer.stride, padding=layer.padding))
    return IntModel(layers, model.config)


def int_forward(im: IntModel, x: np.ndarray) -> np.ndarray:
    """Run the integer path on a batch; returns float logits.

    Each layer quantizes its input to integer codes, multiplies in wide
    integer arithmetic (asserted to stay within 32-bit range), and
    rescales once per output feature.
    """
    x = np.asarray(x, dtype=np.float64)
    for layer in im.layers:
        codes_x = np.rint(np.clip(x / layer.s_x, 0, layer.qp_x)).astype(np.int64)
        w = layer.weight_codes.astype(np.int64)
        if layer.kind == "linear":
            if codes_x.ndim != 2:
                codes_x = codes_x.reshape(codes_x.shape[0], -1)
            if codes_x.shape[1] != layer.weight_shape[0]:
                raise ValueError(f"{layer.name}: input width {codes_x.shape[1]} "
                                 f"does not match weights {layer.weight_shape}")
            acc = codes_x @ w
            out = acc.astype(np.float64) * layer.scale + layer.shift
        else:
            f, c, kh, kw = layer.weight_shape
            cols, oh, ow = _im2col(codes_x, kh, kw, layer.stride, layer.padding)
            acc = cols @ w.reshape(f, -1).T
            n = codes_x.shape[0]
            out = acc.reshape(n, oh, ow, f).transpose(0, 3, 1, 2).astype(np.float64)
            out = out * layer.scale.reshape(1, -1, 1, 1) + layer.shift.reshape(1, -1, 1, 1)
        if np.abs(acc).max(initial=0) > INT32_MAX:
            raise ExportError(f"{layer.name}: accumulator exceeded 32-bit range")
        if layer.activation == "relu":
            out = np.maximum(out, 0.0)
        x = out
    return x


def check_equivalence(model: QuantizedModel, im: IntModel, x_batch: np.ndarray,
                      tol: float = 1e-5) -> dict:
    """Compare integer-path logits against the training path in eval mode.

    Relative discrepancy is measured per row against the largest
    float-path logit magnitude in that row. Passes only with 100% argmax
    agreement and max discrepancy within `tol`.
    """
    from .tensor import Tensor

    ref = model.forward(Tensor(x_batch), training=False).data
    got = int_forward(im, x_batch)
    row_scale = np.maximum(np.abs(ref).max(axis=1, keepdims=True), 1e-12)
    rel = np.abs(got - ref) / row_scale
    # A flipped argmax between logits that are themselves tied within
    # tolerance is roundoff resolving a tie, not a prediction mismatch.
    rows = np.arange(ref.shape[0])
    ref_arg, got_arg = ref.argmax(axis=1), got.argmax(axis=1)
    tied = (np.abs(ref[rows, ref_arg] - ref[rows, got_arg])
            <= tol * row_scale[:, 0])
    agree = float(((got_arg == ref_arg) | tied).mean())
    max_rel = float(rel.max())
    return {
        "max_rel_discrepancy": max_rel,
        "argmax_agreement": agree,
        "tol": tol,
        "passed": bool(max_rel <= tol and agree == 1.0),
    }


# -- serialization -------------------------------------------------------------

def packed_payload_bytes(im: IntModel) -> int:
    """Size in bytes of the bit-packed integer weight payload."""
    total = 0
    for layer in im.layers:
        total += -(-layer.weight_codes.size * layer.bits_w // 8)  # ceil
    return total


def save_int_model(path, im: IntModel) -> None:
    """Container: JSON header, bit-packed codes, then a fast-load section."""
    packed_parts, fast_parts, float_parts = [], [], []
    entries = []
    packed_off = fast_off = float_off = 0
    for layer in im.layers:
        packed = pack_codes(layer.weight_codes, layer.bits_w, layer.qn_w)
        fast = np.ascontiguousarray(layer.weight_codes, dtype="<i4").tobytes()
        floats = np.concatenate([layer.scale, layer.shift]).astype("<f8").tobytes()
        entries.append({
            "kind": layer.kind, "name": layer.name,
            "weight_shape": list(layer.weight_shape),
            "s_w": layer.s_w, "s_x": layer.s_x,
            "bits_w": layer.bits_w, "bits_x": layer.bits_x,
            "qn_w": layer.qn_w, "qp_w": layer.qp_w, "qp_x": layer.qp_x,
            "n_out": int(layer.scale.size),
            "activation": layer.activation,
            "stride": layer.stride, "padding": layer.padding,
            "packed_offset": packed_off, "packed_nbytes": len(packed),
            "fast_offset": fast_off, "float_offset": float_off,
        })
        packed_parts.append(packed)
        fast_parts.append(fast)
        float_parts.append(floats)
        packed_off += len(packed)
        fast_off += len(fast)
        float_off += len(floats)
    header = {
        "version": INT_VERSION,
        "config": im.config.to_dict(),
        "meta": im.meta,
        "layers": entries,
        "packed_payload_bytes": packed_off,
    }
    hjson = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(INT_MAGIC)
        f.write(struct.pack("<QQQQ", len(hjson), packed_off, fast_off, float_off))
        f.write(hjson)
        for part in (packed_parts, fast_parts, float_parts):
            for chunk in part:
                f.write(chunk)


def load_int_model(path) -> IntModel:
    with open(path, "rb") as f:
        if f.read(len(INT_MAGIC)) != INT_MAGIC:
            raise ValueError(f"{path}: not an integer model file")
        hlen, packed_len, fast_len, float_len = struct.unpack("<QQQQ", f.read(32))
        header = json.loads(f.read(hlen))
        packed_blob = f.read(packed_len)
        fast_blob = f.read(fast_len)
        float_blob = f.read(float_len)
    if header.get("version") != INT_VERSION:
        raise ValueError(f"unsupported integer model version {header.get('version')}")
    layers = []
    for e in header["layers"]:
        count = int(np.prod(e["weight_shape"]))
        codes = np.frombuffer(fast_blob, dtype="<i4", count=count,
                              offset=e["fast_offset"]).astype(np.int32)
        codes = codes.reshape(e["weight_shape"]).copy()
        # cross-check fast section against the canonical packed payload
        packed = packed_blob[e["packed_offset"]:e["packed_offset"] + e["packed_nbytes"]]
        unpacked = unpack_codes(packed, e["bits_w"], e["qn_w"], count)
        if not np.array_equal(unpacked.reshape(e["weight_shape"]), codes):
            raise ValueError(f"{e['name']}: packed and fast-load sections disagree")
        floats = np.frombuffer(float_blob, dtype="<f8", count=2 * e["n_out"],
                               offset=e["float_offset"]).astype(np.float64)
        layers.append(IntLayer(
            kind=e["kind"], name=e["name"], weight_codes=codes,
            weight_shape=tuple(e["weight_shape"]), s_w=e["s_w"], s_x=e["s_x"],
            bits_w=e["bits_w"], bits_x=e["bits_x"],
            qn_w=e["qn_w"], qp_w=e["qp_w"], qp_x=e["qp_x"],
            scale=floats[:e["n_out"]].copy(), shift=floats[e["n_out"]:].copy(),
            activation=e["activation"], stride=e["stride"], padding=e["padding"]))
    cfg = ModelConfig.from_dict(header["config"])
    return IntModel(layers, cfg, meta=header.get("meta", {}))
