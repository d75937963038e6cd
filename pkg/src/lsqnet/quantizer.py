"""Uniform quantizer with a learnable step size.

The quantizer maps real data onto an integer grid through clip and
round, and exposes a gradient to the step size that is sensitive to the
distance between each value and its nearest quantization transition.
Both the step-size gradient and the straight-through data gradient are
realized through ordinary autodiff by composing a gradient-detaching
identity, so no operation here needs a hand-written backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

STEP_FLOOR = 1e-8  # smallest admissible step size


def quant_levels(bits: int, signed: bool) -> tuple[int, int]:
    """Number of negative / positive integer levels for a b-bit code."""
    if bits < 2:
        raise ValueError(f"bits must be >= 2, got {bits}")
    if signed:
        return 2 ** (bits - 1), 2 ** (bits - 1) - 1
    return 0, 2 ** bits - 1


@dataclass(frozen=True)
class QuantSpec:
    """Bit width, signedness, and the derived integer bounds."""

    bits: int
    signed: bool
    qn: int = field(init=False)
    qp: int = field(init=False)

    def __post_init__(self):
        qn, qp = quant_levels(self.bits, self.signed)
        object.__setattr__(self, "qn", qn)
        object.__setattr__(self, "qp", qp)


@dataclass
class IntTensor:
    """Integer quantization codes plus the bounds they were produced under."""

    data: np.ndarray
    qn: int
    qp: int

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.size and (self.data.min() < -self.qn or self.data.max() > self.qp):
            raise ValueError("integer codes out of [-Qn, Qp] range")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class StepSizeParam:
    """The learnable step size for one layer's weights or activations.

    `step` is a scalar autodiff tensor; `grad_scale` is the factor that
    rebalances its loss gradient against weight updates. Activation
    owners may start uninitialized and pick up their value from the
    first batch they see.
    """

    step: Tensor
    grad_scale: float = 1.0
    initialized: bool = False
    owner: str = "weight"  # "weight" | "activation"
    count: int = 0  # weights or features governed by this step size

    @classmethod
    def uninitialized(cls, owner: str = "activation") -> "StepSizeParam":
        return cls(step=Tensor(1.0, requires_grad=True), grad_scale=1.0,
                   initialized=False, owner=owner)

    def initialize_from(self, values: np.ndarray, qp: int, count: int) -> None:
        self.step.data[...] = init_step_size(values, qp)
        self.grad_scale = grad_scale_factor(count, qp)
        self.count = count
        self.initialized = True

    @property
    def value(self) -> float:
        return float(self.step.data)


def init_step_size(values, qp: int) -> float:
    """Initial step: twice the mean absolute value over root positive levels."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot initialize step size from an empty tensor")
    s = 2.0 * np.abs(v).mean() / math.sqrt(qp)
    if not np.isfinite(s) or s <= 0.0:
        return STEP_FLOOR
    return float(s)


GSCALE_MODES = ("none", "n", "nqp")


def gscale_value(mode: str, count: int, qp: int) -> float:
    """Gradient-scale factor under a named policy: 1, 1/sqrt(count), or
    the full 1/sqrt(count * Qp)."""
    if mode == "none":
        return 1.0
    if mode == "n":
        return 1.0 / math.sqrt(count)
    if mode == "nqp":
        return grad_scale_factor(count, qp)
    raise ValueError(f"unknown gradient-scale mode {mode!r}; pick from {GSCALE_MODES}")


def grad_scale_factor(count: int, qp: int) -> float:
    """Gradient rebalancing factor 1/sqrt(count * Qp).

    `count` is the number of weights for a weight step size and the
    number of features for an activation step size.
    """
    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    return 1.0 / math.sqrt(count * qp)


def quantize_forward(v, s: float, spec: QuantSpec) -> tuple[IntTensor, np.ndarray]:
    """Pure forward quantization: integer codes and their rescaled values."""
    if s <= 0:
        raise ValueError(f"step size must be positive, got {s}")
    v = np.asarray(v, dtype=np.float64)
    vbar = np.rint(np.clip(v / s, -spec.qn, spec.qp))
    return IntTensor(vbar.astype(np.int64), spec.qn, spec.qp), vbar * s


def step_size_grad(v: float, s: float, spec: QuantSpec) -> float:
    """Analytic d(vhat)/ds for a single element.

    Piecewise: -v/s + round(v/s) strictly inside the quantization range,
    saturating at -Qn / Qp in the clipped regions.
    """
    if s <= 0:
        raise ValueError(f"step size must be positive, got {s}")
    z = v / s
    if z <= -spec.qn:
        return float(-spec.qn)
    if z >= spec.qp:
        return float(spec.qp)
    return float(-z + np.rint(z))


def data_grad_mask(v, s: float, spec: QuantSpec) -> np.ndarray:
    """Straight-through d(vhat)/dv: 1 strictly inside (-Qn, Qp), else 0."""
    if s <= 0:
        raise ValueError(f"step size must be positive, got {s}")
    z = np.asarray(v, dtype=np.float64) / s
    return ((z > -spec.qn) & (z < spec.qp)).astype(np.float64)


def gradscale(x: Tensor, scale: float) -> Tensor:
    """Identity forward; backward gradient multiplied by `scale`.

    Built from the gradient-detaching identity. The detached terms are
    arranged so they cancel exactly, keeping the forward value bit-equal
    to x rather than within an ulp of it.
    """
    y_grad = x * scale
    return x.detach() + (y_grad - y_grad.detach())


def roundpass(x: Tensor) -> Tensor:
    """Round to nearest in forward; pass gradient through unchanged."""
    return x.round_nearest().detach() + (x - x.detach())


def quantize(v: Tensor, p: StepSizeParam, spec: QuantSpec) -> Tensor:
    """Quantize a tensor through the learnable step size.

    Returns the rescaled quantized tensor, autodiff-tracked so that the
    step size receives its transition-sensitive gradient (scaled by
    `p.grad_scale`) and the data receives the straight-through mask.
    """
    if not p.initialized:
        raise RuntimeError("step size not initialized; call initialize_from first")
    if p.value <= 0:
        raise ValueError(f"step size must be positive, got {p.value}")
    s = gradscale(p.step, p.grad_scale)
    z = v / s
    z = z.clip(-spec.qn, spec.qp)
    vbar = roundpass(z)
    return vbar * s
