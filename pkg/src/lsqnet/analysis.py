"""Training diagnostics: update-ratio measurement, quantization-error
sweeps, and model size accounting.

These reproduce, at desk scale, the conditioning and error analyses
used to justify the gradient scale heuristic: the ratio of relative
step-size updates to relative weight updates should sit near 1 once the
scale is applied, and the learned step size generally does not coincide
with the quantization-error-minimizing one.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset, batches
from .layers import QuantizedModel
from .quantizer import GSCALE_MODES, QuantSpec, gscale_value, quantize_forward
from .tensor import Tensor, softmax_cross_entropy

REPORT_VERSION = 1


@dataclass
class RRecord:
    """Update-ratio sample for one layer's weight step size."""

    layer: str
    param: str  # owner of the step size being measured
    r: float
    window: int
    gscale_mode: str


@dataclass
class QESweepResult:
    layer: str
    s_hat: float
    best_s: dict[str, Optional[float]]      # per metric: argmin over the grid
    percent_diff: dict[str, Optional[float]]  # |s* - s_hat| / s_hat * 100
    best_index: dict[str, Optional[int]]


def measure_R(model: QuantizedModel, data: Dataset, window: int = 100,
              gscale_mode: str = "nqp", batch_size: int = 100,
              seed: int = 0) -> list[RRecord]:
    """Average update ratio R per weight layer over `window` batches.

    R = (|grad_s| / s) / (||grad_w|| / ||w||), with the step-size
    gradient computed under the requested gradient-scale mode. The model
    is not updated; gradients are measured and discarded.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    quant_layers = [l for l in model.layers if l.weight_step is not None]
    if not quant_layers:
        raise ValueError("model has no quantized layers to measure")
    saved = {l.name: l.weight_step.grad_scale for l in quant_layers}
    for l in quant_layers:
        l.weight_step.grad_scale = gscale_value(
            gscale_mode, l.n_weights, l.weight_spec.qp)
    sums: dict[str, float] = {l.name: 0.0 for l in quant_layers}
    counts: dict[str, int] = {l.name: 0 for l in quant_layers}
    try:
        rng = np.random.default_rng(seed)
        done = 0
        while done < window:
            for x, y in batches(data, batch_size, rng):
                if done >= window:
                    break
                logits = model.forward(Tensor(x), training=True)
                loss = softmax_cross_entropy(logits, y)
                loss.backward()
                for l in quant_layers:
                    w = l.weight.data
                    gw = l.weight.grad
                    gs = l.weight_step.step.grad
                    w_norm = np.linalg.norm(w)
                    if w_norm == 0.0:
                        warnings.warn(f"{l.name}: zero-norm weights, skipped")
                        continue
                    gw_rel = np.linalg.norm(gw) / w_norm
                    if gw_rel == 0.0 or gs is None:
                        continue
                    gs_rel = abs(float(gs)) / l.weight_step.value
                    sums[l.name] += gs_rel / gw_rel
                    counts[l.name] += 1
                model.zero_grad()
                done += 1
    finally:
        for l in quant_layers:
            l.weight_step.grad_scale = saved[l.name]
    records = []
    for l in quant_layers:
        if counts[l.name] == 0:
            continue
        records.append(RRecord(layer=l.name, param="weight",
                               r=sums[l.name] / counts[l.name],
                               window=window, gscale_mode=gscale_mode))
    return records


def default_sweep_grid(s_hat: float) -> np.ndarray:
    """The sweep grid {0.01*s_hat, 0.02*s_hat, ..., 20.00*s_hat}."""
    return np.arange(1, 2001) * 0.01 * s_hat


def _kl_surrogate(codes: np.ndarray, qn: int, qp: int) -> float:
    """-E[log q(vhat)] with q a Laplace-smoothed histogram over the
    discrete quantizer support (one atom per integer level)."""
    n_atoms = qn + qp + 1
    counts = np.bincount((codes + qn).astype(np.int64), minlength=n_atoms)
    q = (counts + 1.0) / (codes.size + n_atoms)
    return float(-np.log(q[(codes + qn).astype(np.int64)]).mean())


def quant_error_sweep(values, s_hat: float, spec: QuantSpec,
                      grid: Optional[np.ndarray] = None,
                      layer: str = "") -> QESweepResult:
    """Exhaustive per-metric argmin of quantization error over the grid.

    Metrics: mean absolute error, mean square error, and the KL
    surrogate -E[log q(vhat(s))]. The KL metric is reported absent when
    the sample is degenerate (fewer than two distinct values).
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("empty value tensor")
    if grid is None:
        grid = default_sweep_grid(s_hat)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty sweep grid")
    degenerate = np.unique(v).size < 2
    mae = np.empty(grid.size)
    mse = np.empty(grid.size)
    kl = np.empty(grid.size) if not degenerate else None
    for i, s in enumerate(grid):
        codes, vhat = quantize_forward(v, s, spec)
        err = vhat - v
        mae[i] = np.abs(err).mean()
        mse[i] = (err ** 2).mean()
        if kl is not None:
            kl[i] = _kl_surrogate(codes.data, spec.qn, spec.qp)
    best_index: dict[str, Optional[int]] = {
        "mae": int(np.argmin(mae)), "mse": int(np.argmin(mse)),
        "kl": int(np.argmin(kl)) if kl is not None else None,
    }
    best_s = {m: (float(grid[i]) if i is not None else None)
              for m, i in best_index.items()}
    pct = {m: (abs(s - s_hat) / s_hat * 100.0 if s is not None else None)
           for m, s in best_s.items()}
    return QESweepResult(layer=layer, s_hat=s_hat, best_s=best_s,
                         percent_diff=pct, best_index=best_index)


FP_BITS = 32  # storage width assumed for unquantized weight layers


def model_size(model) -> dict:
    """Byte accounting: packed weight payload plus separately-reported overhead.

    Weight payload is ceil(N_W * b / 8) per layer, summed. Overhead
    counts step sizes, biases, and normalization state at 4 bytes per
    scalar and is reported separately from the payload.
    """
    per_layer = []
    payload = 0
    overhead = 0
    for layer in model.layers:
        if hasattr(layer, "weight_codes"):  # IntLayer
            n_w = int(np.prod(layer.weight_shape))
            bits = layer.bits_w
            n_out = int(layer.scale.size)
            extra = (2 + 2 * n_out) * 4  # s_w, s_x, folded scale/shift
        else:
            n_w = layer.n_weights
            bits = layer.weight_spec.bits if layer.weight_spec else FP_BITS
            n_out = layer.bias.size
            extra = n_out * 4  # bias
            if layer.norm is not None:
                extra += 4 * n_out * 4  # gamma, beta, running mean/var
            if layer.weight_step is not None:
                extra += 2 * 4  # the two step sizes
        layer_payload = -(-n_w * bits // 8)
        per_layer.append({"layer": layer.name, "n_weights": n_w, "bits": bits,
                          "payload_bytes": layer_payload, "overhead_bytes": extra})
        payload += layer_payload
        overhead += extra
    return {"payload_bytes": payload, "overhead_bytes": overhead,
            "per_layer": per_layer}


def emit_report(kind: str, rows: list[dict], out_dir) -> tuple[str, str]:
    """Write plot-ready CSV plus a JSON summary for one report kind.

    All rows must share a key set (the CSV column schema). Emission is
    deterministic: identical inputs produce byte-identical files. An
    empty row list is an error and produces no partial output.
    """
    if not rows:
        raise ValueError("no records to report")
    columns = list(rows[0].keys())
    for r in rows:
        if list(r.keys()) != columns:
            raise ValueError("inconsistent record schemas")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{kind}.csv")
    json_path = os.path.join(out_dir, f"{kind}.json")
    lines = [f"# lsqnet report kind={kind} version={REPORT_VERSION}",
             ",".join(columns)]
    for r in rows:
        lines.append(",".join("" if r[c] is None else
                              (repr(r[c]) if isinstance(r[c], float) else str(r[c]))
                              for c in columns))
    with open(csv_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(json_path, "w") as f:
        json.dump({"version": REPORT_VERSION, "kind": kind, "rows": rows},
                  f, indent=2, sort_keys=True)
        f.write("\n")
    return csv_path, json_path
