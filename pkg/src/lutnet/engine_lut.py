"""
engine_lut.py — Integer-only forward pass over the product LUT.

Hot path per unit (table loads, integer adds, one shift, one clamp):
    acc = Σ LUT[w_idx, a_idx] + bias_term          int64
    k   = acc >> s                                  floor(x / Δx)
    j   = act_table[clip(k + k0, 0, N_x − 1)]       next-layer activation index
The final layer keeps the raw accumulators and reports top-k.

forward_reference_quantized is the real-arithmetic oracle over the same
quantized levels; forward_lut_batch spreads inputs across worker threads.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from . import config
from .codebooks import Codebook
from .errors import ShapeError
from .model_core import apply_activation, receptive_fields
from .tables import QuantizedLayer, QuantizedModel

_ACC_LIMIT = 1 << 62


@dataclass
class LayerTrace:
    in_idx:  np.ndarray            # flat input activation indices
    acc:     np.ndarray            # (channels, positions) accumulators / real sums
    out_idx: np.ndarray | None     # flat output indices (None on the final layer)


@dataclass
class LutResult:
    logits: np.ndarray
    topk:   np.ndarray
    trace:  list[LayerTrace] = field(default_factory=list)


def quantize_input(inputs, act_cb: Codebook) -> np.ndarray:
    """Nearest activation-level index of every input value."""
    return act_cb.nearest_index(np.asarray(inputs, dtype=np.float64).ravel())


def top_k(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values; ties keep the lower index first."""
    k = max(1, min(int(k), values.size))
    return np.argsort(-np.asarray(values), kind='stable')[:k]


def layer_plan(qmodel: QuantizedModel) -> list[np.ndarray]:
    """Receptive-field gather indices for every layer, computed once per model."""
    return [receptive_fields(layer, layer.in_shape) for layer in qmodel.layers]


def accumulator_error_bound(layer: QuantizedLayer) -> float:
    """(T + 1)·Δx·2^-(s+1): worst rounding drift of one unit's accumulator."""
    return (layer.fan_in + 1) * layer.dx * math.ldexp(1.0, -layer.lut.s - 1)


# ── Integer layer step ────────────────────────────────────────────────────

def _accumulate(layer: QuantizedLayer, rf: np.ndarray, a_idx: np.ndarray) -> np.ndarray:
    lut = layer.lut.entries
    if layer.kind == 'avgpool':
        return lut[0, a_idx[rf]].sum(axis=2)
    if layer.kind == 'dense':
        terms = lut[layer.weight_idx, a_idx[None, :]]
        return (terms.sum(axis=1) + layer.bias_terms)[:, None]
    valid = rf >= 0
    a_rf = a_idx[np.where(valid, rf, 0)]
    terms = lut[layer.weight_idx[:, None, :], a_rf[None, :, :]]
    return np.where(valid[None], terms, 0).sum(axis=2) + layer.bias_terms[:, None]


def forward_lut(qmodel: QuantizedModel, input_idx, *, topk: int = config.TOPK,
                trace: bool = False, plan: list[np.ndarray] | None = None) -> LutResult:
    """Run one input (activation indices) through the integer pipeline."""
    a_idx = np.asarray(input_idx, dtype=np.int64).ravel()
    if a_idx.size != qmodel.input_size:
        raise ShapeError(f'input has {a_idx.size} indices; model expects {qmodel.input_size}')
    plan = plan if plan is not None else layer_plan(qmodel)
    traces: list[LayerTrace] = []
    last = len(qmodel.layers) - 1
    acc = a_idx
    for i, (layer, rf) in enumerate(zip(qmodel.layers, plan)):
        acc = _accumulate(layer, rf, a_idx)
        assert np.all(np.abs(acc) < _ACC_LIMIT), f'accumulator overflow in layer {i}'
        if i == last:
            if trace:
                traces.append(LayerTrace(in_idx=a_idx, acc=acc, out_idx=None))
            break
        out = layer.act_table.lookup(acc >> qmodel.s).astype(np.int64).ravel()
        if trace:
            traces.append(LayerTrace(in_idx=a_idx, acc=acc, out_idx=out))
        a_idx = out
    logits = np.asarray(acc).ravel()
    return LutResult(logits=logits, topk=top_k(logits, topk), trace=traces)


# ── Batch parallelism ─────────────────────────────────────────────────────

def _lut_chunk(qmodel: QuantizedModel, plan: list[np.ndarray], indices: np.ndarray,
               rows: range, topk: int, logits_out: np.ndarray, topk_out: np.ndarray) -> None:
    """Worker target: fills rows *rows* of the shared output arrays."""
    for r in rows:
        res = forward_lut(qmodel, indices[r], topk=topk, plan=plan)
        logits_out[r] = res.logits
        topk_out[r] = res.topk


def forward_lut_batch(qmodel: QuantizedModel, inputs, *, topk: int = config.TOPK,
                      threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Quantize and run every row of *inputs*; identical for any thread count."""
    x = np.asarray(inputs, dtype=np.float64).reshape(-1, qmodel.input_size)
    indices = qmodel.input_cb.nearest_index(x)
    plan = layer_plan(qmodel)
    n = x.shape[0]
    n_out = int(np.prod(qmodel.layers[-1].out_shape))
    k = max(1, min(topk, n_out))
    logits = np.zeros((n, n_out), dtype=np.int64)
    best = np.zeros((n, k), dtype=np.int64)

    threads = max(1, min(int(threads), n)) if n else 1
    size = max(1, (n + threads - 1) // threads)
    chunks = [range(i, min(i + size, n)) for i in range(0, n, size)]
    workers = [
        threading.Thread(target=_lut_chunk,
                         args=(qmodel, plan, indices, rows, k, logits, best), daemon=True)
        for rows in chunks
    ]
    for th in workers:
        th.start()
    for th in workers:
        th.join()
    print(f'[LUT] {n} input(s) through {len(qmodel.layers)} layer(s) on {len(workers)} thread(s)')
    return logits, best


# ══════════════════════════════════════════════════════════════════════════
# Real-arithmetic oracle
# ══════════════════════════════════════════════════════════════════════════

def layer_reference(layer: QuantizedLayer, rf: np.ndarray, a_idx: np.ndarray) -> np.ndarray:
    """Σ w·a + b over the quantized levels in float64, shaped like the accumulator."""
    a = layer.input_cb.levels[a_idx]
    if layer.kind == 'avgpool':
        return a[rf].sum(axis=2) / float(layer.pool * layer.pool)
    w = layer.weight_cb.levels[layer.weight_idx]
    b = layer.weight_cb.levels[layer.bias_idx]
    if layer.kind == 'dense':
        return (w @ a + b)[:, None]
    valid = rf >= 0
    a_rf = np.where(valid, a[np.where(valid, rf, 0)], 0.0)
    return np.einsum('of,pf->op', w, a_rf) + b[:, None]


def next_activation_index(layer: QuantizedLayer, x: np.ndarray,
                          activation_grid: str = 'table') -> np.ndarray:
    """Nearest output level of Γ at x ('exact') or at ⌊x/Δx⌋·Δx ('table')."""
    if activation_grid == 'table':
        x = np.floor(x / layer.dx) * layer.dx
    elif activation_grid != 'exact':
        raise ValueError(f'activation_grid must be "table" or "exact", got {activation_grid!r}')
    return layer.output_cb.nearest_index(apply_activation(layer.activation, x))


def forward_reference_quantized(qmodel: QuantizedModel, inputs, *,
                                activation_grid: str = 'table',
                                trace: bool = False) -> tuple[np.ndarray, list[LayerTrace]]:
    """Real logits of the quantized network (quantized levels, exact sums)."""
    a_idx = quantize_input(inputs, qmodel.input_cb)
    if a_idx.size != qmodel.input_size:
        raise ShapeError(f'input has {a_idx.size} values; model expects {qmodel.input_size}')
    traces: list[LayerTrace] = []
    last = len(qmodel.layers) - 1
    x = np.zeros(0)
    for i, (layer, rf) in enumerate(zip(qmodel.layers, layer_plan(qmodel))):
        x = layer_reference(layer, rf, a_idx)
        if i == last:
            if trace:
                traces.append(LayerTrace(in_idx=a_idx, acc=x, out_idx=None))
            break
        out = next_activation_index(layer, x, activation_grid).ravel()
        if trace:
            traces.append(LayerTrace(in_idx=a_idx, acc=x, out_idx=out))
        a_idx = out
    return x.ravel(), traces
