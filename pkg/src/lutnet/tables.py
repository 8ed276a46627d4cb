"""
tables.py — Inference tables of the LUT neural unit and the quantized model file.

  ProductLUT        LUT[i, j] = round(2^s / Δx · w_i · a_j)     (N_w × N_a, int)
  ActivationTable   k = ⌊x/Δx⌋ → nearest activation-level index of Γ(kΔx)
  weight indices    ⌈log₂ N_w⌉-bit codes, LSB-first, weights then biases
  bias terms        round(2^s / Δx · b) with b snapped to the weight codebook

A QuantizedModel is a list of QuantizedLayer, one per float layer, and is saved
as a single .lutq container (see container.py).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import config
from .codebooks import Codebook, ceil_log2, round_half_away
from .container import MAGIC_LUT, read_container, write_container
from .errors import ModelFormatError, TableError
from .model_core import apply_activation

FORMAT_TAG = 'lutnet-lutq/1'


def fixed_point(values, s: int, dx: float) -> np.ndarray:
    """round(2^s / Δx · values), ties away from zero, as int64."""
    if s < 1 or not dx > 0.0:
        raise TableError(f'need s >= 1 and Δx > 0, got s={s}, Δx={dx}')
    scaled = np.asarray(values, dtype=np.float64) * (math.ldexp(1.0, s) / dx)
    return round_half_away(scaled).astype(np.int64)


def signed_width(values) -> int:
    """Bits (including sign) needed to hold every value of *values*."""
    v = np.asarray(values, dtype=np.int64)
    if v.size == 0:
        return 1
    hi = int(np.max(np.maximum(v, -v - 1)))
    return hi.bit_length() + 1


# ══════════════════════════════════════════════════════════════════════════
# Product LUT
# ══════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class ProductLUT:
    entries: np.ndarray          # int64 (rows, N_a)
    s: int
    dx: float

    @property
    def width_bits(self) -> int:
        return signed_width(self.entries)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.entries.shape)


def _checked_lut(entries: np.ndarray, s: int, dx: float) -> ProductLUT:
    limit = 1 << (config.LUT_ENTRY_BITS - 1)
    bad = np.argwhere((entries >= limit) | (entries < -limit))
    if bad.size:
        i, j = (int(v) for v in bad[0])
        raise TableError(f'LUT entry ({i}, {j}) = {int(entries[i, j])} does not fit in '
                         f'{config.LUT_ENTRY_BITS} signed bits; lower s or raise Δx')
    entries = entries.astype(np.int64)
    entries.setflags(write=False)
    return ProductLUT(entries=entries, s=s, dx=dx)


def build_product_lut(weight_cb: Codebook, act_cb: Codebook, s: int, dx: float) -> ProductLUT:
    """One row per weight level, one column per activation level."""
    products = weight_cb.levels[:, None] * act_cb.levels[None, :]
    return _checked_lut(fixed_point(products, s, dx), s, dx)


def build_pool_lut(act_cb: Codebook, pool: int, s: int, dx: float) -> ProductLUT:
    """Single-row LUT for average pooling: round(2^s/Δx · a_j / pool²)."""
    row = act_cb.levels / float(pool * pool)
    return _checked_lut(fixed_point(row[None, :], s, dx), s, dx)


# ══════════════════════════════════════════════════════════════════════════
# Activation table
# ══════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class ActivationTable:
    entries: np.ndarray          # uint16, non-decreasing, 0 … N_a−1
    k0: int                      # entries[k + k0] is the level for x ≈ kΔx
    dx: float

    @property
    def n_x(self) -> int:
        return int(self.entries.size)

    def lookup(self, k) -> np.ndarray:
        return self.entries[np.clip(np.asarray(k) + self.k0, 0, self.n_x - 1)]


def build_activation_table(activation: str, act_cb: Codebook, dx: float) -> ActivationTable:
    """Span k from the last index-0 step to the first index-(N_a−1) step."""
    if not dx > 0.0:
        raise TableError(f'Δx must be positive, got {dx}')
    if len(act_cb) > np.iinfo(np.uint16).max + 1:
        raise TableError(f'{len(act_cb)} activation levels exceed the 16-bit table entries')
    top = len(act_cb) - 1
    span = 64
    while True:
        k = np.arange(-span, span + 1, dtype=np.int64)
        idx = act_cb.nearest_index(apply_activation(activation, k * dx))
        if idx[0] == 0 and idx[-1] == top:
            break
        span *= 2
        if span > config.MAX_ACTIVATION_SPAN:
            raise TableError(f'{activation} with Δx={dx} never reaches both codebook ends '
                             f'within ±{config.MAX_ACTIVATION_SPAN} steps')
    lo = int(np.flatnonzero(idx == 0)[-1])
    hi = int(np.flatnonzero(idx == top)[0])
    entries = idx[lo:hi + 1].astype(np.uint16)
    entries.setflags(write=False)
    return ActivationTable(entries=entries, k0=-int(k[lo]), dx=dx)


# ══════════════════════════════════════════════════════════════════════════
# Weight-index bit packing
# ══════════════════════════════════════════════════════════════════════════

def index_width(n_w: int) -> int:
    return max(1, ceil_log2(n_w)) if n_w > 1 else 1


def pack_weight_indices(indices, n_w: int) -> np.ndarray:
    """⌈log₂ N_w⌉-bit codes, LSB-first within little-endian bytes."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= n_w):
        pos = int(np.flatnonzero((idx < 0) | (idx >= n_w))[0])
        raise TableError(f'weight index {int(idx[pos])} at position {pos} is outside [0, {n_w})')
    width = index_width(n_w)
    bits = (idx[:, None] >> np.arange(width)) & 1
    return np.packbits(bits.astype(np.uint8).ravel(), bitorder='little')


def unpack_weight_indices(stream, n_w: int, count: int) -> np.ndarray:
    width = index_width(n_w)
    data = np.asarray(stream, dtype=np.uint8)
    if data.size * 8 < count * width:
        raise TableError(f'stream holds {data.size * 8} bits, {count * width} needed')
    bits = np.unpackbits(data, bitorder='little', count=count * width).astype(np.int64)
    return np.left_shift(bits.reshape(count, width), np.arange(width)).sum(axis=1)


def quantize_bias_terms(bias, weight_cb: Codebook, s: int, dx: float) -> np.ndarray:
    """Snap each bias to the weight codebook, then scale to the accumulator."""
    return fixed_point(weight_cb.quantize(np.asarray(bias, dtype=np.float64)), s, dx)


# ══════════════════════════════════════════════════════════════════════════
# Quantized model
# ══════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class QuantizedLayer:
    kind:        str
    activation:  str
    in_shape:    tuple[int, ...]
    out_shape:   tuple[int, ...]
    input_cb:    Codebook
    output_cb:   Codebook | None     # None on the final layer
    weight_cb:   Codebook | None     # None for avgpool
    lut:         ProductLUT
    act_table:   ActivationTable | None
    weight_idx:  np.ndarray | None   # (out, fan_in) codebook indices
    bias_idx:    np.ndarray | None   # (out,)
    bias_terms:  np.ndarray | None   # (out,) int64
    dx:          float
    kernel:      tuple[int, int] = (1, 1)
    stride:      int = 1
    padding:     int = 0
    pool:        int = 0

    @property
    def n_params(self) -> int:
        if self.weight_idx is None:
            return 0
        return int(self.weight_idx.size + self.bias_idx.size)

    @property
    def fan_in(self) -> int:
        if self.kind == 'avgpool':
            return self.pool * self.pool
        return int(self.weight_idx.shape[1])


@dataclass(frozen=True)
class QuantizedModel:
    layers:      tuple[QuantizedLayer, ...]
    input_shape: tuple[int, ...]
    s:           int
    method:      str = ''
    meta:        dict = field(default_factory=dict)

    @property
    def input_cb(self) -> Codebook:
        return self.layers[0].input_cb

    @property
    def n_net(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))


def _cb_to_json(cb: Codebook | None) -> dict | None:
    if cb is None:
        return None
    return {'scheme': cb.scheme, 'levels': cb.levels.tolist(),
            'n_q': cb.n_q, 'n_o': cb.n_o, 'k_max': cb.k_max}


def _cb_from_json(d: dict | None) -> Codebook | None:
    if d is None:
        return None
    return Codebook(levels=np.asarray(d['levels'], dtype=np.float64), scheme=d['scheme'],
                    n_q=int(d.get('n_q', 0)), n_o=int(d.get('n_o', 0)),
                    k_max=float(d.get('k_max', 0.0)))


def save_quantized_model(qmodel: QuantizedModel, path) -> None:
    layers_meta = []
    sections: dict[str, np.ndarray] = {}
    for i, layer in enumerate(qmodel.layers):
        entry = {
            'kind': layer.kind, 'activation': layer.activation,
            'in_shape': list(layer.in_shape), 'out_shape': list(layer.out_shape),
            'kernel': list(layer.kernel), 'stride': layer.stride, 'padding': layer.padding,
            'pool': layer.pool, 'dx': layer.dx, 'lut_width_bits': layer.lut.width_bits,
            'input_cb': _cb_to_json(layer.input_cb), 'output_cb': _cb_to_json(layer.output_cb),
            'weight_cb': _cb_to_json(layer.weight_cb),
            'k0': layer.act_table.k0 if layer.act_table is not None else None,
        }
        sections[f'layer{i}.lut'] = layer.lut.entries.astype('<i4')
        if layer.act_table is not None:
            sections[f'layer{i}.act'] = layer.act_table.entries.astype('<u2')
        if layer.weight_idx is not None:
            flat = np.concatenate((layer.weight_idx.ravel(), layer.bias_idx.ravel()))
            entry['weight_idx_shape'] = list(layer.weight_idx.shape)
            sections[f'layer{i}.widx'] = pack_weight_indices(flat, len(layer.weight_cb))
            sections[f'layer{i}.bias'] = layer.bias_terms.astype('<i8')
        layers_meta.append(entry)
    meta = {'format': FORMAT_TAG, 's': qmodel.s, 'method': qmodel.method,
            'input_shape': list(qmodel.input_shape), 'layers': layers_meta,
            'extra': qmodel.meta}
    write_container(path, MAGIC_LUT, meta, sections)
    print(f'[Tables] wrote {len(qmodel.layers)} layer(s), N_net={qmodel.n_net} → {path}')


def load_quantized_model(path) -> QuantizedModel:
    meta, sections = read_container(path, MAGIC_LUT)
    if meta.get('format') != FORMAT_TAG:
        raise ModelFormatError(f'unsupported format {meta.get("format")!r}', path=str(path))
    s = int(meta['s'])
    layers = []
    for i, entry in enumerate(meta['layers']):
        try:
            input_cb = _cb_from_json(entry['input_cb'])
            weight_cb = _cb_from_json(entry['weight_cb'])
            lut_entries = sections[f'layer{i}.lut'].astype(np.int64)
            rows = len(weight_cb) if weight_cb is not None else 1
            if lut_entries.shape != (rows, len(input_cb)):
                raise ModelFormatError(f'layer {i}: LUT shape {lut_entries.shape} does not match '
                                       f'codebooks ({rows}, {len(input_cb)})', path=str(path))
            lut_entries.setflags(write=False)
            act_table = None
            if f'layer{i}.act' in sections:
                act_table = ActivationTable(entries=sections[f'layer{i}.act'].astype(np.uint16),
                                            k0=int(entry['k0']), dx=float(entry['dx']))
            weight_idx = bias_idx = bias_terms = None
            if weight_cb is not None:
                out, fan_in = (int(d) for d in entry['weight_idx_shape'])
                flat = unpack_weight_indices(sections[f'layer{i}.widx'], len(weight_cb),
                                             out * fan_in + out)
                weight_idx = flat[:out * fan_in].reshape(out, fan_in)
                bias_idx = flat[out * fan_in:]
                bias_terms = sections[f'layer{i}.bias'].astype(np.int64)
        except (KeyError, TableError) as exc:
            raise ModelFormatError(f'layer {i}: {exc}', path=str(path)) from None
        layers.append(QuantizedLayer(
            kind=entry['kind'], activation=entry['activation'],
            in_shape=tuple(entry['in_shape']), out_shape=tuple(entry['out_shape']),
            input_cb=input_cb, output_cb=_cb_from_json(entry['output_cb']), weight_cb=weight_cb,
            lut=ProductLUT(entries=lut_entries, s=s, dx=float(entry['dx'])),
            act_table=act_table, weight_idx=weight_idx, bias_idx=bias_idx,
            bias_terms=bias_terms, dx=float(entry['dx']), kernel=tuple(entry['kernel']),
            stride=int(entry['stride']), padding=int(entry['padding']),
            pool=int(entry['pool'])))
    return QuantizedModel(layers=tuple(layers), input_shape=tuple(meta['input_shape']), s=s,
                          method=meta.get('method', ''), meta=meta.get('extra', {}))
