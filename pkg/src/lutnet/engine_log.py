"""
engine_log.py — Octave/octave path: weights and activations as sign + log index.

A value x on a grid with N_q samples per octave is (s_x, v_x), v_x = round(N_q·log₂|x|).

  multiply   v = (v_a << sh_a) + (v_w << sh_w) at N_t = max(N_q;w, N_q;a); s = s_w·s_a
  log→lin    r = v − E·N_t;  i = r & (N_t−1);  o = r >> log₂N_t;  X = T_q[i] shifted by o
  lin→log    p = 63 − nlz64(|X|);  b = M bits below the leading one;
             v = (p − P)·N_q;a + T_q_inv[b] + E·N_q;a

Fixed-point values carry x / S_max · 2^P with S_max = 2^E, P = N_o;a + M + 1 and
M = ⌈log₂ 4N_q;a⌉; the accumulator is int64 with LOG_HEADROOM_BITS to spare.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import config
from .codebooks import ceil_log2, round_half_away
from .container import MAGIC_LOG, read_container, write_container
from .engine_lut import LayerTrace, top_k
from .errors import LogDomainError, ModelFormatError
from .model_core import receptive_fields
from .tables import index_width, pack_weight_indices, signed_width, unpack_weight_indices

FORMAT_TAG = 'lutnet-lutl/1'


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


# ══════════════════════════════════════════════════════════════════════════
# Leading zeros
# ══════════════════════════════════════════════════════════════════════════

_NLZ_STEPS = ((16, 0x0000FFFF), (8, 0x00FFFFFF), (4, 0x0FFFFFFF), (2, 0x3FFFFFFF), (1, 0x7FFFFFFF))


def nlz(x) -> np.ndarray:
    """Leading zero bits of 32-bit unsigned values; nlz(0) = 32.

    Compare/select/shift only: each step moves the leading one up when the top
    `shift` bits are clear.
    """
    x = np.asarray(x, dtype=np.uint32)
    n = np.zeros(x.shape, dtype=np.int64)
    for shift, limit in _NLZ_STEPS:
        low = x <= np.uint32(limit)
        n = np.where(low, n + shift, n)
        x = np.where(low, x << np.uint32(shift), x)
    return np.where(x == 0, n + 1, n)


def nlz64(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64)
    hi = (x >> np.uint64(32)).astype(np.uint32)
    lo = (x & np.uint64(0xFFFFFFFF)).astype(np.uint32)
    return np.where(hi != 0, nlz(hi), 32 + nlz(lo))


# ══════════════════════════════════════════════════════════════════════════
# Log values and grids
# ══════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class LogGrid:
    """v ∈ [N_q·(top − N_o), N_q·top − 1]: N_o octaves below 2^top."""

    n_q: int
    n_o: int
    top: int

    @property
    def v_min(self) -> int:
        return self.n_q * (self.top - self.n_o)

    @property
    def v_max(self) -> int:
        return self.n_q * self.top - 1


@dataclass(frozen=True)
class LogValue:
    """Sign (−1, 0, +1) and log index; scalars or matching arrays."""

    sign: np.ndarray
    v:    np.ndarray
    n_q:  int

    def decode(self) -> np.ndarray:
        return np.where(self.sign == 0, 0.0,
                        self.sign * np.exp2(np.asarray(self.v, dtype=np.float64) / self.n_q))


def encode_log(x, n_q: int, grid: LogGrid | None = None) -> LogValue:
    """round(N_q·log₂|x|) with the sign; on a grid, |x| < smallest/√2 is zero, others clamp."""
    x = np.asarray(x, dtype=np.float64)
    mag = np.abs(x)
    with np.errstate(divide='ignore'):
        exact = n_q * np.log2(np.where(mag > 0.0, mag, 1.0))
    v = round_half_away(exact).astype(np.int64)
    sign = np.sign(x).astype(np.int64)
    if grid is not None:
        if grid.n_q != n_q:
            raise LogDomainError(f'grid has N_q={grid.n_q}, value encoded at N_q={n_q}')
        sign = np.where(exact < grid.v_min - n_q / 2.0, 0, sign)
        v = np.clip(v, grid.v_min, grid.v_max)
    v = np.where(sign == 0, 0, v)
    return LogValue(sign=sign, v=v, n_q=n_q)


def _ratio_shift(fine: int, coarse: int) -> int:
    if fine % coarse or not _is_pow2(fine // coarse):
        raise LogDomainError(f'N_q ratio {fine}/{coarse} is not a power of two')
    return (fine // coarse).bit_length() - 1


def log_multiply(w: LogValue, a: LogValue) -> LogValue:
    """Product as index addition at N_t = max(N_q;w, N_q;a); zero absorbs."""
    n_t = max(w.n_q, a.n_q)
    sh_w = _ratio_shift(n_t, w.n_q)
    sh_a = _ratio_shift(n_t, a.n_q)
    sign = np.asarray(w.sign) * np.asarray(a.sign)
    v = np.left_shift(np.asarray(a.v, dtype=np.int64), sh_a) + \
        np.left_shift(np.asarray(w.v, dtype=np.int64), sh_w)
    return LogValue(sign=sign, v=np.where(sign == 0, 0, v), n_q=n_t)


# ══════════════════════════════════════════════════════════════════════════
# T_q / T_q⁻¹
# ══════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class LogTables:
    n_qa: int
    n_oa: int
    n_t: int
    s_exp: int            # E: S_max = 2^E
    mantissa_bits: int    # M
    frac_bits: int        # P
    t_q: np.ndarray
    t_q_inv: np.ndarray

    @property
    def grid(self) -> LogGrid:
        return LogGrid(self.n_qa, self.n_oa, self.s_exp)

    @property
    def entries(self) -> int:
        return int(self.t_q.size + self.t_q_inv.size)


def build_log_tables(n_qw: int, n_qa: int, n_oa: int, s_exp: int) -> LogTables:
    if not (_is_pow2(n_qa) and _is_pow2(n_qw)):
        raise LogDomainError(f'N_q;w={n_qw} and N_q;a={n_qa} must be powers of two')
    n_t = max(n_qw, n_qa)
    m = ceil_log2(4 * n_qa)
    p = n_oa + m + 1
    i = np.arange(n_t)
    t_q = round_half_away(np.ldexp(np.exp2(i / n_t), p)).astype(np.int64)
    b = np.arange(1 << m)
    t_q_inv = round_half_away(n_qa * np.log2(1.0 + b / float(1 << m))).astype(np.int64)
    for arr in (t_q, t_q_inv):
        arr.setflags(write=False)
    return LogTables(n_qa=n_qa, n_oa=n_oa, n_t=n_t, s_exp=s_exp, mantissa_bits=m,
                     frac_bits=p, t_q=t_q, t_q_inv=t_q_inv)


def log_to_linear(value: LogValue, tables: LogTables) -> np.ndarray:
    """Signed fixed-point value at scale 2^P / S_max, by mask and shift only."""
    if value.n_q != tables.n_t:
        shift = _ratio_shift(tables.n_t, value.n_q)
        value = LogValue(sign=value.sign, v=np.left_shift(np.asarray(value.v), shift),
                         n_q=tables.n_t)
    r = np.asarray(value.v, dtype=np.int64) - tables.s_exp * tables.n_t
    i = r & (tables.n_t - 1)
    o = r >> (tables.n_t.bit_length() - 1)
    base = tables.t_q[i]
    mag = np.where(o >= 0, np.left_shift(base, np.maximum(o, 0)),
                   np.right_shift(base, np.minimum(-o, 63)))
    sign = np.asarray(value.sign, dtype=np.int64)
    return np.where(sign < 0, -mag, np.where(sign == 0, 0, mag))


def linear_to_log(acc, tables: LogTables) -> LogValue:
    """Fixed-point accumulator back to a log index at N_q;a (no grid clamping)."""
    acc = np.asarray(acc, dtype=np.int64)
    sign = np.sign(acc)
    mag = np.abs(acc).astype(np.uint64)
    p = 63 - nlz64(mag)
    m = tables.mantissa_bits
    mask = (1 << m) - 1
    down = np.right_shift(mag, np.maximum(p - m, 0).astype(np.uint64))
    up = np.left_shift(mag, np.maximum(m - p, 0).astype(np.uint64))
    b = (np.where(p >= m, down, up) & np.uint64(mask)).astype(np.int64)
    v = (p - tables.frac_bits) * tables.n_qa + tables.t_q_inv[b] + tables.s_exp * tables.n_qa
    return LogValue(sign=sign, v=np.where(sign == 0, 0, v), n_q=tables.n_qa)


def relu6_log(value: LogValue, grid: LogGrid) -> LogValue:
    """relu6 then snap onto the activation grid, in the log domain."""
    v = np.asarray(value.v, dtype=np.int64)
    sign = np.where(np.asarray(value.sign) > 0, 1, 0)
    # halfway (in log units) below the smallest level flushes to zero
    sign = np.where(2 * v < 2 * grid.v_min - grid.n_q, 0, sign)
    v6 = int(round_half_away(grid.n_q * math.log2(6.0)))
    v = np.clip(v, grid.v_min, min(grid.v_max, v6))
    return LogValue(sign=sign, v=np.where(sign == 0, 0, v), n_q=grid.n_q)


# ══════════════════════════════════════════════════════════════════════════
# Log model
# ══════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class LogLayer:
    kind:       str
    activation: str
    in_shape:   tuple[int, ...]
    out_shape:  tuple[int, ...]
    w_grid:     LogGrid              # weight grid; top = log₂ K_max
    w_sign:     np.ndarray           # (out, fan_in) in {−1, 0, +1}
    w_v:        np.ndarray           # (out, fan_in) log index at N_q;w
    b_sign:     np.ndarray           # (out,)
    b_v:        np.ndarray
    kernel:     tuple[int, int] = (1, 1)
    stride:     int = 1
    padding:    int = 0
    pool:       int = 0

    @property
    def fan_in(self) -> int:
        return int(self.w_sign.shape[1])

    @property
    def n_params(self) -> int:
        return int(self.w_sign.size + self.b_sign.size)


@dataclass(frozen=True)
class LogQuantModel:
    layers:      tuple[LogLayer, ...]
    input_shape: tuple[int, ...]
    tables:      LogTables
    headroom:    int = config.LOG_HEADROOM_BITS
    meta:        dict = field(default_factory=dict)

    @property
    def a_grid(self) -> LogGrid:
        return self.tables.grid

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def n_net(self) -> int:
        return sum(layer.n_params for layer in self.layers)


def check_headroom(model: LogQuantModel) -> None:
    """Largest possible |accumulator| must leave `headroom` bits free in int64."""
    t = model.tables
    for i, layer in enumerate(model.layers):
        term_bits = t.frac_bits + max(layer.w_grid.top, 0) + 1
        need = term_bits + (layer.fan_in + 1).bit_length() + 1
        if need + model.headroom > 64:
            raise LogDomainError(f'layer {i}: accumulator needs {need} bits, leaving fewer than '
                                 f'{model.headroom} headroom bits')


def octave_to_log(k, n, n_q: int, top: int) -> np.ndarray:
    """Octave codebook (k, n) to a log index: v = N_q·top − (k·N_q + n)."""
    return n_q * top - (np.asarray(k) * n_q + np.asarray(n))


@dataclass
class LogResult:
    logits:      np.ndarray
    topk:        np.ndarray
    peak_widths: list[int] = field(default_factory=list)
    trace:       list[LayerTrace] = field(default_factory=list)


def _gather(layer: LogLayer, rf: np.ndarray, sign: np.ndarray, v: np.ndarray):
    """Per-position activation (sign, v), padded taps forced to zero."""
    if layer.kind == 'dense':
        return sign[None, :], v[None, :]
    valid = rf >= 0
    safe = np.where(valid, rf, 0)
    return np.where(valid, sign[safe], 0), v[safe]


def _layer_terms(layer: LogLayer, model: LogQuantModel, rf, sign, v) -> np.ndarray:
    """(out, positions, fan_in + 1) fixed-point terms, bias last."""
    a_s, a_v = _gather(layer, rf, sign, v)
    w = LogValue(sign=layer.w_sign[:, None, :], v=layer.w_v[:, None, :], n_q=layer.w_grid.n_q)
    a = LogValue(sign=a_s[None], v=a_v[None], n_q=model.tables.n_qa)
    prod = log_to_linear(log_multiply(w, a), model.tables)
    bias = log_to_linear(LogValue(sign=layer.b_sign, v=layer.b_v, n_q=layer.w_grid.n_q),
                         model.tables)
    bias = np.broadcast_to(bias[:, None, None], prod.shape[:2] + (1,))
    return np.concatenate((prod, bias), axis=2)


def forward_log(model: LogQuantModel, inputs, *, topk: int = config.TOPK,
                order: str = 'stream', trace: bool = False) -> LogResult:
    """Integer forward pass; final layer returns fixed-point accumulators."""
    if order not in ('stream', 'magnitude'):
        raise LogDomainError(f'order must be "stream" or "magnitude", got {order!r}')
    x = np.asarray(inputs, dtype=np.float64).ravel()
    if x.size != model.input_size:
        raise LogDomainError(f'input has {x.size} values; model expects {model.input_size}')
    act = encode_log(x, model.tables.n_qa, model.a_grid)
    sign, v = np.asarray(act.sign), np.asarray(act.v)
    peaks, traces = [], []
    last = len(model.layers) - 1
    acc = np.zeros(0, dtype=np.int64)
    for i, layer in enumerate(model.layers):
        rf = receptive_fields(layer, layer.in_shape)
        terms = _layer_terms(layer, model, rf, sign, v)
        if order == 'magnitude':
            w_mag = np.concatenate((np.where(layer.w_sign != 0, layer.w_v, np.iinfo(np.int64).min),
                                    np.where(layer.b_sign != 0, layer.b_v,
                                             np.iinfo(np.int64).min)[:, None]), axis=1)
            perm = np.argsort(w_mag, axis=1, kind='stable')[:, None, :]
            terms = np.take_along_axis(terms, np.broadcast_to(perm, terms.shape), axis=2)
        partial = np.cumsum(terms, axis=2)
        peaks.append(signed_width(partial))
        acc = partial[..., -1]
        assert np.all(np.abs(acc) < (1 << (63 - model.headroom))), \
            f'headroom exhausted in layer {i}'
        if i == last:
            if trace:
                traces.append(LayerTrace(in_idx=v, acc=acc, out_idx=None))
            break
        out = relu6_log(linear_to_log(acc.ravel(), model.tables), model.a_grid)
        if trace:
            traces.append(LayerTrace(in_idx=v, acc=acc, out_idx=np.asarray(out.v)))
        sign, v = np.asarray(out.sign), np.asarray(out.v)
    logits = acc.ravel()
    return LogResult(logits=logits, topk=top_k(logits, topk), peak_widths=peaks, trace=traces)


def logits_to_real(model: LogQuantModel, logits) -> np.ndarray:
    return np.asarray(logits, dtype=np.float64) * math.ldexp(1.0, model.tables.s_exp
                                                              - model.tables.frac_bits)


def forward_log_reference(model: LogQuantModel, inputs,
                          *, trace: bool = False) -> tuple[np.ndarray, list[LayerTrace]]:
    """Grid values, exact float64 sums, the same log-domain activation quantizer."""
    x = np.asarray(inputs, dtype=np.float64).ravel()
    act = encode_log(x, model.tables.n_qa, model.a_grid)
    traces = []
    last = len(model.layers) - 1
    y = np.zeros(0)
    for i, layer in enumerate(model.layers):
        rf = receptive_fields(layer, layer.in_shape)
        a = act.decode()
        w = LogValue(sign=layer.w_sign, v=layer.w_v, n_q=layer.w_grid.n_q).decode()
        b = LogValue(sign=layer.b_sign, v=layer.b_v, n_q=layer.w_grid.n_q).decode()
        if layer.kind == 'dense':
            y = (w @ a + b)[:, None]
        else:
            valid = rf >= 0
            a_rf = np.where(valid, a[np.where(valid, rf, 0)], 0.0)
            y = np.einsum('of,pf->op', w, a_rf) + b[:, None]
        if i == last:
            if trace:
                traces.append(LayerTrace(in_idx=np.asarray(act.v), acc=y, out_idx=None))
            break
        in_v = np.asarray(act.v)
        act = relu6_log(encode_log(y.ravel(), model.tables.n_qa), model.a_grid)
        if trace:
            traces.append(LayerTrace(in_idx=in_v, acc=y, out_idx=np.asarray(act.v)))
    return y.ravel(), traces


def accumulation_error_bound(model: LogQuantModel, terms: int) -> float:
    """T·S_max·2^-(N_o;a + 2) for T addends."""
    return terms * math.ldexp(1.0, model.tables.s_exp - model.tables.n_oa - 2)


# ══════════════════════════════════════════════════════════════════════════
# .lutl container
# ══════════════════════════════════════════════════════════════════════════

def _record_fields(grid: LogGrid) -> tuple[int, int]:
    return index_width(grid.n_o), index_width(grid.n_q)


def encode_weight_stream(layer: LogLayer) -> tuple[np.ndarray, np.ndarray]:
    """Presence bitmap plus packed (sign, k, n−1) records of the non-zero entries."""
    sign = np.concatenate((layer.w_sign.ravel(), layer.b_sign.ravel()))
    v = np.concatenate((layer.w_v.ravel(), layer.b_v.ravel()))
    present = (sign != 0).astype(np.int64)
    g = layer.w_grid
    m = g.n_q * g.top - v[sign != 0]           # k·N_q + n, n ∈ [1, N_q]
    k, n1 = (m - 1) // g.n_q, (m - 1) % g.n_q
    kb, nb = _record_fields(g)
    rec = (sign[sign != 0] < 0).astype(np.int64) | (k << 1) | (n1 << (1 + kb))
    return pack_weight_indices(present, 2), pack_weight_indices(rec, 1 << (1 + kb + nb))


def decode_weight_stream(present_bits, records, grid: LogGrid, count: int):
    present = unpack_weight_indices(present_bits, 2, count).astype(bool)
    kb, nb = _record_fields(grid)
    rec = unpack_weight_indices(records, 1 << (1 + kb + nb), int(present.sum()))
    k = (rec >> 1) & ((1 << kb) - 1)
    n = ((rec >> (1 + kb)) & ((1 << nb) - 1)) + 1
    sign = np.zeros(count, dtype=np.int64)
    v = np.zeros(count, dtype=np.int64)
    sign[present] = np.where(rec & 1, -1, 1)
    v[present] = octave_to_log(k, n, grid.n_q, grid.top)
    return sign, v


def save_log_model(model: LogQuantModel, path) -> None:
    t = model.tables
    sections: dict[str, np.ndarray] = {'t_q': t.t_q.astype('<i8'),
                                       't_q_inv': t.t_q_inv.astype('<i4')}
    layers = []
    for i, layer in enumerate(model.layers):
        present, records = encode_weight_stream(layer)
        sections[f'layer{i}.present'] = present
        sections[f'layer{i}.records'] = records
        layers.append({
            'kind': layer.kind, 'activation': layer.activation,
            'in_shape': list(layer.in_shape), 'out_shape': list(layer.out_shape),
            'kernel': list(layer.kernel), 'stride': layer.stride, 'padding': layer.padding,
            'w_grid': [layer.w_grid.n_q, layer.w_grid.n_o, layer.w_grid.top],
            'weights_shape': list(layer.w_sign.shape),
        })
    meta = {'format': FORMAT_TAG, 'input_shape': list(model.input_shape),
            'n_qa': t.n_qa, 'n_oa': t.n_oa, 'n_t': t.n_t, 's_exp': t.s_exp,
            'headroom': model.headroom, 'layers': layers, 'extra': model.meta}
    write_container(path, MAGIC_LOG, meta, sections)
    print(f'[Log] wrote {len(layers)} layer(s), N_net={model.n_net} → {path}')


def load_log_model(path) -> LogQuantModel:
    meta, sections = read_container(path, MAGIC_LOG)
    if meta.get('format') != FORMAT_TAG:
        raise ModelFormatError(f'unsupported format {meta.get("format")!r}', path=str(path))
    layers = []
    for i, entry in enumerate(meta['layers']):
        try:
            grid = LogGrid(*(int(g) for g in entry['w_grid']))
            out, fan_in = (int(d) for d in entry['weights_shape'])
            sign, v = decode_weight_stream(sections[f'layer{i}.present'],
                                           sections[f'layer{i}.records'], grid,
                                           out * fan_in + out)
        except (KeyError, ValueError) as exc:
            raise ModelFormatError(f'layer {i}: {exc}', path=str(path)) from None
        layers.append(LogLayer(
            kind=entry['kind'], activation=entry['activation'],
            in_shape=tuple(entry['in_shape']), out_shape=tuple(entry['out_shape']),
            w_grid=grid, w_sign=sign[:out * fan_in].reshape(out, fan_in),
            w_v=v[:out * fan_in].reshape(out, fan_in), b_sign=sign[out * fan_in:],
            b_v=v[out * fan_in:], kernel=tuple(entry['kernel']), stride=int(entry['stride']),
            padding=int(entry['padding'])))
    tables = build_log_tables(int(meta["n_t"]), int(meta['n_qa']), int(meta['n_oa']),
                              int(meta['s_exp']))
    if not (np.array_equal(tables.t_q, sections['t_q'])
            and np.array_equal(tables.t_q_inv, sections['t_q_inv'])):
        raise ModelFormatError('stored T_q / T_q_inv do not match the header parameters',
                               path=str(path))
    return LogQuantModel(layers=tuple(layers), input_shape=tuple(meta['input_shape']),
                         tables=tables, headroom=int(meta['headroom']),
                         meta=meta.get('extra', {}))
