"""
quantize.py — Float model → quantized model pipeline.

  fold_model → per-layer weight codebook (weights and biases pooled)
             → index assignment (nearest level, or rank scatter for model-free)
             → activation codebooks and Δx per layer
             → tables (QuantizedModel, .lutq) or log streams (LogQuantModel, .lutl)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import config
from .codebooks import (Codebook, ceil_log2, kmeans_1d, laplacian_codebook, modelfree_layer,
                        modelfree_requantize, octave_activations, octave_codebook,
                        uniform_linear_activations)
from .engine_log import LogGrid, LogLayer, LogQuantModel, build_log_tables, check_headroom, \
    octave_to_log
from .errors import CodebookError, LogDomainError
from .fold import fold_model
from .model_core import FloatModel, LayerSpec
from .tables import (QuantizedLayer, QuantizedModel, build_activation_table, build_pool_lut,
                     build_product_lut, quantize_bias_terms)

WEIGHT_METHODS = ('kmeans', 'kmeans-dp', 'laplacian', 'modelfree', 'octave')


@dataclass(frozen=True)
class QuantizeParams:
    method:      str = 'octave'
    n_w:         int = 16                  # kmeans / laplacian / modelfree levels
    n_q:         int = 8                   # octave weights: samples per octave
    n_o:         int = 4                   # octave weights: octaves
    activations: str = 'uniform'           # 'uniform' (LUT engine) or 'octave' (log engine)
    n_a:         int = 16
    n_qa:        int = 32
    n_oa:        int = 3
    s:           int = config.SHIFT_BITS
    tanh_dx:     float = config.TANH_DX
    input_range: tuple[float, float] | None = None
    center:      str = config.MODELFREE_CENTER
    seed:        int = 0
    subsample:   int = config.KMEANS_SUBSAMPLE

    def __post_init__(self) -> None:
        if self.method not in WEIGHT_METHODS:
            raise CodebookError(f'unknown method {self.method!r}; '
                                f'expected one of {", ".join(WEIGHT_METHODS)}')
        if self.activations not in ('uniform', 'octave'):
            raise CodebookError(f'activations must be "uniform" or "octave", '
                                f'got {self.activations!r}')

    def as_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


# ── Weights ───────────────────────────────────────────────────────────────

def layer_parameters(layer: LayerSpec) -> np.ndarray:
    """Weights (output-major) followed by biases, as one float64 vector."""
    bias = layer.bias if layer.bias is not None else np.zeros(layer.out_channels)
    return np.concatenate((layer.weights.astype(np.float64).ravel(),
                           np.asarray(bias, dtype=np.float64)))


def weight_codebook(values, params: QuantizeParams) -> Codebook:
    v = np.asarray(values, dtype=np.float64).ravel()
    if params.method == 'kmeans':
        return kmeans_1d(v, params.n_w, seed=params.seed, subsample=params.subsample)
    if params.method == 'kmeans-dp':
        return kmeans_1d(v, params.n_w, seed=params.seed, subsample=params.subsample, exact=True)
    if params.method == 'laplacian':
        return laplacian_codebook(v, params.n_w)
    if params.method == 'modelfree':
        return modelfree_layer(v, params.n_w, center=params.center, force_one=True)
    v_max = float(np.max(np.abs(v))) if v.size else 0.0
    return octave_codebook(params.n_q, params.n_o, v_max if v_max > 0.0 else 1.0)


def _layer_codebook(values, params: QuantizeParams, given, i: int) -> Codebook:
    if given is None:
        return weight_codebook(values, params)
    if len(given) <= i or given[i] is None:
        raise CodebookError(f'no weight codebook supplied for layer {i}')
    return given[i]


def assign_indices(values, cb: Codebook) -> np.ndarray:
    """Codebook index per value: rank scatter for model-free, nearest level otherwise."""
    v = np.asarray(values, dtype=np.float64)
    if cb.quantized_values is not None:
        return np.searchsorted(cb.levels, modelfree_requantize(v, cb))
    return cb.nearest_index(v)


# ── Activations ───────────────────────────────────────────────────────────

def input_codebook(model: FloatModel, params: QuantizeParams) -> Codebook:
    first = model.layers[0]
    if params.activations == 'octave':
        return octave_activations(params.n_qa, params.n_oa, 'relu6')
    if params.input_range is not None:
        return uniform_linear_activations(params.n_a, first.activation, params.input_range)
    if first.activation == 'none':
        raise CodebookError('a single-layer model needs an explicit input range')
    return uniform_linear_activations(params.n_a, first.activation)


def _spacing(cb: Codebook) -> float:
    return float(cb.levels[-1] - cb.levels[0]) / (len(cb) - 1)


# ══════════════════════════════════════════════════════════════════════════
# LUT path
# ══════════════════════════════════════════════════════════════════════════

def quantize_model(model: FloatModel, params: QuantizeParams, *,
                   weight_codebooks: list[Codebook | None] | None = None) -> QuantizedModel:
    """Fold, quantize and tabulate *model* for the LUT engine.

    *weight_codebooks* (one per layer, None for avgpool) reuses codebooks frozen
    during training instead of fitting new ones.
    """
    if params.activations != 'uniform':
        raise CodebookError('the LUT engine uses uniform activations; '
                            'octave activations go through quantize_model_log')
    if not model.layers:
        raise CodebookError('cannot quantize a model with no layers')
    model = fold_model(model)
    in_cb = input_codebook(model, params)
    dx_prev = _spacing(in_cb)
    last = len(model.layers) - 1
    layers = []
    for i, (layer, in_shape, out_shape) in enumerate(
            zip(model.layers, model.shapes[:-1], model.shapes[1:])):
        if layer.kind == 'avgpool':
            dx = _spacing(in_cb)
            qlayer = QuantizedLayer(
                kind='avgpool', activation='relu6', in_shape=in_shape, out_shape=out_shape,
                input_cb=in_cb, output_cb=in_cb, weight_cb=None,
                lut=build_pool_lut(in_cb, layer.pool, params.s, dx),
                act_table=build_activation_table('relu6', in_cb, dx), weight_idx=None,
                bias_idx=None, bias_terms=None, dx=dx, kernel=layer.kernel,
                stride=layer.pool, pool=layer.pool)
            layers.append(qlayer)
            dx_prev = dx
            continue

        values = layer_parameters(layer)
        w_cb = _layer_codebook(values, params, weight_codebooks, i)
        idx = assign_indices(values, w_cb)
        n_weights = layer.weights.size
        weight_idx = idx[:n_weights].reshape(layer.out_channels, -1)
        bias_idx = idx[n_weights:]

        if i == last:
            out_cb, dx, act_table = None, dx_prev, None
        else:
            out_cb = uniform_linear_activations(params.n_a, layer.activation)
            dx = _spacing(out_cb) if layer.activation == 'relu6' else params.tanh_dx
            act_table = build_activation_table(layer.activation, out_cb, dx)
        layers.append(QuantizedLayer(
            kind=layer.kind, activation=layer.activation, in_shape=in_shape,
            out_shape=out_shape, input_cb=in_cb, output_cb=out_cb, weight_cb=w_cb,
            lut=build_product_lut(w_cb, in_cb, params.s, dx), act_table=act_table,
            weight_idx=weight_idx, bias_idx=bias_idx,
            bias_terms=quantize_bias_terms(w_cb.levels[bias_idx], w_cb, params.s, dx),
            dx=dx, kernel=layer.kernel, stride=layer.stride, padding=layer.padding))
        print(f'[Quantize] layer {i} ({layer.kind}): {params.method} N_w={len(w_cb)} '
              f'N_a={len(in_cb)} Δx={dx:.6g} LUT {len(w_cb)}x{len(in_cb)}')
        if out_cb is not None:
            in_cb, dx_prev = out_cb, dx
    return QuantizedModel(layers=tuple(layers), input_shape=model.input_shape, s=params.s,
                          method=params.method, meta={'params': params.as_dict()})


# ══════════════════════════════════════════════════════════════════════════
# Log path
# ══════════════════════════════════════════════════════════════════════════

def quantize_model_log(model: FloatModel, params: QuantizeParams, *,
                       weight_codebooks: list[Codebook | None] | None = None) -> LogQuantModel:
    """Octave weights and octave relu6 activations for the log engine."""
    if params.method != 'octave' or params.activations != 'octave':
        raise LogDomainError('the log engine needs octave weights and octave activations')
    model = fold_model(model)
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        if layer.kind == 'avgpool':
            raise LogDomainError(f'layer {i}: avgpool is not supported by the log engine')
        if i != last and layer.activation != 'relu6':
            raise LogDomainError(f'layer {i}: hidden layers must use relu6, '
                                 f'got {layer.activation}')
    codebooks = []
    for i, layer in enumerate(model.layers):
        w_cb = _layer_codebook(layer_parameters(layer), params, weight_codebooks, i)
        if w_cb.scheme != 'octave':
            raise LogDomainError(f'layer {i}: log engine needs an octave codebook, '
                                 f'got {w_cb.scheme}')
        codebooks.append(w_cb)
    n_qw = {cb.n_q for cb in codebooks} or {params.n_q}
    if len(n_qw) != 1:
        raise LogDomainError(f'weight codebooks mix N_q values {sorted(n_qw)}; '
                             'the shared tables need one')
    a_cb = octave_activations(params.n_qa, params.n_oa, 'relu6')
    tables = build_log_tables(n_qw.pop(), params.n_qa, params.n_oa, a_cb.exponent)
    layers = []
    for i, (layer, w_cb, in_shape, out_shape) in enumerate(
            zip(model.layers, codebooks, model.shapes[:-1], model.shapes[1:])):
        values = layer_parameters(layer)
        grid = LogGrid(w_cb.n_q, w_cb.n_o, ceil_log2(w_cb.k_max))
        sign, k, n = w_cb.octave_decompose(w_cb.nearest_index(values))
        v = np.where(sign == 0, 0, octave_to_log(k, n, grid.n_q, grid.top))
        n_weights = layer.weights.size
        out = layer.out_channels
        layers.append(LogLayer(
            kind=layer.kind, activation=layer.activation, in_shape=in_shape,
            out_shape=out_shape, w_grid=grid, w_sign=sign[:n_weights].reshape(out, -1),
            w_v=v[:n_weights].reshape(out, -1), b_sign=sign[n_weights:], b_v=v[n_weights:],
            kernel=layer.kernel, stride=layer.stride, padding=layer.padding))
        dropped = int(np.count_nonzero(sign == 0))
        print(f'[Quantize] layer {i} ({layer.kind}): octave N_q={grid.n_q} N_o={grid.n_o} '
              f'K_max=2^{grid.top}, {dropped} zero weight(s) dropped')
    logmodel = LogQuantModel(layers=tuple(layers), input_shape=model.input_shape,
                             tables=tables, meta={'params': params.as_dict()})
    check_headroom(logmodel)
    return logmodel
