"""
fold.py — Remove batch-norm and weight-norm by folding them into weight layers.

Per output channel o, a norm that follows the layer gives
    w ← (γ/σ)·w        b ← (γ/σ)·b + β − (γ/σ)·m
A norm that precedes it (one per input channel i) gives, bias first,
    b ← b + Σᵢ (βᵢ − (γᵢ/σᵢ)·mᵢ)·wᵢ        then  wᵢ ← (γᵢ/σᵢ)·wᵢ
Weight-norm is the same with γ/σ replaced by its scale s and a zero offset.

Everything is pure: the input LayerSpec / FloatModel is never modified.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import FoldError
from .model_core import FloatModel, LayerSpec, NormParams


def _bias64(layer: LayerSpec) -> np.ndarray:
    # an initially-zero bias is added when the layer has none
    if layer.bias is None:
        return np.zeros(layer.out_channels, dtype=np.float64)
    return layer.bias.astype(np.float64)


def _per_output(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def fold_bn_after(layer: LayerSpec) -> LayerSpec:
    """Absorb the norm that follows *layer* into its weights and bias."""
    if layer.norm is None:
        return layer
    norm = layer.norm
    if norm.channels != layer.out_channels:
        raise FoldError(f'norm has {norm.channels} channels, '
                        f'layer has {layer.out_channels} outputs')
    sigma2 = norm.var.astype(np.float64) + norm.eps
    if np.any(sigma2 <= 0.0):
        raise FoldError('var + eps must be positive')
    scale, offset = norm.scale, norm.offset
    w = layer.weights.astype(np.float64) * _per_output(scale, layer.weights.ndim)
    b = scale * _bias64(layer) + offset
    return dataclasses.replace(layer, weights=w, bias=b, norm=None)


def fold_bn_before(layer: LayerSpec, norm: NormParams | None = None) -> LayerSpec:
    """Absorb a norm applied to the layer's inputs (one entry per input channel).

    *norm* defaults to ``layer.pre_norm``.  Any weight-norm on the layer is
    folded first so the bias update sees the effective weights.
    """
    norm = norm if norm is not None else layer.pre_norm
    if norm is None:
        return layer
    if layer.weights is None:
        raise FoldError(f'cannot fold a norm into a {layer.kind} layer')
    n_in = int(layer.weights.shape[1])
    if norm.channels != n_in:
        raise FoldError(f'norm has {norm.channels} channels, layer has {n_in} inputs')
    if layer.kind == 'conv2d' and layer.padding > 0:
        raise FoldError('cannot fold a preceding norm into a zero-padded conv2d')
    if layer.weight_scale is not None:
        layer = fold_weight_norm(layer)
    w = layer.weights.astype(np.float64)
    # bias first, through the original weights
    w_in = w.reshape(w.shape[0], n_in, -1).sum(axis=2)
    b = _bias64(layer) + w_in @ norm.offset
    in_shape = (1, -1) + (1,) * (w.ndim - 2)
    w = w * norm.scale.reshape(in_shape)
    return dataclasses.replace(layer, weights=w, bias=b, pre_norm=None)


def fold_weight_norm(layer: LayerSpec) -> LayerSpec:
    """w ← s·w (s scalar or per output channel); bias unchanged."""
    if layer.weight_scale is None:
        return layer
    s = layer.weight_scale.astype(np.float64)
    w = layer.weights.astype(np.float64)
    w = w * (_per_output(s, w.ndim) if s.size > 1 else s[0])
    return dataclasses.replace(layer, weights=w, weight_scale=None)


def fold_shared_norm(norm: NormParams, consumers) -> list[LayerSpec]:
    """Fold one norm into every weight layer it feeds directly."""
    return [fold_bn_before(layer, norm) for layer in consumers]


def fold_layer(layer: LayerSpec) -> LayerSpec:
    if layer.kind == 'avgpool':
        return layer
    return fold_bn_after(fold_bn_before(fold_weight_norm(layer)))


def fold_model(model: FloatModel) -> FloatModel:
    """Fold every normalization in *model*; idempotent on a folded model."""
    pending = sum(1 for layer in model.layers if layer.kind != 'avgpool' and layer.has_norms)
    layers = tuple(fold_layer(layer) for layer in model.layers)
    if pending:
        print(f'[Fold] folded normalizations in {pending} of {len(layers)} layer(s)')
    return FloatModel(layers=layers, input_shape=model.input_shape)
