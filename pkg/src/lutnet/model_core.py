"""
model_core.py — Float model representation, reference forward pass, checkpoints.

Layer architecture
──────────────────
  dense    — weights (out, in); input is flattened first
  conv2d   — weights (out_c, in_c, kh, kw); input (C, H, W), zero padding
  avgpool  — window = stride = pool; no weights; relu6 only

Per layer the float pass runs
  pre_norm → (weight_scale ⊙ W)·x + b → norm → Γ
where pre_norm / weight_scale / norm are the un-folded normalizations that
fold.py removes.  A fully folded model carries none of them.

Checkpoint format
─────────────────
  <dir>/manifest.json           layer kinds, shapes, activation, norm epsilons
  <dir>/layer<i>.<name>.f32     little-endian IEEE-754 float32, row-major
"""

from __future__ import annotations

import json
import math
import pathlib
from dataclasses import dataclass, field

import numpy as np

from . import config
from .errors import FoldError, ModelFormatError, ShapeError

FORMAT_TAG = 'lutnet-float/1'

LAYER_KINDS = ('dense', 'conv2d', 'avgpool')

# ── Activations Γ ──────────────────────────────────────────────────────────
# Bounded, non-decreasing; 'none' is only legal on the final layer.
ACTIVATION_RANGE: dict[str, tuple[float, float]] = {
    'relu6': (0.0, 6.0),
    'tanh':  (-1.0, 1.0),
}
ACTIVATIONS = ('relu6', 'tanh', 'none')


def apply_activation(name: str, x: np.ndarray) -> np.ndarray:
    """Γ(x) for one of ACTIVATIONS."""
    if name == 'relu6':
        return np.clip(x, 0.0, 6.0)
    if name == 'tanh':
        return np.tanh(x)
    if name == 'none':
        return x
    raise ShapeError(f'unknown activation {name!r}')


def activation_derivative(name: str, x: np.ndarray) -> np.ndarray:
    """dΓ/dx of the continuous activation (the straight-through gradient)."""
    if name == 'relu6':
        return ((x > 0.0) & (x < 6.0)).astype(np.float64)
    if name == 'tanh':
        t = np.tanh(x)
        return 1.0 - t * t
    if name == 'none':
        return np.ones_like(x, dtype=np.float64)
    raise ShapeError(f'unknown activation {name!r}')


def _frozen_f32(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float32, copy=True)
    arr.setflags(write=False)
    return arr


# ══════════════════════════════════════════════════════════════════════════
# Domain types
# ══════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class NormParams:
    """Batch-norm statistics per channel: y = γ/σ · (x − m) + β, σ = sqrt(var + ε)."""

    gamma: np.ndarray
    beta:  np.ndarray
    mean:  np.ndarray
    var:   np.ndarray
    eps:   float = config.BN_EPSILON

    def __post_init__(self) -> None:
        for name in ('gamma', 'beta', 'mean', 'var'):
            object.__setattr__(self, name, _frozen_f32(np.ravel(getattr(self, name)), name))
        n = self.gamma.size
        if not (self.beta.size == self.mean.size == self.var.size == n):
            raise ShapeError(
                f'norm params disagree on channel count: gamma={n} beta={self.beta.size} '
                f'mean={self.mean.size} var={self.var.size}')
        bad = np.flatnonzero(~(self.var.astype(np.float64) + self.eps > 0.0))
        if bad.size:
            raise FoldError(f'var + eps must be positive; channel {int(bad[0])} '
                            f'has var={float(self.var[bad[0]])}, eps={self.eps}')

    @property
    def channels(self) -> int:
        return int(self.gamma.size)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.var.astype(np.float64) + self.eps)

    @property
    def scale(self) -> np.ndarray:
        """γ/σ in float64."""
        return self.gamma.astype(np.float64) / self.sigma

    @property
    def offset(self) -> np.ndarray:
        """β − (γ/σ)·m in float64."""
        return self.beta.astype(np.float64) - self.scale * self.mean.astype(np.float64)

    def apply(self, x: np.ndarray, axis: int = 0) -> np.ndarray:
        shape = [1] * x.ndim
        shape[axis] = -1
        return x * self.scale.reshape(shape) + self.offset.reshape(shape)


@dataclass(frozen=True)
class LayerSpec:
    """One weight (or pooling) layer plus its un-folded normalizations."""

    kind:         str
    weights:      np.ndarray | None
    bias:         np.ndarray | None
    activation:   str
    norm:         NormParams | None = None
    pre_norm:     NormParams | None = None
    weight_scale: np.ndarray | None = None
    stride:       int = 1
    padding:      int = 0
    pool:         int = 0

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f'unknown layer kind {self.kind!r}')
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f'unknown activation {self.activation!r}')
        if self.kind == 'avgpool':
            if self.pool < 1:
                raise ShapeError('avgpool needs pool >= 1')
            if self.weights is not None or self.bias is not None:
                raise ShapeError('avgpool carries no weights or bias')
            if self.activation != 'relu6':
                raise ShapeError('avgpool is only supported with relu6')
            return
        if self.weights is None:
            raise ShapeError(f'{self.kind} layer needs a weight tensor')
        w = _frozen_f32(self.weights, 'weights')
        want_ndim = 2 if self.kind == 'dense' else 4
        if w.ndim != want_ndim:
            raise ShapeError(f'{self.kind} weights must be {want_ndim}-D, got shape {w.shape}')
        object.__setattr__(self, 'weights', w)
        if self.bias is not None:
            b = _frozen_f32(np.ravel(self.bias), 'bias')
            if b.size != w.shape[0]:
                raise ShapeError(f'bias has {b.size} entries for {w.shape[0]} outputs')
            object.__setattr__(self, 'bias', b)
        if self.weight_scale is not None:
            s = _frozen_f32(np.ravel(self.weight_scale), 'weight_scale')
            if s.size not in (1, w.shape[0]):
                raise ShapeError(f'weight_scale has {s.size} entries for {w.shape[0]} outputs')
            object.__setattr__(self, 'weight_scale', s)
        if self.norm is not None and self.norm.channels != w.shape[0]:
            raise ShapeError(f'norm has {self.norm.channels} channels for {w.shape[0]} outputs')
        if self.pre_norm is not None and self.pre_norm.channels != w.shape[1]:
            raise ShapeError(f'pre_norm has {self.pre_norm.channels} channels '
                             f'for {w.shape[1]} inputs')
        if self.stride < 1 or self.padding < 0:
            raise ShapeError('stride must be >= 1 and padding >= 0')

    @property
    def out_channels(self) -> int:
        return int(self.weights.shape[0])

    @property
    def kernel(self) -> tuple[int, int]:
        if self.kind == 'conv2d':
            return int(self.weights.shape[2]), int(self.weights.shape[3])
        if self.kind == 'avgpool':
            return self.pool, self.pool
        return 1, 1

    @property
    def has_norms(self) -> bool:
        return (self.norm is not None or self.pre_norm is not None
                or self.weight_scale is not None)

    @property
    def parameter_count(self) -> int:
        if self.weights is None:
            return 0
        return int(self.weights.size) + (int(self.bias.size) if self.bias is not None
                                         else int(self.weights.shape[0]))

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Shape this layer produces from *in_shape*; ShapeError if incompatible."""
        if self.kind == 'dense':
            n_in = int(np.prod(in_shape)) if in_shape else 1
            if n_in != self.weights.shape[1]:
                raise ShapeError(f'dense expects {self.weights.shape[1]} inputs, got {n_in}')
            return (int(self.weights.shape[0]),)
        if len(in_shape) != 3:
            raise ShapeError(f'{self.kind} expects a (C, H, W) input, got {in_shape}')
        c, h, w = in_shape
        if self.kind == 'avgpool':
            if h < self.pool or w < self.pool:
                raise ShapeError(f'avgpool window {self.pool} larger than input {h}x{w}')
            return (c, h // self.pool, w // self.pool)
        kh, kw = self.kernel
        if c != self.weights.shape[1]:
            raise ShapeError(f'conv2d expects {self.weights.shape[1]} channels, got {c}')
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f'conv2d kernel {kh}x{kw} does not fit input {h}x{w}')
        return (int(self.weights.shape[0]), int(ho), int(wo))


@dataclass(frozen=True)
class FloatModel:
    """Ordered layer list plus the input shape.  Immutable once built."""

    layers:      tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    shapes:      tuple[tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, 'layers', tuple(self.layers))
        object.__setattr__(self, 'input_shape', tuple(int(d) for d in self.input_shape))
        shapes = [self.input_shape]
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(layer.output_shape(shapes[-1]))
            except ShapeError as exc:
                raise ShapeError(f'layer {i} ({layer.kind}): {exc}') from None
            if layer.activation == 'none' and i != last:
                raise ShapeError(f'layer {i}: activation "none" is only allowed on the final layer')
            if layer.kind == 'avgpool' and (i == 0 or self.layers[i - 1].activation != 'relu6'):
                raise ShapeError(f'layer {i}: avgpool must follow a relu6 layer')
            for name, arr in _layer_tensors(layer):
                if not np.all(np.isfinite(arr)):
                    raise ShapeError(f'layer {i}: {name} holds a non-finite value')
        object.__setattr__(self, 'shapes', tuple(shapes))

    @property
    def n_net(self) -> int:
        """Number of weights and biases in the network."""
        return sum(layer.parameter_count for layer in self.layers)

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape)) if self.input_shape else 1

    @property
    def output_size(self) -> int:
        return int(np.prod(self.shapes[-1])) if self.shapes[-1] else 1


# ══════════════════════════════════════════════════════════════════════════
# Geometry shared by the float pass, the engines and the trainer
# ══════════════════════════════════════════════════════════════════════════

def receptive_fields(layer: LayerSpec, in_shape: tuple[int, ...]) -> np.ndarray:
    """Flat input indices feeding each output position: (positions, fan_in).

    Column order matches ``layer.weights.reshape(out, -1)``; padded taps are -1.
    Dense layers have one position covering every input.
    """
    if layer.kind == 'dense':
        return np.arange(int(np.prod(in_shape)), dtype=np.int64)[None, :]
    c, h, w = in_shape
    kh, kw = layer.kernel
    idx = np.arange(c * h * w, dtype=np.int64).reshape(c, h, w)
    if layer.kind == 'avgpool':
        p = layer.pool
        ho, wo = h // p, w // p
        win = idx[:, :ho * p, :wo * p].reshape(c, ho, p, wo, p).transpose(0, 1, 3, 2, 4)
        return win.reshape(c, ho * wo, p * p)
    pad = layer.padding
    padded = np.pad(idx, ((0, 0), (pad, pad), (pad, pad)), constant_values=-1)
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    win = win[:, ::layer.stride, ::layer.stride]
    ho, wo = win.shape[1], win.shape[2]
    return np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c * kh * kw)


def _effective_weights(layer: LayerSpec) -> np.ndarray:
    w = layer.weights.astype(np.float64)
    if layer.weight_scale is not None:
        s = layer.weight_scale.astype(np.float64)
        w = w * s.reshape((-1,) + (1,) * (w.ndim - 1))
    return w


def _layer_forward(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    """Pre-activation output of one layer (norms applied explicitly)."""
    if layer.kind == 'avgpool':
        c, h, w = x.shape
        p = layer.pool
        ho, wo = h // p, w // p
        return x[:, :ho * p, :wo * p].reshape(c, ho, p, wo, p).mean(axis=(2, 4))
    w = _effective_weights(layer)
    b = (layer.bias.astype(np.float64) if layer.bias is not None
         else np.zeros(w.shape[0]))
    if layer.kind == 'dense':
        x = x.reshape(-1)
        if layer.pre_norm is not None:
            x = layer.pre_norm.apply(x)
        y = w @ x + b
    else:
        if layer.pre_norm is not None:
            x = layer.pre_norm.apply(x, axis=0)
        pad = layer.padding
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
        kh, kw = layer.kernel
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        win = win[:, ::layer.stride, ::layer.stride]
        y = np.einsum('chwij,ocij->ohw', win, w) + b[:, None, None]
    if layer.norm is not None:
        y = layer.norm.apply(y, axis=0)
    return y


def forward_float(model: FloatModel, inputs) -> np.ndarray:
    """Pre-softmax logits of *model* for one input, computed in float64."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.size != model.input_size:
        raise ShapeError(f'input has {x.size} values; model expects shape {model.input_shape}')
    x = x.reshape(model.input_shape)
    for i, layer in enumerate(model.layers):
        if layer.kind == 'dense' and x.size != layer.weights.shape[1]:
            raise ShapeError(f'layer {i} (dense): expects {layer.weights.shape[1]} inputs, '
                             f'got {x.size}')
        x = apply_activation(layer.activation, _layer_forward(layer, x))
    return x.reshape(-1)


# ══════════════════════════════════════════════════════════════════════════
# Checkpoints
# ══════════════════════════════════════════════════════════════════════════

def _layer_tensors(layer: LayerSpec) -> list[tuple[str, np.ndarray]]:
    out = []
    if layer.weights is not None:
        out.append(('weights', layer.weights))
    if layer.bias is not None:
        out.append(('bias', layer.bias))
    if layer.weight_scale is not None:
        out.append(('weight_scale', layer.weight_scale))
    for prefix, norm in (('norm', layer.norm), ('pre_norm', layer.pre_norm)):
        if norm is not None:
            for name in ('gamma', 'beta', 'mean', 'var'):
                out.append((f'{prefix}.{name}', getattr(norm, name)))
    return out


def save_float_model(model: FloatModel, path) -> pathlib.Path:
    """Write *model* as a manifest plus one float32 blob per tensor."""
    root = pathlib.Path(path)
    root.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, layer in enumerate(model.layers):
        entry: dict = {
            'kind': layer.kind, 'activation': layer.activation,
            'stride': layer.stride, 'padding': layer.padding, 'pool': layer.pool,
            'tensors': {},
        }
        for prefix, norm in (('norm', layer.norm), ('pre_norm', layer.pre_norm)):
            if norm is not None:
                entry[f'{prefix}_eps'] = norm.eps
        for name, arr in _layer_tensors(layer):
            fname = f'layer{i}.{name}.f32'
            (root / fname).write_bytes(np.ascontiguousarray(arr, dtype='<f4').tobytes())
            entry['tensors'][name] = {'file': fname, 'shape': list(arr.shape)}
        layers.append(entry)
    manifest = {'format': FORMAT_TAG, 'input_shape': list(model.input_shape), 'layers': layers}
    (root / 'manifest.json').write_text(json.dumps(manifest, indent=2), encoding='utf-8')
    print(f'[Model] saved {len(layers)} layer(s), N_net={model.n_net} → {root}')
    return root


def _read_blob(root: pathlib.Path, spec: dict) -> np.ndarray:
    fname = spec.get('file')
    shape = tuple(int(d) for d in spec.get('shape', ()))
    blob = root / str(fname)
    if not blob.is_file():
        raise ModelFormatError('missing tensor blob', path=str(blob))
    data = blob.read_bytes()
    count = math.prod(shape)
    if len(data) != 4 * count:
        raise ModelFormatError(
            f'length mismatch: manifest declares {count} floats, blob holds '
            f'{len(data) / 4:g}', path=str(blob), offset=min(len(data), 4 * count))
    arr = np.frombuffer(data, dtype='<f4').astype(np.float32).reshape(shape)
    bad = np.flatnonzero(~np.isfinite(arr.reshape(-1)))
    if bad.size:
        raise ModelFormatError('non-finite value', path=str(blob), offset=int(bad[0]) * 4)
    return arr


def load_float_model(path) -> FloatModel:
    """Inverse of save_float_model; bit-exact for every finite float32."""
    root = pathlib.Path(path)
    manifest_path = root / 'manifest.json'
    if not manifest_path.is_file():
        raise ModelFormatError('missing manifest.json', path=str(manifest_path))
    try:
        manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f'manifest is not valid JSON ({exc})',
                               path=str(manifest_path)) from None
    if manifest.get('format') != FORMAT_TAG:
        raise ModelFormatError(f'unsupported format {manifest.get("format")!r}',
                               path=str(manifest_path))
    if 'input_shape' not in manifest:
        raise ModelFormatError('manifest has no input_shape', path=str(manifest_path))
    layers = []
    for i, entry in enumerate(manifest.get('layers', [])):
        tensors = {name: _read_blob(root, spec) for name, spec in entry.get('tensors', {}).items()}
        norms = {}
        for prefix in ('norm', 'pre_norm'):
            if f'{prefix}.gamma' in tensors:
                norms[prefix] = NormParams(
                    gamma=tensors[f'{prefix}.gamma'], beta=tensors[f'{prefix}.beta'],
                    mean=tensors[f'{prefix}.mean'], var=tensors[f'{prefix}.var'],
                    eps=float(entry.get(f'{prefix}_eps', config.BN_EPSILON)))
        try:
            layers.append(LayerSpec(
                kind=entry['kind'], weights=tensors.get('weights'), bias=tensors.get('bias'),
                activation=entry['activation'], norm=norms.get('norm'),
                pre_norm=norms.get('pre_norm'), weight_scale=tensors.get('weight_scale'),
                stride=int(entry.get('stride', 1)), padding=int(entry.get('padding', 0)),
                pool=int(entry.get('pool', 0))))
        except (KeyError, ShapeError) as exc:
            raise ModelFormatError(f'layer {i}: {exc}', path=str(manifest_path)) from None
    return FloatModel(layers=tuple(layers), input_shape=tuple(manifest['input_shape']))
