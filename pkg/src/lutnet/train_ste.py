"""
train_ste.py — Desk-scale quantization-aware training with a straight-through estimator.

Two phases per run:
  1. continuous — plain SGD on the float network (the baseline accuracy);
  2. quantized  — weights snapped to a frozen codebook every S steps (and once more
     at the end), activations quantized in the forward pass with the continuous
     Γ' used on the backward pass.  Weights float freely between events.

Backprop is written by hand for the three layer kinds the engines support.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import config
from .codebooks import Codebook, modelfree_requantize, octave_activations, \
    uniform_linear_activations
from .datasets import BatchPrefetcher, Dataset, load_task, scale_to_range
from .errors import LutNetError, TrainingDivergedError
from .model_core import ACTIVATION_RANGE, FloatModel, LayerSpec, activation_derivative, \
    apply_activation, receptive_fields
from .quantize import WEIGHT_METHODS, QuantizeParams, weight_codebook

TRAIN_METHODS = ('none',) + WEIGHT_METHODS
NETWORKS = ('mlp', 'convnet')


@dataclass(frozen=True)
class TrainConfig:
    task:            str = 'moons'
    network:         str = 'mlp'
    hidden:          tuple[int, ...] = config.HIDDEN_UNITS
    conv_channels:   int = config.CONV_CHANNELS
    activation:      str = 'relu6'
    method:          str = 'none'
    quant:           QuantizeParams = field(default_factory=QuantizeParams)
    S:               int = config.REQUANT_PERIOD
    ste:             bool = True
    epochs:          int = config.EPOCHS
    finetune_epochs: int = config.FINETUNE_EPOCHS
    batch_size:      int = config.BATCH_SIZE
    lr:              float = config.LEARNING_RATE
    momentum:        float = config.MOMENTUM
    weight_decay:    float = config.WEIGHT_DECAY
    seed:            int = 0
    n_samples:       int = config.TOY_SAMPLES
    noise:           float = config.TOY_NOISE

    def __post_init__(self) -> None:
        if self.S < 1:
            raise LutNetError(f'requantization period S must be >= 1, got {self.S}')
        if self.method not in TRAIN_METHODS:
            raise LutNetError(f'unknown method {self.method!r}; '
                              f'expected one of {", ".join(TRAIN_METHODS)}')
        if self.network not in NETWORKS:
            raise LutNetError(f'unknown network {self.network!r}; expected mlp or convnet')
        if self.activation not in ACTIVATION_RANGE:
            raise LutNetError(f'hidden activation must be relu6 or tanh, got {self.activation!r}')
        if self.method != 'none' and self.method != self.quant.method:
            object.__setattr__(self, 'quant', QuantizeParams(
                **{**self.quant.as_dict(), 'method': self.method,
                   'input_range': self.quant.input_range}))
        object.__setattr__(self, 'hidden', tuple(int(h) for h in self.hidden))

    @property
    def condition(self) -> str:
        return f'{self.task.split(":")[0]}_{self.network}_{self.method}'


# ══════════════════════════════════════════════════════════════════════════
# Trainable network
# ══════════════════════════════════════════════════════════════════════════

@dataclass
class TrainLayer:
    """Mutable float64 twin of a LayerSpec (no norms: the trainer has none)."""

    kind:       str
    activation: str
    in_shape:   tuple[int, ...]
    out_shape:  tuple[int, ...]
    w:          np.ndarray | None = None
    b:          np.ndarray | None = None
    stride:     int = 1
    padding:    int = 0
    pool:       int = 0
    rf:         np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.rf = receptive_fields(self, self.in_shape)

    @property
    def kernel(self) -> tuple[int, int]:
        if self.kind == 'conv2d':
            return int(self.w.shape[2]), int(self.w.shape[3])
        if self.kind == 'avgpool':
            return self.pool, self.pool
        return 1, 1

    @property
    def has_weights(self) -> bool:
        return self.w is not None

    def parameters(self) -> np.ndarray:
        return np.concatenate((self.w.ravel(), self.b))

    def set_parameters(self, values: np.ndarray) -> None:
        n = self.w.size
        self.w = values[:n].reshape(self.w.shape).copy()
        self.b = values[n:].copy()


class TrainableNet:
    def __init__(self, layers: list[TrainLayer], input_shape: tuple[int, ...]):
        self.layers = layers
        self.input_shape = tuple(input_shape)

    @classmethod
    def from_float(cls, model: FloatModel) -> 'TrainableNet':
        if any(layer.has_norms for layer in model.layers):
            raise LutNetError('fold normalizations before training (lutnet fold)')
        layers = []
        for layer, in_shape, out_shape in zip(model.layers, model.shapes[:-1], model.shapes[1:]):
            w = b = None
            if layer.weights is not None:
                w = layer.weights.astype(np.float64)
                b = (layer.bias.astype(np.float64) if layer.bias is not None
                     else np.zeros(layer.out_channels))
            layers.append(TrainLayer(kind=layer.kind, activation=layer.activation,
                                     in_shape=in_shape, out_shape=out_shape, w=w, b=b,
                                     stride=layer.stride, padding=layer.padding,
                                     pool=layer.pool))
        return cls(layers, model.input_shape)

    def to_float_model(self) -> FloatModel:
        specs = []
        for layer in self.layers:
            if layer.kind == 'avgpool':
                specs.append(LayerSpec(kind='avgpool', weights=None, bias=None,
                                       activation='relu6', pool=layer.pool))
            else:
                specs.append(LayerSpec(kind=layer.kind, weights=layer.w, bias=layer.b,
                                       activation=layer.activation, stride=layer.stride,
                                       padding=layer.padding))
        return FloatModel(layers=tuple(specs), input_shape=self.input_shape)

    def weight_layers(self) -> list[TrainLayer]:
        return [layer for layer in self.layers if layer.has_weights]

    def distinct_parameters(self) -> int:
        return int(np.unique(np.concatenate([l.parameters() for l in self.weight_layers()])).size)

    def layer_distinct(self) -> list[int]:
        """Distinct weight/bias values per weight layer (one codebook scope each)."""
        return [int(np.unique(l.parameters()).size) for l in self.weight_layers()]

    def copy(self) -> 'TrainableNet':
        return TrainableNet([TrainLayer(kind=l.kind, activation=l.activation,
                                        in_shape=l.in_shape, out_shape=l.out_shape,
                                        w=None if l.w is None else l.w.copy(),
                                        b=None if l.b is None else l.b.copy(),
                                        stride=l.stride, padding=l.padding, pool=l.pool)
                             for l in self.layers], self.input_shape)


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
            fan_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape)


def build_mlp(input_size: int, hidden: tuple[int, ...], n_classes: int, activation: str,
              seed: int) -> TrainableNet:
    rng = np.random.default_rng(seed)
    sizes = (input_size,) + tuple(hidden) + (n_classes,)
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = activation if i < len(sizes) - 2 else 'none'
        layers.append(TrainLayer(kind='dense', activation=act, in_shape=(n_in,),
                                 out_shape=(n_out,), w=_glorot(rng, (n_out, n_in), n_in, n_out),
                                 b=np.zeros(n_out)))
    return TrainableNet(layers, (input_size,))


def build_convnet(input_shape: tuple[int, ...], channels: int, n_classes: int,
                  seed: int) -> TrainableNet:
    """conv2d 3×3 (pad 1) → relu6 → avgpool 2 → dense."""
    if len(input_shape) != 3:
        raise LutNetError(f'convnet needs (C, H, W) image inputs, got shape {input_shape}')
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    conv = TrainLayer(kind='conv2d', activation='relu6', in_shape=tuple(input_shape),
                      out_shape=(channels, h, w),
                      w=_glorot(rng, (channels, c, 3, 3), 9 * c, 9 * channels),
                      b=np.zeros(channels), padding=1)
    pool = TrainLayer(kind='avgpool', activation='relu6', in_shape=(channels, h, w),
                      out_shape=(channels, h // 2, w // 2), pool=2)
    n_flat = channels * (h // 2) * (w // 2)
    head = TrainLayer(kind='dense', activation='none', in_shape=pool.out_shape,
                      out_shape=(n_classes,), w=_glorot(rng, (n_classes, n_flat), n_flat,
                                                        n_classes),
                      b=np.zeros(n_classes))
    return TrainableNet([conv, pool, head], tuple(input_shape))


# ══════════════════════════════════════════════════════════════════════════
# Straight-through activations and requantization events
# ══════════════════════════════════════════════════════════════════════════

def ste_activation(x, act_cb: Codebook | None, activation: str) -> tuple[np.ndarray, np.ndarray]:
    """(forward value, backward multiplier): nearest level of Γ(x), and Γ'(x)."""
    x = np.asarray(x, dtype=np.float64)
    y = apply_activation(activation, x)
    if act_cb is not None:
        y = act_cb.quantize(y)
    return y, activation_derivative(activation, x)


@dataclass
class QuantState:
    """Frozen per-layer codebooks for one quantized run."""

    input_cb:    Codebook
    act_cbs:     list[Codebook | None]      # output levels per layer; None on the last
    weight_cbs:  list[Codebook | None]      # None for avgpool
    ste:         bool = True


def requantize_values(values, cb: Codebook) -> np.ndarray:
    """Nearest-level snap, or the frozen rank scatter for model-free codebooks."""
    if cb.quantized_values is not None:
        return modelfree_requantize(values, cb)
    return cb.quantize(values)


def requantize_event(net: TrainableNet, weight_cbs: list[Codebook | None]) -> TrainableNet:
    """Replace every weight and bias with its assigned level (in place)."""
    for layer, cb in zip(net.layers, weight_cbs):
        if layer.has_weights and cb is not None:
            layer.set_parameters(requantize_values(layer.parameters(), cb))
    return net


def _activation_codebook(params: QuantizeParams, activation: str) -> Codebook:
    if params.activations == 'octave':
        return octave_activations(params.n_qa, params.n_oa, activation)
    return uniform_linear_activations(params.n_a, activation)


def init_quant_state(net: TrainableNet, params: QuantizeParams, *, ste: bool = True) -> QuantState:
    """Fit the weight codebooks on the current (continuous) weights and freeze them."""
    first = net.layers[0].activation
    input_cb = (_activation_codebook(params, first) if params.input_range is None
                else uniform_linear_activations(params.n_a, first, params.input_range))
    act_cbs: list[Codebook | None] = []
    weight_cbs: list[Codebook | None] = []
    prev = input_cb
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        if layer.kind == 'avgpool':
            act_cbs.append(prev)
            weight_cbs.append(None)
            continue
        weight_cbs.append(weight_codebook(layer.parameters(), params))
        out = None if i == last else _activation_codebook(params, layer.activation)
        act_cbs.append(out)
        prev = out if out is not None else prev
    return QuantState(input_cb=input_cb, act_cbs=act_cbs, weight_cbs=weight_cbs, ste=ste)


# ══════════════════════════════════════════════════════════════════════════
# Forward / backward
# ══════════════════════════════════════════════════════════════════════════

def _padded_rf(layer: TrainLayer, n_in: int) -> np.ndarray:
    # padded taps point at an appended zero column
    return np.where(layer.rf < 0, n_in, layer.rf)


def _layer_forward(layer: TrainLayer, a: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Pre-activation (B, n_out) plus the gathered columns the backward pass needs."""
    batch = a.shape[0]
    if layer.kind == 'dense':
        return a @ layer.w.T + layer.b, None
    if layer.kind == 'avgpool':
        return a[:, layer.rf].mean(axis=-1).reshape(batch, -1), None
    ext = np.concatenate((a, np.zeros((batch, 1))), axis=1)
    cols = ext[:, _padded_rf(layer, a.shape[1])]
    w2 = layer.w.reshape(layer.w.shape[0], -1)
    z = np.einsum('bpf,of->bop', cols, w2) + layer.b[None, :, None]
    return z.reshape(batch, -1), cols


def _layer_backward(layer: TrainLayer, a: np.ndarray, cols, dz: np.ndarray):
    """(dA, dW, db) for one layer given dLoss/dz."""
    batch, n_in = a.shape
    if layer.kind == 'dense':
        return dz @ layer.w, dz.T @ a, dz.sum(axis=0)
    if layer.kind == 'avgpool':
        c, p, q = layer.rf.shape
        dz3 = dz.reshape(batch, c, p) / q
        da = np.zeros((batch, n_in))
        np.add.at(da.T, layer.rf,
                  np.broadcast_to(dz3.transpose(1, 2, 0)[:, :, None, :], (c, p, q, batch)))
        return da, None, None
    out = layer.w.shape[0]
    w2 = layer.w.reshape(out, -1)
    dz3 = dz.reshape(batch, out, -1)
    dw = np.einsum('bop,bpf->of', dz3, cols).reshape(layer.w.shape)
    db = dz3.sum(axis=(0, 2))
    dcols = np.einsum('bop,of->bpf', dz3, w2)
    dext = np.zeros((batch, n_in + 1))
    np.add.at(dext.T, _padded_rf(layer, n_in), dcols.transpose(1, 2, 0))
    return dext[:, :n_in], dw, db


def forward_batch(net: TrainableNet, x: np.ndarray, quant: QuantState | None = None):
    """Logits (B, classes) plus per-layer caches (input, columns, z, Γ')."""
    a = np.asarray(x, dtype=np.float64).reshape(x.shape[0], -1)
    if quant is not None:
        a = quant.input_cb.quantize(a)
    caches = []
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        z, cols = _layer_forward(layer, a)
        act_cb = quant.act_cbs[i] if quant is not None and quant.ste and i != last else None
        out, grad = ste_activation(z, act_cb, layer.activation)
        caches.append((a, cols, grad))
        a = out
    return a, caches


def softmax_cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss and dLoss/dlogits."""
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    rows = np.arange(len(y))
    loss = float(-np.mean(np.log(np.maximum(p[rows, y], 1e-300))))
    p[rows, y] -= 1.0
    return loss, p / len(y)


def loss_and_gradients(net: TrainableNet, x: np.ndarray, y: np.ndarray,
                       quant: QuantState | None = None):
    """(loss, logits, grads) with grads[i] = (dW, db) or None for avgpool."""
    logits, caches = forward_batch(net, x, quant)
    loss, d = softmax_cross_entropy(logits, y)
    grads: list = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        a, cols, g = caches[i]
        dz = d * g
        d, dw, db = _layer_backward(net.layers[i], a, cols, dz)
        if dw is not None:
            grads[i] = (dw, db)
    return loss, logits, grads


def accuracy(net: TrainableNet, x: np.ndarray, y: np.ndarray,
             quant: QuantState | None = None) -> float:
    if len(y) == 0:
        return 0.0
    logits, _ = forward_batch(net, x, quant)
    return float(np.mean(np.argmax(logits, axis=1) == y))


class SGD:
    """Mini-batch SGD with momentum and optional L2 decay."""

    def __init__(self, net: TrainableNet, lr: float, momentum: float, weight_decay: float):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [None if not l.has_weights else (np.zeros_like(l.w), np.zeros_like(l.b))
                         for l in net.layers]

    def step(self, net: TrainableNet, grads) -> None:
        for layer, g, v in zip(net.layers, grads, self.velocity):
            if g is None:
                continue
            dw, db = g
            v[0][...] = self.momentum * v[0] - self.lr * (dw + self.weight_decay * layer.w)
            v[1][...] = self.momentum * v[1] - self.lr * db
            layer.w += v[0]
            layer.b += v[1]


# ══════════════════════════════════════════════════════════════════════════
# Training loop
# ══════════════════════════════════════════════════════════════════════════

@dataclass
class EpochRecord:
    epoch:           int
    step:            int
    phase:           str
    train_loss:      float
    train_acc:       float
    val_acc:         float
    distinct_params: int
    requant_events:  int


@dataclass
class TrainResult:
    config:          TrainConfig
    float_model:     FloatModel
    model:           FloatModel
    float_acc:       float
    first_pass_acc:  float | None
    final_acc:       float
    requant_events:  int
    steps:           int
    weight_cbs:      list[Codebook | None] | None
    history:         list[EpochRecord] = field(default_factory=list)
    event_distinct:  list[int] = field(default_factory=list)
    net:             TrainableNet | None = field(default=None, repr=False)


def prepare_dataset(cfg: TrainConfig) -> Dataset:
    ds = load_task(cfg.task, n_samples=cfg.n_samples, noise=cfg.noise, seed=cfg.seed)
    lo, hi = ACTIVATION_RANGE[cfg.activation]
    return scale_to_range(ds, lo, hi)


def build_network(cfg: TrainConfig, ds: Dataset) -> TrainableNet:
    if cfg.network == 'convnet':
        return build_convnet(ds.input_shape, cfg.conv_channels, ds.n_classes, cfg.seed)
    return build_mlp(int(np.prod(ds.input_shape)), cfg.hidden, ds.n_classes, cfg.activation,
                     cfg.seed)


def train(cfg: TrainConfig, dataset: Dataset | None = None, model: FloatModel | None = None,
          logger=None) -> TrainResult:
    """Continuous phase, then (unless method is 'none') quantized fine-tuning.

    *dataset* must already be scaled into the first layer's activation range;
    *model* (folded, no norms) replaces the fresh initialisation.
    """
    ds = dataset if dataset is not None else prepare_dataset(cfg)
    net = TrainableNet.from_float(model) if model is not None else build_network(cfg, ds)
    opt = SGD(net, cfg.lr, cfg.momentum, cfg.weight_decay)
    history: list[EpochRecord] = []
    events: list[int] = []          # largest per-layer distinct count after each event
    step = 0

    def run_epoch(epoch: int, phase: str, quant: QuantState | None, on_step) -> None:
        nonlocal step
        losses, correct, seen = [], 0, 0
        for xb, yb in BatchPrefetcher(ds.x_train, ds.y_train, cfg.batch_size,
                                      seed=cfg.seed, epoch=epoch):
            loss, logits, grads = loss_and_gradients(net, xb, yb, quant)
            if not math.isfinite(loss):
                raise TrainingDivergedError(step, loss)
            opt.step(net, grads)
            step += 1
            on_step()
            losses.append(loss)
            correct += int(np.sum(np.argmax(logits, axis=1) == yb))
            seen += len(yb)
        rec = EpochRecord(epoch=epoch, step=step, phase=phase,
                          train_loss=float(np.mean(losses)) if losses else 0.0,
                          train_acc=correct / seen if seen else 0.0,
                          val_acc=accuracy(net, ds.x_val, ds.y_val, quant),
                          distinct_params=net.distinct_parameters(),
                          requant_events=len(events))
        history.append(rec)
        print(f'[Train] {phase} epoch {epoch}: loss {rec.train_loss:.4f} '
              f'train {rec.train_acc:.3f} val {rec.val_acc:.3f} '
              f'distinct {rec.distinct_params}')
        if logger is not None:
            logger.log_epoch(epoch=epoch, step=step,
                             method='none' if phase == 'float' else cfg.method,
                             train_loss=rec.train_loss, train_acc=rec.train_acc,
                             val_acc=rec.val_acc, distinct_params=rec.distinct_params,
                             requant_events=rec.requant_events)

    for epoch in range(cfg.epochs):
        run_epoch(epoch, 'float', None, lambda: None)
    float_acc = accuracy(net, ds.x_val, ds.y_val)
    float_model = net.to_float_model()
    print(f'[Train] float baseline: val acc {float_acc:.4f} after {step} steps')

    if cfg.method == 'none':
        if logger is not None:
            logger.finalize(method='none', float_acc=float_acc, first_pass_acc=None,
                            final_acc=float_acc, requant_events=0)
        return TrainResult(config=cfg, float_model=float_model, model=float_model,
                           float_acc=float_acc, first_pass_acc=None, final_acc=float_acc,
                           requant_events=0, steps=step, weight_cbs=None, history=history,
                           net=net)

    quant = init_quant_state(net, cfg.quant, ste=cfg.ste)
    last_event = -1

    def event() -> None:
        nonlocal last_event
        requantize_event(net, quant.weight_cbs)
        events.append(max(net.layer_distinct()))
        last_event = step

    event()
    first_pass_acc = accuracy(net, ds.x_val, ds.y_val, quant)
    print(f'[Train] first quantization pass ({cfg.method}): val acc {first_pass_acc:.4f} '
          f'({first_pass_acc - float_acc:+.4f} vs float)')

    def maybe_requantize() -> None:
        if step % cfg.S == 0:
            event()

    for e in range(cfg.finetune_epochs):
        run_epoch(cfg.epochs + e, 'quantized', quant, maybe_requantize)
    if last_event != step:
        event()
    final_acc = accuracy(net, ds.x_val, ds.y_val, quant)
    print(f'[Train] {cfg.method}: val acc {final_acc:.4f} after {len(events)} '
          f'requantization event(s), {net.distinct_parameters()} distinct parameters')
    if logger is not None:
        logger.finalize(method=cfg.method, float_acc=float_acc, first_pass_acc=first_pass_acc,
                        final_acc=final_acc, requant_events=len(events))
    return TrainResult(config=cfg, float_model=float_model, model=net.to_float_model(),
                       float_acc=float_acc, first_pass_acc=first_pass_acc, final_acc=final_acc,
                       requant_events=len(events), steps=step, weight_cbs=quant.weight_cbs,
                       history=history, event_distinct=events, net=net)
