"""
test_train_ste.py — pytest suite for lutnet.train_ste
=====================================================
Covers: straight-through activations, requantization events (nearest level
and model-free rank scatter), hand-written backprop against finite
differences, the requantization schedule, seeded reproducibility, the
float-phase ablation, convnet training, divergence, and logger output.
"""

import csv

import numpy as np
import pytest

from lutnet.codebooks import Codebook, modelfree_layer, uniform_linear_activations
from lutnet.datasets import Dataset
from lutnet.errors import LutNetError, TrainingDivergedError
from lutnet.metrics import MetricsLogger
from lutnet.quantize import QuantizeParams
from lutnet.train_ste import (TrainableNet, TrainConfig, build_convnet, build_mlp,
                              loss_and_gradients, requantize_event, requantize_values,
                              ste_activation, train)


def quick(**kw):
    """Small moons run: 150 training rows, 5 batches per epoch."""
    base = {'n_samples': 200, 'epochs': 1, 'finetune_epochs': 1, 'seed': 0}
    return TrainConfig(**{**base, **kw})


# ─────────────────────────────────────────────────────
# STE activation / requantization
# ─────────────────────────────────────────────────────

class TestSteActivation:
    def test_forward_is_level_backward_is_continuous(self):
        cb = uniform_linear_activations(2, 'relu6')
        y, g = ste_activation([2.9], cb, 'relu6')
        assert y.tolist() == [0.0]
        assert g.tolist() == [1.0]

    def test_below_range(self):
        y, g = ste_activation([-1.0], uniform_linear_activations(2, 'relu6'), 'relu6')
        assert (y.tolist(), g.tolist()) == ([0.0], [0.0])

    def test_without_codebook_is_plain_activation(self):
        y, g = ste_activation([0.5], None, 'tanh')
        assert y[0] == pytest.approx(np.tanh(0.5))
        assert g[0] == pytest.approx(1 - np.tanh(0.5) ** 2)


class TestRequantize:
    def test_nearest_level(self):
        cb = Codebook(levels=[0.0, 1.0], scheme='kmeans')
        assert requantize_values(np.array([0.1, 0.9]), cb).tolist() == [0.0, 1.0]

    def test_modelfree_rank_scatter(self):
        cb = Codebook(levels=[-1.0, 1.0], scheme='modelfree', quantized_values=[-1.0, 1.0])
        assert requantize_values(np.array([5.0, -5.0]), cb).tolist() == [1.0, -1.0]

    def test_event_snaps_every_weight_layer(self):
        net = build_mlp(2, (4,), 2, 'relu6', seed=1)
        cbs = [Codebook(levels=[-0.5, 0.0, 0.5], scheme='kmeans')] * 2
        requantize_event(net, cbs)
        for layer in net.layers:
            assert set(layer.parameters().tolist()) <= {-0.5, 0.0, 0.5}

    def test_modelfree_event_keeps_multiset(self):
        net = build_mlp(2, (4,), 2, 'relu6', seed=2)
        cbs = [modelfree_layer(layer.parameters(), 3) for layer in net.layers]
        requantize_event(net, cbs)
        for layer, cb in zip(net.layers, cbs):
            assert sorted(layer.parameters().tolist()) == cb.quantized_values.tolist()


# ─────────────────────────────────────────────────────
# Backprop
# ─────────────────────────────────────────────────────

def numeric_gradient(net, x, y, layer, attr, index, eps=1e-6):
    arr = getattr(net.layers[layer], attr)
    old = arr[index]
    arr[index] = old + eps
    up, _, _ = loss_and_gradients(net, x, y)
    arr[index] = old - eps
    down, _, _ = loss_and_gradients(net, x, y)
    arr[index] = old
    return (up - down) / (2 * eps)


class TestGradients:
    def _check(self, net, x, y, seed):
        _, _, grads = loss_and_gradients(net, x, y)
        rng = np.random.default_rng(seed)
        for i, layer in enumerate(net.layers):
            if grads[i] is None:
                continue
            dw, db = grads[i]
            for _ in range(4):
                idx = tuple(int(rng.integers(0, n)) for n in layer.w.shape)
                assert dw[idx] == pytest.approx(numeric_gradient(net, x, y, i, 'w', idx),
                                                rel=1e-4, abs=1e-7)
            j = (int(rng.integers(0, layer.b.size)),)
            assert db[j] == pytest.approx(numeric_gradient(net, x, y, i, 'b', j),
                                          rel=1e-4, abs=1e-7)

    def test_dense_tanh(self):
        net = build_mlp(3, (5, 4), 3, 'tanh', seed=0)
        rng = np.random.default_rng(0)
        for layer in net.layers:
            layer.b = rng.normal(0, 0.1, layer.b.size)
        x = rng.uniform(-1, 1, (7, 3))
        y = rng.integers(0, 3, 7)
        self._check(net, x, y, 0)

    def test_conv_pool_dense(self):
        net = build_convnet((1, 4, 4), 2, 3, seed=1)
        rng = np.random.default_rng(1)
        net.layers[0].b = np.array([0.3, 0.2])
        x = rng.uniform(0.5, 6, (5, 1, 4, 4))
        y = rng.integers(0, 3, 5)
        self._check(net, x, y, 1)

    def test_float_model_round_trip(self):
        net = build_convnet((1, 4, 4), 2, 3, seed=3)
        back = TrainableNet.from_float(net.to_float_model())
        for a, b in zip(net.layers, back.layers):
            assert a.kind == b.kind
            if a.has_weights:
                # checkpoints store float32
                assert np.allclose(a.parameters(), b.parameters(), rtol=1e-6, atol=1e-7)


# ─────────────────────────────────────────────────────
# Configuration
# ─────────────────────────────────────────────────────

class TestTrainConfig:
    @pytest.mark.parametrize('kw', [{'S': 0}, {'method': 'binary'}, {'network': 'rnn'},
                                    {'activation': 'none'}])
    def test_rejects(self, kw):
        with pytest.raises(LutNetError):
            TrainConfig(**kw)

    def test_method_propagates_to_quant_params(self):
        cfg = TrainConfig(method='kmeans', quant=QuantizeParams(n_w=8))
        assert cfg.quant.method == 'kmeans'
        assert cfg.quant.n_w == 8

    def test_condition_name(self):
        assert TrainConfig(task='idx:/data/train-images', method='octave').condition \
            == 'idx_mlp_octave'


# ─────────────────────────────────────────────────────
# Training runs
# ─────────────────────────────────────────────────────

class TestTrain:
    def test_requantize_every_step(self):
        result = train(quick(method='octave', S=1))
        # one event at the end of the float phase, then one per fine-tune step
        assert result.steps == 10
        assert result.requant_events == 6
        for layer, cb in zip(result.net.weight_layers(), result.weight_cbs):
            assert np.all(np.isin(layer.parameters(), cb.levels))
            assert np.unique(layer.parameters()).size <= len(cb)

    def test_final_event_after_last_step(self):
        result = train(quick(method='octave', S=3))
        # entry, steps 6 and 9, then the closing event at step 10
        assert result.requant_events == 4
        for layer, cb in zip(result.net.weight_layers(), result.weight_cbs):
            assert np.all(np.isin(layer.parameters(), cb.levels))

    def test_modelfree_keeps_frozen_multiset(self):
        result = train(quick(method='modelfree', quant=QuantizeParams(n_w=5), S=2))
        for layer, cb in zip(result.net.weight_layers(), result.weight_cbs):
            assert sorted(layer.parameters().tolist()) == cb.quantized_values.tolist()
            assert cb.contains_one

    @pytest.mark.parametrize('method, n_w', [('modelfree', 5), ('octave', None)])
    def test_distinct_values_bounded_after_every_event(self, method, n_w):
        quant = QuantizeParams(n_w=n_w) if n_w else QuantizeParams(n_q=2, n_o=2)
        result = train(quick(method=method, quant=quant, S=1))
        bound = n_w or max(len(cb) for cb in result.weight_cbs)
        assert len(result.event_distinct) == result.requant_events == 6
        assert all(d <= bound for d in result.event_distinct)

    def test_same_seed_same_run(self):
        a = train(quick(method='octave', S=2))
        b = train(quick(method='octave', S=2))
        assert a.final_acc == b.final_acc
        assert [r.train_loss for r in a.history] == [r.train_loss for r in b.history]
        for la, lb in zip(a.net.layers, b.net.layers):
            assert np.array_equal(la.parameters(), lb.parameters())

    def test_float_phase_matches_unquantized_run(self):
        plain = train(quick(method='none'))
        quant = train(quick(method='octave'))
        assert plain.float_acc == quant.float_acc
        assert plain.first_pass_acc is None and plain.weight_cbs is None
        for la, lb in zip(plain.float_model.layers, quant.float_model.layers):
            assert np.array_equal(la.weights, lb.weights)

    def test_moons_octave_close_to_float(self, capsys):
        result = train(TrainConfig(method='octave', seed=0))
        assert result.final_acc >= result.float_acc - 0.03
        assert result.final_acc > 0.85
        out = capsys.readouterr().out
        assert '[Train] float baseline' in out
        assert '[Train] first quantization pass (octave)' in out

    def test_convnet_on_bars(self):
        result = train(quick(task='bars', network='convnet', method='octave', n_samples=120))
        assert [layer.kind for layer in result.model.layers] == ['conv2d', 'avgpool', 'dense']
        assert result.model.input_shape == (1, 8, 8)

    def test_convnet_needs_images(self):
        with pytest.raises(LutNetError, match='image'):
            train(quick(network='convnet'))

    def test_divergence_raises(self):
        x = np.full((40, 2), np.nan)
        ds = Dataset(x_train=x, y_train=np.zeros(40, np.int64), x_val=x[:4],
                     y_val=np.zeros(4, np.int64), input_shape=(2,), n_classes=2)
        with pytest.raises(TrainingDivergedError) as info:
            train(quick(), dataset=ds)
        assert info.value.step == 0

    def test_logger_rows(self, tmp_path):
        cfg = quick(method='octave', finetune_epochs=2)
        logger = MetricsLogger(seed=0, condition=cfg.condition, output_dir=str(tmp_path))
        train(cfg, logger=logger)
        logger.close()
        with open(logger.metrics_path, newline='') as f:
            rows = list(csv.DictReader(f))
        assert [r['method'] for r in rows] == ['none', 'octave', 'octave']
        with open(tmp_path / 'run_summaries.csv', newline='') as f:
            summary = next(csv.DictReader(f))
        assert summary['condition'] == 'moons_mlp_octave'
        # the closing event lands after the last epoch row
        assert rows[-1]['requant_events'] == '1'
        assert summary['requant_events'] == '2'
