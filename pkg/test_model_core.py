"""
test_model_core.py — pytest suite for lutnet.model_core
=======================================================
Covers: activations, LayerSpec / FloatModel validation, receptive fields,
forward_float, and the float32 checkpoint round trip.
"""

import json

import numpy as np
import pytest

from lutnet.errors import FoldError, ModelFormatError, ShapeError
from lutnet.model_core import (FloatModel, LayerSpec, NormParams, activation_derivative,
                               apply_activation, forward_float, load_float_model,
                               receptive_fields, save_float_model)


# ─────────────────────────────────────────────────────
# Helpers
# ─────────────────────────────────────────────────────

def dense(n_out, n_in, activation='relu6', rng=None, **kw):
    rng = rng or np.random.default_rng(0)
    return LayerSpec(kind='dense', weights=rng.normal(size=(n_out, n_in)),
                     bias=rng.normal(size=n_out), activation=activation, **kw)


def norm(channels, rng):
    return NormParams(gamma=rng.uniform(0.5, 2.0, channels), beta=rng.normal(size=channels),
                      mean=rng.normal(size=channels), var=rng.uniform(0.1, 2.0, channels),
                      eps=1e-3)


# ─────────────────────────────────────────────────────
# Activations
# ─────────────────────────────────────────────────────

class TestActivations:
    def test_relu6_clamps(self):
        x = np.array([-1.0, 0.0, 2.5, 6.0, 9.0])
        assert apply_activation('relu6', x).tolist() == [0.0, 0.0, 2.5, 6.0, 6.0]

    def test_relu6_derivative_zero_outside_open_interval(self):
        x = np.array([-1.0, 0.0, 3.0, 6.0, 7.0])
        assert activation_derivative('relu6', x).tolist() == [0.0, 0.0, 1.0, 0.0, 0.0]

    @pytest.mark.parametrize('name', ['tanh', 'relu6', 'none'])
    def test_derivative_matches_central_differences(self, name):
        x = np.array([-2.3, -0.7, 0.4, 1.9, 3.3, 5.2, 7.5])
        h = 1e-6
        numeric = (apply_activation(name, x + h) - apply_activation(name, x - h)) / (2 * h)
        assert activation_derivative(name, x) == pytest.approx(numeric, abs=1e-4)

    def test_unknown_activation_raises(self):
        with pytest.raises(ShapeError):
            apply_activation('sigmoid', np.zeros(2))


# ─────────────────────────────────────────────────────
# LayerSpec / FloatModel validation
# ─────────────────────────────────────────────────────

class TestLayerSpec:
    def test_bias_size_mismatch(self):
        with pytest.raises(ShapeError):
            LayerSpec(kind='dense', weights=np.ones((2, 3)), bias=np.ones(3), activation='relu6')

    def test_avgpool_rejects_weights(self):
        with pytest.raises(ShapeError):
            LayerSpec(kind='avgpool', weights=np.ones((1, 1)), bias=None, activation='relu6',
                      pool=2)

    def test_avgpool_needs_relu6(self):
        with pytest.raises(ShapeError):
            LayerSpec(kind='avgpool', weights=None, bias=None, activation='tanh', pool=2)

    def test_conv_output_shape_with_stride_and_padding(self):
        layer = LayerSpec(kind='conv2d', weights=np.ones((4, 2, 3, 3)), bias=None,
                          activation='relu6', stride=2, padding=1)
        assert layer.output_shape((2, 5, 5)) == (4, 3, 3)

    def test_parameter_count_includes_implicit_bias(self):
        layer = LayerSpec(kind='dense', weights=np.ones((3, 4)), bias=None, activation='relu6')
        assert layer.parameter_count == 15

    def test_negative_variance_beyond_eps_rejected(self):
        with pytest.raises(FoldError):
            NormParams(gamma=[1.0], beta=[0.0], mean=[0.0], var=[-1.0], eps=1e-3)


class TestFloatModel:
    def test_none_activation_only_on_last_layer(self):
        with pytest.raises(ShapeError):
            FloatModel(layers=(dense(3, 2, 'none'), dense(2, 3, 'none')), input_shape=(2,))

    def test_avgpool_must_follow_relu6(self):
        conv = LayerSpec(kind='conv2d', weights=np.ones((1, 1, 3, 3)), bias=None,
                         activation='tanh', padding=1)
        pool = LayerSpec(kind='avgpool', weights=None, bias=None, activation='relu6', pool=2)
        with pytest.raises(ShapeError):
            FloatModel(layers=(conv, pool), input_shape=(1, 4, 4))

    def test_shape_mismatch_names_layer(self):
        with pytest.raises(ShapeError, match='layer 1'):
            FloatModel(layers=(dense(3, 2), dense(2, 4, 'none')), input_shape=(2,))

    def test_non_finite_weight_rejected(self):
        bad = LayerSpec(kind='dense', weights=np.array([[np.nan, 1.0]]), bias=None,
                        activation='none')
        with pytest.raises(ShapeError):
            FloatModel(layers=(bad,), input_shape=(2,))

    def test_shapes_and_n_net(self):
        model = FloatModel(layers=(dense(4, 3), dense(2, 4, 'none')), input_shape=(3,))
        assert model.shapes == ((3,), (4,), (2,))
        assert model.n_net == 4 * 3 + 4 + 2 * 4 + 2


# ─────────────────────────────────────────────────────
# Receptive fields and the float forward pass
# ─────────────────────────────────────────────────────

class TestReceptiveFields:
    def test_dense_is_one_position(self):
        rf = receptive_fields(dense(2, 5), (5,))
        assert rf.shape == (1, 5)
        assert rf.tolist() == [[0, 1, 2, 3, 4]]

    def test_padding_taps_are_minus_one(self):
        conv = LayerSpec(kind='conv2d', weights=np.ones((1, 1, 3, 3)), bias=None,
                         activation='relu6', padding=1)
        rf = receptive_fields(conv, (1, 3, 3))
        assert rf.shape == (9, 9)
        # top-left output: first row and first column of its window are padding
        assert rf[0].tolist() == [-1, -1, -1, -1, 0, 1, -1, 3, 4]
        # centre output sees the whole image
        assert rf[4].tolist() == list(range(9))

    def test_gather_reproduces_conv_forward(self):
        rng = np.random.default_rng(3)
        conv = LayerSpec(kind='conv2d', weights=rng.normal(size=(3, 2, 3, 3)),
                         bias=rng.normal(size=3), activation='none', stride=2, padding=1)
        model = FloatModel(layers=(conv,), input_shape=(2, 5, 5))
        x = rng.normal(size=(2, 5, 5))
        rf = receptive_fields(conv, (2, 5, 5))
        flat = np.append(x.ravel(), 0.0)
        cols = flat[np.where(rf < 0, x.size, rf)]
        expected = (conv.weights.astype(np.float64).reshape(3, -1) @ cols.T
                    + conv.bias.astype(np.float64)[:, None])
        assert forward_float(model, x) == pytest.approx(expected.ravel(), rel=1e-9, abs=1e-12)

    def test_avgpool_windows(self):
        pool = LayerSpec(kind='avgpool', weights=None, bias=None, activation='relu6', pool=2)
        rf = receptive_fields(pool, (1, 4, 4))
        assert rf.shape == (1, 4, 4)
        assert rf[0, 0].tolist() == [0, 1, 4, 5]
        assert rf[0, 3].tolist() == [10, 11, 14, 15]


class TestForwardFloat:
    def test_single_dense_unit(self):
        layer = LayerSpec(kind='dense', weights=np.array([[1.0, 2.0]]), bias=np.array([0.5]),
                          activation='none')
        model = FloatModel(layers=(layer,), input_shape=(2,))
        assert forward_float(model, [1.0, 1.0]).tolist() == [3.5]

    def test_explicit_norm_applied_after_linear(self):
        layer = LayerSpec(kind='dense', weights=np.array([[2.0]]), bias=np.array([1.0]),
                          activation='none',
                          norm=NormParams(gamma=[3.0], beta=[0.5], mean=[1.0], var=[4.0], eps=0.0))
        model = FloatModel(layers=(layer,), input_shape=(1,))
        # y = 3/2 · ((2·1 + 1) − 1) + 0.5
        assert forward_float(model, [1.0])[0] == pytest.approx(3.5)

    def test_wrong_input_size(self):
        model = FloatModel(layers=(dense(2, 3, 'none'),), input_shape=(3,))
        with pytest.raises(ShapeError):
            forward_float(model, np.zeros(4))

    def test_one_by_one_conv_equals_dense(self):
        rng = np.random.default_rng(12)
        w = rng.normal(size=(4, 3))
        b = rng.normal(size=4)
        conv = LayerSpec(kind='conv2d', weights=w[:, :, None, None], bias=b, activation='none')
        flat = LayerSpec(kind='dense', weights=w, bias=b, activation='none')
        x = rng.normal(size=(3, 2, 5))
        out = forward_float(FloatModel(layers=(conv,), input_shape=(3, 2, 5)), x).reshape(4, 2, 5)
        dense_model = FloatModel(layers=(flat,), input_shape=(3,))
        for h in range(2):
            for c in range(5):
                assert out[:, h, c] == pytest.approx(forward_float(dense_model, x[:, h, c]),
                                                     rel=1e-6)

    def test_empty_model_is_identity_on_flatten(self):
        model = FloatModel(layers=(), input_shape=(2, 3))
        x = np.arange(6.0).reshape(2, 3)
        assert forward_float(model, x).tolist() == x.ravel().tolist()
        assert model.n_net == 0
        assert model.output_size == 6


# ─────────────────────────────────────────────────────
# Checkpoints
# ─────────────────────────────────────────────────────

class TestCheckpoint:
    def _model(self):
        rng = np.random.default_rng(7)
        conv = LayerSpec(kind='conv2d', weights=rng.normal(size=(2, 1, 3, 3)),
                         bias=rng.normal(size=2), activation='relu6', padding=1,
                         norm=norm(2, rng))
        pool = LayerSpec(kind='avgpool', weights=None, bias=None, activation='relu6', pool=2)
        head = LayerSpec(kind='dense', weights=rng.normal(size=(3, 8)), bias=None,
                         activation='none', pre_norm=norm(8, rng),
                         weight_scale=rng.uniform(0.5, 1.5, 3))
        return FloatModel(layers=(conv, pool, head), input_shape=(1, 4, 4))

    def test_round_trip_is_bit_exact(self, tmp_path):
        model = self._model()
        save_float_model(model, tmp_path / 'm')
        loaded = load_float_model(tmp_path / 'm')
        assert loaded.input_shape == model.input_shape
        for a, b in zip(model.layers, loaded.layers):
            assert a.kind == b.kind and a.activation == b.activation
            assert a.stride == b.stride and a.padding == b.padding and a.pool == b.pool
            if a.weights is not None:
                assert np.array_equal(a.weights, b.weights)
        assert loaded.layers[0].norm.eps == pytest.approx(1e-3)
        assert np.array_equal(loaded.layers[2].pre_norm.var, model.layers[2].pre_norm.var)
        assert np.array_equal(loaded.layers[2].weight_scale, model.layers[2].weight_scale)
        x = np.random.default_rng(0).uniform(0, 6, (1, 4, 4))
        assert np.array_equal(forward_float(model, x), forward_float(loaded, x))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ModelFormatError, match='manifest.json'):
            load_float_model(tmp_path)

    def test_missing_input_shape(self, tmp_path):
        save_float_model(self._model(), tmp_path)
        manifest = json.loads((tmp_path / 'manifest.json').read_text())
        del manifest['input_shape']
        (tmp_path / 'manifest.json').write_text(json.dumps(manifest))
        with pytest.raises(ModelFormatError, match='input_shape') as info:
            load_float_model(tmp_path)
        assert info.value.path == str(tmp_path / 'manifest.json')

    def test_empty_model_round_trip(self, tmp_path):
        save_float_model(FloatModel(layers=(), input_shape=(4,)), tmp_path)
        loaded = load_float_model(tmp_path)
        assert loaded.layers == () and loaded.input_shape == (4,)

    def test_wrong_format_tag(self, tmp_path):
        save_float_model(self._model(), tmp_path)
        manifest = json.loads((tmp_path / 'manifest.json').read_text())
        manifest['format'] = 'something-else/9'
        (tmp_path / 'manifest.json').write_text(json.dumps(manifest))
        with pytest.raises(ModelFormatError, match='unsupported format'):
            load_float_model(tmp_path)

    def test_truncated_blob_reports_offset(self, tmp_path):
        layer = LayerSpec(kind='dense', weights=np.ones((1, 3)), bias=None, activation='none')
        save_float_model(FloatModel(layers=(layer,), input_shape=(3,)), tmp_path)
        (tmp_path / 'layer0.weights.f32').write_bytes(np.ones(2, '<f4').tobytes())
        with pytest.raises(ModelFormatError) as info:
            load_float_model(tmp_path)
        assert info.value.offset == 8
        assert 'layer0.weights.f32' in str(info.value)

    def test_non_finite_value_reports_offset(self, tmp_path):
        layer = LayerSpec(kind='dense', weights=np.ones((1, 3)), bias=None, activation='none')
        save_float_model(FloatModel(layers=(layer,), input_shape=(3,)), tmp_path)
        (tmp_path / 'layer0.weights.f32').write_bytes(
            np.array([1.0, np.nan, 2.0], '<f4').tobytes())
        with pytest.raises(ModelFormatError) as info:
            load_float_model(tmp_path)
        assert info.value.offset == 4
