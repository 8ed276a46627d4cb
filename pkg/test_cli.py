"""
test_cli.py — pytest suite for lutnet.cli
=========================================
Covers: usage and error exits, parameter-file metrics, config-file overrides
and their restoration, the fold → quantize → infer pipeline on all three
engines, JSON output against the shipped schemas, run logs, the
output-directory environment variable, and train-toy.
"""

import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from lutnet import config
from lutnet.cli import _LogTee, apply_config_file, main
from lutnet.engine_log import forward_log, load_log_model
from lutnet.engine_lut import forward_lut_batch
from lutnet.errors import LutNetError
from lutnet.model_core import (FloatModel, LayerSpec, NormParams, forward_float,
                               load_float_model, save_float_model)
from lutnet.tables import load_quantized_model

OCTAVE_LINEAR = str(Path(__file__).parent / 'configs' / 'octave_linear_16q_15o_64a.json')
SCHEMAS = Path(__file__).parent / 'schemas'


def run_json(capsys, *argv):
    code = main(['--json', *argv])
    captured = capsys.readouterr()
    assert code == 0, captured.err
    return json.loads(captured.out)



def validate(result, name):
    schema = json.loads((SCHEMAS / f'{name}.schema.json').read_text(encoding='utf-8'))
    jsonschema.Draft202012Validator(schema).validate(result)


def normed_mlp(seed=0):
    rng = np.random.default_rng(seed)
    norm = NormParams(gamma=rng.uniform(0.5, 1.5, 8), beta=rng.normal(0, 0.3, 8),
                      mean=rng.normal(0, 0.3, 8), var=rng.uniform(0.5, 2.0, 8), eps=1e-3)
    return FloatModel(layers=(
        LayerSpec(kind='dense', weights=rng.normal(0, 0.6, (8, 4)), bias=rng.normal(0, 0.2, 8),
                  activation='relu6', norm=norm),
        LayerSpec(kind='dense', weights=rng.normal(0, 0.6, (3, 8)), bias=rng.normal(0, 0.2, 3),
                  activation='none'),
    ), input_shape=(4,))


@pytest.fixture
def pipeline(tmp_path, capsys):
    """Float checkpoint with a norm, folded, plus ten inputs in [0, 6]."""
    out = str(tmp_path / 'runs')
    save_float_model(normed_mlp(), tmp_path / 'float')
    assert main(['--output-dir', out, 'fold', '--model', str(tmp_path / 'float'),
                 '--out', str(tmp_path / 'folded')]) == 0
    x = np.random.default_rng(1).uniform(0, 6, (10, 4)).astype('<f4')
    x.tofile(tmp_path / 'inputs.f32')
    capsys.readouterr()
    return tmp_path, out


# ─────────────────────────────────────────────────────
# Usage / errors
# ─────────────────────────────────────────────────────

class TestUsage:
    def test_no_arguments(self, capsys):
        assert main([]) == 2
        assert 'usage' in capsys.readouterr().err

    def test_unknown_command(self, capsys):
        assert main(['compile']) == 2

    def test_missing_model_is_error_exit(self, tmp_path, capsys):
        code = main(['--output-dir', str(tmp_path), 'metrics', '--model',
                     str(tmp_path / 'nope.lutq')])
        assert code == 2
        assert capsys.readouterr().err.startswith('error: ')

    def test_bad_input_blob(self, pipeline, capsys):
        tmp_path, out = pipeline
        np.zeros(7, '<f4').tofile(tmp_path / 'odd.f32')
        code = main(['--output-dir', out, 'infer', '--engine', 'float',
                     '--model', str(tmp_path / 'folded'), '--inputs', str(tmp_path / 'odd.f32')])
        assert code == 2
        assert 'not a whole number' in capsys.readouterr().err


# ─────────────────────────────────────────────────────
# Configuration
# ─────────────────────────────────────────────────────

class TestConfig:
    def test_unknown_key_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / 'c.json'
        cfg.write_text(json.dumps({'bogus_knob': 1}))
        code = main(['--config', str(cfg), '--output-dir', str(tmp_path), 'metrics',
                     '--params', OCTAVE_LINEAR])
        assert code == 2
        assert 'unknown config key' in capsys.readouterr().err

    def test_upper_case_key_rejected(self, tmp_path):
        cfg = tmp_path / 'c.json'
        cfg.write_text(json.dumps({'SHIFT_BITS': 8}))
        with pytest.raises(LutNetError):
            apply_config_file(cfg)

    def test_override_applies_then_restores(self, pipeline, capsys):
        tmp_path, out = pipeline
        cfg = tmp_path / 'c.json'
        cfg.write_text(json.dumps({'shift_bits': 8}))
        result = run_json(capsys, '--config', str(cfg), '--output-dir', out, 'quantize',
                          '--model', str(tmp_path / 'folded'), '--out', str(tmp_path / 'm.lutq'))
        assert result['params']['s'] == 8
        assert load_quantized_model(tmp_path / 'm.lutq').s == 8
        assert config.SHIFT_BITS == 16

    def test_env_var_picks_output_dir(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(config.OUTPUT_DIR_ENV_VAR, str(tmp_path / 'envruns'))
        assert main(['metrics', '--params', OCTAVE_LINEAR]) == 0
        assert list((tmp_path / 'envruns' / 'logs').glob('metrics_*.txt'))


# ─────────────────────────────────────────────────────
# Metrics
# ─────────────────────────────────────────────────────

class TestMetricsCommand:
    def test_params_file(self, tmp_path, capsys):
        result = run_json(capsys, '--output-dir', str(tmp_path), 'metrics', '--params',
                          OCTAVE_LINEAR)
        assert result['nuc'] == 1038
        assert result['lut_entries'] == 1024

    def test_text_summary_and_run_log(self, tmp_path, capsys):
        assert main(['--output-dir', str(tmp_path), 'metrics', '--params',
                     OCTAVE_LINEAR]) == 0
        captured = capsys.readouterr()
        assert 'NUC 1038' in captured.out
        assert '[Metrics]' in captured.err
        logs = list((tmp_path / 'logs').glob('metrics_*.txt'))
        assert len(logs) == 1
        assert '[Metrics]' in logs[0].read_text()

    def test_quiet_silences_progress(self, tmp_path, capsys):
        assert main(['--quiet', '--output-dir', str(tmp_path), 'metrics', '--params',
                     OCTAVE_LINEAR]) == 0
        assert capsys.readouterr().err == ''


# ─────────────────────────────────────────────────────
# Pipeline
# ─────────────────────────────────────────────────────

class TestPipeline:
    def test_fold_removes_norms(self, pipeline):
        tmp_path, _ = pipeline
        assert not any(layer.has_norms for layer in load_float_model(tmp_path / 'folded').layers)

    def test_float_engine(self, pipeline, capsys):
        tmp_path, out = pipeline
        result = run_json(capsys, '--output-dir', out, 'infer', '--engine', 'float',
                          '--model', str(tmp_path / 'folded'), '--inputs',
                          str(tmp_path / 'inputs.f32'), '--topk', '2')
        model = load_float_model(tmp_path / 'folded')
        x = np.fromfile(tmp_path / 'inputs.f32', '<f4').astype(np.float64).reshape(-1, 4)
        assert len(result['results']) == 10
        for r, row in zip(result['results'], x):
            assert r['logits'] == pytest.approx(forward_float(model, row).tolist())
            assert len(r['topk']) == 2

    def test_lut_engine(self, pipeline, capsys):
        tmp_path, out = pipeline
        quant = run_json(capsys, '--output-dir', out, 'quantize', '--model',
                         str(tmp_path / 'folded'), '--out', str(tmp_path / 'm.lutq'),
                         '--method', 'kmeans', '--n-w', '16', '--n-a', '32')
        assert quant['engine'] == 'lut'
        result = run_json(capsys, '--threads', '2', '--output-dir', out, 'infer', '--engine',
                          'lut', '--model', str(tmp_path / 'm.lutq'), '--inputs',
                          str(tmp_path / 'inputs.f32'))
        qmodel = load_quantized_model(tmp_path / 'm.lutq')
        x = np.fromfile(tmp_path / 'inputs.f32', '<f4').astype(np.float64).reshape(-1, 4)
        logits, best = forward_lut_batch(qmodel, x, topk=config.TOPK)
        assert [r['logits'] for r in result['results']] == logits.tolist()
        assert [r['topk'] for r in result['results']] == best.tolist()
        assert result['logit_scale'] == pytest.approx(qmodel.layers[-1].dx / 2 ** qmodel.s)

    def test_log_engine(self, pipeline, capsys):
        tmp_path, out = pipeline
        quant = run_json(capsys, '--output-dir', out, 'quantize', '--model',
                         str(tmp_path / 'folded'), '--out', str(tmp_path / 'm.lutl'),
                         '--activations', 'octave', '--n-q', '8', '--n-o', '4')
        assert quant['engine'] == 'log'
        result = run_json(capsys, '--output-dir', out, 'infer', '--engine', 'log',
                          '--model', str(tmp_path / 'm.lutl'), '--inputs',
                          str(tmp_path / 'inputs.f32'), '--topk', '1')
        logmodel = load_log_model(tmp_path / 'm.lutl')
        x = np.fromfile(tmp_path / 'inputs.f32', '<f4').astype(np.float64).reshape(-1, 4)
        for r, row in zip(result['results'], x):
            assert r['topk'] == forward_log(logmodel, row, topk=1).topk.tolist()

    def test_metrics_from_containers(self, pipeline, capsys):
        tmp_path, out = pipeline
        run_json(capsys, '--output-dir', out, 'quantize', '--model', str(tmp_path / 'folded'),
                 '--out', str(tmp_path / 'm.lutq'), '--n-q', '4', '--n-o', '3')
        result = run_json(capsys, '--output-dir', out, 'metrics', '--model',
                          str(tmp_path / 'm.lutq'))
        assert result['nuc'] == 4 * 16 + 3 - 1


# ─────────────────────────────────────────────────────
# JSON schemas
# ─────────────────────────────────────────────────────

class TestSchemas:
    def test_metrics_output_from_params(self, tmp_path, capsys):
        validate(run_json(capsys, '--output-dir', str(tmp_path), 'metrics', '--params',
                          OCTAVE_LINEAR), 'metrics')

    def test_metrics_output_from_containers(self, pipeline, capsys):
        tmp_path, out = pipeline
        run_json(capsys, '--output-dir', out, 'quantize', '--model', str(tmp_path / 'folded'),
                 '--out', str(tmp_path / 'm.lutq'), '--method', 'kmeans', '--n-w', '8')
        run_json(capsys, '--output-dir', out, 'quantize', '--model', str(tmp_path / 'folded'),
                 '--out', str(tmp_path / 'm.lutl'), '--activations', 'octave', '--n-q', '8',
                 '--n-o', '4')
        for name in ('m.lutq', 'm.lutl'):
            validate(run_json(capsys, '--output-dir', out, 'metrics', '--model',
                              str(tmp_path / name)), 'metrics')

    @pytest.mark.parametrize('engine, model, quantize_args', [
        ('float', 'folded', None),
        ('lut', 'm.lutq', ['--n-q', '4', '--n-o', '3']),
        ('log', 'm.lutl', ['--activations', 'octave', '--n-q', '8', '--n-o', '4']),
    ])
    def test_infer_output(self, pipeline, capsys, engine, model, quantize_args):
        tmp_path, out = pipeline
        if quantize_args:
            run_json(capsys, '--output-dir', out, 'quantize', '--model', str(tmp_path / 'folded'),
                     '--out', str(tmp_path / model), *quantize_args)
        result = run_json(capsys, '--output-dir', out, 'infer', '--engine', engine, '--model',
                          str(tmp_path / model), '--inputs', str(tmp_path / 'inputs.f32'))
        validate(result, 'infer')
        assert len(result['results']) == 10

    def test_schema_rejects_unknown_field(self, tmp_path, capsys):
        result = run_json(capsys, '--output-dir', str(tmp_path), 'metrics', '--params',
                          OCTAVE_LINEAR)
        with pytest.raises(jsonschema.ValidationError):
            validate({**result, 'extra': 1}, 'metrics')


# ─────────────────────────────────────────────────────
# train-toy / log tee
# ─────────────────────────────────────────────────────

class TestTrainToy:
    def test_quick_run_writes_checkpoints(self, tmp_path, capsys):
        result = run_json(capsys, '--output-dir', str(tmp_path), 'train-toy', '--samples',
                          '120', '--epochs', '1', '--finetune-epochs', '1', '--method',
                          'octave', '--S', '2')
        assert result['condition'] == 'moons_mlp_octave'
        assert (tmp_path / 'moons_mlp_octave_seed_0' / 'model.lutq').is_file()
        assert load_float_model(result['checkpoints']['quantized']).input_shape == (2,)
        assert (tmp_path / 'run_summaries.csv').is_file()
        assert (tmp_path / 'metrics_moons_mlp_octave_seed_0.csv').is_file()


class TestLogTee:
    def test_only_tagged_lines_reach_terminal(self, tmp_path):
        class Sink:
            def __init__(self):
                self.text = ''

            def write(self, s):
                self.text += s

            def flush(self):
                pass

        log, term = Sink(), Sink()
        tee = _LogTee(log, term)
        tee.write('[Quantize] layer 0\nplain line\nWarning: wide table\npartial')
        assert log.text.endswith('partial')
        assert term.text == '[Quantize] layer 0\nWarning: wide table\n'
