"""
cli.py — Command-line surface: fold → quantize → infer / metrics, plus train-toy.

  lutnet [--json] [--threads N] [--config FILE] [--quiet] [--output-dir DIR] <command> ...

Every command's stdout is tee'd into <output-dir>/logs/<command>_<timestamp>.txt;
tagged progress lines ([Quantize], [Train], ...) are echoed to stderr so that
stdout carries only the result (JSON with --json, a short summary otherwise).
Failures print one `error: ...` line and exit 2.
"""

from __future__ import annotations

import argparse
import json
import os
import pathlib
import re
import sys
from datetime import datetime

import numpy as np

from . import config
from .engine_log import forward_log, load_log_model, logits_to_real, save_log_model
from .engine_lut import forward_lut_batch, top_k
from .errors import LutNetError, ShapeError
from .fold import fold_model
from .metrics import MetricsLogger, complexity_from_params, complexity_report, \
    complexity_report_log
from .model_core import forward_float, load_float_model, save_float_model
from .quantize import WEIGHT_METHODS, QuantizeParams, quantize_model, quantize_model_log
from .tables import load_quantized_model, save_quantized_model
from .train_ste import NETWORKS, TRAIN_METHODS, TrainConfig, train

COMMANDS = ('fold', 'quantize', 'infer', 'metrics', 'train-toy')


# ══════════════════════════════════════════════════════════════════════════
# Run log
# ══════════════════════════════════════════════════════════════════════════

class _LogTee:
    """Every byte goes to the log file.  Only tagged lines reach the terminal."""

    _TAG = re.compile(r'^\[[A-Za-z]+\]')

    def __init__(self, log_fh, terminal, quiet: bool = False):
        self._log = log_fh
        self._terminal = terminal
        self._quiet = quiet
        self._buf = ''

    def write(self, text: str) -> int:
        self._log.write(text)
        self._log.flush()
        self._buf += text
        while '\n' in self._buf:
            line, self._buf = self._buf.split('\n', 1)
            show = self._TAG.match(line) or 'warning' in line.lower()
            if show and not self._quiet:
                self._terminal.write(line + '\n')
                self._terminal.flush()
        return len(text)

    def flush(self) -> None:
        self._log.flush()

    def fileno(self) -> int:
        return self._terminal.fileno()


# ══════════════════════════════════════════════════════════════════════════
# Configuration
# ══════════════════════════════════════════════════════════════════════════

def _config_snapshot() -> dict:
    return {k: getattr(config, k) for k in dir(config) if k.isupper()}


def apply_config_file(path) -> dict:
    """Override config.py constants from a JSON object of lower-case names."""
    path = pathlib.Path(path)
    with open(path, encoding='utf-8') as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise LutNetError(f'{path}: config file must hold a JSON object')
    known = _config_snapshot()
    for key, value in data.items():
        if key != key.lower() or key.upper() not in known:
            raise LutNetError(f'{path}: unknown config key {key!r}')
        current = known[key.upper()]
        if isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        setattr(config, key.upper(), value)
    return data


def output_dir(flag: str | None) -> pathlib.Path:
    """--output-dir, then $LUTNET_OUTPUT_DIR, then config.OUTPUT_DIR."""
    chosen = flag or os.environ.get(config.OUTPUT_DIR_ENV_VAR) or config.OUTPUT_DIR
    return pathlib.Path(chosen)


def _pick(value, default):
    return default if value is None else value


def _quant_params(args) -> QuantizeParams:
    return QuantizeParams(
        method=_pick(args.method, 'octave'), n_w=args.n_w, n_q=args.n_q, n_o=args.n_o,
        activations=args.activations, n_a=args.n_a, n_qa=args.n_qa, n_oa=args.n_oa,
        s=_pick(args.s, config.SHIFT_BITS), tanh_dx=_pick(args.tanh_dx, config.TANH_DX),
        input_range=tuple(args.input_range) if args.input_range else None,
        center=_pick(args.center, config.MODELFREE_CENTER), seed=args.seed,
        subsample=config.KMEANS_SUBSAMPLE)


# ══════════════════════════════════════════════════════════════════════════
# Argument parser
# ══════════════════════════════════════════════════════════════════════════

def _add_quant_flags(p: argparse.ArgumentParser, methods) -> None:
    p.add_argument('--method', choices=methods, default=None,
                   help='Weight codebook scheme')
    p.add_argument('--n-w', type=int, default=16, help='Levels for kmeans / laplacian / modelfree')
    p.add_argument('--n-q', type=int, default=8, help='Octave weights: samples per octave')
    p.add_argument('--n-o', type=int, default=4, help='Octave weights: octaves')
    p.add_argument('--activations', choices=('uniform', 'octave'), default='uniform',
                   help='uniform → .lutq (LUT engine), octave → .lutl (log engine)')
    p.add_argument('--n-a', type=int, default=16, help='Uniform activation levels')
    p.add_argument('--n-qa', type=int, default=32, help='Octave activations: samples per octave')
    p.add_argument('--n-oa', type=int, default=3, help='Octave activations: octaves')
    p.add_argument('--s', type=int, default=None, help='Override config.SHIFT_BITS')
    p.add_argument('--tanh-dx', type=float, default=None, help='Override config.TANH_DX')
    p.add_argument('--input-range', type=float, nargs=2, metavar=('LO', 'HI'), default=None,
                   help='Input activation range (needed for single-layer models)')
    p.add_argument('--center', choices=('mean', 'median'), default=None,
                   help='Model-free bucket center (L2 mean or L1 median)')
    p.add_argument('--seed', type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='lutnet', description='Multiply-free LUT quantization and inference toolkit')
    parser.add_argument('--json', action='store_true', help='Machine-readable JSON on stdout')
    parser.add_argument('--threads', type=int, default=1, help='Worker threads for batch inference')
    parser.add_argument('--config', type=str, default=None,
                        help='JSON file overriding config constants (lower-case names)')
    parser.add_argument('--quiet', action='store_true', help='No progress echo on stderr')
    parser.add_argument('--output-dir', type=str, default=None,
                        help=f'Run directory (default ${config.OUTPUT_DIR_ENV_VAR} or '
                             f'{config.OUTPUT_DIR})')
    sub = parser.add_subparsers(dest='command', metavar='command')

    p = sub.add_parser('fold', help='Fold normalizations into weights and biases')
    p.add_argument('--model', required=True, help='Float checkpoint directory')
    p.add_argument('--out', required=True, help='Folded checkpoint directory')

    p = sub.add_parser('quantize', help='Quantize a float checkpoint into .lutq / .lutl')
    p.add_argument('--model', required=True, help='Float checkpoint directory')
    p.add_argument('--out', required=True, help='Output container path')
    _add_quant_flags(p, WEIGHT_METHODS)

    p = sub.add_parser('infer', help='Run inference on a raw float32 input blob')
    p.add_argument('--engine', choices=('float', 'lut', 'log'), required=True)
    p.add_argument('--model', required=True,
                   help='Float checkpoint directory, .lutq or .lutl file')
    p.add_argument('--inputs', required=True,
                   help='Little-endian float32 blob of N × input_size values')
    p.add_argument('--topk', type=int, default=None, help='Override config.TOPK')

    p = sub.add_parser('metrics', help='NUC / NWNC / table sizes')
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument('--model', help='.lutq or .lutl file')
    group.add_argument('--params', help='JSON parameter file (see configs/)')

    p = sub.add_parser('train-toy', help='Quantization-aware training on a toy task')
    p.add_argument('--task', default='moons', help='moons, blobs, bars or idx:<path>')
    p.add_argument('--network', choices=NETWORKS, default='mlp')
    p.add_argument('--hidden', type=str, default=None,
                   help='Comma-separated hidden widths (mlp), e.g. 16,16')
    p.add_argument('--activation', choices=('relu6', 'tanh'), default='relu6')
    p.add_argument('--S', dest='period', type=int, default=None,
                   help='Steps between requantization events (config.REQUANT_PERIOD)')
    p.add_argument('--no-ste', action='store_true',
                   help='Keep activations continuous during quantized fine-tuning')
    p.add_argument('--epochs', type=int, default=None, help='Continuous-phase epochs')
    p.add_argument('--finetune-epochs', type=int, default=None, help='Quantized-phase epochs')
    p.add_argument('--batch-size', type=int, default=None)
    p.add_argument('--lr', type=float, default=None)
    p.add_argument('--momentum', type=float, default=None)
    p.add_argument('--weight-decay', type=float, default=None)
    p.add_argument('--samples', type=int, default=None)
    p.add_argument('--noise', type=float, default=None)
    _add_quant_flags(p, TRAIN_METHODS)
    return parser


# ══════════════════════════════════════════════════════════════════════════
# Commands
# ══════════════════════════════════════════════════════════════════════════

def cmd_fold(args, out: pathlib.Path) -> dict:
    model = load_float_model(args.model)
    folded = fold_model(model)
    save_float_model(folded, args.out)
    return {'command': 'fold', 'model': args.model, 'out': args.out,
            'layers': len(folded.layers), 'n_net': folded.n_net}


def cmd_quantize(args, out: pathlib.Path) -> dict:
    params = _quant_params(args)
    model = load_float_model(args.model)
    if params.activations == 'octave':
        logmodel = quantize_model_log(model, params)
        save_log_model(logmodel, args.out)
        report = complexity_report_log(logmodel)
        engine = 'log'
    else:
        qmodel = quantize_model(model, params)
        save_quantized_model(qmodel, args.out)
        report = complexity_report(qmodel)
        engine = 'lut'
    return {'command': 'quantize', 'engine': engine, 'method': params.method, 'out': args.out,
            'nuc': report.nuc, 'nwnc': report.nwnc, 'params': params.as_dict()}


def _read_inputs(path, input_size: int) -> np.ndarray:
    raw = np.fromfile(path, dtype='<f4')
    if raw.size == 0 or raw.size % input_size:
        raise ShapeError(f'{path}: {raw.size} float32 values is not a whole number of '
                         f'{input_size}-value inputs')
    return raw.astype(np.float64).reshape(-1, input_size)


def cmd_infer(args, out: pathlib.Path) -> dict:
    k = _pick(args.topk, config.TOPK)
    results = []
    if args.engine == 'float':
        model = load_float_model(args.model)
        x = _read_inputs(args.inputs, model.input_size)
        for i, row in enumerate(x):
            logits = forward_float(model, row)
            results.append({'index': i, 'topk': top_k(logits, k).tolist(),
                            'logits': logits.tolist()})
        scale = 1.0
    elif args.engine == 'lut':
        qmodel = load_quantized_model(args.model)
        x = _read_inputs(args.inputs, qmodel.input_size)
        logits, best = forward_lut_batch(qmodel, x, topk=k, threads=args.threads)
        results = [{'index': i, 'topk': best[i].tolist(), 'logits': logits[i].tolist()}
                   for i in range(len(x))]
        last = qmodel.layers[-1]
        scale = float(np.ldexp(last.dx, -qmodel.s))
    else:
        logmodel = load_log_model(args.model)
        x = _read_inputs(args.inputs, logmodel.input_size)
        for i, row in enumerate(x):
            res = forward_log(logmodel, row, topk=k)
            results.append({'index': i, 'topk': res.topk.tolist(),
                            'logits': res.logits.tolist()})
        scale = float(logits_to_real(logmodel, [1])[0])
        print(f'[Log] {len(x)} input(s) through {len(logmodel.layers)} layer(s)')
    return {'command': 'infer', 'engine': args.engine, 'model': args.model, 'topk': k,
            'logit_scale': scale, 'results': results}


def cmd_metrics(args, out: pathlib.Path) -> dict:
    if args.params:
        with open(args.params, encoding='utf-8') as f:
            params = json.load(f)
        if not isinstance(params, dict):
            raise LutNetError(f'{args.params}: parameter file must hold a JSON object')
        report = complexity_from_params(params)
    elif args.model.endswith('.lutl'):
        report = complexity_report_log(load_log_model(args.model))
    else:
        report = complexity_report(load_quantized_model(args.model))
    print(f'[Metrics] {report.scheme}: NUC {report.nuc}, LUT entries {report.lut_entries}, '
          f'NWNC {report.nwnc}')
    return {'command': 'metrics', **report.to_dict()}


def cmd_train_toy(args, out: pathlib.Path) -> dict:
    method = _pick(args.method, 'none')
    quant_method = method if method != 'none' else 'octave'
    params = _quant_params(argparse.Namespace(**{**vars(args), 'method': quant_method}))
    hidden = (tuple(int(h) for h in args.hidden.split(',') if h.strip())
              if args.hidden else config.HIDDEN_UNITS)
    cfg = TrainConfig(
        task=args.task, network=args.network, hidden=hidden, conv_channels=config.CONV_CHANNELS,
        activation=args.activation, method=method, quant=params,
        S=_pick(args.period, config.REQUANT_PERIOD), ste=not args.no_ste,
        epochs=_pick(args.epochs, config.EPOCHS),
        finetune_epochs=_pick(args.finetune_epochs, config.FINETUNE_EPOCHS),
        batch_size=_pick(args.batch_size, config.BATCH_SIZE),
        lr=_pick(args.lr, config.LEARNING_RATE), momentum=_pick(args.momentum, config.MOMENTUM),
        weight_decay=_pick(args.weight_decay, config.WEIGHT_DECAY), seed=args.seed,
        n_samples=_pick(args.samples, config.TOY_SAMPLES),
        noise=_pick(args.noise, config.TOY_NOISE))

    logger = MetricsLogger(seed=cfg.seed, condition=cfg.condition, output_dir=str(out))
    try:
        result = train(cfg, logger=logger)
    finally:
        logger.close()

    run_dir = out / f'{cfg.condition}_seed_{cfg.seed}'
    checkpoints = {'float': str(save_float_model(result.float_model, run_dir / 'float'))}
    if method != 'none':
        checkpoints['quantized'] = str(save_float_model(result.model, run_dir / 'quantized'))
        if cfg.quant.activations == 'octave':
            path = run_dir / 'model.lutl'
            save_log_model(quantize_model_log(result.model, cfg.quant,
                                              weight_codebooks=result.weight_cbs), path)
        else:
            path = run_dir / 'model.lutq'
            save_quantized_model(quantize_model(result.model, cfg.quant,
                                                weight_codebooks=result.weight_cbs), path)
        checkpoints['tables'] = str(path)
    return {'command': 'train-toy', 'condition': cfg.condition, 'seed': cfg.seed,
            'method': method, 'float_acc': result.float_acc,
            'first_pass_acc': result.first_pass_acc, 'final_acc': result.final_acc,
            'requant_events': result.requant_events, 'steps': result.steps,
            'metrics_csv': logger.metrics_path, 'checkpoints': checkpoints}


_HANDLERS = {
    'fold': cmd_fold,
    'quantize': cmd_quantize,
    'infer': cmd_infer,
    'metrics': cmd_metrics,
    'train-toy': cmd_train_toy,
}


def _summary(result: dict) -> str:
    cmd = result['command']
    if cmd == 'infer':
        return '\n'.join(f"input {r['index']}: top-{result['topk']} {r['topk']}"
                         for r in result['results'])
    if cmd == 'metrics':
        line = (f"{result['scheme']}: NUC {result['nuc']}  LUT entries {result['lut_entries']}  "
                f"NWNC {result['nwnc']}")
        if result.get('size_bits') is not None:
            line += f"  size {result['size_bits']} bits"
        return line
    if cmd == 'train-toy':
        first = result['first_pass_acc']
        return (f"{result['condition']} seed {result['seed']}: float {result['float_acc']:.4f}"
                + ('' if first is None else f"  first pass {first:.4f}")
                + f"  final {result['final_acc']:.4f}")
    return f"{cmd}: wrote {result['out']}"


# ══════════════════════════════════════════════════════════════════════════
# Entry points
# ══════════════════════════════════════════════════════════════════════════

def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    saved = _config_snapshot()
    real_stdout = sys.stdout
    log_fh = None
    try:
        if args.config:
            apply_config_file(args.config)
        out = output_dir(args.output_dir)
        (out / 'logs').mkdir(parents=True, exist_ok=True)
        ts = datetime.now().strftime('%Y%m%d_%H%M%S')
        log_path = out / 'logs' / f'{args.command}_{ts}.txt'
        log_fh = open(log_path, 'w', encoding='utf-8')
        sys.stdout = _LogTee(log_fh, sys.stderr, quiet=args.quiet)
        result = _HANDLERS[args.command](args, out)
    except (LutNetError, OSError, json.JSONDecodeError) as exc:
        sys.stdout = real_stdout
        print(f'error: {exc}', file=sys.stderr)
        return 2
    finally:
        sys.stdout = real_stdout
        if log_fh is not None:
            log_fh.close()
        for key, value in saved.items():
            setattr(config, key, value)

    if args.json:
        real_stdout.write(json.dumps(result, indent=2) + '\n')
    else:
        real_stdout.write(_summary(result) + '\n')
    return 0


def run() -> None:
    sys.exit(main())
