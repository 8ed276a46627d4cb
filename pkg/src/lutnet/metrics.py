"""
metrics.py — Complexity accounting (NUC / NWNC / table sizes) and the training CSV logger.

NUC   per-layer table entries plus scheme parameters reachable from one neural unit
NWNC  the same count over every distinct table in the network; equals NUC when the
      levels are shared network-wide (octave schemes)
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
import tracemalloc
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .codebooks import ceil_log2
from .engine_log import encode_weight_stream
from .errors import LutNetError
from .tables import index_width


def _clog2(n: int) -> int:
    return ceil_log2(n) if n > 1 else 0


# ══════════════════════════════════════════════════════════════════════════
# Accounting formulas
# ══════════════════════════════════════════════════════════════════════════

def nuc_modelfree(n_w: int, n_a: int) -> int:
    return n_w * n_a


def nwnc_modelfree(layer_n_w, n_a: int) -> int:
    """Per-layer LUTs summed, even when two layers share N_w."""
    return sum(nuc_modelfree(n_w, n_a) for n_w in layer_n_w)


def nuc_octave_linear(n_q: int, n_o: int, n_a: int, *, count_zero_level: bool = False,
                      zero_column: bool = False) -> tuple[int, int]:
    """(NUC, LUT entries) for octave weights with linear activations.

    LUT = N_q·N_a (mantissas only; sign and octave are shifts); NUC adds N_o − 1.
    *zero_column* stores an explicit zero-weight row, *count_zero_level* counts
    the zero weight as one more parameter.
    """
    lut = (n_q + (1 if zero_column else 0)) * n_a
    return lut + n_o - 1 + (1 if count_zero_level else 0), lut


def nuc_octave_octave(n_qw: int, n_ow: int, n_qa: int, n_oa: int) -> tuple[int, int]:
    """(NUC, table entries): tables = max(N_q;w, N_q;a) + 4·N_q;a."""
    tables = max(n_qw, n_qa) + 4 * n_qa
    return tables + n_ow + n_oa - 2, tables


def network_size_bits(n_net: int, n_w: int, n_a: int, n_x: int, s: int) -> tuple[int, float]:
    """(total bits, download compression vs float32) of the three LUT-engine tables."""
    w_bits = _clog2(n_w)
    bits = n_net * w_bits + (s + _clog2(n_x)) * n_a * n_w + n_x * _clog2(n_a)
    return bits, (32.0 / w_bits if w_bits else float('inf'))


# ══════════════════════════════════════════════════════════════════════════
# Complexity reports
# ══════════════════════════════════════════════════════════════════════════

@dataclass
class LayerComplexity:
    index:          int
    kind:           str
    n_w:            int
    n_a:            int
    n_x:            int
    nuc:            int
    lut_entries:    int
    stored_entries: int
    table_bytes:    int
    index_bytes:    int
    bias_bytes:     int


@dataclass
class ComplexityReport:
    scheme:           str
    params:           dict
    nuc:              int
    lut_entries:      int
    nwnc:             int
    lut_entries_net:  int
    layers:           list[LayerComplexity] = field(default_factory=list)
    size_bits:        int | None = None
    compression_ratio: float | None = None
    serialized_bytes: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d['compression_ratio'] == float('inf'):
            d['compression_ratio'] = None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def complexity_report(qmodel) -> ComplexityReport:
    """Accounting for a LUT-engine QuantizedModel, with serialized section sizes."""
    method = qmodel.method
    params = dict(qmodel.meta.get('params', {}))
    layers: list[LayerComplexity] = []
    size_bits = 0
    ratio = None
    for i, layer in enumerate(qmodel.layers):
        n_a = len(layer.input_cb)
        n_x = layer.act_table.n_x if layer.act_table is not None else 1
        stored = int(layer.lut.entries.size)
        act_bytes = 2 * layer.act_table.n_x if layer.act_table is not None else 0
        if layer.weight_cb is None:
            layers.append(LayerComplexity(i, layer.kind, 1, n_a, n_x, n_a, n_a, stored,
                                          4 * stored + act_bytes, 0, 0))
            continue
        n_w = len(layer.weight_cb)
        if layer.weight_cb.scheme == 'octave':
            nuc, lut = nuc_octave_linear(layer.weight_cb.n_q, layer.weight_cb.n_o, n_a)
        else:
            nuc = lut = nuc_modelfree(n_w, n_a)
        bits, ratio = network_size_bits(layer.n_params, n_w, n_a, n_x, qmodel.s)
        size_bits += bits
        layers.append(LayerComplexity(
            i, layer.kind, n_w, n_a, n_x, nuc, lut, stored, 4 * stored + act_bytes,
            math.ceil(layer.n_params * index_width(n_w) / 8), 8 * layer.bias_terms.size))
    weighted = [lc for lc in layers if lc.index_bytes]
    if not weighted:
        raise LutNetError('model has no weight layers to account for')
    shared = method == 'octave'
    nuc = max(lc.nuc for lc in weighted)
    lut = max(lc.lut_entries for lc in weighted)
    return ComplexityReport(
        scheme=f'{method}/linear', params=params, nuc=nuc, lut_entries=lut,
        nwnc=nuc if shared else sum(lc.nuc for lc in weighted),
        lut_entries_net=lut if shared else sum(lc.lut_entries for lc in weighted),
        layers=layers, size_bits=size_bits, compression_ratio=ratio,
        serialized_bytes={
            'tables': sum(lc.table_bytes for lc in layers),
            'weight_indices': sum(lc.index_bytes for lc in layers),
            'bias_terms': sum(lc.bias_bytes for lc in layers),
        })


def complexity_report_log(logmodel) -> ComplexityReport:
    """Accounting for a log-engine LogQuantModel; tables are shared network-wide."""
    t = logmodel.tables
    first = logmodel.layers[0].w_grid
    n_ow = max(layer.w_grid.n_o for layer in logmodel.layers)
    nuc, tables = nuc_octave_octave(first.n_q, n_ow, t.n_qa, t.n_oa)
    layers = []
    stream_bytes = 0
    for i, layer in enumerate(logmodel.layers):
        present, records = encode_weight_stream(layer)
        stream_bytes += present.size + records.size
        layers.append(LayerComplexity(i, layer.kind, 2 * layer.w_grid.n_q * layer.w_grid.n_o + 1,
                                      t.n_qa * t.n_oa + 1, 0, nuc, tables, t.entries,
                                      0, present.size + records.size, 0))
    return ComplexityReport(
        scheme='octave/octave',
        params={'n_qw': first.n_q, 'n_ow': n_ow, 'n_qa': t.n_qa, 'n_oa': t.n_oa,
                's_max': 2 ** t.s_exp, 'headroom': logmodel.headroom},
        nuc=nuc, lut_entries=tables, nwnc=nuc, lut_entries_net=tables, layers=layers,
        serialized_bytes={'tables': 8 * t.t_q.size + 4 * t.t_q_inv.size,
                          'weight_streams': stream_bytes})


def complexity_from_params(params: dict) -> ComplexityReport:
    """Report straight from a parameter file (no model needed)."""
    scheme = params.get('scheme')
    try:
        if scheme == 'modelfree':
            n_w, n_a, n_layers = int(params['n_w']), int(params['n_a']), int(params['layers'])
            nuc = nuc_modelfree(n_w, n_a)
            report = ComplexityReport(scheme=scheme, params=params, nuc=nuc, lut_entries=nuc,
                                      nwnc=nwnc_modelfree([n_w] * n_layers, n_a),
                                      lut_entries_net=nuc * n_layers)
        elif scheme == 'octave-linear':
            nuc, lut = nuc_octave_linear(
                int(params['n_q']), int(params['n_o']), int(params['n_a']),
                count_zero_level=bool(params.get('count_zero_level', False)),
                zero_column=bool(params.get('zero_column', False)))
            report = ComplexityReport(scheme=scheme, params=params, nuc=nuc, lut_entries=lut,
                                      nwnc=nuc, lut_entries_net=lut)
        elif scheme == 'octave-octave':
            nuc, tables = nuc_octave_octave(int(params['n_qw']), int(params['n_ow']),
                                            int(params['n_qa']), int(params['n_oa']))
            report = ComplexityReport(scheme=scheme, params=params, nuc=nuc,
                                      lut_entries=tables, nwnc=nuc, lut_entries_net=tables)
        else:
            raise LutNetError(f'unknown scheme {scheme!r}; expected modelfree, '
                              f'octave-linear or octave-octave')
    except KeyError as exc:
        raise LutNetError(f'parameter file for {scheme} is missing {exc}') from None
    if all(k in params for k in ('n_net', 'n_w', 'n_a', 'n_x', 's')):
        report.size_bits, report.compression_ratio = network_size_bits(
            int(params['n_net']), int(params['n_w']), int(params['n_a']),
            int(params['n_x']), int(params['s']))
    return report


# ══════════════════════════════════════════════════════════════════════════
# Training metrics logger
# ══════════════════════════════════════════════════════════════════════════

class MetricsLogger:
    """Collects per-epoch training metrics and writes them to CSV."""

    COLUMNS = ['seed', 'epoch', 'step', 'method', 'train_loss', 'train_acc', 'val_acc',
               'distinct_params', 'requant_events']

    def __init__(self, seed: int, condition: str, output_dir: str = 'runs'):
        self.seed = seed
        self.condition = condition
        self.output_dir = output_dir
        Path(output_dir).mkdir(parents=True, exist_ok=True)

        self.metrics_path = os.path.join(output_dir, f'metrics_{condition}_seed_{seed}.csv')
        self._metrics_fh = open(self.metrics_path, 'w', newline='', encoding='utf-8')
        self._metrics_writer = csv.writer(self._metrics_fh)
        self._metrics_writer.writerow(self.COLUMNS)
        self._metrics_fh.flush()

        self.rows = 0
        self.start_time = time.time()
        tracemalloc.start()

    def log_epoch(self, *, epoch: int, step: int, method: str, train_loss: float,
                  train_acc: float, val_acc: float, distinct_params: int,
                  requant_events: int) -> None:
        self._metrics_writer.writerow([
            self.seed, epoch, step, method, round(train_loss, 6), round(train_acc, 4),
            round(val_acc, 4), distinct_params, requant_events,
        ])
        self._metrics_fh.flush()
        self.rows += 1

    def finalize(self, *, method: str, float_acc: float | None, first_pass_acc: float | None,
                 final_acc: float, requant_events: int) -> None:
        """Append one row to run_summaries.csv in the output directory."""
        wall_clock = round(time.time() - self.start_time, 2)
        try:
            peak_ram = round(tracemalloc.get_traced_memory()[1] / (1024 * 1024), 2)
            tracemalloc.stop()
        except RuntimeError:
            peak_ram = 0.0

        summary_path = os.path.join(self.output_dir, 'run_summaries.csv')
        file_exists = os.path.isfile(summary_path)
        with open(summary_path, 'a', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            if not file_exists:
                writer.writerow([
                    'seed', 'condition', 'method', 'float_acc', 'first_pass_acc',
                    'final_acc', 'requant_events', 'epochs_logged',
                    'wall_clock_seconds', 'peak_ram_mb',
                ])
            writer.writerow([
                self.seed, self.condition, method,
                '' if float_acc is None else round(float_acc, 4),
                '' if first_pass_acc is None else round(first_pass_acc, 4),
                round(final_acc, 4), requant_events, self.rows, wall_clock, peak_ram,
            ])

    def close(self) -> None:
        """Flush and close the CSV handle.  Call after finalize()."""
        try:
            self._metrics_fh.flush()
            self._metrics_fh.close()
        except OSError:
            pass
