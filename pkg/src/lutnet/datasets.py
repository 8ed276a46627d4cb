"""
datasets.py — Toy and IDX datasets for train-toy, plus a prefetching batch iterator.

Tasks
─────
  moons        two interleaving half-circles (2 features, 2 classes)
  blobs        three Gaussian blobs (2 features, 3 classes)
  bars         8×8 images of a horizontal or vertical bar (1 channel, 2 classes)
  idx:<path>   MNIST-style IDX image file; labels from the matching *labels* file
               or an explicit second path: idx:<images>,<labels>
"""

from __future__ import annotations

import pathlib
import queue
import struct
import threading
from dataclasses import dataclass

import numpy as np
from sklearn.datasets import make_blobs, make_moons
from sklearn.model_selection import train_test_split

from . import config
from .errors import LutNetError, ModelFormatError


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val:   np.ndarray
    y_val:   np.ndarray
    input_shape: tuple[int, ...]
    n_classes: int


# ── IDX files ─────────────────────────────────────────────────────────────

_IDX_DTYPES = {0x08: '>u1', 0x09: '>i1', 0x0B: '>i2', 0x0C: '>i4', 0x0D: '>f4', 0x0E: '>f8'}


def read_idx(path) -> np.ndarray:
    """Decode one IDX file (big-endian header, row-major payload)."""
    path = pathlib.Path(path)
    if not path.is_file():
        raise ModelFormatError('no such IDX file', path=str(path))
    raw = path.read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ModelFormatError('bad IDX magic', path=str(path), offset=0)
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise ModelFormatError(f'unknown IDX type code 0x{code:02x}', path=str(path), offset=2)
    if len(raw) < 4 + 4 * ndim:
        raise ModelFormatError('truncated IDX header', path=str(path), offset=len(raw))
    dims = struct.unpack_from(f'>{ndim}I', raw, 4)
    dtype = np.dtype(_IDX_DTYPES[code])
    start = 4 + 4 * ndim
    count = int(np.prod(dims)) if dims else 1
    if len(raw) - start != count * dtype.itemsize:
        raise ModelFormatError(f'IDX payload holds {len(raw) - start} bytes, header declares '
                               f'{count * dtype.itemsize}', path=str(path), offset=start)
    return np.frombuffer(raw, dtype=dtype, offset=start).reshape(dims).astype(np.float64)


def _idx_task(spec: str) -> tuple[np.ndarray, np.ndarray]:
    parts = spec.split(',')
    images = pathlib.Path(parts[0])
    if len(parts) > 1:
        labels = pathlib.Path(parts[1])
    else:
        labels = images.with_name(images.name.replace('images', 'labels'))
        if labels == images:
            raise LutNetError(f'cannot derive a labels file from {images}; '
                              f'use idx:<images>,<labels>')
    x = read_idx(images)
    y = read_idx(labels).astype(np.int64).ravel()
    if x.shape[0] != y.size:
        raise LutNetError(f'{images} has {x.shape[0]} images but {labels} has {y.size} labels')
    if x.ndim == 3:
        x = x[:, None, :, :]
    return x, y


# ── Synthetic tasks ───────────────────────────────────────────────────────

def make_bars(n_samples: int, noise: float, seed: int, size: int = 8):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n_samples)
    pos = rng.integers(1, size - 1, n_samples)
    x = rng.normal(0.0, noise, (n_samples, 1, size, size))
    rows = np.arange(n_samples)
    x[rows[y == 0], 0, pos[y == 0], :] += 1.0
    x[rows[y == 1], 0, :, pos[y == 1]] += 1.0
    return x, y


def load_task(task: str, *, n_samples: int = config.TOY_SAMPLES, noise: float = config.TOY_NOISE,
              seed: int = 0, val_fraction: float = config.VAL_FRACTION) -> Dataset:
    """Seeded, stratified train/validation split of one task."""
    if task == 'moons':
        x, y = make_moons(n_samples=n_samples, noise=noise, random_state=seed)
    elif task == 'blobs':
        x, y = make_blobs(n_samples=n_samples, centers=3, cluster_std=1.0 + 4 * noise,
                          random_state=seed)
    elif task == 'bars':
        x, y = make_bars(n_samples, noise, seed)
    elif task.startswith('idx:'):
        x, y = _idx_task(task[4:])
    else:
        raise LutNetError(f'unknown task {task!r}; expected moons, blobs, bars or idx:<path>')
    x = np.asarray(x, dtype=np.float64)
    x_tr, x_va, y_tr, y_va = train_test_split(x, y, test_size=val_fraction, random_state=seed,
                                              stratify=y)
    return Dataset(x_train=x_tr, y_train=np.asarray(y_tr, dtype=np.int64), x_val=x_va,
                   y_val=np.asarray(y_va, dtype=np.int64), input_shape=tuple(x.shape[1:]),
                   n_classes=int(np.max(y)) + 1)


def scale_to_range(ds: Dataset, lo: float, hi: float) -> Dataset:
    """Min-max scale every feature into [lo, hi] using training statistics."""
    x_min = ds.x_train.min(axis=0)
    span = ds.x_train.max(axis=0) - x_min
    span = np.where(span > 0, span, 1.0)

    def scale(x):
        return np.clip(lo + (x - x_min) / span * (hi - lo), lo, hi)

    return Dataset(x_train=scale(ds.x_train), y_train=ds.y_train, x_val=scale(ds.x_val),
                   y_val=ds.y_val, input_shape=ds.input_shape, n_classes=ds.n_classes)


# ── Prefetching batches ───────────────────────────────────────────────────

class BatchPrefetcher:
    """Yields (x, y) mini-batches built on a background thread.

    Order is a seeded permutation per (seed, epoch); the queue is bounded so the
    producer never runs more than PREFETCH_BATCHES ahead.
    """

    _DONE = object()

    def __init__(self, x: np.ndarray, y: np.ndarray, batch_size: int, *, seed: int,
                 epoch: int, depth: int = config.PREFETCH_BATCHES):
        self._x = x
        self._y = y
        self._batch_size = max(1, int(batch_size))
        self._order = np.random.default_rng([seed, epoch]).permutation(len(x))
        self._queue: queue.Queue = queue.Queue(maxsize=max(1, depth))
        self._thread = threading.Thread(target=self._produce, daemon=True)
        self._thread.start()

    def _produce(self) -> None:
        for start in range(0, len(self._order), self._batch_size):
            idx = self._order[start:start + self._batch_size]
            self._queue.put((self._x[idx], self._y[idx]))
        self._queue.put(self._DONE)

    def __iter__(self):
        while True:
            item = self._queue.get()
            if item is self._DONE:
                break
            yield item
        self._thread.join()
