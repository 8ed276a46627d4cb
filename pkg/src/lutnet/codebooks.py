"""
codebooks.py — Quantization levels for weights/biases and activations.

Weight schemes
──────────────
  kmeans      — 1-D k-means (k-means++ / Lloyd via scikit-learn, or the exact DP)
  laplacian   — centers from the Laplacian occupancy recursion, scaled by W_max
  modelfree   — triangle occupancy profile; bucket mean (L2) or median (L1) centers,
                then frozen together with the occupancy counts
  octave      — {0} ∪ {±K_max · 2^-(k + n/N_q)}, N_o octaves of N_q samples

Activation schemes
──────────────────
  uniform     — N_a evenly spaced levels over Γ's output range
  octave      — {0} ∪ {S_max · 2^-(k + n/N_q)} for non-negative Γ (relu6)

Nearest-level rule everywhere: midpoint cuts; a value exactly on a cut goes to the
larger-magnitude neighbour, and at a cut of exactly 0 to the positive level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans

from . import config
from .errors import CodebookError
from .model_core import ACTIVATION_RANGE


def round_half_away(x) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _frozen(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def ceil_log2(v: float) -> int:
    """⌈log₂ v⌉ computed exactly for v > 0."""
    mant, exp = math.frexp(float(v))
    return exp - 1 if mant == 0.5 else exp


# ══════════════════════════════════════════════════════════════════════════
# Codebook
# ══════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class Codebook:
    """Sorted quantization levels plus scheme-specific parameters.

    For model-free codebooks ``centers`` keeps one (possibly repeated) center per
    bucket and ``quantized_values`` the frozen sorted assignment list; ``levels``
    holds the distinct centers.
    """

    levels: np.ndarray
    scheme: str
    n_q: int = 0
    n_o: int = 0
    k_max: float = 0.0
    cut_indices: np.ndarray | None = None
    centers: np.ndarray | None = None
    quantized_values: np.ndarray | None = None

    def __post_init__(self) -> None:
        levels = _frozen(np.ravel(self.levels))
        if levels.size == 0:
            raise CodebookError('codebook has no levels')
        if not np.all(np.isfinite(levels)):
            raise CodebookError('codebook levels must be finite')
        if np.any(np.diff(levels) <= 0.0):
            raise CodebookError('codebook levels must be strictly increasing')
        object.__setattr__(self, 'levels', levels)
        for name in ('centers', 'quantized_values'):
            if getattr(self, name) is not None:
                object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.cut_indices is not None:
            object.__setattr__(self, 'cut_indices', _frozen(self.cut_indices, np.int64))

    def __len__(self) -> int:
        return int(self.levels.size)

    @property
    def cut_values(self) -> np.ndarray:
        return 0.5 * (self.levels[:-1] + self.levels[1:])

    @property
    def contains_one(self) -> bool:
        return bool(np.any(self.levels == 1.0))

    @property
    def exponent(self) -> int:
        """log₂ K_max for octave codebooks."""
        return ceil_log2(self.k_max) if self.k_max > 0 else 0

    def nearest_index(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        cuts = self.cut_values
        right = np.searchsorted(cuts, x, side='right')
        left = np.searchsorted(cuts, x, side='left')
        return np.where(x >= 0.0, right, left).astype(np.int64)

    def quantize(self, x) -> np.ndarray:
        return self.levels[self.nearest_index(x)]

    def octave_decompose(self, indices) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Split octave-codebook indices into (sign, k, n); zero has sign 0."""
        if self.scheme != 'octave':
            raise CodebookError(f'{self.scheme} codebook has no octave structure')
        idx = np.asarray(indices, dtype=np.int64)
        half = self.n_q * self.n_o
        d = idx - half
        sign = np.sign(d)
        m = half - np.abs(d)                 # magnitude rank, 0 = largest
        m = np.where(sign == 0, 0, m)
        return sign, m // self.n_q, m % self.n_q + 1


# ══════════════════════════════════════════════════════════════════════════
# k-means
# ══════════════════════════════════════════════════════════════════════════

def _subsample(samples, subsample: int, seed: int) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise CodebookError('k-means needs at least one sample')
    if x.size > subsample:
        rng = np.random.default_rng(seed)
        x = x[rng.choice(x.size, size=subsample, replace=False)]
    return x


def kmeans_inertia(samples, centers) -> float:
    """Sum of squared distances from each sample to its nearest center."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    c = np.unique(np.asarray(centers, dtype=np.float64))
    if c.size == 1:
        return float(np.sum((x - c[0]) ** 2))
    idx = np.searchsorted(0.5 * (c[:-1] + c[1:]), x)
    return float(np.sum((x - c[idx]) ** 2))


def kmeans_centers(samples, k: int, *, seed: int = 0,
                   subsample: int = config.KMEANS_SUBSAMPLE) -> tuple[np.ndarray, float]:
    """Lloyd's k-means with k-means++ seeding on a seeded subsample.

    A subsample of at most config.KMEANS_DP_MAX values keeps the exact DP centers
    when they beat Lloyd. Returns sorted centers and their inertia on the subsample.
    """
    if k < 2:
        raise CodebookError(f'k-means needs k >= 2, got {k}')
    x = _subsample(samples, subsample, seed)
    distinct = np.unique(x).size
    if k > distinct:
        raise CodebookError(f'k={k} exceeds the {distinct} distinct sample values')
    km = KMeans(n_clusters=k, init='k-means++', n_init=config.KMEANS_RESTARTS,
                max_iter=config.KMEANS_MAX_ITER, tol=config.KMEANS_TOL, random_state=seed)
    km.fit(x.reshape(-1, 1))
    centers = np.sort(km.cluster_centers_.ravel())
    inertia = kmeans_inertia(x, centers)
    if x.size <= config.KMEANS_DP_MAX:
        exact, _ = kmeans_1d_dp(x, k)
        exact_inertia = kmeans_inertia(x, exact)
        if exact_inertia < inertia:
            centers, inertia = exact, exact_inertia
    return centers, inertia


def kmeans_1d_dp(samples, k: int) -> tuple[np.ndarray, float]:
    """Globally optimal 1-D k-means by dynamic programming over the sorted samples.

    O(n²k) time and O(n²) memory, so limited to config.KMEANS_DP_MAX samples.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    if k < 1 or n == 0:
        raise CodebookError('optimal k-means needs k >= 1 and samples')
    if n > config.KMEANS_DP_MAX:
        raise CodebookError(f'optimal k-means is limited to {config.KMEANS_DP_MAX} samples, '
                            f'got {n}')
    if k > np.unique(x).size:
        raise CodebookError(f'k={k} exceeds the {np.unique(x).size} distinct sample values')
    xc = x - x.mean()
    s1 = np.concatenate(([0.0], np.cumsum(xc)))
    s2 = np.concatenate(([0.0], np.cumsum(xc * xc)))
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    cnt = (j - i + 1).astype(np.float64)
    with np.errstate(divide='ignore', invalid='ignore'):
        seg1 = s1[j + 1] - s1[i]
        cost = s2[j + 1] - s2[i] - seg1 * seg1 / cnt
    cost = np.where(j >= i, np.maximum(cost, 0.0), np.inf)

    best = cost[0].copy()                       # best[j]: one cluster over x[0..j]
    back = np.zeros((k, n), dtype=np.int64)
    for m in range(1, k):
        # cluster m starts at i ≥ 1, previous clusters cover x[0..i-1]
        total = best[:-1, None] + cost[1:, :]
        arg = np.argmin(total, axis=0)
        best = np.full(n, np.inf)
        best[1:] = total[arg[1:], np.arange(1, n)]
        back[m] = arg + 1
    bounds = [n]
    end = n - 1
    for m in range(k - 1, 0, -1):
        start = int(back[m, end])
        bounds.append(start)
        end = start - 1
    bounds.append(0)
    bounds = bounds[::-1]
    centers = np.array([x[a:b].mean() for a, b in zip(bounds[:-1], bounds[1:])])
    return centers, float(best[-1])


def kmeans_1d(samples, k: int, *, seed: int = 0, subsample: int = config.KMEANS_SUBSAMPLE,
              exact: bool = False, force_one: bool = True) -> Codebook:
    """k-means codebook; 1.0 is appended when no center equals it."""
    if exact:
        centers, _ = kmeans_1d_dp(_subsample(samples, subsample, seed), k)
    else:
        centers, _ = kmeans_centers(samples, k, seed=seed, subsample=subsample)
    levels = np.unique(centers)
    if force_one and not np.any(levels == 1.0):
        levels = np.unique(np.append(levels, 1.0))
    return Codebook(levels=levels, scheme='kmeans-dp' if exact else 'kmeans')


# ══════════════════════════════════════════════════════════════════════════
# Laplacian-model centers
# ══════════════════════════════════════════════════════════════════════════

def laplacian_offsets(n_levels: int) -> np.ndarray:
    """L₀ … L_{N//2} from L_i = L_{i-1} − ln(1 − 2·exp(L_{i-1})/N)."""
    if n_levels < 3 or n_levels % 2 == 0:
        raise CodebookError(f'Laplacian codebook needs an odd N >= 3, got {n_levels}')
    offsets = [0.0]
    for i in range(1, n_levels // 2 + 1):
        arg = 1.0 - 2.0 * math.exp(offsets[-1]) / n_levels
        if arg <= 0.0:
            raise CodebookError(f'Laplacian recursion leaves its domain at index {i}')
        offsets.append(offsets[-1] - math.log(arg))
    return np.array(offsets)


def estimate_wmax(values, n_levels: int) -> float:
    """Mean magnitude of the top ⌈N_net / N²⌉ values (outer half of the outer bins)."""
    mags = np.sort(np.abs(np.asarray(values, dtype=np.float64).ravel()))
    if mags.size == 0:
        raise CodebookError('cannot estimate W_max from an empty tensor')
    top = max(1, math.ceil(mags.size / (n_levels * n_levels)))
    return float(mags[-top:].mean())


def laplacian_centers(n_levels: int, w_max: float, *, force_one: bool = True) -> Codebook:
    if not w_max > 0.0:
        raise CodebookError(f'W_max must be positive, got {w_max}')
    offsets = laplacian_offsets(n_levels)
    pos = w_max / offsets[-1] * offsets[1:]
    if force_one:
        pos = pos.copy()
        pos[int(np.argmin(np.abs(pos - 1.0)))] = 1.0
    levels = np.concatenate((-pos[::-1], [0.0], pos))
    return Codebook(levels=levels, scheme='laplacian')


def laplacian_codebook(values, n_levels: int, *, force_one: bool = True) -> Codebook:
    return laplacian_centers(n_levels, estimate_wmax(values, n_levels), force_one=force_one)


# ══════════════════════════════════════════════════════════════════════════
# Model-free (triangle occupancy)
# ══════════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class TriangleProfile:
    n_w: int
    n_net: int
    bucket_counts: np.ndarray


def _triangle_cdf(x: np.ndarray, half_width: float) -> np.ndarray:
    u = np.minimum(np.abs(x), half_width)
    g = (u - u * u / (2.0 * half_width)) / half_width
    return 0.5 + np.sign(x) * g


def triangle_profile(n_w: int, n_net: int) -> TriangleProfile:
    """Discretized symmetric triangle of base N_w + 2 and area N_net."""
    if n_w < 1 or n_w % 2 == 0:
        raise CodebookError(f'triangle profile needs an odd N_w, got {n_w}')
    if n_net < n_w:
        raise CodebookError(f'N_net={n_net} is smaller than N_w={n_w}')
    edges = np.arange(n_w + 1, dtype=np.float64) - n_w / 2.0
    cdf = _triangle_cdf(edges, (n_w + 2) / 2.0)
    mass = np.diff(cdf)
    mass[0] += cdf[0]
    mass[-1] += 1.0 - cdf[-1]
    c = n_w // 2
    half = np.floor(n_net * mass[:c] * (1.0 + 1e-12) + 1e-9).astype(np.int64)
    counts = np.concatenate((half, [0], half[::-1]))
    counts[c] = n_net - int(counts.sum())
    counts.setflags(write=False)
    return TriangleProfile(n_w=n_w, n_net=n_net, bucket_counts=counts)


def modelfree_layer(values, n_w: int, *, center: str = config.MODELFREE_CENTER,
                    force_one: bool = True) -> Codebook:
    """Freeze triangle-profile buckets and their centers for one layer."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size < n_w:
        raise CodebookError(f'layer has {v.size} values, fewer than N_w={n_w}')
    if center not in ('mean', 'median'):
        raise CodebookError(f'center must be "mean" or "median", got {center!r}')
    counts = triangle_profile(n_w, v.size).bucket_counts
    cuts = np.concatenate(([0], np.cumsum(counts)))
    reduce = np.mean if center == 'mean' else np.median
    centers = np.empty(n_w)
    for i in range(n_w):
        a, b = int(cuts[i]), int(cuts[i + 1])
        # empty bucket keeps a boundary value
        centers[i] = reduce(v[a:b]) if b > a else v[min(a, v.size - 1)]
    if force_one:
        m = int(np.argmin(np.abs(centers - 1.0)))
        if centers[m] < 1.0:
            # last of a run of equal centers keeps them sorted
            m = int(np.flatnonzero(centers == centers[m])[-1])
        centers[m] = 1.0
    return Codebook(levels=np.unique(centers), scheme='modelfree', cut_indices=cuts,
                    centers=centers, quantized_values=np.repeat(centers, counts))


def modelfree_init(layer_values, n_w: int, *, center: str = config.MODELFREE_CENTER,
                   force_one: bool = True) -> list[Codebook]:
    """One frozen model-free codebook per layer (weights and biases pooled)."""
    return [modelfree_layer(v, n_w, center=center, force_one=force_one) for v in layer_values]


def modelfree_requantize(tensor, codebook: Codebook) -> np.ndarray:
    """The i-th smallest element takes the i-th frozen quantized value."""
    if codebook.quantized_values is None:
        raise CodebookError(f'{codebook.scheme} codebook has no frozen assignment')
    t = np.asarray(tensor, dtype=np.float64)
    flat = t.ravel()
    if flat.size != codebook.quantized_values.size:
        raise CodebookError(f'tensor has {flat.size} elements, frozen occupancy totals '
                            f'{codebook.quantized_values.size}')
    out = np.empty_like(flat)
    out[np.argsort(flat, kind='stable')] = codebook.quantized_values
    return out.reshape(t.shape)


# ══════════════════════════════════════════════════════════════════════════
# Octave weight codebooks
# ══════════════════════════════════════════════════════════════════════════

def _octave_magnitudes(n_q: int, n_o: int, exponent: int) -> np.ndarray:
    """Positive levels in descending order: index m = k·N_q + (n − 1)."""
    n = np.arange(1, n_q + 1)
    frac = np.exp2(-n / n_q)                       # n = N_q gives exactly 0.5
    k = np.arange(n_o)[:, None]
    return np.ldexp(frac[None, :], exponent - k).ravel()


def octave_codebook(n_q: int, n_o: int, v_max: float) -> Codebook:
    if n_q < 1 or n_o < 1:
        raise CodebookError(f'octave codebook needs N_q >= 1 and N_o >= 1, got {n_q}, {n_o}')
    if not v_max > 0.0:
        raise CodebookError(f'v_max must be positive, got {v_max}')
    e = ceil_log2(v_max)
    pos = _octave_magnitudes(n_q, n_o, e)[::-1]
    levels = np.concatenate((-pos[::-1], [0.0], pos))
    return Codebook(levels=levels, scheme='octave', n_q=n_q, n_o=n_o, k_max=math.ldexp(1.0, e))


# ══════════════════════════════════════════════════════════════════════════
# Activation codebooks
# ══════════════════════════════════════════════════════════════════════════

def uniform_linear_activations(n_a: int, activation: str,
                               value_range: tuple[float, float] | None = None) -> Codebook:
    """N_a evenly spaced levels over Γ's output range (or an explicit range)."""
    if value_range is None:
        if activation not in ACTIVATION_RANGE:
            raise CodebookError(f'activation {activation!r} has no bounded output range')
        value_range = ACTIVATION_RANGE[activation]
    lo, hi = map(float, value_range)
    if n_a < 2 or not hi > lo:
        raise CodebookError(f'need N_a >= 2 and a non-empty range, got {n_a} over [{lo}, {hi}]')
    return Codebook(levels=np.linspace(lo, hi, n_a), scheme='uniform')


def octave_activations(n_q: int, n_o: int, activation: str = 'relu6',
                       a_max: float | None = None) -> Codebook:
    """{0} ∪ {S_max · 2^-(k + n/N_q)} with S_max the next power of two ≥ max(a)."""
    if activation not in ACTIVATION_RANGE:
        raise CodebookError(f'activation {activation!r} has no bounded output range')
    lo, hi = ACTIVATION_RANGE[activation]
    if lo < 0.0:
        raise CodebookError(f'octave activations need a non-negative Γ; {activation} is signed')
    if n_q < 1 or n_o < 1:
        raise CodebookError(f'octave activations need N_q >= 1 and N_o >= 1, got {n_q}, {n_o}')
    e = ceil_log2(a_max if a_max is not None else hi)
    pos = _octave_magnitudes(n_q, n_o, e)[::-1]
    return Codebook(levels=np.concatenate(([0.0], pos)), scheme='octave', n_q=n_q, n_o=n_o,
                    k_max=math.ldexp(1.0, e))
