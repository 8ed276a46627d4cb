"""
test_codebooks.py — pytest suite for lutnet.codebooks
=====================================================
Covers: the nearest-level tie rule, k-means against the exact DP optimum,
Laplacian recursion, triangle occupancy, model-free init / requantize,
octave weight and activation codebooks, uniform activations.
"""

import math

import numpy as np
import pytest

from lutnet.codebooks import (Codebook, ceil_log2, kmeans_1d, kmeans_1d_dp, kmeans_centers,
                              kmeans_inertia, laplacian_centers, laplacian_codebook,
                              laplacian_offsets, modelfree_init, modelfree_layer,
                              modelfree_requantize, octave_activations, octave_codebook,
                              triangle_profile, uniform_linear_activations)
from lutnet.errors import CodebookError
from lutnet.model_core import FloatModel, LayerSpec
from lutnet.quantize import QuantizeParams, quantize_model, weight_codebook


# ─────────────────────────────────────────────────────
# Codebook basics
# ─────────────────────────────────────────────────────

class TestCodebook:
    def test_levels_must_increase(self):
        with pytest.raises(CodebookError):
            Codebook(levels=[0.0, 0.0, 1.0], scheme='kmeans')

    def test_empty_rejected(self):
        with pytest.raises(CodebookError):
            Codebook(levels=[], scheme='kmeans')

    def test_levels_are_read_only(self):
        cb = Codebook(levels=[0.0, 1.0], scheme='kmeans')
        with pytest.raises(ValueError):
            cb.levels[0] = 5.0

    def test_tie_goes_to_larger_magnitude(self):
        cb = Codebook(levels=[0.0, 0.5, 1.0], scheme='kmeans')
        assert cb.quantize(0.75) == 1.0
        neg = Codebook(levels=[-1.0, -0.5, 0.0], scheme='kmeans')
        assert neg.quantize(-0.75) == -1.0

    def test_cut_at_zero_goes_positive(self):
        assert Codebook(levels=[-1.0, 1.0], scheme='kmeans').quantize(0.0) == 1.0

    def test_clamps_outside_range(self):
        cb = Codebook(levels=[0.0, 6.0], scheme='uniform')
        assert cb.nearest_index([-3.0, 2.9, 100.0]).tolist() == [0, 0, 1]

    @pytest.mark.parametrize('v, expected', [(1.0, 0), (4.0, 2), (6.0, 3), (0.3, -1), (0.5, -1)])
    def test_ceil_log2(self, v, expected):
        assert ceil_log2(v) == expected


# ─────────────────────────────────────────────────────
# k-means
# ─────────────────────────────────────────────────────

class TestKMeans:
    def test_separated_clusters_plus_forced_one(self):
        cb = kmeans_1d([0.0, 0.0, 10.0, 10.0], 2)
        assert cb.levels.tolist() == pytest.approx([0.0, 1.0, 10.0])

    def test_without_forced_one(self):
        cb = kmeans_1d([0.0, 0.0, 10.0, 10.0], 2, force_one=False)
        assert cb.levels.tolist() == pytest.approx([0.0, 10.0])

    def test_k_exceeding_distinct_values_rejected(self):
        with pytest.raises(CodebookError):
            kmeans_centers([1.0, 1.0, 2.0], 3)

    def test_lloyd_within_one_percent_of_optimum(self):
        rng = np.random.default_rng(0)
        x = np.concatenate((rng.normal(-5, 1, 1000), rng.normal(5, 1, 1000)))
        centers, inertia = kmeans_centers(x, 2, seed=0)
        _, optimum = kmeans_1d_dp(x, 2)
        assert inertia <= optimum * 1.01
        assert inertia == pytest.approx(kmeans_inertia(x, centers))

    def test_fifty_instances_within_one_percent_of_optimum(self):
        rng = np.random.default_rng(2024)
        draws = [
            lambda n: rng.normal(0, 1, n),
            lambda n: rng.laplace(0, 1, n),
            lambda n: rng.standard_t(3, n),
            lambda n: np.where(rng.random(n) < 0.3, rng.normal(-2, 0.5, n),
                               rng.normal(1.5, 1.0, n)),
        ]
        for instance in range(50):
            n = int(rng.integers(50, 2001))
            k = int(rng.integers(2, 17))
            x = draws[instance % len(draws)](n)
            _, inertia = kmeans_centers(x, k, seed=instance)
            _, optimum = kmeans_1d_dp(x, k)
            assert inertia <= optimum * 1.01, (instance, n, k)

    def test_dp_with_k_equal_to_sample_count(self):
        centers, inertia = kmeans_1d_dp([3.0, 1.0, 2.0], 3)
        assert centers.tolist() == pytest.approx([1.0, 2.0, 3.0])
        assert inertia == pytest.approx(0.0, abs=1e-12)

    def test_dp_three_clusters(self):
        centers, inertia = kmeans_1d_dp([0.0, 0.2, 5.0, 5.2, 9.0, 9.4], 3)
        assert centers.tolist() == pytest.approx([0.1, 5.1, 9.2])
        assert inertia == pytest.approx(0.02 + 0.02 + 0.08)

    def test_exact_scheme_tag(self):
        assert kmeans_1d([0.0, 0.1, 3.0, 3.1], 2, exact=True).scheme == 'kmeans-dp'


# ─────────────────────────────────────────────────────
# Laplacian centers
# ─────────────────────────────────────────────────────

class TestLaplacian:
    def test_first_offset(self):
        offsets = laplacian_offsets(1000)
        assert offsets[0] == 0.0
        assert offsets[1] == pytest.approx(-math.log(1 - 2 / 1000))
        assert offsets[1] == pytest.approx(0.0020020, abs=1e-7)

    def test_closed_form(self):
        # exp(-L_i) drops by 2/N per step
        offsets = laplacian_offsets(15)
        i = np.arange(8)
        assert offsets == pytest.approx(-np.log(1 - 2 * i / 15))

    def test_spacing_widens(self):
        assert np.all(np.diff(np.diff(laplacian_offsets(31))) > 0)

    def test_even_count_rejected(self):
        with pytest.raises(CodebookError):
            laplacian_offsets(16)

    def test_symmetric_and_scaled(self):
        cb = laplacian_centers(15, 2.0, force_one=False)
        assert len(cb) == 15
        assert 0.0 in cb.levels
        assert cb.levels == pytest.approx(-cb.levels[::-1])
        assert cb.levels[-1] == pytest.approx(2.0)

    def test_forced_one_replaces_nearest_level_and_mirror(self):
        cb = laplacian_centers(15, 2.0)
        assert cb.contains_one and -1.0 in cb.levels
        assert len(cb) == 15

    def test_codebook_from_values(self):
        values = np.random.default_rng(2).laplace(0, 0.3, 5000)
        cb = laplacian_codebook(values, 9, force_one=False)
        assert cb.levels[-1] > np.quantile(np.abs(values), 0.9)


# ─────────────────────────────────────────────────────
# Model-free
# ─────────────────────────────────────────────────────

class TestTriangleProfile:
    def test_three_buckets(self):
        assert triangle_profile(3, 100).bucket_counts.tolist() == [32, 36, 32]

    def test_single_bucket(self):
        assert triangle_profile(1, 57).bucket_counts.tolist() == [57]

    @pytest.mark.parametrize('n_w, n_net', [(5, 100), (15, 1000), (241, 100_000), (7, 7)])
    def test_sums_and_symmetry(self, n_w, n_net):
        counts = triangle_profile(n_w, n_net).bucket_counts
        assert counts.sum() == n_net
        assert counts.tolist() == counts[::-1].tolist()

    def test_unimodal(self):
        counts = triangle_profile(15, 10_000).bucket_counts
        c = 15 // 2
        assert np.all(np.diff(counts[:c + 1]) >= 0)
        assert np.all(np.diff(counts[c:]) <= 0)

    def test_every_odd_width_up_to_1025(self):
        for n_w in range(1, 1026, 2):
            counts = triangle_profile(n_w, 100_000).bucket_counts
            c = n_w // 2
            assert counts.sum() == 100_000, n_w
            assert np.all(counts >= 0), n_w
            assert counts.tolist() == counts[::-1].tolist(), n_w
            assert np.all(np.diff(counts[:c + 1]) >= 0), n_w

    def test_even_rejected(self):
        with pytest.raises(CodebookError):
            triangle_profile(4, 100)


class TestModelFree:
    def test_bucket_means(self):
        cb = modelfree_layer([2.0, -1.0, 0.0, -2.0, 1.0], 3, force_one=False)
        assert cb.cut_indices.tolist() == [0, 1, 4, 5]
        assert cb.levels.tolist() == pytest.approx([-2.0, 0.0, 2.0])

    def test_all_equal_values(self):
        cb = modelfree_layer(np.full(20, 0.3), 5, force_one=False)
        assert cb.levels.tolist() == pytest.approx([0.3])
        assert np.all(cb.centers == 0.3)

    def test_median_versus_mean(self):
        assert modelfree_layer([0.0, 0.0, 10.0], 1, center='median',
                               force_one=False).levels.tolist() == [0.0]
        assert modelfree_layer([0.0, 0.0, 10.0], 1,
                               force_one=False).levels[0] == pytest.approx(10 / 3)

    def test_one_replaces_nearest_center(self):
        cb = modelfree_layer([2.0, -1.0, 0.0, -2.0, 1.0], 3)
        assert cb.levels.tolist() == pytest.approx([-2.0, 1.0, 2.0])
        assert cb.quantized_values.tolist() == pytest.approx([-2.0, 1.0, 1.0, 1.0, 2.0])

    def test_one_after_a_run_of_equal_centers(self):
        cb = modelfree_layer(np.full(20, 0.3), 5)
        assert cb.levels.tolist() == pytest.approx([0.3, 1.0])
        assert np.all(np.diff(cb.centers) >= 0)
        assert np.all(np.diff(cb.quantized_values) >= 0)

    def test_pipeline_codebooks_contain_one(self):
        rng = np.random.default_rng(11)
        params = QuantizeParams(method='modelfree', n_w=15)
        cb = weight_codebook(rng.normal(0, 0.5, 500), params)
        assert cb.contains_one
        assert len(cb) <= 15
        model = FloatModel(layers=(
            LayerSpec(kind='dense', weights=rng.normal(0, 0.5, (12, 4)),
                      bias=rng.normal(0, 0.1, 12), activation='relu6'),
            LayerSpec(kind='dense', weights=rng.normal(0, 0.5, (3, 12)), bias=np.zeros(3),
                      activation='none'),
        ), input_shape=(4,))
        qmodel = quantize_model(model, QuantizeParams(method='modelfree', n_w=7, n_a=8))
        assert all(layer.weight_cb.contains_one for layer in qmodel.layers)

    def test_too_few_values_rejected(self):
        with pytest.raises(CodebookError):
            modelfree_layer([1.0, 2.0], 3)

    def test_init_is_per_layer(self):
        rng = np.random.default_rng(4)
        cbs = modelfree_init([rng.normal(size=50), rng.normal(size=80)], 5)
        assert [cb.quantized_values.size for cb in cbs] == [50, 80]

    def test_requantize_uses_rank_not_distance(self):
        cb = Codebook(levels=[-1.0, 1.0], scheme='modelfree', quantized_values=[-1.0, 1.0])
        assert modelfree_requantize(np.array([5.0, -5.0]), cb).tolist() == [1.0, -1.0]

    def test_requantize_fixed_point(self):
        values = np.random.default_rng(5).normal(size=40)
        cb = modelfree_layer(values, 7)
        once = modelfree_requantize(values, cb)
        assert np.array_equal(modelfree_requantize(once, cb), once)
        assert sorted(once.tolist()) == cb.quantized_values.tolist()

    def test_requantize_count_mismatch(self):
        cb = modelfree_layer(np.arange(9.0), 3)
        with pytest.raises(CodebookError):
            modelfree_requantize(np.zeros(8), cb)


# ─────────────────────────────────────────────────────
# Octave and activation codebooks
# ─────────────────────────────────────────────────────

class TestOctave:
    def test_small_example(self):
        assert octave_codebook(1, 2, 1.0).levels.tolist() == [-0.5, -0.25, 0.0, 0.25, 0.5]

    @pytest.mark.parametrize('n_q, n_o, size', [(16, 15, 481), (8, 15, 241), (8, 24, 385)])
    def test_level_counts(self, n_q, n_o, size):
        assert len(octave_codebook(n_q, n_o, 1.0)) == size

    def test_k_max_is_power_of_two(self):
        cb = octave_codebook(4, 3, 3.0)
        assert cb.k_max == 4.0
        assert cb.exponent == 2

    def test_decompose_matches_levels(self):
        cb = octave_codebook(4, 3, 1.0)
        idx = np.arange(len(cb))
        sign, k, n = cb.octave_decompose(idx)
        rebuilt = sign * cb.k_max * np.exp2(-(k + n / cb.n_q))
        assert rebuilt == pytest.approx(cb.levels)

    def test_cuts_match_brute_force_nearest_level(self):
        cb = octave_codebook(8, 15, 1.0)
        rng = np.random.default_rng(6)
        x = rng.choice([-1.0, 1.0], 100_000) * np.exp2(rng.uniform(-17.0, 1.0, 100_000))
        x[:1000] = rng.uniform(-1.5, 1.5, 1000)
        fast = cb.nearest_index(x)
        for chunk in np.array_split(np.arange(x.size), 20):
            brute = np.argmin(np.abs(x[chunk, None] - cb.levels[None, :]), axis=1)
            assert np.array_equal(fast[chunk], brute)

    def test_decompose_rejects_other_schemes(self):
        with pytest.raises(CodebookError):
            Codebook(levels=[0.0, 1.0], scheme='kmeans').octave_decompose([0])


class TestActivationCodebooks:
    def test_tanh_uniform_spacing(self):
        cb = uniform_linear_activations(32, 'tanh')
        assert np.diff(cb.levels) == pytest.approx(np.full(31, 2 / 31))

    def test_relu6_two_levels(self):
        assert uniform_linear_activations(2, 'relu6').levels.tolist() == [0.0, 6.0]

    def test_unbounded_rejected(self):
        with pytest.raises(CodebookError):
            uniform_linear_activations(8, 'none')

    @pytest.mark.parametrize('n_q, n_o, size', [(32, 3, 97), (64, 5, 321)])
    def test_octave_activation_counts(self, n_q, n_o, size):
        cb = octave_activations(n_q, n_o)
        assert len(cb) == size
        assert cb.levels[0] == 0.0
        assert cb.k_max == 8.0

    def test_octave_activations_reject_tanh(self):
        with pytest.raises(CodebookError):
            octave_activations(8, 3, 'tanh')
