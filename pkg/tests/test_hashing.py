import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from red import hashing as H, model as M, synth
from red.errors import DegenerateDistribution, EstimationError


def kde_oracle(point, weights, delta):
    """Direct per-definition evaluation of the Gaussian KDE at one point."""
    total = sum(math.exp(-0.5 * ((point - w) / delta) ** 2) for w in weights)
    return total / (len(weights) * delta * math.sqrt(2 * math.pi))


class TestBandwidth:
    def test_uniform_spacing(self):
        assert H.bandwidth([0.0, 1.0, 2.0, 3.0]) == 1.0

    def test_duplicates_removed_before_median(self):
        # distinct {0, 0.1, 0.5}: diffs {0.1, 0.4}, even count -> mean of the two
        assert H.bandwidth([0.0, 0.1, 0.1, 0.5]) == pytest.approx(0.25)

    def test_all_identical_signals_degenerate(self):
        with pytest.raises(DegenerateDistribution):
            H.bandwidth([5.0, 5.0, 5.0])


class TestDensity:
    def test_point_mass_peak_value(self):
        d = H.estimate_density(np.zeros(100), 1.0, 2048)
        want = kde_oracle(0.0, np.zeros(100), 1.0)
        assert want == pytest.approx(1.0 / math.sqrt(2 * math.pi), abs=1e-12)
        nearest = np.argmin(np.abs(d.grid))
        assert d.values[nearest] == pytest.approx(want, abs=1e-4)
        # exact agreement with the oracle at actual grid points
        for i in (0, 512, 1024, 1700):
            assert d.values[i] == pytest.approx(kde_oracle(d.grid[i], np.zeros(100), 1.0), rel=1e-12)

    def test_symmetric_weights_symmetric_density(self):
        d = H.estimate_density(np.array([-0.7, 0.7]), 0.2, 512)
        np.testing.assert_allclose(d.values, d.values[::-1], atol=1e-12)

    def test_total_mass_near_one(self, rng):
        w = rng.standard_normal(500)
        d = H.estimate_density(w, H.bandwidth(w), 2048)
        mass = np.trapezoid(d.values, d.grid)
        assert 0.995 <= mass <= 1.005

    def test_grid_spans_three_bandwidths(self):
        d = H.estimate_density(np.array([0.0, 1.0]), 0.5, 64)
        assert d.grid[0] == pytest.approx(-1.5)
        assert d.grid[-1] == pytest.approx(2.5)
        assert d.grid.size == 64

    def test_preconditions(self):
        with pytest.raises(ValueError):
            H.estimate_density(np.ones(4), -1.0, 64)
        with pytest.raises(ValueError):
            H.estimate_density(np.ones(4), 1.0, 8)


class TestExtrema:
    def test_two_clusters_two_modes(self):
        w = np.concatenate([np.full(50, -1.0), np.full(50, 1.0)])
        d = H.estimate_density(w, 0.1, 2048)
        ms = H.extract_extrema(d)
        step = d.grid[1] - d.grid[0]
        assert ms.maxima.size == 2
        assert abs(ms.maxima[0] + 1.0) < step
        assert abs(ms.maxima[1] - 1.0) < step
        assert ms.minima.size == 3
        assert abs(ms.minima[1]) < 0.05

    def test_single_cluster_single_mode(self):
        d = H.estimate_density(np.zeros(100), 1.0, 512)
        ms = H.extract_extrema(d)
        assert ms.maxima.size == 1
        assert ms.minima[0] == -np.inf and ms.minima[-1] == np.inf

    def test_parity_invariant_random(self, rng):
        for _ in range(20):
            w = rng.standard_normal(rng.integers(8, 200))
            ms = H.extract_extrema(H.estimate_density(w, H.bandwidth(w), 512))
            assert ms.minima.size == ms.maxima.size + 1

    def test_plateau_resolved_to_midpoint(self):
        grid = np.linspace(0.0, 1.0, 11)
        values = np.array([0.0, 1.0, 2.0, 2.0, 2.0, 1.0, 0.5, 1.5, 0.5, 0.2, 0.1])
        ms = H.extract_extrema(H.DensityEstimate(grid, values, 1.0))
        assert ms.maxima[0] == pytest.approx(0.3)  # midpoint of the 2.0 plateau
        assert ms.maxima.size == 2

    def test_monotone_density_peaks_at_the_rim(self):
        grid = np.linspace(0.0, 1.0, 16)
        ms = H.extract_extrema(H.DensityEstimate(grid, np.linspace(0, 1, 16), 1.0))
        assert ms.maxima.size == 1 and ms.maxima[0] == 1.0

    def test_constant_density_is_an_error(self):
        grid = np.linspace(0.0, 1.0, 16)
        with pytest.raises(EstimationError):
            H.extract_extrema(H.DensityEstimate(grid, np.ones(16), 1.0))


class TestCollapse:
    def _modes(self, maxima, minima, densities):
        grid = np.asarray(maxima, dtype=float)
        ms = H.ModeSet(np.concatenate(([-np.inf], minima, [np.inf])), grid.copy())
        d = H.DensityEstimate(grid, np.asarray(densities, dtype=float), 1.0)
        return ms, d

    def test_tau_zero_is_identity(self):
        ms, d = self._modes([0.0, 0.04, 1.0], [0.02, 0.5], [2.0, 1.0, 3.0])
        out = H.collapse_modes(ms, d, 0.0, 1.0)
        np.testing.assert_array_equal(out.maxima, ms.maxima)
        np.testing.assert_array_equal(out.minima, ms.minima)

    def test_dominated_mode_collapses(self):
        # maxima {0, 0.04, 1}, densities {2, 1, 3}, tau=0.05, range 1:
        # the 0/0.04 pair is closer than 0.05; density 1 loses to density 2
        ms, d = self._modes([0.0, 0.04, 1.0], [0.02, 0.5], [2.0, 1.0, 3.0])
        out = H.collapse_modes(ms, d, 0.05, 1.0)
        np.testing.assert_array_equal(out.maxima, [0.0, 1.0])
        np.testing.assert_array_equal(out.minima, [-np.inf, 0.5, np.inf])

    def test_full_collapse_keeps_global_argmax(self):
        ms, d = self._modes([0.0, 0.3, 0.8], [0.1, 0.5], [1.0, 5.0, 2.0])
        out = H.collapse_modes(ms, d, 1.0, 1.0)
        np.testing.assert_array_equal(out.maxima, [0.3])

    def test_density_tie_keeps_smaller_abscissa(self):
        ms, d = self._modes([0.0, 0.04], [0.02], [2.0, 2.0])
        out = H.collapse_modes(ms, d, 0.1, 1.0)
        np.testing.assert_array_equal(out.maxima, [0.0])

    def test_mode_count_parity_preserved(self):
        ms, d = self._modes([0.0, 0.1, 0.22, 0.9], [0.05, 0.15, 0.5], [1.0, 2.0, 1.5, 3.0])
        for tau in (0.0, 0.05, 0.12, 0.3, 0.95):
            out = H.collapse_modes(ms, d, tau, 1.0)
            assert out.minima.size == out.maxima.size + 1


class TestHashLayer:
    def _two_modes(self):
        return H.ModeSet(np.array([-np.inf, 0.0, np.inf]), np.array([-1.0, 1.0]))

    def test_interval_lookup(self):
        got = H.hash_layer(np.array([-1.01, -0.99, 0.98, 1.02]), self._two_modes())
        np.testing.assert_array_equal(got, [-1.0, -1.0, 1.0, 1.0])

    def test_idempotent_at_fixed_modes(self, rng):
        modes = self._two_modes()
        w = rng.standard_normal((8, 8))
        once = H.hash_layer(w, modes)
        np.testing.assert_array_equal(H.hash_layer(once, modes), once)

    def test_boundary_goes_right(self):
        # intervals are [m_k, m_{k+1}): a weight exactly on a minimum
        # belongs to the interval on its right
        got = H.hash_layer(np.array([0.0]), self._two_modes())
        np.testing.assert_array_equal(got, [1.0])

    def test_shape_preserved_and_distinct_bounded(self, rng):
        w = rng.standard_normal((4, 5, 2))
        got = H.hash_layer(w, self._two_modes())
        assert got.shape == w.shape
        assert np.unique(got).size <= 2


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=8, max_size=128))
def test_hash_pipeline_invariants(values):
    w = np.asarray(values)
    if np.unique(w).size < 2:
        return
    density = H.estimate_density(w, H.bandwidth(w), 256)
    modes = H.snap_modes(H.extract_extrema(density), w)
    # parity
    assert modes.minima.size == modes.maxima.size + 1
    # interval containment for every weight and its hashed value
    hashed = H.hash_layer(w, modes)
    idx = np.searchsorted(modes.minima[1:-1], w, side="right")
    for val, hval, k in zip(w, hashed, idx):
        assert modes.minima[k] <= val < modes.minima[k + 1]
        assert modes.minima[k] <= hval < modes.minima[k + 1]
        assert hval == modes.maxima[k]
        # displacement bounded by the enclosing interval width
        width = modes.minima[k + 1] - modes.minima[k]
        assert abs(val - hval) < width


class TestHashModel:
    def test_exact_valued_model_bit_identical(self):
        m, _ = synth.gen_model_with_duplicates(synth.PlantSpec(seed=3, layers=3, width=8))
        hashed = H.hash_model(m, H.HashConfig(tau=0.0))
        assert hashed == m

    def test_idempotent(self, rng):
        # continuous weights: a second default-config pass changes nothing
        m = M.sequential(
            [M.dense(rng.standard_normal((24, 24))), M.dense(rng.standard_normal((4, 24)))]
        )
        once = H.hash_model(m, H.HashConfig(tau=0.0))
        assert H.hash_model(once, H.HashConfig(tau=0.0)) == once

        # planted clusters hashed at the generator bandwidth: rehash is identity
        spec = synth.PlantSpec(seed=6, modes=(-1.0, 0.0, 1.0), noise=0.01, weight_modes=0, layers=3)
        mm = synth.gen_multimodal_model(spec)
        hashed = H.hash_model(mm, H.HashConfig(tau=0.0, bandwidth=0.01))
        assert H.hash_model(hashed, H.HashConfig(tau=0.0)) == hashed

    def test_planted_modes_recovered(self):
        spec = synth.PlantSpec(seed=1, modes=(-1.0, -0.3, 0.5, 1.2), noise=0.005, width=32,
                               in_features=32, weight_modes=0)
        layer, assignment = synth.gen_multimodal_layer(spec)
        m = M.sequential([layer])
        hashed = H.hash_model(m, H.HashConfig(tau=0.0, bandwidth=0.005, hash_bias=False))
        got = hashed.blocks[0].layers[0].weight
        assert np.unique(got).size == 4
        # every weight lands on the value its own cluster hashed to
        for k in range(4):
            cluster = got[assignment == k]
            assert np.unique(cluster).size == 1

    def test_tau_monotone_distinct_counts(self, rng):
        w = rng.standard_normal((24, 24))
        m = M.sequential([M.dense(w.copy()), M.dense(rng.standard_normal((4, 24)))])
        counts = []
        for tau in (0.0, 0.05, 0.1, 0.2):
            hashed = H.hash_model(m, H.HashConfig(tau=tau, hash_bias=False))
            counts.append(np.unique(hashed.blocks[0].layers[0].weight).size)
        assert counts == sorted(counts, reverse=True)

    def test_relu_untouched_architecture_identical(self):
        m = synth.gen_multimodal_model(synth.PlantSpec(seed=2, layers=2, weight_modes=0))
        hashed = H.hash_model(m, H.HashConfig(tau=0.0))
        assert [l.kind for _, l in hashed.iter_layers()] == [l.kind for _, l in m.iter_layers()]
        assert M.validate_model(hashed) == []

    def test_bias_hashed_with_weights_by_default(self):
        w = np.array([[1.0, 1.0], [1.0, 1.0]])
        m = M.sequential([M.dense(w, np.array([1.001, 0.999]))])
        hashed = H.hash_model(m, H.HashConfig(tau=0.0, bandwidth=0.01))
        got = hashed.blocks[0].layers[0]
        assert np.unique(np.concatenate([got.weight.ravel(), got.bias])).size == 1

    def test_batchnorm_var_untouched(self, rng):
        m = M.sequential(
            [
                M.conv2d(rng.standard_normal((3, 3, 2, 4)), padding=1),
                M.batchnorm(rng.uniform(0.5, 2, 4), rng.standard_normal(4),
                            rng.standard_normal(4), rng.uniform(0.5, 2, 4)),
            ]
        )
        hashed = H.hash_model(m, H.HashConfig(tau=0.0))
        bn = hashed.blocks[1].layers[0]
        np.testing.assert_array_equal(bn.tensors["var"], m.blocks[1].layers[0].tensors["var"])
        assert M.validate_model(hashed) == []

    def test_degenerate_single_value_layer_skipped(self):
        m = M.sequential([M.dense(np.full((4, 4), 0.5))])
        hashed = H.hash_model(m, H.HashConfig(tau=0.0))
        assert hashed == m


def test_allocate_taus_matches_strategies():
    np.testing.assert_allclose(H.allocate_taus(0.3, 3, "linear_ascending"), [0.1, 0.2, 0.3])
    np.testing.assert_allclose(H.allocate_taus(0.2, 4, "constant"), [0.2] * 4)


def test_thread_pool_matches_sequential(rng, monkeypatch):
    m = M.sequential(
        [M.dense(rng.standard_normal((16, 16))), M.relu(), M.dense(rng.standard_normal((4, 16)))]
    )
    sequential = H.hash_model(m, H.HashConfig(tau=0.1))
    monkeypatch.setenv("RED_THREADS", "4")
    threaded = H.hash_model(m, H.HashConfig(tau=0.1))
    assert threaded == sequential
