import numpy as np
import pytest

from conftest import max_delta
from red import hashing as H, merging as G, model as M, redm, separation as S, synth


def test_generators_are_seed_deterministic():
    for build in (
        lambda s: synth.gen_model_with_duplicates(synth.PlantSpec(seed=s))[0],
        lambda s: synth.gen_multimodal_model(synth.PlantSpec(seed=s)),
        lambda s: synth.gen_conv_classifier(synth.PlantSpec(seed=s, layers=2)),
        lambda s: synth.gen_residual_model(synth.PlantSpec(seed=s, width=4, channels=2))[0],
        lambda s: synth.gen_random_model(s),
    ):
        assert redm.save_bytes(build(13)) == redm.save_bytes(build(13))
        assert redm.save_bytes(build(13)) != redm.save_bytes(build(14))


def test_generated_models_validate():
    for seed in range(10):
        m, _ = synth.gen_model_with_duplicates(synth.PlantSpec(seed=seed))
        assert M.validate_model(m) == []
        cm = synth.gen_conv_classifier(synth.PlantSpec(seed=seed, layers=2))
        assert M.validate_model(cm) == []


class TestMultimodalLayer:
    def test_hash_recovers_modes_and_assignment(self):
        spec = synth.PlantSpec(seed=3, modes=(-1.0, 1.0), noise=0.01, width=24,
                               in_features=24, weight_modes=0)
        layer, assignment = synth.gen_multimodal_layer(spec)
        m = M.sequential([layer])
        hashed = H.hash_model(m, H.HashConfig(tau=0.0, bandwidth=spec.noise, hash_bias=False))
        got = hashed.blocks[0].layers[0].weight
        assert np.unique(got).size == 2
        for k in range(2):
            assert np.unique(got[assignment == k]).size == 1

    def test_zero_noise_hash_is_identity_within_grid_step(self):
        spec = synth.PlantSpec(seed=1, modes=(-1.0, 1.0), noise=0.0, width=8, in_features=8)
        layer, assignment = synth.gen_multimodal_layer(spec)
        pool = layer.weight.ravel()
        density = H.estimate_density(pool, 0.05, 2048)
        modes = H.extract_extrema(density)
        step = density.grid[1] - density.grid[0]
        hashed = H.hash_layer(layer.weight, modes)
        assert np.abs(hashed - layer.weight).max() <= step

    def test_single_mode_degenerate_path(self):
        spec = synth.PlantSpec(seed=2, modes=(0.5,), noise=0.0, width=4, in_features=4)
        layer, _ = synth.gen_multimodal_layer(spec)
        hashed = H.hash_model(M.sequential([layer]), H.HashConfig(tau=0.0, hash_bias=False))
        assert hashed.blocks[0].layers[0] == layer

    def test_separation_guard(self):
        with pytest.raises(ValueError, match="separation"):
            synth.gen_multimodal_layer(synth.PlantSpec(modes=(0.0, 0.05), noise=0.01))


class TestDuplicates:
    def test_alpha_zero_recovers_ground_truth(self):
        m, truth = synth.gen_model_with_duplicates(synth.PlantSpec(seed=9, layers=3, width=8))
        _, plan = G.merge_model(m)
        for site in plan.sites:
            assert site.components == truth[site.producers[0]]

    def test_no_duplicates_alpha_zero_identity(self):
        m, truth = synth.gen_model_with_duplicates(
            synth.PlantSpec(seed=4, layers=3, width=8, duplicate_fraction=0.0)
        )
        merged, _ = G.merge_model(m)
        assert merged == m
        assert all(len(c) == 1 for comps in truth.values() for c in comps)

    def test_residual_duplicates_preserved_function(self, rng):
        m, truth = synth.gen_residual_model(synth.PlantSpec(seed=5, width=6, channels=2), blocks=1)
        merged, plan = G.merge_model(m)
        assert plan.sites[0].components == truth
        xs = [rng.standard_normal((2, 4, 4)) for _ in range(20)]
        assert max_delta(m, merged, xs) <= 1e-9


class TestSeparableConv:
    def test_every_channel_rank_one(self):
        layer = synth.gen_separable_conv(synth.PlantSpec(seed=6, channels=5), n_out=12)
        for i in range(5):
            assert S.numerical_rank(S.channel_matrix(layer, i), 1e-6) == 1

    def test_separation_applies_and_matches(self, rng):
        layer = synth.gen_separable_conv(synth.PlantSpec(seed=7, channels=3), n_out=10)
        new, plan = S.separate_layer(layer, 1e-6)
        assert plan.applied
        xs = [rng.standard_normal((3, 5, 5)) for _ in range(20)]
        assert max_delta(M.sequential([layer]), M.sequential([new]), xs) <= 1e-9

    def test_mixed_full_rank_channel_reported(self):
        spec = synth.PlantSpec(seed=8, channels=4, separable_fraction=0.75, weight_modes=0)
        layer = synth.gen_separable_conv(spec, n_out=6)
        ranks = [S.numerical_rank(S.channel_matrix(layer, i), 1e-6) for i in range(4)]
        assert ranks[0] > 1  # the planted dense channel
        assert ranks[1:] == [1, 1, 1]
