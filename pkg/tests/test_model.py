import numpy as np
import pytest

from ngccphat.model import (
    ChannelwiseGccPhat,
    ModelConfig,
    NgccPhatModel,
    posterior_csv_rows,
    read_feature_file,
    write_feature_file,
)
from ngccphat.signal_core import gcc_phat


def small_config(**kw):
    base = dict(
        num_mics=3,
        filter_channels=8,
        feature_channels=4,
        tracks=3,
        filter_lengths=(31, 11, 9, 7),
        head_lengths=(5, 5, 3, 1),
        tau_max=6,
        sample_rate=24000.0,
        window=128,
    )
    base.update(kw)
    return ModelConfig(**base)


class TestModelConfig:
    def test_default_dimensions(self):
        cfg = ModelConfig()
        assert cfg.num_pairs == 6
        assert cfg.num_lags == 13
        assert cfg.pairs() == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]

    def test_roundtrip_and_hash_stability(self):
        cfg = small_config()
        again = ModelConfig.from_dict(cfg.to_dict())
        assert again == cfg
        assert again.hash() == cfg.hash()
        assert cfg.hash() != ModelConfig().hash()

    def test_even_length_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(filter_lengths=(100, 11, 9, 7))


class TestForwardShapes:
    def test_default_config_shapes(self):
        cfg = ModelConfig()
        model = NgccPhatModel(cfg, seed=0)
        x = np.random.default_rng(0).standard_normal((4, 480))
        out = model.forward(x)
        assert out.feature.shape == (16, 6, 13)
        assert out.logits.shape == (6, 3, 13)
        assert out.posterior.shape == (6, 3, 13)

    def test_posterior_rows_normalized(self):
        model = NgccPhatModel(small_config(), seed=1)
        x = np.random.default_rng(1).standard_normal((3, 128))
        out = model.forward(x)
        np.testing.assert_allclose(out.posterior.sum(axis=2), 1.0, atol=1e-9)

    def test_zero_input_uniform_posterior(self):
        model = NgccPhatModel(small_config(), seed=2)
        out = model.forward(np.zeros((3, 128)))
        np.testing.assert_allclose(out.posterior, 1.0 / 13, atol=1e-12)
        np.testing.assert_array_equal(out.feature, 0.0)

    def test_wrong_shape_rejected(self):
        model = NgccPhatModel(small_config(), seed=0)
        with pytest.raises(ValueError):
            model.forward(np.zeros((4, 128)))
        with pytest.raises(ValueError):
            model.filterbank_forward(np.zeros(100))


class TestShiftInvariance:
    def test_filterbank_bit_exact_shift_equivariance(self):
        model = NgccPhatModel(small_config(), seed=3)
        x = np.random.default_rng(3).standard_normal(128)
        base = model.filterbank_forward(x)
        for shift in (-31, -5, 1, 17):
            shifted = model.filterbank_forward(np.roll(x, shift))
            assert np.array_equal(shifted, np.roll(base, shift, axis=1))

    def test_correlation_shift_covariance(self):
        # shifting one input by d moves every channel's peak to lag d
        gcc = ChannelwiseGccPhat(6)
        rng = np.random.default_rng(4)
        feat = rng.standard_normal((5, 128))
        for d in (-6, -2, 0, 3, 6):
            corr, _ = gcc.forward(feat, np.roll(feat, -d, axis=1))
            peaks = np.argmax(corr, axis=1) - 6
            assert np.all(peaks == d)

    def test_posterior_invariant_to_common_shift(self):
        # a global circular shift of all microphones leaves the TDOAs and
        # therefore the correlations, features, and posteriors unchanged
        model = NgccPhatModel(small_config(), seed=5)
        x = np.random.default_rng(5).standard_normal((3, 128))
        base = model.forward(x)
        shifted = model.forward(np.roll(x, 11, axis=1))
        np.testing.assert_allclose(shifted.posterior, base.posterior, atol=1e-9)
        np.testing.assert_allclose(shifted.feature, base.feature, atol=1e-9)


class TestChannelwiseGccPhat:
    def test_matches_reference_per_channel(self):
        rng = np.random.default_rng(6)
        gcc = ChannelwiseGccPhat(6)
        a = rng.standard_normal((4, 96))
        b = rng.standard_normal((4, 96))
        corr, _ = gcc.forward(a, b)
        for c in range(4):
            ref = gcc_phat(a[c], b[c], 6)
            np.testing.assert_allclose(corr[c], ref.values, atol=1e-9)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        gcc = ChannelwiseGccPhat(4)
        a = rng.standard_normal((2, 32))
        b = rng.standard_normal((2, 32))
        probe = rng.standard_normal((2, 9))

        def loss(av, bv):
            corr, _ = gcc.forward(av, bv)
            return np.sum(corr * probe)

        corr, cache = gcc.forward(a, b)
        ga, gb = gcc.backward(probe, cache)
        step = 1e-6
        for arr, grad in ((a, ga), (b, gb)):
            for _ in range(15):
                c = rng.integers(2)
                n = rng.integers(32)
                plus = arr.copy()
                plus[c, n] += step
                minus = arr.copy()
                minus[c, n] -= step
                if arr is a:
                    numeric = (loss(plus, b) - loss(minus, b)) / (2 * step)
                else:
                    numeric = (loss(a, plus) - loss(a, minus)) / (2 * step)
                denom = max(abs(numeric), abs(grad[c, n]), 1e-8)
                assert abs(numeric - grad[c, n]) / denom < 1e-5

    def test_mismatched_shapes_rejected(self):
        gcc = ChannelwiseGccPhat(6)
        with pytest.raises(ValueError):
            gcc.forward(np.zeros((2, 64)), np.zeros((3, 64)))


class TestSharedWeights:
    def test_stack_caches_are_independent(self):
        # one weight set applied to two inputs must give the same outputs as
        # two fresh evaluations, regardless of interleaving
        model = NgccPhatModel(small_config(), seed=8)
        rng = np.random.default_rng(8)
        x1 = rng.standard_normal((1, 128))
        x2 = rng.standard_normal((1, 128))
        y1_first, _ = model.filterbank.forward(x1)
        y2, _ = model.filterbank.forward(x2)
        y1_again, _ = model.filterbank.forward(x1)
        np.testing.assert_array_equal(y1_first, y1_again)
        assert not np.array_equal(y1_first, y2)

    def test_mic_relabeling_permutes_pair_outputs(self):
        # swapping microphones 1 and 2 permutes the pair axis; with pairs
        # (0,1),(0,2),(1,2) the features of pairs (0,1) and (0,2) swap
        model = NgccPhatModel(small_config(), seed=9)
        x = np.random.default_rng(9).standard_normal((3, 128))
        base = model.forward(x)
        swapped = model.forward(x[[0, 2, 1]])
        np.testing.assert_allclose(
            swapped.logits[0], base.logits[1], atol=1e-9
        )
        np.testing.assert_allclose(
            swapped.logits[1], base.logits[0], atol=1e-9
        )


class TestExtractFeatures:
    def test_five_second_signal_gives_250_features(self):
        cfg = ModelConfig()
        model = NgccPhatModel(cfg, seed=10)
        signal = np.random.default_rng(10).standard_normal((4, 5 * 24000))
        feats = model.extract_features(signal)
        assert len(feats) == 250
        assert feats[0].shape == (16, 6, 13)

    def test_short_signal_empty(self):
        model = NgccPhatModel(small_config(), seed=0)
        assert model.extract_features(np.zeros((3, 100))) == []

    def test_matches_framewise_forward(self):
        cfg = small_config()
        model = NgccPhatModel(cfg, seed=11)
        signal = np.random.default_rng(11).standard_normal((3, 3 * 128))
        feats = model.extract_features(signal)
        for k, feat in enumerate(feats):
            direct = model.forward(signal[:, k * 128:(k + 1) * 128]).feature
            np.testing.assert_array_equal(feat, direct)


class TestCheckpoint:
    def test_roundtrip_preserves_parameters(self, tmp_path):
        cfg = small_config()
        model = NgccPhatModel(cfg, seed=12)
        model.step_count = 42
        model.meta = {"geometry_hash": "abc123"}
        path = tmp_path / "model.ngcp"
        model.save_checkpoint(path)
        loaded, manifest = NgccPhatModel.load_checkpoint(path)
        assert loaded.config == cfg
        assert loaded.step_count == 42
        assert loaded.meta == {"geometry_hash": "abc123"}
        assert manifest["config_hash"] == cfg.hash()
        for (na, va, _), (nb, vb, _) in zip(model.parameters(), loaded.parameters()):
            assert na == nb
            np.testing.assert_array_equal(va.astype("<f4"), vb.astype("<f4"))

    def test_loaded_model_same_posterior(self, tmp_path):
        cfg = small_config()
        model = NgccPhatModel(cfg, seed=13)
        path = tmp_path / "model.ngcp"
        model.save_checkpoint(path)
        loaded, _ = NgccPhatModel.load_checkpoint(path)
        x = np.random.default_rng(13).standard_normal((3, 128))
        np.testing.assert_allclose(
            loaded.forward(x).posterior, model.forward(x).posterior, atol=1e-5
        )

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ngcp"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError):
            NgccPhatModel.load_checkpoint(path)


class TestFeatureFile:
    def test_roundtrip(self, tmp_path):
        cfg = small_config()
        rng = np.random.default_rng(14)
        feats = [
            rng.standard_normal((4, cfg.num_pairs, 13)).astype(np.float64)
            for _ in range(5)
        ]
        path = tmp_path / "feat.ngcf"
        write_feature_file(path, feats, cfg)
        config_hash, data = read_feature_file(path)
        assert config_hash == cfg.hash()
        assert data.shape == (5, 4, cfg.num_pairs, 13)
        np.testing.assert_allclose(data, np.stack(feats).astype("<f4"), atol=0)

    def test_empty(self, tmp_path):
        cfg = small_config()
        path = tmp_path / "feat.ngcf"
        write_feature_file(path, [], cfg)
        _, data = read_feature_file(path)
        assert data.shape[0] == 0


def test_posterior_csv_rows():
    post = np.full((2, 3, 13), 1.0 / 13)
    rows = posterior_csv_rows([post, post])
    assert rows[0] == "frame,pair,track,lag,prob"
    assert len(rows) == 1 + 2 * 2 * 3 * 13
    assert rows[1].startswith("0,0,0,-6,")
