"""LayerNorm forward, pre-affine inversion, synthetic profiles, persistence."""

import struct
import zlib
from pathlib import Path

import numpy as np
import pytest

from scalarnorm.data import (
    AffineParams,
    MappingDataset,
    MappingFileError,
    layernorm_forward,
    load_mappings,
    pre_affine_invert,
    sample_and_split,
    save_mappings,
    synth_mappings,
)

from conftest import fit_line_r2, fit_scaled_tanh_r2

FIXTURE_DIR = Path(__file__).parent / "fixtures"


class TestLayernormForward:
    def test_constant_token_collapses_to_bias(self):
        params = AffineParams(np.array([1.5, 2.0, 0.5]), np.array([0.1, -0.2, 0.3]),
                              eps=1e-6)
        out = layernorm_forward(np.array([4.0, 4.0, 4.0]), params)
        np.testing.assert_allclose(out, params.b, atol=1e-12)

    def test_two_element_token_hand_case(self):
        # mu=0, population var=1: output is the input itself (eps negligibly small)
        params = AffineParams(np.ones(2), np.zeros(2), eps=1e-15)
        out = layernorm_forward(np.array([1.0, -1.0]), params)
        np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-12)

    def test_normalized_mean_is_zero(self, rng):
        d = 64
        params = AffineParams.identity(d)
        for _ in range(10):
            out = layernorm_forward(rng.normal(0, 3, d), params)
            assert abs(out.mean()) < 1e-12

    def test_batch_axis(self, rng):
        params = AffineParams.identity(8)
        tokens = rng.normal(size=(5, 8))
        batched = layernorm_forward(tokens, params)
        for i in range(5):
            np.testing.assert_array_equal(batched[i], layernorm_forward(tokens[i], params))

    def test_minimum_width(self):
        with pytest.raises(ValueError):
            layernorm_forward(np.array([1.0]), AffineParams.identity(1))


class TestPreAffineInvert:
    def test_bias_recovers_zero(self):
        assert pre_affine_invert(0.3, 2.0, 0.3) == 0.0

    def test_hand_case(self):
        assert pre_affine_invert(3.0, 2.0, 1.0, eps=1e-6) == pytest.approx(1.0, abs=1e-6)

    def test_round_trip_recovers_normalization(self, rng):
        d = 96
        params = AffineParams(rng.uniform(0.5, 1.5, d), rng.normal(0, 0.2, d), eps=1e-6)
        x = rng.normal(0, 2, d)
        y = layernorm_forward(x, params)
        recovered = pre_affine_invert(y, params.w, params.b, params.eps)
        mu, var = x.mean(), x.var()
        normalized = (x - mu) / np.sqrt(var + params.eps)
        bound = params.eps * np.max(np.abs(y - params.b)) / np.min(params.w) ** 2
        assert np.max(np.abs(recovered - normalized)) <= bound

    def test_vanishing_denominator(self):
        with pytest.raises(ZeroDivisionError):
            pre_affine_invert(1.0, -1e-6, 0.0, eps=1e-6)


class TestSyntheticProfiles:
    def _params(self, rng, d):
        return AffineParams(rng.uniform(0.7, 1.3, d), rng.normal(0, 0.1, d))

    def test_linear_profile_is_nearly_a_line(self, rng):
        ds = synth_mappings("linear", 512, 40, self._params(rng, 512),
                            np.random.default_rng(4))
        assert fit_line_r2(ds.x, ds.y) > 0.98

    def test_s_shaped_profile_bends(self, rng):
        ds = synth_mappings("s-shaped", 512, 40, self._params(rng, 512),
                            np.random.default_rng(4), amplitude=2.5)
        line = fit_line_r2(ds.x, ds.y)
        tanh = fit_scaled_tanh_r2(ds.x, ds.y)
        assert line < 0.9
        assert tanh >= line + 0.05

    def test_amplitude_control(self, rng):
        ds = synth_mappings("s-shaped", 512, 40, self._params(rng, 512),
                            np.random.default_rng(4), amplitude=2.5)
        assert 1.8 < np.max(np.abs(ds.y)) < 3.2

    def test_deterministic_given_seed(self, rng):
        params = self._params(rng, 128)
        a = synth_mappings("mixed", 128, 20, params, np.random.default_rng(9))
        b = synth_mappings("mixed", 128, 20, params, np.random.default_rng(9))
        assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)

    def test_unknown_profile(self, rng):
        with pytest.raises(ValueError):
            synth_mappings("cubic", 16, 4, AffineParams.identity(16),
                           np.random.default_rng(0))


class TestSampleAndSplit:
    def _pool(self, n):
        gen = np.random.default_rng(1)
        x = gen.normal(size=n)
        return MappingDataset("pool", x, np.tanh(x))

    def test_protocol_sizes(self):
        train, val = sample_and_split(self._pool(60_000), n=50_000,
                                      rng=np.random.default_rng(0))
        assert train.count == 45_000
        assert val.count == 5_000
        assert train.split_tag == "train" and val.split_tag == "val"

    def test_tiny_split(self):
        train, val = sample_and_split(self._pool(10), n=10, rng=np.random.default_rng(0))
        assert (train.count, val.count) == (9, 1)

    def test_disjoint_by_construction(self):
        train, val = sample_and_split(self._pool(5_000), n=2_000,
                                      rng=np.random.default_rng(3))
        train_pairs = set(zip(train.x.tolist(), train.y.tolist()))
        val_pairs = set(zip(val.x.tolist(), val.y.tolist()))
        assert not train_pairs & val_pairs

    def test_deterministic(self):
        a = sample_and_split(self._pool(1_000), n=500, rng=np.random.default_rng(7))
        b = sample_and_split(self._pool(1_000), n=500, rng=np.random.default_rng(7))
        assert np.array_equal(a[0].x, b[0].x) and np.array_equal(a[1].x, b[1].x)

    def test_insufficient_points(self):
        with pytest.raises(ValueError):
            sample_and_split(self._pool(10), n=11)


class TestPersistence:
    def _dataset(self):
        gen = np.random.default_rng(5)
        x = gen.normal(size=257)
        return MappingDataset("blocks.3.norm1", x, np.tanh(2 * x),
                              split_tag="full", provenance="synthetic")

    def test_binary_round_trip(self, tmp_path):
        ds = self._dataset()
        path = tmp_path / "layer.snmap"
        save_mappings(ds, path)
        back = load_mappings(path)
        assert back.layer_id == ds.layer_id
        assert back.split_tag == ds.split_tag
        assert back.provenance == ds.provenance
        assert np.array_equal(back.x, ds.x)
        assert np.array_equal(back.y, ds.y)

    def test_csv_round_trip(self, tmp_path):
        ds = self._dataset()
        path = tmp_path / "blocks.3.norm1.csv"
        save_mappings(ds, path)
        back = load_mappings(path)
        assert back.layer_id == "blocks.3.norm1"
        assert np.array_equal(back.x, ds.x)
        assert np.array_equal(back.y, ds.y)

    def test_corrupted_checksum_rejected(self, tmp_path):
        path = tmp_path / "layer.snmap"
        save_mappings(self._dataset(), path)
        raw = bytearray(path.read_bytes())
        raw[40] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(MappingFileError, match="checksum"):
            load_mappings(path)

    def test_nan_row_rejected_with_row_number(self, tmp_path):
        ds = self._dataset()
        path = tmp_path / "layer.snmap"
        save_mappings(ds, path)
        raw = bytearray(path.read_bytes())
        # overwrite row 3 of the x column with NaN, then re-seal the CRC
        header = len(b"SNMAP1") + 2 + len(ds.layer_id) + 2 + 16
        struct.pack_into("<d", raw, header + 3 * 8, float("nan"))
        body = bytes(raw[:-4])
        raw[-4:] = struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
        path.write_bytes(bytes(raw))
        with pytest.raises(MappingFileError, match="row 3"):
            load_mappings(path)

    def test_nan_row_in_csv_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x,y_pre\n1.0,2.0\nnan,0.5\n")
        with pytest.raises(MappingFileError, match="row 2"):
            load_mappings(path)

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "layer.snmap"
        save_mappings(self._dataset(), path)
        path.write_bytes(path.read_bytes()[:50])
        with pytest.raises(MappingFileError):
            load_mappings(path)

    def test_not_a_mapping_file(self, tmp_path):
        path = tmp_path / "junk.snmap"
        path.write_bytes(b"hello world, this is not a mapping")
        with pytest.raises(MappingFileError, match="not an SNMAP1"):
            load_mappings(path)

    @pytest.mark.skipif(not (FIXTURE_DIR / "extracted_sample.snmap").exists(),
                        reason="fixture is generated by the extraction adapter")
    def test_extracted_fixture_loads(self):
        ds = load_mappings(FIXTURE_DIR / "extracted_sample.snmap")
        assert ds.provenance == "extracted"
        assert ds.count > 0


class TestDatasetValidation:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            MappingDataset("l", np.array([1.0, np.inf]), np.array([0.0, 0.0]))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            MappingDataset("l", np.array([]), np.array([]))

    def test_rejects_mismatched(self):
        with pytest.raises(ValueError):
            MappingDataset("l", np.array([1.0]), np.array([1.0, 2.0]))

    def test_arrays_read_only(self):
        ds = MappingDataset("l", np.array([1.0]), np.array([2.0]))
        with pytest.raises(ValueError):
            ds.x[0] = 3.0

    def test_stats(self):
        ds = MappingDataset("l", np.array([1.0, -4.0, 2.0]), np.zeros(3))
        assert ds.count == 3
        assert ds.max_abs_x == 4.0
