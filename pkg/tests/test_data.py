import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vibe.data import (Coupling, FeatureSet, ModelParams, TrainConfig, decode_features, encode_features,
                       init_params, load_coupling, load_features, load_params, parse_kv_config,
                       save_coupling, save_features, save_params)
from vibe.errors import ConfigError, DataError, FormatError
from vibe.numerics import make_rng, normalize_rows


def raw_vibf(rows, labels, k, clean=None):
    rows = np.asarray(rows, dtype="<f8")
    n, d = rows.shape
    head = struct.pack("<4sHIIIB", b"VIBF", 1, n, d, k, 0 if clean is None else 1)
    body = rows.tobytes() + np.asarray(labels, dtype="<u4").tobytes()
    if clean is not None:
        body += np.asarray(clean, dtype="<u4").tobytes()
    return head + body


def random_featureset(rng, n=7, d=3, k=3, clean=True):
    feats = normalize_rows(rng.standard_normal((n, d)))
    y = rng.integers(0, k, n)
    return FeatureSet(feats, y, k, rng.integers(0, k, n) if clean else None)


class TestFeatureFiles:
    def test_identity_rows(self, tmp_path):
        path = tmp_path / "a.vibf"
        path.write_bytes(raw_vibf([[1, 0], [0, 1]], [0, 1], 2))
        fs = load_features(path)
        np.testing.assert_array_equal(fs.features, [[1, 0], [0, 1]])
        np.testing.assert_array_equal(fs.corrupted_labels, [0, 1])
        assert fs.clean_labels is None and fs.num_classes == 2

    def test_rows_renormalized(self, tmp_path):
        path = tmp_path / "a.vibf"
        path.write_bytes(raw_vibf([[3, 4]], [0], 1))
        np.testing.assert_allclose(load_features(path).features, [[0.6, 0.8]], rtol=0, atol=1e-16)

    def test_nan_rejected(self, tmp_path):
        path = tmp_path / "a.vibf"
        path.write_bytes(raw_vibf([[np.nan, 1.0]], [0], 1))
        with pytest.raises(FormatError, match="non-finite feature") as err:
            load_features(path)
        assert err.value.code == "non_finite"

    def test_distinct_error_codes(self):
        good = raw_vibf([[1, 0]], [0], 1)
        codes = set()
        for blob in (b"XXXX" + good[4:], good[:-2], good + b"\0"):
            with pytest.raises(FormatError) as err:
                decode_features(blob)
            codes.add(err.value.code)
        assert codes == {"bad_magic", "truncated", "trailing"}

    def test_label_out_of_range(self):
        with pytest.raises(FormatError):
            decode_features(raw_vibf([[1, 0]], [3], 2))

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(FormatError, match="nope.vibf"):
            load_features(tmp_path / "nope.vibf")

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 9), st.integers(1, 5), st.booleans())
    def test_round_trip_bitwise(self, seed, n, d, clean):
        rng = make_rng(seed)
        feats = normalize_rows(rng.standard_normal((n, d))) if n else np.zeros((0, d))
        fs = FeatureSet(feats, rng.integers(0, 3, n), 3, rng.integers(0, 3, n) if clean else None)
        blob = encode_features(fs)
        back = decode_features(blob)
        np.testing.assert_array_equal(back.features, fs.features)
        np.testing.assert_array_equal(back.corrupted_labels, fs.corrupted_labels)
        assert encode_features(back) == blob

    def test_save_load_resave_identical(self, tmp_path):
        fs = random_featureset(make_rng(0))
        save_features(fs, tmp_path / "a.vibf")
        save_features(load_features(tmp_path / "a.vibf"), tmp_path / "b.vibf")
        assert (tmp_path / "a.vibf").read_bytes() == (tmp_path / "b.vibf").read_bytes()


class TestFeatureSet:
    def test_rejects_non_unit(self):
        with pytest.raises(DataError):
            FeatureSet(np.array([[1.0, 1.0]]), np.array([0]), 1)

    def test_rejects_bad_labels(self):
        with pytest.raises(DataError):
            FeatureSet(np.array([[1.0, 0.0]]), np.array([2]), 2)
        with pytest.raises(DataError):
            FeatureSet(np.array([[1.0, 0.0]]), np.array([0]), 2, clean_labels=np.array([0, 1]))

    def test_subset(self):
        fs = random_featureset(make_rng(1))
        sub = fs.subset([4, 1])
        np.testing.assert_array_equal(sub.features, fs.features[[4, 1]])
        np.testing.assert_array_equal(sub.clean_labels, fs.clean_labels[[4, 1]])


class TestParamsAndCoupling:
    def test_params_round_trip(self, tmp_path):
        rng = make_rng(3)
        p = ModelParams(normalize_rows(rng.standard_normal((3, 4))), normalize_rows(rng.standard_normal((3, 4))),
                        rng.standard_normal(3), 10.0, 7.5, 0.02)
        save_params(p, tmp_path / "p.vibp")
        q = load_params(tmp_path / "p.vibp")
        for name in ("mu", "eta", "prior_logits"):
            np.testing.assert_array_equal(getattr(q, name), getattr(p, name))
        assert (q.kappa, q.nu, q.prior_temp) == (p.kappa, p.nu, p.prior_temp)

    def test_params_bad_magic(self, tmp_path):
        (tmp_path / "p.vibp").write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(FormatError) as err:
            load_params(tmp_path / "p.vibp")
        assert err.value.code == "bad_magic"

    def test_params_invariants(self):
        with pytest.raises(DataError):
            ModelParams(np.eye(2), np.eye(2), np.zeros(2), 1.0, 1.0, 0.0)
        with pytest.raises(DataError):
            ModelParams(np.eye(2), np.eye(2), np.zeros(2), -1.0, 1.0, 1.0)
        with pytest.raises(DataError):
            ModelParams(2 * np.eye(2), np.eye(2), np.zeros(2), 1.0, 1.0, 1.0).validate()

    def test_prior_is_softmax_of_scaled_logits(self):
        p = ModelParams(np.eye(2), np.eye(2), np.array([0.0, 50.0]), 1.0, 1.0, 0.02)
        e = np.exp([0.0, 1.0])
        np.testing.assert_allclose(p.prior(), e / e.sum(), rtol=1e-14)

    def test_coupling_round_trip(self, tmp_path):
        q = np.full((4, 2), 1 / 8)
        save_coupling(Coupling(q), tmp_path / "q.vibq")
        np.testing.assert_array_equal(load_coupling(tmp_path / "q.vibq").q, q)

    def test_coupling_row_violation(self, tmp_path):
        q = np.full((4, 2), 1 / 8)
        q[0, 0] += 2e-6
        save_coupling(Coupling(q), tmp_path / "q.vibq")
        with pytest.raises(FormatError):
            load_coupling(tmp_path / "q.vibq")

    def test_coupling_check(self):
        c = Coupling(np.array([[0.25, 0.25], [0.4, 0.1]]))
        c.check()
        with pytest.raises(DataError):
            c.check(pi=np.array([0.5, 0.5]))
        np.testing.assert_allclose(c.pseudolabels(), [[0.5, 0.5], [0.8, 0.2]])


class TestInitParams:
    def test_axis_means(self):
        fs = FeatureSet(np.eye(2), np.array([0, 1]), 2)
        p = init_params(fs, 10, 10, 0.02)
        np.testing.assert_array_equal(p.mu, np.eye(2))
        np.testing.assert_array_equal(p.eta, np.eye(2))
        np.testing.assert_array_equal(p.prior_logits, [0.0, 0.0])

    def test_zero_mean(self):
        fs = FeatureSet(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]), np.array([0, 0, 1]), 2)
        with pytest.raises(DataError) as err:
            init_params(fs, 10, 10, 0.02)
        assert err.value.code == "degenerate_class"

    def test_empty_class(self):
        fs = FeatureSet(np.eye(2), np.array([0, 0]), 3)
        with pytest.raises(DataError, match="class 1 has no examples"):
            init_params(fs, 10, 10, 0.02)

    def test_matches_direct_means(self):
        rng = make_rng(5)
        fs = random_featureset(rng, n=60, d=4, k=3)
        p = init_params(fs, 10, 10, 0.02)
        for c in range(3):
            m = fs.features[fs.corrupted_labels == c].sum(axis=0)
            np.testing.assert_allclose(p.mu[c], m / np.sqrt(np.sum(m * m)), rtol=0, atol=1e-14)
        p.validate()


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.lam, c.estep_period, c.lr, c.batch_size) == (25.0, 1000, 1e-3, 256)
        assert (c.kappa, c.nu, c.prior_temp) == (10.0, 10.0, 0.02)

    def test_invariants(self):
        with pytest.raises(ConfigError):
            TrainConfig(lam=1.0)
        with pytest.raises(ConfigError):
            TrainConfig(estep_period=0)
        with pytest.raises(ConfigError):
            TrainConfig(posterior_mode="other")
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=10).validate(n=5)

    def test_file_and_mapping(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# comment\nlambda = 10   # inline\nposterior_mode = APPROX\nestep_period=500\n",
                        encoding="utf-8")
        cfg = TrainConfig.from_mapping(parse_kv_config(path))
        assert (cfg.lam, cfg.posterior_mode, cfg.estep_period) == (10.0, "approx", 500)
        assert TrainConfig.from_mapping(cfg.to_mapping()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as err:
            TrainConfig.from_mapping({"lamda": "3"})
        assert err.value.code == "unknown_key"

    def test_bad_line(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("lambda 10\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            parse_kv_config(path)
