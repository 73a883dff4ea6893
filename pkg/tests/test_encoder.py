"""Hashed-feature encoders, scoring heads, gradients and checkpoints."""

import hashlib

import numpy as np
import pytest

from entrel import autograd as ag
from entrel.encoder import (
    CROSS_PAIR_CAP,
    CheckpointError,
    EncoderConfig,
    FeatureExtractor,
    ScorerParams,
    cross_pair_features,
    encode_joint,
    encode_joint_t,
    encode_single,
    encode_single_t,
    gradients,
    lift_params,
    load_checkpoint,
    save_checkpoint,
    score_biaffine,
    score_biaffine_t,
    score_mlp,
    score_mlp_t,
    sigmoid,
    stable_bucket,
    text_features,
)

SMALL = EncoderConfig(embed_dim=6, hash_buckets=64, ngram_orders=(3,), mlp_hidden=5, seed=11)


@pytest.fixture
def params():
    return ScorerParams.init(SMALL)


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6))


class TestHashing:
    # frozen values pin the declared hash (BLAKE2b-64, seed as salt); any
    # change to the function breaks stored checkpoints and must be caught
    FROZEN = {
        ("w=dumbbell", 0, 2 ** 16): 43574,
        ("w=dumbbell", 1, 2 ** 16): 3094,
        ("c3=dum", 0, 2 ** 16): 31584,
        ("x=gym|dumbbell", 7, 1024): 220,
    }

    def test_frozen_values(self):
        for (feature, seed, buckets), expected in self.FROZEN.items():
            assert stable_bucket(feature, seed, buckets) == expected

    def test_matches_declared_construction(self):
        feature, seed, buckets = "w=zorb", 42, 4096
        salt = seed.to_bytes(8, "little")
        digest = hashlib.blake2b(feature.encode(), digest_size=8, salt=salt).digest()
        assert stable_bucket(feature, seed, buckets) == int.from_bytes(digest, "little") % buckets

    def test_seed_changes_buckets(self):
        hits = sum(
            stable_bucket(f"w=tok{i}", 0, 2 ** 16) == stable_bucket(f"w=tok{i}", 1, 2 ** 16)
            for i in range(200)
        )
        assert hits < 5

    def test_range(self):
        for i in range(100):
            assert 0 <= stable_bucket(f"f{i}", 3, 17) < 17

    def test_negative_seed_supported(self):
        assert isinstance(stable_bucket("w=a", -5, 100), int)


class TestFeatures:
    def test_word_and_char_grams(self):
        feats = text_features("gym mat", EncoderConfig(ngram_orders=(3,)))
        assert feats == ["w=gym", "c3=gym", "w=mat", "c3=mat"]

    def test_short_tokens_skip_long_grams(self):
        feats = text_features("ab", EncoderConfig(ngram_orders=(3, 4)))
        assert feats == ["w=ab"]

    def test_cross_pairs_in_token_order_and_capped(self):
        feats = cross_pair_features("a b", "x y")
        assert feats == ["x=a|x", "x=a|y", "x=b|x", "x=b|y"]
        many = cross_pair_features(" ".join(["t"] * 30), " ".join(["u"] * 30))
        assert len(many) == CROSS_PAIR_CAP

    def test_extractor_memo_returns_same_array(self):
        fx = FeatureExtractor(SMALL)
        assert fx.features("gym weight") is fx.features("gym weight")


class TestEncodeSingle:
    def test_deterministic(self, params):
        a = encode_single("gym weight", 0, params, SMALL)
        b = encode_single("gym weight", 0, params, SMALL)
        assert np.array_equal(a, b)

    def test_case_insensitive(self, params):
        a = encode_single("Gym  WEIGHT", 0, params, SMALL)
        b = encode_single("gym weight", 0, params, SMALL)
        assert np.array_equal(a, b)

    def test_empty_text_is_segment_embedding_through_tanh(self, params):
        out = encode_single("", 1, params, SMALL)
        assert np.array_equal(out, np.tanh(params.seg[1]))
        zero = encode_single("", 0, ScorerParams.zeros(SMALL), SMALL)
        assert np.array_equal(zero, np.zeros(SMALL.embed_dim))

    def test_matches_hand_rolled_pooling(self, params):
        fx = FeatureExtractor(SMALL)
        idx = fx.features("gym weight")
        expected = np.tanh(params.emb[idx].mean(axis=0) + params.seg[0])
        assert np.allclose(encode_single("gym weight", 0, params, SMALL), expected, atol=1e-15)

    def test_segments_differ(self, params):
        a = encode_single("gym", 0, params, SMALL)
        b = encode_single("gym", 1, params, SMALL)
        assert not np.array_equal(a, b)


class TestEncodeJoint:
    def test_asymmetric_in_general(self, params):
        a = encode_joint("gym weight", "dumbbell", params, SMALL)
        b = encode_joint("dumbbell", "gym weight", params, SMALL)
        assert not np.array_equal(a, b)

    def test_zero_cross_and_segments_reduce_to_pooled_union(self, params):
        stripped = params.copy()
        stripped.cross_emb[:] = 0.0
        stripped.seg[:] = 0.0
        fx = FeatureExtractor(SMALL)
        idx = np.concatenate([fx.features("gym weight"), fx.features("dumbbell set")])
        expected = np.tanh(stripped.emb[idx].mean(axis=0))
        got = encode_joint("gym weight", "dumbbell set", stripped, SMALL)
        assert np.allclose(got, expected, atol=1e-15)

    def test_deterministic(self, params):
        a = encode_joint("gym weight", "dumbbell", params, SMALL)
        b = encode_joint("gym weight", "dumbbell", params, SMALL)
        assert np.array_equal(a, b)

    def test_cross_features_matter(self, params):
        stripped = params.copy()
        stripped.cross_emb[:] = 0.0
        full = encode_joint("gym weight", "dumbbell", params, SMALL)
        without = encode_joint("gym weight", "dumbbell", stripped, SMALL)
        assert not np.array_equal(full, without)


class TestScoreBiaffine:
    def test_identity_unit_vectors(self):
        p = ScorerParams.zeros(SMALL)
        p.bw[:] = np.eye(SMALL.embed_dim)
        e = np.zeros(SMALL.embed_dim)
        e[0] = 1.0
        assert score_biaffine(e, e, p) == 1.0

    def test_zero_matrix_gives_bias(self):
        p = ScorerParams.zeros(SMALL)
        p.bb[...] = 0.5
        rng = np.random.default_rng(0)
        assert score_biaffine(rng.normal(size=6), rng.normal(size=6), p) == 0.5

    def test_matches_naive_triple_loop(self, params):
        rng = np.random.default_rng(1)
        hq, hi = rng.normal(size=6), rng.normal(size=6)
        naive = float(params.bb)
        for a in range(6):
            for b in range(6):
                naive += hq[a] * params.bw[a, b] * hi[b]
        assert score_biaffine(hq, hi, params) == pytest.approx(naive, rel=1e-12)

    def test_dim_mismatch_rejected(self, params):
        with pytest.raises(ValueError):
            score_biaffine(np.zeros(3), np.zeros(3), params)


class TestScoreMlp:
    def test_zero_weights_give_final_bias(self):
        p = ScorerParams.zeros(SMALL)
        p.b2[...] = -1.25
        assert score_mlp(np.ones(SMALL.embed_dim), p) == -1.25

    def test_zero_input_equals_value_at_zero(self, params):
        expected = float(params.w2 @ np.tanh(params.b1) + params.b2)
        assert score_mlp(np.zeros(SMALL.embed_dim), params) == pytest.approx(expected, rel=1e-12)

    def test_matches_hand_rolled_forward(self, params):
        rng = np.random.default_rng(2)
        h = rng.normal(size=6)
        hidden = np.tanh(params.w1 @ h + params.b1)
        assert score_mlp(h, params) == pytest.approx(float(params.w2 @ hidden + params.b2), rel=1e-12)


class TestTapedMatchesPlain:
    def test_joint_mlp_path(self, params):
        fx = FeatureExtractor(SMALL)
        plain = score_mlp(encode_joint("gym weight", "dumbbell", params, SMALL, fx), params)
        vp = lift_params(params)
        taped = score_mlp_t(encode_joint_t("gym weight", "dumbbell", vp, SMALL, fx), vp)
        assert float(taped.value) == plain

    def test_single_biaffine_path(self, params):
        fx = FeatureExtractor(SMALL)
        hq = encode_single("gym weight", 0, params, SMALL, fx)
        hi = encode_single("dumbbell set", 0, params, SMALL, fx)
        plain = score_biaffine(hq, hi, params)
        vp = lift_params(params)
        taped = score_biaffine_t(
            encode_single_t("gym weight", 0, vp, SMALL, fx),
            encode_single_t("dumbbell set", 0, vp, SMALL, fx),
            vp,
        )
        assert float(taped.value) == plain


class TestGradients:
    def test_bias_only_gradient_is_one(self):
        p = ScorerParams.zeros(SMALL)

        def loss_fn(vp):
            hq = ag.lift(np.zeros(SMALL.embed_dim))
            hi = ag.lift(np.zeros(SMALL.embed_dim))
            return score_biaffine_t(hq, hi, vp)

        grads = gradients(loss_fn, p)
        assert float(grads["bb"]) == 1.0

    def test_off_path_parameters_get_zero_gradient(self, params):
        fx = FeatureExtractor(SMALL)

        def loss_fn(vp):
            h = encode_joint_t("gym weight", "dumbbell", vp, SMALL, fx)
            return ag.logistic_nll(score_mlp_t(h, vp), 1)

        grads = gradients(loss_fn, params)
        assert np.array_equal(grads["bw"], np.zeros_like(params.bw))
        assert np.array_equal(grads["bb"], np.zeros_like(params.bb))
        assert np.any(grads["w2"] != 0)

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_difference_check(self, seed):
        """Every parameter's analytic gradient matches central differences."""
        cfg = EncoderConfig(embed_dim=5, hash_buckets=48, ngram_orders=(3,), mlp_hidden=4, seed=seed)
        p = ScorerParams.init(cfg)
        fx = FeatureExtractor(cfg)
        texts = [("gym weight", "dumbbell"), ("office chair", "desk pad")]
        q, e = texts[seed % 2]

        def loss_fn(vp):
            joint = ag.logistic_nll(score_mlp_t(encode_joint_t(q, e, vp, cfg, fx), vp), 1)
            hq = encode_single_t(q, 0, vp, cfg, fx)
            hi = encode_single_t(e, 1, vp, cfg, fx)
            bi = ag.logistic_nll(score_biaffine_t(hq, hi, vp), 0)
            return ag.add(joint, bi)

        analytic = gradients(loss_fn, p)

        def loss_value():
            h = encode_joint(q, e, p, cfg, fx)
            joint = float(np.logaddexp(0.0, score_mlp(h, p)) - score_mlp(h, p))
            hq = encode_single(q, 0, p, cfg, fx)
            hi = encode_single(e, 1, p, cfg, fx)
            bi = float(np.logaddexp(0.0, score_biaffine(hq, hi, p)))
            return joint + bi

        step = 1e-5
        worst = 0.0
        for name, arr in p.arrays().items():
            numeric = np.zeros_like(arr)
            flat, nflat = arr.reshape(-1), numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi_v = loss_value()
                flat[i] = orig - step
                lo_v = loss_value()
                flat[i] = orig
                nflat[i] = (hi_v - lo_v) / (2 * step)
            worst = max(worst, rel_err(analytic[name], numeric))
        assert worst < 1e-4

    def test_non_finite_gradient_reported(self):
        p = ScorerParams.zeros(SMALL)

        def loss_fn(vp):
            return ag.scale(vp["b2"], float("inf"))

        with np.errstate(invalid="ignore"):
            with pytest.raises(ag.NonFiniteError):
                gradients(loss_fn, p)


class TestCheckpoints:
    def test_round_trip(self, tmp_path, params):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, SMALL, kind="entity", extra={"note": "test"})
        loaded = load_checkpoint(path)
        assert loaded.config == SMALL
        assert loaded.kind == "entity"
        assert loaded.extra == {"note": "test"}
        for name, arr in params.arrays().items():
            assert np.array_equal(getattr(loaded.params, name), arr)

    def test_corrupt_file_reports_structured_error(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_shape_validation_against_config(self, tmp_path, params):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, SMALL)
        import json
        import numpy as np_

        with np_.load(path) as payload:
            arrays = {k: payload[k] for k in payload.files if k != "__meta__"}
            meta = json.loads(bytes(payload["__meta__"]).decode())
        meta["config"]["embed_dim"] = 7  # now inconsistent with the arrays
        meta_bytes = np_.frombuffer(json.dumps(meta).encode(), dtype=np_.uint8)
        with open(path, "wb") as fh:
            np_.savez(fh, __meta__=meta_bytes, **arrays)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestSigmoid:
    def test_extremes_and_midpoint(self):
        assert sigmoid(0.0) == 0.5
        assert float(sigmoid(-np.inf)) == 0.0
        assert float(sigmoid(np.inf)) == 1.0
        assert float(sigmoid(-800.0)) == 0.0  # no overflow warnings
