import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdistill.numcore import RngStream
from mdistill.synthcorpus import (
    ENV_DOMAINS,
    STYLE_DOMAINS,
    ChecksumError,
    CorpusConsistencyError,
    CorpusVersionError,
    DomainConfig,
    FeatureView,
    MissingManifestError,
    apply_environment,
    apply_mvn,
    compute_deltas,
    fit_global_mvn,
    generate_corpus,
    generate_utterance,
    make_manifest,
    prepare_features,
    read_corpus,
    stack_subsample,
    utterance_id,
    write_corpus,
)


def _same_utt(a, b):
    return (a.utterance_id == b.utterance_id and a.domain_id == b.domain_id
            and a.frames.tobytes() == b.frames.tobytes()
            and np.array_equal(a.frame_labels, b.frame_labels) and np.array_equal(a.tokens, b.tokens))


def _collapse(labels):
    return [int(v) for i, v in enumerate(labels) if i == 0 or v != labels[i - 1]]


@pytest.fixture(scope="module")
def small_manifest():
    return make_manifest(STYLE_DOMAINS, counts=(6, 2, 3), master_seed=3)


class TestGenerate:
    def test_deterministic(self, small_manifest):
        d = small_manifest.domains[1]
        uid = utterance_id(d.domain_id, "train", 4)
        assert _same_utt(generate_utterance(small_manifest, d, uid), generate_utterance(small_manifest, d, uid))

    def test_noise_free_frames_equal_prototypes(self, small_manifest):
        clean = DomainConfig(7, "Clean", (2, 5), 0.0, 0.0)
        utt = generate_utterance(small_manifest, clean, 123)
        np.testing.assert_array_equal(utt.frames, small_manifest.prototypes[utt.frame_labels])

    def test_labels_collapse_to_tokens(self, small_manifest):
        for i in range(1000):
            d = small_manifest.domains[i % 3]
            utt = generate_utterance(small_manifest, d, utterance_id(d.domain_id, "train", i))
            assert 4 <= len(utt.tokens) <= 12
            assert len(utt.frame_labels) >= len(utt.tokens)
            assert _collapse(utt.frame_labels) == utt.tokens.tolist()
            assert utt.frame_labels.min() >= 0 and utt.frame_labels.max() < small_manifest.vocab_size

    def test_durations_respect_domain(self, small_manifest):
        spon = small_manifest.domain("Spon")
        utt = generate_utterance(small_manifest, spon, 77)
        runs = np.diff(np.flatnonzero(np.diff(np.r_[-1, utt.frame_labels, -1]) != 0))
        assert runs.min() >= 3 and runs.max() <= 6

    def test_parallel_equals_serial_and_any_order(self, small_manifest):
        serial = generate_corpus(small_manifest)
        parallel = generate_corpus(small_manifest, threads=4)
        for split in serial:
            assert all(_same_utt(a, b) for a, b in zip(serial[split], parallel[split]))
        d = small_manifest.domains[2]
        ids = [utterance_id(d.domain_id, "train", i) for i in range(6)]
        backwards = {uid: generate_utterance(small_manifest, d, uid) for uid in reversed(ids)}
        forwards = [u for u in serial["train"] if u.domain_id == d.domain_id]
        assert all(_same_utt(backwards[u.utterance_id], u) for u in forwards)

    def test_splits_disjoint(self, small_manifest):
        corpus = generate_corpus(small_manifest)
        ids = [set(u.utterance_id for u in corpus[s]) for s in ("train", "dev", "test")]
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])

    def test_nearest_prototype_separability(self):
        m = make_manifest(ENV_DOMAINS, counts=(1, 1, 40), master_seed=0)
        corpus = generate_corpus(m)

        def accuracy(name):
            dom = m.domain(name).domain_id
            hits = total = 0
            for u in corpus["test"]:
                if u.domain_id == dom:
                    d2 = ((u.frames[:, None, :] - m.prototypes[None]) ** 2).sum(-1)
                    hits += int(np.sum(d2.argmin(axis=1) == u.frame_labels))
                    total += len(u.frame_labels)
            return hits / total

        near, far_noise = accuracy("Near"), accuracy("FarNoise")
        assert near > 0.9
        assert far_noise < near


class TestEnvironment:
    def test_zero_taps_identity(self):
        d = DomainConfig(0, "x", reverb_tau=3.0, reverb_taps=0)
        x = RngStream(0).normal((6, 3))
        np.testing.assert_array_equal(apply_environment(x, d, RngStream(1)), x)

    def test_constant_interior_unchanged(self):
        d = DomainConfig(0, "x", reverb_tau=2.5, reverb_taps=4)
        x = np.full((12, 2), 1.7)
        y = apply_environment(x, d, RngStream(1))
        np.testing.assert_allclose(y[4:], 1.7, rtol=1e-14)
        assert np.all(y[:4] < 1.7)

    def test_requires_configuration(self):
        with pytest.raises(ValueError):
            apply_environment(np.ones((3, 2)), DomainConfig(0, "x"), RngStream(0))

    def test_snr(self):
        d = DomainConfig(0, "x", noise_snr_db=5.0)
        sig = noise = 0.0
        for i in range(100):
            x = RngStream(i, 1).normal((40, 8))
            y = apply_environment(x, d, RngStream(i, 2))
            sig += float(np.mean(x * x))
            noise += float(np.mean((y - x) ** 2))
        snr = 10 * math.log10(sig / noise)
        assert abs(snr - 5.0) < 0.5


class TestDeltas:
    def test_constant(self):
        out = compute_deltas(np.full((5, 2), 3.0))
        assert not out[:, 2:].any()

    def test_single_frame(self):
        out = compute_deltas([[1.0, 2.0]])
        np.testing.assert_array_equal(out, [[1.0, 2.0, 0, 0, 0, 0]])

    def test_ramp(self):
        out = compute_deltas(np.array([[0.0], [1.0], [2.0], [3.0]]))
        np.testing.assert_array_equal(out[:, 1], [0.5, 1.0, 1.0, 0.5])
        # second order: symmetric difference of the first-order sequence, edges clamped
        np.testing.assert_array_equal(out[:, 2], [0.25, 0.25, -0.25, -0.25])


class TestStackSubsample:
    def test_shape_nine(self):
        x, y = stack_subsample(np.zeros((9, 2)), np.zeros(9, int))
        assert x.shape == (3, 16) and y.shape == (3,)

    def test_single_frame(self):
        x, _ = stack_subsample([[1.0, 2.0]], [5])
        np.testing.assert_array_equal(x, [[1.0, 2.0] * 8])

    def test_anchors_ten(self):
        frames = np.arange(10.0)[:, None]
        x, y = stack_subsample(frames, np.arange(10))
        assert y.tolist() == [0, 3, 6, 9]
        np.testing.assert_array_equal(x[3], [9.0] * 8)
        np.testing.assert_array_equal(x[2], [6, 7, 8, 9, 9, 9, 9, 9])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 1000))
    def test_frame_count_law(self, T):
        x, y = stack_subsample(np.zeros((T, 1)), np.zeros(T, int))
        assert x.shape[0] == y.shape[0] == math.ceil(T / 3)


class TestMvn:
    def _views(self, seed, n=5):
        rng = RngStream(seed)
        return [FeatureView(rng.normal((4 + i, 3)) * 4 + 2, np.zeros(4 + i, int), np.zeros(1, int), 0, i)
                for i in range(n)]

    def test_normalizes_training_split(self):
        views = self._views(0)
        stats = fit_global_mvn(views)
        allf = np.concatenate([apply_mvn(v, stats).frames for v in views])
        np.testing.assert_allclose(allf.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(allf.var(axis=0), 1.0, atol=1e-6)

    def test_constant_dimension(self):
        v = FeatureView(np.c_[np.ones(5), np.arange(5.0)], np.zeros(5, int), np.zeros(1, int), 0, 0)
        stats = fit_global_mvn([v])
        assert stats.std[0] == 1e-8
        assert not apply_mvn(v, stats).frames[:, 0].any()

    def test_normalized_input_near_identity(self):
        x = RngStream(1).normal((20000, 2))
        v = FeatureView(x, np.zeros(20000, int), np.zeros(1, int), 0, 0)
        stats = fit_global_mvn([v])
        np.testing.assert_allclose(stats.mean, 0, atol=0.03)
        np.testing.assert_allclose(stats.std, 1, atol=0.03)

    def test_empty(self):
        with pytest.raises(ValueError):
            fit_global_mvn([])

    def test_dev_not_centered(self):
        stats = fit_global_mvn(self._views(0))
        dev = apply_mvn(FeatureView(np.full((3, 3), 50.0), np.zeros(3, int), np.zeros(1, int), 0, 0), stats)
        assert np.all(dev.frames > 1)

    def test_corpus_pipeline(self, small_manifest):
        feats, _ = prepare_features(generate_corpus(small_manifest))
        v = feats["train"][0]
        assert v.frames.shape[1] == 8 * 3 * small_manifest.feature_dim
        allf = np.concatenate([v.frames for v in feats["train"]])
        np.testing.assert_allclose(allf.mean(axis=0), 0, atol=1e-9)
        np.testing.assert_allclose(allf.var(axis=0), 1, atol=1e-6)


class TestCorpusFiles:
    def test_round_trip(self, tmp_path, small_manifest):
        corpus = generate_corpus(small_manifest)
        write_corpus(small_manifest, corpus, tmp_path)
        manifest, loaded = read_corpus(tmp_path)
        assert manifest.prototypes.tobytes() == small_manifest.prototypes.tobytes()
        assert manifest.domains == small_manifest.domains
        assert manifest.splits == small_manifest.splits
        for split in corpus:
            assert all(_same_utt(a, b) for a, b in zip(corpus[split], loaded[split]))

    def test_rewrite_is_byte_identical(self, tmp_path, small_manifest):
        write_corpus(small_manifest, generate_corpus(small_manifest), tmp_path / "a")
        write_corpus(small_manifest, generate_corpus(small_manifest), tmp_path / "b")
        for name in ("manifest.json", "train.bin", "dev.bin", "test.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingManifestError, match="missing manifest"):
            read_corpus(tmp_path)

    def test_version_mismatch(self, tmp_path, small_manifest):
        write_corpus(small_manifest, generate_corpus(small_manifest), tmp_path)
        meta = json.loads((tmp_path / "manifest.json").read_text())
        meta["format_version"] = 9
        (tmp_path / "manifest.json").write_text(json.dumps(meta))
        with pytest.raises(CorpusVersionError):
            read_corpus(tmp_path)

    def test_checksum(self, tmp_path, small_manifest):
        write_corpus(small_manifest, generate_corpus(small_manifest), tmp_path)
        raw = bytearray((tmp_path / "dev.bin").read_bytes())
        raw[-1] ^= 0xFF
        (tmp_path / "dev.bin").write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            read_corpus(tmp_path)

    def test_domain_count_mismatch(self, tmp_path, small_manifest):
        corpus = generate_corpus(small_manifest)
        write_corpus(small_manifest, corpus, tmp_path)
        meta = json.loads((tmp_path / "manifest.json").read_text())
        meta["domains"].append({**meta["domains"][0], "domain_id": 9, "name": "Extra"})
        for split in meta["splits"]:
            meta["splits"][split]["Extra"] = 1
        (tmp_path / "manifest.json").write_text(json.dumps(meta))
        with pytest.raises(CorpusConsistencyError):
            read_corpus(tmp_path)

    def test_missing_split_file(self, tmp_path, small_manifest):
        write_corpus(small_manifest, generate_corpus(small_manifest), tmp_path)
        (tmp_path / "test.bin").unlink()
        with pytest.raises(CorpusConsistencyError):
            read_corpus(tmp_path)
