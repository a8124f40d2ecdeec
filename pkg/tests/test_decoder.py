import itertools

import numpy as np
import pytest

from textpoison.corpus import Corpus, ImageTextPair
from textpoison.decoder import (
    BOS,
    EOS,
    UNK,
    BeamConfig,
    DecoderModel,
    diverse_beam_search,
    greedy_decode,
    kl_label_smoothed_loss,
    load_decoder,
    next_token_logits,
    random_decoder,
    save_decoder,
    train_reference_decoder,
)
from textpoison.embedding import ReferenceBackend
from textpoison.errors import ConfigError, EmptyCorpus, ParseError


class TestModel:
    def test_vocab_must_start_with_specials(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError):
            DecoderModel(
                vocab=("cat", BOS, EOS, UNK),
                token_embed=rng.normal(size=(4, 3)),
                query_proj=rng.normal(size=(3, 5)),
                output_proj=rng.normal(size=(8, 4)),
            )

    def test_shape_validation(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError):
            DecoderModel(
                vocab=(BOS, EOS, UNK, "cat"),
                token_embed=rng.normal(size=(3, 3)),
                query_proj=rng.normal(size=(3, 5)),
                output_proj=rng.normal(size=(8, 4)),
            )
        with pytest.raises(ConfigError):
            DecoderModel(
                vocab=(BOS, EOS, UNK, "cat"),
                token_embed=rng.normal(size=(4, 3)),
                query_proj=rng.normal(size=(3, 5)),
                output_proj=rng.normal(size=(7, 4)),
            )

    def test_unknown_token_maps_to_unk(self):
        model = random_decoder(("cat", "dog"), d=4, seed=0)
        assert model.token_id("cat") == 3
        assert model.token_id("zebra") == 2
        assert model.token_id(BOS) == 0

    def test_dims(self):
        model = random_decoder(("cat",), d=6, seed=0, d_tok=3)
        assert model.d == 6
        assert model.d_tok == 3


class TestKLLoss:
    def test_uniform_logits_epsilon_zero_is_log_v(self):
        for v in (2, 7, 33):
            loss, _ = kl_label_smoothed_loss(np.zeros(v), 0, 0.0)
            assert loss == pytest.approx(np.log(v), abs=1e-9)

    def test_epsilon_zero_is_cross_entropy(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=9)
        loss, _ = kl_label_smoothed_loss(logits, 4, 0.0)
        logp = logits - np.log(np.exp(logits - logits.max()).sum()) - logits.max()
        assert loss == pytest.approx(-logp[4], abs=1e-12)

    def test_loss_is_nonnegative_kl(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            v = int(rng.integers(2, 20))
            logits = rng.normal(scale=3.0, size=v)
            eps = float(rng.uniform(0.0, 0.5))
            loss, _ = kl_label_smoothed_loss(logits, int(rng.integers(v)), eps)
            assert loss >= -1e-12

    def test_perfect_prediction_gives_zero_kl(self):
        # logits matching the smoothed target distribution exactly
        v, eps, tgt = 6, 0.12, 2
        q = np.full(v, eps / (v - 1))
        q[tgt] = 1.0 - eps
        loss, grad = kl_label_smoothed_loss(np.log(q), tgt, eps)
        assert loss == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        h = 1e-5
        worst = 0.0
        for _ in range(30):
            v = int(rng.integers(2, 16))
            logits = rng.normal(scale=2.0, size=v)
            tgt = int(rng.integers(v))
            eps = float(rng.choice([0.0, 0.1, 0.3]))
            _, grad = kl_label_smoothed_loss(logits, tgt, eps)
            for i in range(v):
                logits[i] += h
                lp = kl_label_smoothed_loss(logits, tgt, eps)[0]
                logits[i] -= 2 * h
                lm = kl_label_smoothed_loss(logits, tgt, eps)[0]
                logits[i] += h
                num = (lp - lm) / (2 * h)
                rel = abs(num - grad[i]) / max(abs(num), abs(grad[i]), 1e-8)
                worst = max(worst, rel)
        assert worst <= 1e-4

    def test_gradient_sums_to_zero(self):
        rng = np.random.default_rng(4)
        _, grad = kl_label_smoothed_loss(rng.normal(size=11), 3, 0.2)
        assert grad.sum() == pytest.approx(0.0, abs=1e-12)

    def test_validation(self):
        with pytest.raises(ConfigError):
            kl_label_smoothed_loss(np.zeros(1), 0, 0.0)
        with pytest.raises(ConfigError):
            kl_label_smoothed_loss(np.zeros(4), 0, 1.0)
        with pytest.raises(ConfigError):
            kl_label_smoothed_loss(np.zeros(4), 0, -0.1)
        with pytest.raises(ConfigError):
            kl_label_smoothed_loss(np.zeros(4), 4, 0.1)


def _tiny_corpus(backend):
    captions = [
        "cat sits on the mat",
        "dog runs in the park",
        "boat sails the sea",
        "car drives down roads",
        "bird flies over trees",
    ]
    pairs = []
    for i, cap in enumerate(captions):
        feat = backend.encode_text(cap)
        patches = np.stack([backend.encode_text(w) for w in cap.split()[:4]])
        pairs.append(
            ImageTextPair(
                id=f"p{i}", text=cap, class_label="x", image_feature=feat, patch_features=patches
            )
        )
    return Corpus.from_pairs(pairs)


class TestTraining:
    def test_loss_decreases(self, unit_corpus, acc_backend):
        model = train_reference_decoder(unit_corpus, acc_backend, epochs=4, lr=0.05, seed=0)
        assert model.trained
        assert len(model.loss_trace) == 4
        assert model.loss_trace[-1] < model.loss_trace[0]

    def test_deterministic(self):
        backend = ReferenceBackend(12)
        corpus = _tiny_corpus(backend)
        a = train_reference_decoder(corpus, backend, epochs=3, lr=0.1, seed=5)
        b = train_reference_decoder(corpus, backend, epochs=3, lr=0.1, seed=5)
        np.testing.assert_array_equal(a.token_embed, b.token_embed)
        np.testing.assert_array_equal(a.output_proj, b.output_proj)
        assert a.loss_trace == b.loss_trace

    def test_memorizes_tiny_corpus(self):
        backend = ReferenceBackend(12)
        corpus = _tiny_corpus(backend)
        model = train_reference_decoder(corpus, backend, epochs=500, lr=0.2, seed=0)
        hits = 0
        for pair in corpus:
            ctx = np.vstack([pair.patch_features, backend.encode_text(pair.text)[None, :]])
            out = greedy_decode(ctx, model, max_length=12)
            if out == pair.tokens:
                hits += 1
        assert hits >= 4

    def test_empty_corpus(self):
        backend = ReferenceBackend(8)
        with pytest.raises(EmptyCorpus):
            train_reference_decoder(Corpus.from_pairs([]), backend)

    def test_label_smoothing_validation(self, unit_corpus, acc_backend):
        with pytest.raises(ConfigError):
            train_reference_decoder(unit_corpus, acc_backend, epochs=1, label_smoothing=1.0)


class TestNextTokenLogits:
    def test_requires_bos_prefix(self):
        model = random_decoder(("cat", "dog"), d=4, seed=0)
        ctx = np.eye(4)
        with pytest.raises(ConfigError):
            next_token_logits(("cat",), ctx, model)
        with pytest.raises(ConfigError):
            next_token_logits((), ctx, model)

    def test_shape(self):
        model = random_decoder(("cat", "dog"), d=4, seed=0)
        logits = next_token_logits((BOS,), np.eye(4), model)
        assert logits.shape == (5,)


class TestGreedy:
    def test_stops_at_eos_and_skips_specials(self):
        backend = ReferenceBackend(12)
        corpus = _tiny_corpus(backend)
        model = train_reference_decoder(corpus, backend, epochs=200, lr=0.2, seed=0)
        pair = corpus.pairs[0]
        ctx = np.vstack([pair.patch_features, backend.encode_text(pair.text)[None, :]])
        out = greedy_decode(ctx, model, max_length=12)
        assert BOS not in out and EOS not in out
        assert len(out) <= 12

    def test_max_length_cap(self):
        model = random_decoder(tuple("abcdefgh"), d=4, seed=3)
        out = greedy_decode(np.eye(4), model, max_length=3)
        assert len(out) <= 3


def _transition_logp(model, context):
    """(V, V) table of log p(next | last) built one row at a time."""
    v = len(model.vocab)
    table = np.empty((v, v))
    for last in range(v):
        prefix = (BOS,) if last == 0 else (BOS, model.vocab[last])
        logits = next_token_logits(prefix, context, model)
        table[last] = logits - np.log(np.exp(logits - logits.max()).sum()) - logits.max()
    return table


def _enumerate_best(model, context, max_length):
    """Argmax over every sequence an exhaustive beam can complete.

    Candidates are tuples over the non-EOS vocabulary of length
    0..max_length; shorter ones terminate via EOS and include that step's
    log-probability, full-length ones are cut off without it.  Ties break
    toward the lexicographically smallest id tuple.
    """
    table = _transition_logp(model, context)
    v = len(model.vocab)
    emittable = [i for i in range(v) if i != 1]
    best = None
    for length in range(max_length + 1):
        for ids in itertools.product(emittable, repeat=length):
            last = 0
            total = 0.0
            for tok in ids:
                total += table[last, tok]
                last = tok
            if length < max_length:
                total += table[last, 1]
            key = (-total, ids)
            if best is None or key < best[0]:
                best = (key, ids, total)
    return best


class TestDiverseBeam:
    def test_single_group_wide_beam_is_exact(self):
        # beam wide enough to hold the whole sequence space acts as
        # exhaustive search; scores must match enumeration exactly
        rng = np.random.default_rng(0)
        for trial in range(5):
            model = random_decoder(("cat", "dog", "sea", "sky"), d=5, seed=int(rng.integers(1e6)))
            context = np.random.default_rng(trial).normal(size=(3, 5))
            config = BeamConfig(
                num_groups=1,
                beams_per_group=400,
                max_length=3,
                diversity_penalty=0.0,
                num_return=1,
            )
            (seq, score), *_ = [diverse_beam_search(context, model, config)[0]]
            best = _enumerate_best(model, context, 3)
            assert best is not None
            assert tuple(model.token_index[t] for t in seq) == best[1]
            assert score == pytest.approx(best[2], abs=1e-9)

    def test_results_distinct_sorted_capped(self):
        model = random_decoder(tuple("abcdefgh"), d=6, seed=9)
        config = BeamConfig(num_groups=3, beams_per_group=4, max_length=5, num_return=6)
        out = diverse_beam_search(np.eye(6), model, config)
        assert len(out) <= 6
        seqs = [s for s, _ in out]
        assert len(set(seqs)) == len(seqs)
        scores = [sc for _, sc in out]
        assert scores == sorted(scores, reverse=True)

    def test_diversity_penalty_splits_groups(self):
        model = random_decoder(tuple("abcdefgh"), d=6, seed=11)
        ctx = np.eye(6)
        same = diverse_beam_search(
            ctx, model, BeamConfig(num_groups=4, beams_per_group=1, max_length=1,
                                   diversity_penalty=0.0, num_return=10)
        )
        spread = diverse_beam_search(
            ctx, model, BeamConfig(num_groups=4, beams_per_group=1, max_length=1,
                                   diversity_penalty=100.0, num_return=10)
        )
        # identical groups collapse to one sequence without the penalty
        assert len(same) == 1
        assert len(spread) == 4

    def test_reported_score_is_true_logprob(self):
        model = random_decoder(tuple("abcd"), d=4, seed=2)
        ctx = np.eye(4)
        out = diverse_beam_search(
            ctx, model, BeamConfig(num_groups=2, beams_per_group=2, max_length=1,
                                   diversity_penalty=5.0, num_return=10)
        )
        logits = next_token_logits((BOS,), ctx, model)
        logp = logits - np.log(np.exp(logits - logits.max()).sum()) - logits.max()
        for seq, score in out:
            if len(seq) == 1:
                tok = model.token_index[seq[0]]
                assert score == pytest.approx(logp[tok], abs=1e-12)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            BeamConfig(num_groups=0)
        with pytest.raises(ConfigError):
            BeamConfig(diversity_penalty=-0.5)


class TestCheckpoint:
    def test_roundtrip_exact(self, tmp_path, unit_decoder):
        path = tmp_path / "dec.txdc"
        save_decoder(unit_decoder, path)
        loaded = load_decoder(path)
        assert loaded.vocab == unit_decoder.vocab
        assert loaded.trained
        np.testing.assert_array_equal(loaded.token_embed, unit_decoder.token_embed)
        np.testing.assert_array_equal(loaded.query_proj, unit_decoder.query_proj)
        np.testing.assert_array_equal(loaded.output_proj, unit_decoder.output_proj)

    def test_unicode_vocab_roundtrip(self, tmp_path):
        model = random_decoder(("café", "naïve"), d=3, seed=0)
        path = tmp_path / "u.txdc"
        save_decoder(model, path)
        assert load_decoder(path).vocab == model.vocab

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.txdc"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ParseError):
            load_decoder(path)

    def test_truncated(self, tmp_path, unit_decoder):
        path = tmp_path / "trunc.txdc"
        save_decoder(unit_decoder, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(ParseError):
            load_decoder(path)

    def test_bad_version(self, tmp_path, unit_decoder):
        path = tmp_path / "ver.txdc"
        save_decoder(unit_decoder, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(ParseError):
            load_decoder(path)
