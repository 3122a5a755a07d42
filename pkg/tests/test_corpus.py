from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedbreach.corpus import (MeasurementStats, UserShard, Vocabulary, build_vocab, estimate_measurement_stats,
                              make_shards, make_user_batches, mask_positions, random_token_batches, read_documents,
                              tokenize)
from fedbreach.malice import craft_front_end, measurement_vector
from fedbreach.numkernel import Rng
from fedbreach.special import NUM_RESERVED, PAD_ID, RESERVED_TOKENS, UNK_ID

from helpers import CORPUS_DIR


class TestVocabulary:
    def test_small_example(self):
        v = build_vocab("a b a")
        assert v.tokens == list(RESERVED_TOKENS) + ["a", "b"]
        assert all(v.index[t] < 16 for t in RESERVED_TOKENS)

    def test_round_trip_in_vocab(self):
        text = "The cat sat on the mat , and the dog sat too ."
        v = build_vocab(text)
        assert v.decode(v.encode(text)) == " ".join(tokenize(text))

    def test_out_of_vocab_is_unk(self):
        v = build_vocab("a b")
        np.testing.assert_array_equal(v.encode("a zebra b"), [v.index["a"], UNK_ID, v.index["b"]])

    def test_cap_keeps_most_frequent(self):
        rng = np.random.default_rng(0)
        words = [f"w{i}" for i in range(300)]
        probs = 1.0 / np.arange(1, 301)
        text = " ".join(rng.choice(words, size=10_000, p=probs / probs.sum()))
        v = build_vocab(text, 50)
        counts = Counter(text.split())
        oracle = sorted(counts, key=lambda w: (-counts[w], w))[:50]
        assert len(v) == 50 + NUM_RESERVED
        assert v.tokens[NUM_RESERVED:] == oracle

    @pytest.mark.parametrize("text", ["", "   \n\t", []])
    def test_empty_rejected(self, text):
        with pytest.raises(ValueError):
            build_vocab(text)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.text(alphabet="abcde ,.", min_size=1, max_size=30), min_size=1, max_size=6), st.randoms())
    def test_order_independent(self, docs, rnd):
        if not any(tokenize(d) for d in docs):
            return
        shuffled = list(docs)
        rnd.shuffle(shuffled)
        assert build_vocab(docs).tokens == build_vocab(shuffled).tokens

    def test_tokenize_deterministic(self):
        s = "Hello, world! It's 2024."
        assert tokenize(s) == tokenize(s) == ["hello", ",", "world", "!", "it", "'", "s", "2024", "."]

    def test_save_load(self, tmp_path):
        v = build_vocab("x y z y")
        v.save(tmp_path / "vocab.txt")
        lines = (tmp_path / "vocab.txt").read_text().splitlines()
        assert lines == v.tokens
        assert Vocabulary.load(tmp_path / "vocab.txt").tokens == v.tokens

    def test_bad_vocabularies(self):
        with pytest.raises(ValueError):
            Vocabulary(["a", "b"])
        with pytest.raises(ValueError):
            Vocabulary(list(RESERVED_TOKENS) + ["a", "a"])


def _shard(n, uid=0):
    return UserShard(uid, np.arange(n) % 50 + NUM_RESERVED, "test")


class TestUserBatches:
    def test_exact_fit(self):
        out = make_user_batches([_shard(64)], 2, 32)
        assert len(out) == 1 and out[0].shape == (2, 32)
        np.testing.assert_array_equal(out[0].ravel(), _shard(64).tokens)

    def test_short_user_skipped(self):
        with pytest.raises(ValueError):
            make_user_batches([_shard(63)], 2, 32)
        out = make_user_batches([_shard(63, 0), _shard(64, 1)], 2, 32)
        assert len(out) == 1

    def test_limit(self):
        shards = [_shard(40, i) for i in range(5)]
        assert len(make_user_batches(shards, 1, 32, user_limit=3)) == 3

    def test_bad_sizes(self):
        with pytest.raises(ValueError):
            make_user_batches([_shard(64)], 0, 32)

    def test_corpus_has_no_padding_and_reruns_identically(self):
        docs = read_documents(CORPUS_DIR)
        vocab = build_vocab([t for _, t in docs], 496)
        shards = make_shards(docs, vocab)
        a = make_user_batches(shards, 1, 32, 100)
        b = make_user_batches(shards, 1, 32, 100)
        assert len(a) == 100
        assert all(int((x == PAD_ID).sum()) == 0 for x in a)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


class TestRandomBatches:
    def test_reproducible(self):
        a = random_token_batches(100, 3, 2, 8, Rng(1))
        b = random_token_batches(100, 3, 2, 8, Rng(1))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_no_reserved_ids(self):
        ids = np.concatenate([b.ravel() for b in random_token_batches(20, 50, 4, 16, Rng(0))])
        assert ids.min() >= NUM_RESERVED and ids.max() < 20

    def test_uniform_histogram(self):
        V = 100
        ids = np.concatenate([b.ravel() for b in random_token_batches(V, 100, 4, 32, Rng(0))])
        K = V - NUM_RESERVED
        counts = np.bincount(ids - NUM_RESERVED, minlength=K)
        n = ids.size
        p = 1.0 / K
        # every cell within 3 sigma of its binomial marginal, with a Bonferroni allowance of 4 sigma
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) <= 4 * sigma)
        # the chi-square statistic within 3 sigma of its mean K - 1
        chi2 = ((counts - n * p) ** 2 / (n * p)).sum()
        assert abs(chi2 - (K - 1)) <= 3 * np.sqrt(2 * (K - 1))

    def test_count_checked(self):
        with pytest.raises(ValueError):
            random_token_batches(100, 0, 1, 4, Rng(0))


class TestDocuments:
    def test_blank_line_split(self, tmp_path):
        f = tmp_path / "notes.txt"
        f.write_text("first doc\nstill first\n\n  \nsecond doc\n\n\n", encoding="utf-8")
        docs = read_documents(f)
        assert [d[1].strip() for d in docs] == ["first doc\nstill first", "second doc"]

    def test_directory(self, tmp_path):
        (tmp_path / "b.txt").write_text("two", encoding="utf-8")
        (tmp_path / "a.txt").write_text("one", encoding="utf-8")
        assert [d[0] for d in read_documents(tmp_path)] == ["a", "b"]

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            read_documents(tmp_path)

    def test_mask_positions_cover_each_row(self):
        m = mask_positions((50, 6), 0.01, Rng(0))
        assert m.any(1).all()


class TestMeasurementStats:
    def test_std_must_be_positive(self):
        with pytest.raises(ValueError):
            MeasurementStats(0.0, 0.0, 100)

    def test_zero_vector_degenerate(self, desk):
        front = craft_front_end(desk.params, desk.malice)
        cal = random_token_batches(desk.config.vocab_size, 10, 1, 32, Rng(0))
        with pytest.raises(ValueError):
            estimate_measurement_stats(np.zeros(desk.config.d_model), front, cal)

    def test_doubling_m_doubles_stats(self, desk):
        front = craft_front_end(desk.params, desk.malice)
        m = measurement_vector(desk.malice, desk.config)
        cal = random_token_batches(desk.config.vocab_size, 10, 1, 32, Rng(0))
        s1 = estimate_measurement_stats(m, front, cal)
        s2 = estimate_measurement_stats(2 * m, front, cal)
        assert s2.mean == pytest.approx(2 * s1.mean, rel=1e-12)
        assert s2.std == pytest.approx(2 * s1.std, rel=1e-12)

    def test_too_few_samples(self, desk):
        front = craft_front_end(desk.params, desk.malice)
        m = measurement_vector(desk.malice, desk.config)
        with pytest.raises(ValueError):
            estimate_measurement_stats(m, front, random_token_batches(desk.config.vocab_size, 3, 1, 32, Rng(0)))

    def test_wrong_length(self, desk):
        with pytest.raises(ValueError):
            estimate_measurement_stats(np.ones(3), desk.params, [np.array([[5, 6]])])

    def test_random_and_corpus_agree(self, desk):
        front = craft_front_end(desk.params, desk.malice)
        m = measurement_vector(desk.malice, desk.config)
        rand = estimate_measurement_stats(m, front, random_token_batches(desk.config.vocab_size, 100, 1, 32, Rng(7)))
        text = estimate_measurement_stats(m, front, make_user_batches(desk.shards[::-1], 1, 32, 100))
        assert abs(rand.std - text.std) <= 0.2 * text.std
