import math
import warnings

import numpy as np
import pytest

from hldlab.data import (
    ByteTokenizer,
    MarkovSource,
    TokenDataset,
    VocabTokenizer,
    check_epochs,
    empirical_conditional_entropy,
    iterate_batches,
    markov_dataset,
    pack_document,
    sample_markov,
    tokenize_corpus,
)


class TestTokenizers:
    def test_byte_identity(self):
        assert ByteTokenizer().encode("ab") == [97, 98]

    @pytest.mark.parametrize("text", ["", "hello", "naïve café", "多语言"])
    def test_byte_round_trip(self, text):
        tok = ByteTokenizer()
        ids = tok.encode(text)
        assert all(i < tok.vocab_size for i in ids)
        assert tok.decode(ids) == text

    def test_vocab_round_trip(self, tmp_path):
        (tmp_path / "v.txt").write_text("the\ncat\nsat\n\n")
        tok = VocabTokenizer.from_file(tmp_path / "v.txt")
        assert tok.vocab_size == 4 and tok.pad_id == 3
        assert tok.encode("cat sat the") == [1, 2, 0]
        assert tok.decode([1, 2, 3]) == "cat sat"

    def test_vocab_unknown_symbol(self):
        with pytest.raises(KeyError):
            VocabTokenizer(["a", "b"]).encode("a c")

    def test_vocab_duplicates(self):
        with pytest.raises(ValueError):
            VocabTokenizer(["a", "a"])


class TestPacking:
    def test_short_document_padded(self):
        np.testing.assert_array_equal(pack_document([5, 6], 4, 9), [[5, 6, 9, 9]])

    def test_long_document_chunks_without_crossing(self):
        rows = pack_document(range(7), 3, -1)
        np.testing.assert_array_equal(rows, [[0, 1, 2], [3, 4, 5], [6, -1, -1]])

    def test_documents_never_share_a_row(self):
        ds = tokenize_corpus(["ab", "cde"], ByteTokenizer(), 4)
        np.testing.assert_array_equal(ds.train, [[97, 98, 256, 256], [99, 100, 101, 256]])
        np.testing.assert_array_equal(ds.mask(ds.train)[0], [True, True, False, False])

    def test_deterministic(self):
        a = tokenize_corpus(["same text"] * 2, ByteTokenizer(), 8)
        np.testing.assert_array_equal(a.train[:2], a.train[2:])
        b = tokenize_corpus(["same text"] * 2, ByteTokenizer(), 8)
        assert a.digest == b.digest

    def test_context_too_short(self):
        with pytest.raises(ValueError):
            tokenize_corpus(["x"], ByteTokenizer(), 1)

    def test_val_split_disjoint_by_document(self):
        texts = [f"document number {i:03d}" for i in range(100)]
        ds = tokenize_corpus(texts, ByteTokenizer(), 32, val_fraction=0.1, seed=3)
        val_docs = set(ds.meta["val_docs"])
        assert len(val_docs) == 10
        tok = ByteTokenizer()
        decoded_val = {tok.decode(r) for r in ds.val}
        decoded_train = {tok.decode(r) for r in ds.train}
        assert decoded_val == {texts[i] for i in val_docs}
        assert decoded_val.isdisjoint(decoded_train)
        assert len(decoded_train) == 90


class TestDatasetFile:
    def test_round_trip(self, tmp_path, rng):
        ds = TokenDataset(50, 6, rng.integers(0, 50, (7, 6)), rng.integers(0, 50, (2, 6)), 49, {"k": 1})
        ds.save(tmp_path / "d.tokens")
        back = TokenDataset.load(tmp_path / "d.tokens")
        assert back.digest == ds.digest
        np.testing.assert_array_equal(back.train, ds.train)
        np.testing.assert_array_equal(back.val, ds.val)
        assert back.pad_id == 49 and back.meta == {"k": 1}

    def test_payload_is_u32_le(self, tmp_path):
        ds = TokenDataset(300, 2, [[1, 258]], np.zeros((0, 2)))
        ds.save(tmp_path / "d.tokens")
        raw = (tmp_path / "d.tokens").read_bytes()
        assert raw[-8:] == (1).to_bytes(4, "little") + (258).to_bytes(4, "little")

    def test_corrupt_digest(self, tmp_path):
        ds = TokenDataset(10, 2, [[1, 2]], [[3, 4]])
        ds.save(tmp_path / "d.tokens")
        raw = bytearray((tmp_path / "d.tokens").read_bytes())
        raw[-1] ^= 1
        (tmp_path / "d.tokens").write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="digest"):
            TokenDataset.load(tmp_path / "d.tokens")

    def test_unknown_split(self):
        with pytest.raises(ValueError):
            TokenDataset(4, 2, [[0, 1]], [[1, 2]]).split("test")


class TestBatches:
    def test_each_epoch_visits_every_sequence_once(self):
        it = iterate_batches(10, 5, seed=0)
        for _ in range(3):
            epoch = np.concatenate([next(it), next(it)])
            assert sorted(epoch.tolist()) == list(range(10))

    def test_straddling_batches_still_cover(self):
        it = iterate_batches(7, 3, seed=1)
        ids = np.concatenate([next(it) for _ in range(7)])
        for e in range(3):
            assert sorted(ids[7 * e : 7 * (e + 1)].tolist()) == list(range(7))

    def test_seeded(self):
        a, b = iterate_batches(20, 4, 5), iterate_batches(20, 4, 5)
        assert all(np.array_equal(next(a), next(b)) for _ in range(10))

    def test_empty(self):
        with pytest.raises(ValueError):
            next(iterate_batches(0, 4, 0))

    def test_epoch_warning(self):
        with pytest.warns(UserWarning, match="passes"):
            assert check_epochs(10, 4, 10) == 4.0
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            check_epochs(10, 4, 7)


class TestMarkov:
    def test_cycle_zero_entropy_and_periodic(self):
        src = MarkovSource.cycle(5)
        assert src.entropy_rate == 0.0
        seq = sample_markov(src, 40, seed=3)
        np.testing.assert_array_equal(np.diff(seq) % 5, 1)

    def test_uniform_entropy(self):
        src = MarkovSource.uniform(4)
        assert src.entropy_rate == pytest.approx(math.log(4), abs=1e-12)
        seq = sample_markov(src, 100_000, seed=0)
        assert abs(empirical_conditional_entropy(seq, 4) / math.log(4) - 1) < 0.02

    def test_reproducible(self):
        src = MarkovSource.uniform(6)
        assert np.array_equal(sample_markov(src, 500, 9), sample_markov(src, 500, 9))

    def test_entropy_matches_direct_formula(self, rng):
        P = rng.dirichlet(np.ones(5), size=5)
        src = MarkovSource(P)
        evals, evecs = np.linalg.eig(P.T)
        pi = np.real(evecs[:, np.argmin(np.abs(evals - 1))])
        pi /= pi.sum()
        expected = -sum(pi[s] * sum(P[s, t] * math.log(P[s, t]) for t in range(5)) for s in range(5))
        assert src.entropy_rate == pytest.approx(expected, rel=1e-10)

    @pytest.mark.parametrize("entropy", [0.3, 0.9, 2.0])
    def test_with_entropy(self, entropy):
        src = MarkovSource.with_entropy(16, entropy, seed=2)
        np.testing.assert_allclose(src.transition.sum(axis=1), 1.0, atol=1e-12)
        assert src.entropy_rate == pytest.approx(entropy, abs=1e-9)

    def test_unigram_converges_to_stationary(self):
        src = MarkovSource.with_entropy(6, 1.0, seed=4)
        seq = sample_markov(src, 200_000, seed=1)
        freq = np.bincount(seq, minlength=6) / seq.size
        np.testing.assert_allclose(freq, src.stationary, atol=0.01)

    def test_rejects_bad_rows(self):
        with pytest.raises(ValueError):
            MarkovSource([[0.5, 0.4], [0.5, 0.5]])
        with pytest.raises(ValueError):
            MarkovSource.with_entropy(4, 2.0)

    def test_dataset_splits_are_independent_chains(self):
        ds = markov_dataset(MarkovSource.uniform(8), 10, 4, 16, seed=0)
        assert ds.train.shape == (10, 16) and ds.val.shape == (4, 16)
        assert ds.pad_id is None and ds.mask(ds.train) is None
        assert ds.meta["entropy_rate"] == pytest.approx(math.log(8))
        assert not np.array_equal(ds.train[:4], ds.val)
