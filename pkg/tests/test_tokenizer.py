"""Tests for byte-level BPE."""
import os
import random
import string

import pytest

from app.errors import ConfigError, VocabError
from app.services.tokenizer import (
    N_BYTES,
    SPECIALS,
    Vocab,
    decode,
    decode_bytes,
    encode,
    encode_bytes,
    load_vocab,
    save_vocab,
    train_bpe,
    vocab_hash,
)

BASE = N_BYTES + len(SPECIALS)
DIGITS = "zero one two three four five six seven eight nine".split()


@pytest.fixture
def digit_vocab():
    rng = random.Random(0)
    corpus = [" ".join(rng.choice(DIGITS) for _ in range(rng.randint(1, 5))) for _ in range(60)]
    return train_bpe(corpus, BASE + 40)


class TestTrainBpe:
    def test_first_merge(self):
        assert train_bpe(["aaaa"], BASE + 1).merges == ((97, 97),)

    def test_no_merges_at_minimum_size(self):
        vocab = train_bpe(["hello hello"], BASE)
        assert vocab.merges == ()
        assert vocab.size == BASE

    def test_stops_when_no_pair_repeats(self):
        # "ab" merges; the resulting (ab, ab) pair occurs once
        assert train_bpe(["abab"], BASE + 2).merges == ((97, 98),)

    def test_tie_breaks_on_lowest_ids(self):
        # "ba" and "ab" both occur twice; the pair with the lower first id wins
        assert train_bpe(["ab", "ab", "ba", "ba"], BASE + 1).merges == ((97, 98),)

    def test_pairs_do_not_span_strings(self):
        assert train_bpe(["a", "a", "a"], BASE + 1).merges == ()

    def test_empty_corpus(self):
        with pytest.raises(ConfigError):
            train_bpe([], BASE + 10)

    def test_target_below_minimum(self):
        with pytest.raises(ConfigError):
            train_bpe(["abc"], BASE - 1)

    def test_special_ids(self, digit_vocab):
        m = digit_vocab.n_merges
        assert (digit_vocab.pad_id, digit_vocab.sot_id, digit_vocab.eot_id, digit_vocab.task_id) == \
            (256 + m, 257 + m, 258 + m, 259 + m)
        assert digit_vocab.size == 260 + m


class TestEncodeDecode:
    def test_empty_wrapped(self, digit_vocab):
        v = digit_vocab
        assert encode("", v, wrap=True) == [v.sot_id, v.task_id, v.eot_id]

    def test_single_byte(self):
        assert encode("a", Vocab()) == [97]

    def test_decode_drops_specials(self):
        v = Vocab()
        assert decode([v.sot_id, 104, 105, v.eot_id], v) == "hi"
        assert decode([], v) == ""

    def test_merges_shorten_encoding(self, digit_vocab):
        text = "seven eight nine"
        assert len(encode(text, digit_vocab)) < len(text.encode("utf-8"))

    def test_merges_apply_in_training_order(self):
        vocab = train_bpe(["abcabcabc", "bcbc"], BASE + 3)
        assert vocab.merges == ((98, 99), (97, 256), (257, 257))
        assert encode("abc", vocab) == [257]
        assert encode("abcabc", vocab) == [258]
        assert encode("bca", vocab) == [256, 97]
        assert vocab.piece(258) == b"abcabc"

    def test_deterministic(self, digit_vocab):
        assert encode("three four", digit_vocab) == encode("three four", digit_vocab)

    def test_no_specials_without_wrap(self, digit_vocab):
        rng = random.Random(1)
        for _ in range(200):
            text = "".join(rng.choice(string.printable) for _ in range(rng.randint(0, 30)))
            assert not any(digit_vocab.is_special(i) for i in encode(text, digit_vocab))

    def test_round_trip_printable(self, digit_vocab):
        rng = random.Random(2)
        for _ in range(1000):
            text = "".join(rng.choice(string.printable) for _ in range(rng.randint(0, 40)))
            assert decode(encode(text, digit_vocab), digit_vocab) == text

    def test_round_trip_random_bytes(self, digit_vocab):
        rng = random.Random(3)
        for _ in range(1000):
            data = bytes(rng.randrange(256) for _ in range(rng.randint(0, 40)))
            assert decode_bytes(encode_bytes(data, digit_vocab), digit_vocab) == data

    def test_round_trip_unicode(self, digit_vocab):
        text = "naïve café 数字 ✓"
        assert decode(encode(text, digit_vocab, wrap=True), digit_vocab) == text

    def test_invalid_id(self, digit_vocab):
        with pytest.raises(VocabError):
            decode([digit_vocab.size], digit_vocab)
        with pytest.raises(VocabError):
            decode([-1], digit_vocab)


class TestVocabFile:
    def test_save_and_load(self, digit_vocab, temp_folder):
        path = os.path.join(temp_folder, "vocab.txt")
        save_vocab(digit_vocab, path)
        loaded = load_vocab(path)
        assert loaded == digit_vocab
        assert vocab_hash(loaded) == vocab_hash(digit_vocab)

    def test_header(self, digit_vocab, temp_folder):
        path = os.path.join(temp_folder, "vocab.txt")
        save_vocab(digit_vocab, path)
        with open(path, encoding="utf-8") as f:
            header = f.readline().strip()
        assert header == f"samba-bpe v1 merges={digit_vocab.n_merges} specials=4"

    def test_hash_differs_between_vocabs(self, digit_vocab):
        assert vocab_hash(digit_vocab) != vocab_hash(Vocab())

    def test_bad_header(self, temp_folder):
        path = os.path.join(temp_folder, "vocab.txt")
        with open(path, "w") as f:
            f.write("merges 2\n97 98\n")
        with pytest.raises(VocabError):
            load_vocab(path)

    def test_merge_count_mismatch(self, temp_folder):
        path = os.path.join(temp_folder, "vocab.txt")
        with open(path, "w") as f:
            f.write("samba-bpe v1 merges=2 specials=4\n97 98\n")
        with pytest.raises(VocabError):
            load_vocab(path)

    def test_merge_refers_to_unknown_id(self, temp_folder):
        path = os.path.join(temp_folder, "vocab.txt")
        with open(path, "w") as f:
            f.write("samba-bpe v1 merges=1 specials=4\n97 300\n")
        with pytest.raises(VocabError):
            load_vocab(path)

    def test_missing_file(self, temp_folder):
        with pytest.raises(VocabError):
            load_vocab(os.path.join(temp_folder, "absent.txt"))
