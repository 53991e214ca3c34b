from __future__ import annotations

import numpy as np
import pytest

from lipidlm.chem import parse_smiles
from lipidlm.tokenizer import (CLS_ID, IGNORE_INDEX, MASK_ID, PAD_ID, SEP_ID, SPECIAL_TOKENS, UNK_ID,
                               EmptyCorpus, TooLong, Vocab, build_vocab, decode, encode_pair,
                               encode_single)


@pytest.fixture
def vocab():
    return build_vocab(["CCO", "C1CC1", "CC(=O)OC", "C[N+](C)C"])


class TestVocab:
    def test_specials(self):
        v = build_vocab(["CCO", "C1CC1"])
        assert v.id_to_token == list(SPECIAL_TOKENS) + ["1", "C", "O"]
        assert (PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID) == (0, 1, 2, 3, 4)

    def test_empty(self):
        with pytest.raises(EmptyCorpus):
            build_vocab([])

    def test_round_trip(self, vocab, tmp_path):
        vocab.save(tmp_path / "v.json")
        assert Vocab.load(tmp_path / "v.json") == vocab

    def test_corpus_size(self, small_corpus):
        _, records, _ = small_corpus
        assert 15 <= len(build_vocab(r.canonical_smiles for r in records)) <= 35


class TestSingle:
    def test_ethanol(self, vocab):
        enc = encode_single("CCO", vocab, L=8)
        c, o = vocab.token_to_id["C"], vocab.token_to_id["O"]
        assert enc.ids.tolist() == [CLS_ID, c, c, o, SEP_ID, PAD_ID, PAD_ID, PAD_ID]
        assert enc.attention_mask.tolist() == [1, 1, 1, 1, 1, 0, 0, 0]
        assert not enc.segment_ids.any()
        assert enc.atom_alignment.tolist() == [-1, 0, 1, 2, -1, -1, -1, -1]

    def test_too_long(self, vocab):
        with pytest.raises(TooLong):
            encode_single("C" * 127, vocab, L=128)
        assert encode_single("C" * 126, vocab, L=128).length == 128

    def test_head_tail_labels(self, vocab):
        enc = encode_single("CCO", vocab, L=8, atom_labels={"headtail": [0, 0, 1]})
        I = IGNORE_INDEX
        assert enc.labels["headtail"].tolist() == [I, 0, 0, 1, I, I, I, I]

    def test_other_class(self, vocab):
        enc = encode_single("C(O)C", vocab, L=8, atom_labels={"headtail": [0, 1, 1]},
                            other_labels={"headtail": 2})
        I = IGNORE_INDEX
        assert enc.labels["headtail"].tolist() == [I, 0, 2, 1, 2, 1, I, I]

    def test_bracket_alignment(self, vocab):
        enc = encode_single("C[N+](C)C", vocab, L=16)
        pos = np.flatnonzero(enc.atom_alignment >= 0)
        assert [ "C[N+](C)C"[p - 1] for p in pos] == ["C", "N", "C", "C"]

    def test_unknown(self, vocab):
        enc = encode_single("CS", vocab, L=8)
        assert enc.ids[2] == UNK_ID and enc.n_unknown == 1

    def test_corpus_round_trip(self, small_corpus):
        _, records, _ = small_corpus
        v = build_vocab(r.canonical_smiles for r in records)
        for r in records:
            enc = encode_single(r.canonical_smiles, v)
            assert decode(enc.ids, v) == r.canonical_smiles
            assert enc.n_unknown == 0
            aligned = enc.atom_alignment[enc.atom_alignment >= 0]
            assert aligned.tolist() == list(range(len(parse_smiles(r.canonical_smiles).atoms)))


class TestPair:
    def test_segments(self, vocab):
        enc = encode_pair("CCO", "OCC", vocab, L=12, label=True)
        assert enc.segment_ids.tolist() == [0] * 5 + [1] * 4 + [0] * 3
        assert enc.ids[4] == SEP_ID and enc.ids[8] == SEP_ID
        assert enc.labels["pair"] == 1
        assert enc.atom_alignment.tolist() == [-1, 0, 1, 2, -1, 0, 1, 2, -1, -1, -1, -1]

    def test_false_label(self, vocab):
        assert encode_pair("CCO", "COC", vocab, L=12, label=False).labels["pair"] == 0

    def test_too_long(self, vocab):
        with pytest.raises(TooLong):
            encode_pair("C" * 100, "C" * 154, vocab, L=256)
