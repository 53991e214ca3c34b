"""Character-level SMILES tokenizer with BERT-style special tokens."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .chem import atom_positions

log = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
N_SPECIAL = len(SPECIAL_TOKENS)
IGNORE_INDEX = -100

SINGLE_LEN = 128
PAIR_LEN = 256


class EmptyCorpus(ValueError):
    pass


class TooLong(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    token_to_id: dict[str, int]

    def __post_init__(self):
        for i, tok in enumerate(SPECIAL_TOKENS):
            if self.token_to_id.get(tok) != i:
                raise ValueError(f"special token {tok} must have id {i}")
        if sorted(self.token_to_id.values()) != list(range(len(self.token_to_id))):
            raise ValueError("vocabulary ids must be 0..n-1")

    def __len__(self) -> int:
        return len(self.token_to_id)

    @property
    def id_to_token(self) -> list[str]:
        out = [""] * len(self.token_to_id)
        for tok, i in self.token_to_id.items():
            out[i] = tok
        return out

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.token_to_id, fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))


def build_vocab(corpus: Iterable[str]) -> Vocab:
    """Specials followed by the sorted distinct characters of ``corpus``."""
    chars: set[str] = set()
    n = 0
    for s in corpus:
        chars.update(s)
        n += 1
    if n == 0:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    tokens = list(SPECIAL_TOKENS) + sorted(chars)
    return Vocab({tok: i for i, tok in enumerate(tokens)})


@dataclass
class EncodedInput:
    ids: np.ndarray
    attention_mask: np.ndarray
    segment_ids: np.ndarray
    atom_alignment: np.ndarray  # atom ordinal per position, -1 for non-atom positions
    labels: dict = field(default_factory=dict)
    n_unknown: int = 0

    @property
    def length(self) -> int:
        return int(self.attention_mask.sum())


def _char_ids(s: str, vocab: Vocab) -> tuple[list[int], int]:
    table = vocab.token_to_id
    ids = [table.get(ch, UNK_ID) for ch in s]
    unknown = ids.count(UNK_ID)
    if unknown:
        log.warning("%d unknown character(s) mapped to %s in %r", unknown, UNK, s)
    return ids, unknown


def _alignment(s: str, offset: int, out: np.ndarray) -> None:
    for ordinal, pos in enumerate(atom_positions(s)):
        out[offset + pos] = ordinal


def _token_labels(alignment: np.ndarray, content: np.ndarray, per_atom: Sequence[int],
                  other: int) -> np.ndarray:
    out = np.full(alignment.shape, IGNORE_INDEX, dtype=np.int64)
    out[content] = other
    atom_pos = alignment >= 0
    out[atom_pos] = np.asarray(per_atom, dtype=np.int64)[alignment[atom_pos]]
    return out


def encode_single(s: str, vocab: Vocab, L: int = SINGLE_LEN,
                  atom_labels: Mapping[str, Sequence[int]] | None = None,
                  other_labels: Mapping[str, int] | None = None) -> EncodedInput:
    """``[CLS] s [SEP] [PAD]...`` at fixed length ``L``; never truncates.

    ``atom_labels`` maps a task name to one integer per atom; the aligned
    token labels land in ``labels[name]``, with non-atom characters set to
    ``other_labels[name]`` (ignored by default) and specials ignored.
    """
    if len(s) > L - 2:
        raise TooLong(f"{len(s)} characters do not fit in {L} positions with 2 specials")
    chars, unknown = _char_ids(s, vocab)
    ids = np.full(L, PAD_ID, dtype=np.int64)
    n = len(chars) + 2
    ids[:n] = [CLS_ID, *chars, SEP_ID]
    mask = (np.arange(L) < n).astype(np.int64)
    segments = np.zeros(L, dtype=np.int64)
    alignment = np.full(L, -1, dtype=np.int64)
    _alignment(s, 1, alignment)
    enc = EncodedInput(ids, mask, segments, alignment, n_unknown=unknown)
    if atom_labels:
        content = np.zeros(L, dtype=bool)
        content[1:1 + len(s)] = True
        other_labels = other_labels or {}
        for name, per_atom in atom_labels.items():
            enc.labels[name] = _token_labels(alignment, content, per_atom,
                                             other_labels.get(name, IGNORE_INDEX))
    return enc


def encode_pair(a: str, b: str, vocab: Vocab, L: int = PAIR_LEN, label: bool | None = None,
                atom_labels: Mapping[str, Sequence[int]] | None = None,
                other_labels: Mapping[str, int] | None = None) -> EncodedInput:
    """``[CLS] a [SEP] b [SEP]`` with segment 0 over the first part and 1 over the second.

    Atom alignment covers both segments (ordinals restart in ``b``); token
    labels from ``atom_labels`` describe ``a`` only.
    """
    if len(a) + len(b) > L - 3:
        raise TooLong(f"{len(a) + len(b)} characters do not fit in {L} positions with 3 specials")
    ca, ua = _char_ids(a, vocab)
    cb, ub = _char_ids(b, vocab)
    ids = np.full(L, PAD_ID, dtype=np.int64)
    n_a = len(ca) + 2
    n = n_a + len(cb) + 1
    ids[:n] = [CLS_ID, *ca, SEP_ID, *cb, SEP_ID]
    mask = (np.arange(L) < n).astype(np.int64)
    segments = np.zeros(L, dtype=np.int64)
    segments[n_a:n] = 1
    alignment = np.full(L, -1, dtype=np.int64)
    _alignment(a, 1, alignment)
    _alignment(b, n_a, alignment)
    enc = EncodedInput(ids, mask, segments, alignment, n_unknown=ua + ub)
    if label is not None:
        enc.labels["pair"] = int(bool(label))
    if atom_labels:
        first = alignment.copy()
        first[n_a:] = -1
        content = np.zeros(L, dtype=bool)
        content[1:1 + len(a)] = True
        other_labels = other_labels or {}
        for name, per_atom in atom_labels.items():
            enc.labels[name] = _token_labels(first, content, per_atom,
                                             other_labels.get(name, IGNORE_INDEX))
    return enc


def decode(ids: Iterable[int], vocab: Vocab, strip_specials: bool = True) -> str:
    table = vocab.id_to_token
    out = []
    for i in ids:
        i = int(i)
        if strip_specials and i < N_SPECIAL:
            continue
        out.append(table[i])
    return "".join(out)
