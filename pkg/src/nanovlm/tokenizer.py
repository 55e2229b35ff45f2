"""Word-level tokenizer with the frame tokens used by the three text roles.

One tokenizer is shared by model input pipelines and text metrics so that a
word means the same thing everywhere. Words are lowercased runs of [a-z0-9]
with internal hyphens kept ("plate-like" is one token); all other punctuation
is dropped.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_ID = 0
CLS_ID = 1
ENCODE_ID = 2
DECODE_ID = 3
EOS_ID = 4
UNK_ID = 5

RESERVED_TOKENS = ["<pad>", "<cls>", "<encode>", "<decode>", "<eos>", "<unk>"]

MODE_CLS = "cls"
MODE_ENCODE = "encode"
MODE_DECODE = "decode"
MODES = (MODE_CLS, MODE_ENCODE, MODE_DECODE)

_WORD_RE = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*")


class TokenizerError(Exception):
    pass


def tokenize_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


@dataclass
class Vocab:
    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        if idx < 0 or idx >= len(self.id_to_token):
            raise TokenizerError(f"token id {idx} out of range for vocab of {len(self)}")
        return self.id_to_token[idx]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        if tokens[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise TokenizerError(f"vocab file {path} does not start with the reserved tokens")
        return cls(tokens)


def build_vocab(corpus, min_freq: int = 1) -> Vocab:
    """Induce a vocab from an iterable of texts.

    Word types with frequency >= min_freq get ids 6+ ordered by frequency
    descending, ties broken lexicographically; ids 0-5 stay reserved.
    """
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    counts: Counter[str] = Counter()
    n_texts = 0
    for text in corpus:
        n_texts += 1
        counts.update(tokenize_words(text))
    if n_texts == 0:
        raise ValueError("cannot build a vocab from an empty corpus")
    kept = sorted((tok for tok, c in counts.items() if c >= min_freq),
                  key=lambda tok: (-counts[tok], tok))
    return Vocab(RESERVED_TOKENS + kept)


@dataclass
class TokenSequence:
    ids: list[int]
    mask: list[int]
    mode: str

    def __post_init__(self):
        if len(self.ids) != len(self.mask):
            raise TokenizerError("ids and mask lengths differ")

    def __len__(self) -> int:
        return len(self.ids)


def encode_text(text: str, vocab: Vocab, mode: str, max_len: int = 64) -> TokenSequence:
    """Tokenize and frame a text for one of the three roles.

    cls mode prepends <cls>, encode mode appends <encode>, decode mode
    prepends <decode>. Truncation to max_len keeps the frame token.
    """
    if mode not in MODES:
        raise TokenizerError(f"unknown mode {mode!r}; expected one of {MODES}")
    word_ids = [vocab.id_of(w) for w in tokenize_words(text)][: max_len - 1]
    if mode == MODE_CLS:
        ids = [CLS_ID] + word_ids
    elif mode == MODE_ENCODE:
        ids = word_ids + [ENCODE_ID]
    else:
        ids = [DECODE_ID] + word_ids
    return TokenSequence(ids=ids, mask=[1] * len(ids), mode=mode)


def decode_tokens(ids, vocab: Vocab) -> str:
    """Ids back to text; frame, pad, and EOS tokens are stripped."""
    words = []
    for idx in ids:
        token = vocab.token_of(int(idx))
        if int(idx) in (PAD_ID, CLS_ID, ENCODE_ID, DECODE_ID, EOS_ID):
            continue
        words.append(token)
    return " ".join(words)


def collate(seqs: list[TokenSequence], pad_to: int | None = None):
    """Pad a batch of sequences to equal length.

    Returns (ids, mask) int64 arrays of shape (B, S). All sequences must share
    one mode.
    """
    if not seqs:
        raise TokenizerError("cannot collate an empty batch")
    modes = {s.mode for s in seqs}
    if len(modes) != 1:
        raise TokenizerError(f"mixed modes in batch: {sorted(modes)}")
    width = max(len(s) for s in seqs)
    if pad_to is not None:
        width = max(width, pad_to)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s.ids
        mask[i, : len(s)] = s.mask
    return ids, mask
