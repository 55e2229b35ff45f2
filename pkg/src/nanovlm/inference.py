"""Autoregressive answer generation and prompt-scoring classification.

Generation conditions on the image through the decoder's cross-attention and
on the instruction by prefixing its tokens before <decode> with causal
visibility (the same layout the LM objective trains on). Greedy decoding is
fully deterministic; beam search with width 1 reduces to greedy exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .imaging import load_normalize, patchify
from .model import ModelConfig, decoder_forward, encode_image, fuse
from .tokenizer import (CLS_ID, DECODE_ID, ENCODE_ID, EOS_ID, MODE_ENCODE,
                        PAD_ID, Vocab, collate, decode_tokens,
                        encode_text as encode_tokens, tokenize_words)

# ids generation may never emit: padding, frame starts, fusion marker
_BANNED_IDS = (PAD_ID, CLS_ID, ENCODE_ID, DECODE_ID)

DEFAULT_PROBE_QUESTION = "identify the specific type of nanomaterial depicted in the image"


class InferenceError(Exception):
    pass


@dataclass
class GenerationConfig:
    mode: str = "greedy"          # "greedy" | "beam"
    beam_size: int = 1
    max_len: int = 96             # generated tokens, excluding the prompt
    length_penalty: float = 0.0   # beam only; 0 disables

    def __post_init__(self):
        if self.max_len < 1:
            raise InferenceError("max_len must be >= 1")
        if self.mode not in ("greedy", "beam"):
            raise InferenceError(f"unknown generation mode {self.mode!r}")
        if self.beam_size < 1:
            raise InferenceError("beam_size must be >= 1")


def _context_ids(instruction: str, vocab: Vocab, cfg: ModelConfig) -> list[int]:
    q_ids = [vocab.id_of(w) for w in tokenize_words(instruction)][: cfg.max_text_len - 1]
    return q_ids + [DECODE_ID]


def _step_logits(params, cfg, rows: list[list[int]], image_seq) -> np.ndarray:
    """Last-position logits for each candidate row, with banned ids removed."""
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = 1
    if image_seq.data.shape[0] != len(rows):
        image_seq = T.Tensor(np.repeat(image_seq.data, len(rows), axis=0))
    logits = decoder_forward(params, cfg, ids, mask, image_seq)
    last = logits.data[np.arange(len(rows)), [len(r) - 1 for r in rows]].copy()
    last[:, list(_BANNED_IDS)] = -np.inf
    return last


def _log_softmax(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    return shifted - np.log(np.exp(shifted).sum())


def generate(params, cfg: ModelConfig, vocab: Vocab, patches: np.ndarray,
             instruction: str, gcfg: GenerationConfig | None = None) -> str:
    """Generate an answer for (image patches, instruction); returns plain text."""
    gcfg = gcfg or GenerationConfig()
    with T.no_grad():
        _, image_seq = encode_image(params, cfg, patches[None] if patches.ndim == 2 else patches)
        ctx = _context_ids(instruction, vocab, cfg)
        budget = min(gcfg.max_len, cfg.decoder_ctx_len - len(ctx))
        if gcfg.mode == "greedy" and gcfg.beam_size == 1:
            out = _greedy(params, cfg, ctx, image_seq, budget)
        else:
            out = _beam(params, cfg, ctx, image_seq, budget,
                        gcfg.beam_size, gcfg.length_penalty)
    return decode_tokens(out, vocab)


def _greedy(params, cfg, ctx: list[int], image_seq, budget: int) -> list[int]:
    generated: list[int] = []
    row = list(ctx)
    for _ in range(budget):
        logits = _step_logits(params, cfg, [row], image_seq)[0]
        nxt = int(np.argmax(logits))
        if nxt == EOS_ID:
            break
        generated.append(nxt)
        row.append(nxt)
    return generated


def _beam(params, cfg, ctx: list[int], image_seq, budget: int,
          k: int, length_penalty: float) -> list[int]:
    def score(logprob: float, length: int) -> float:
        if length_penalty <= 0 or length == 0:
            return logprob
        return logprob / (length ** length_penalty)

    live = [(list(ctx), 0.0)]   # (row, summed logprob)
    done: list[tuple[list[int], float, int]] = []
    for _ in range(budget):
        if not live:
            break
        batch_logits = _step_logits(params, cfg, [row for row, _ in live], image_seq)
        candidates = []
        for (row, logprob), logits in zip(live, batch_logits):
            logp = _log_softmax(logits)
            top = np.argsort(-logp, kind="stable")[: k]
            for token in top:
                candidates.append((row, logprob + float(logp[token]), int(token)))
        candidates.sort(key=lambda c: -score(c[1], len(c[0]) - len(ctx) + 1))
        live = []
        for row, logprob, token in candidates:
            if token == EOS_ID:
                done.append((row, logprob, len(row) - len(ctx)))
            else:
                live.append((row + [token], logprob))
            if len(live) >= k:
                break
    for row, logprob in live:
        done.append((row, logprob, len(row) - len(ctx)))
    best = max(done, key=lambda d: score(d[1], max(d[2], 1)))
    return best[0][len(ctx):]


def answer_vqa(params, cfg: ModelConfig, vocab: Vocab, record, images_root=".",
               gcfg: GenerationConfig | None = None) -> str:
    """Full pipeline for one instruction record: load -> patchify -> generate."""
    path = Path(images_root) / record.image
    data = path.read_bytes()
    patches = patchify(load_normalize(data)).astype(np.float32)
    return generate(params, cfg, vocab, patches, record.instruction, gcfg)


# ---------------------------------------------------------------------------
# zero-shot classification by prompt scoring


@dataclass
class ClassScore:
    category: str
    score: float
    rank: int


def probe_text(category: str) -> str:
    return f"this image depicts a {category.replace('_', ' ')} nanomaterial"


def classify_zero_shot(params, cfg: ModelConfig, vocab: Vocab, patches: np.ndarray,
                       categories: list[str], method: str = "itm",
                       instruction: str = DEFAULT_PROBE_QUESTION) -> list[ClassScore]:
    """Rank candidate categories for an image by probe-text score.

    method "itm" (default) scores the fused match probability of
    "this image depicts a <category> nanomaterial"; method "lm" scores the
    mean decoder log-likelihood of the same probe as an answer to
    `instruction`. Both are deterministic; ties break lexicographically.
    """
    if len(categories) < 2:
        raise InferenceError("need at least two candidate categories")
    if method not in ("itm", "lm"):
        raise InferenceError(f"unknown scoring method {method!r}")
    with T.no_grad():
        _, image_seq = encode_image(params, cfg, patches[None] if patches.ndim == 2 else patches)
        if method == "itm":
            scores = _itm_scores(params, cfg, vocab, image_seq, categories)
        else:
            scores = _lm_scores(params, cfg, vocab, image_seq, categories, instruction)
    order = sorted(range(len(categories)), key=lambda i: (-scores[i], categories[i]))
    return [ClassScore(category=categories[i], score=float(scores[i]), rank=rank)
            for rank, i in enumerate(order)]


def _itm_scores(params, cfg, vocab, image_seq, categories) -> np.ndarray:
    seqs = [encode_tokens(probe_text(c), vocab, MODE_ENCODE, cfg.max_text_len)
            for c in categories]
    ids, mask = collate(seqs)
    tiled = T.Tensor(np.repeat(image_seq.data, len(categories), axis=0))
    _, logits = fuse(params, cfg, ids, mask, tiled)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-logits.data))


def _lm_scores(params, cfg, vocab, image_seq, categories, instruction) -> np.ndarray:
    prefix = _context_ids(instruction, vocab, cfg)
    rows, targets, weights = [], [], []
    for c in categories:
        a_ids = [vocab.id_of(w) for w in tokenize_words(probe_text(c))][: cfg.max_answer_len - 1]
        full = prefix + a_ids
        rows.append(full)
        targets.append(full[1:] + [EOS_ID])
        weights.append([0] * (len(prefix) - 1) + [1] * (len(a_ids) + 1))
    width = max(len(r) for r in rows)
    n = len(rows)
    ids = np.full((n, width), PAD_ID, dtype=np.int64)
    mask = np.zeros((n, width), dtype=np.int64)
    tgt = np.full((n, width), PAD_ID, dtype=np.int64)
    wgt = np.zeros((n, width), dtype=np.float64)
    for i in range(n):
        ids[i, : len(rows[i])] = rows[i]
        mask[i, : len(rows[i])] = 1
        tgt[i, : len(rows[i])] = targets[i]
        wgt[i, : len(rows[i])] = weights[i]
    tiled = T.Tensor(np.repeat(image_seq.data, n, axis=0))
    logits = decoder_forward(params, cfg, ids, mask, tiled).data
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    token_lp = np.take_along_axis(logp, tgt[:, :, None], axis=-1)[:, :, 0]
    return (token_lp * wgt).sum(axis=1) / wgt.sum(axis=1)
