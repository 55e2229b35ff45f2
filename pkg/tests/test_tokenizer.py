import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nanovlm.tokenizer import (CLS_ID, DECODE_ID, ENCODE_ID, EOS_ID, PAD_ID,
                               RESERVED_TOKENS, UNK_ID, MODE_CLS, MODE_DECODE,
                               MODE_ENCODE, TokenizerError, build_vocab,
                               collate, decode_tokens, encode_text,
                               tokenize_words)


def test_reserved_ids_pinned():
    assert (PAD_ID, CLS_ID, ENCODE_ID, DECODE_ID, EOS_ID, UNK_ID) == (0, 1, 2, 3, 4, 5)
    vocab = build_vocab(["a b c"])
    for i, tok in enumerate(RESERVED_TOKENS):
        assert vocab.token_of(i) == tok


def test_tokenize_lowercases_and_drops_punctuation():
    assert tokenize_words("The cat, the DOG!") == ["the", "cat", "the", "dog"]


def test_tokenize_keeps_hyphenated_compounds():
    assert tokenize_words("plate-like shapes") == ["plate-like", "shapes"]
    assert tokenize_words("needle- or rod-like") == ["needle", "or", "rod-like"]


class TestBuildVocab:
    def test_min_freq_threshold(self):
        vocab = build_vocab(["a a b"], min_freq=2)
        assert "a" in vocab.token_to_id
        assert "b" not in vocab.token_to_id

    def test_deterministic(self):
        corpus = ["the quick brown fox", "the lazy dog", "quick quick"]
        assert build_vocab(corpus).id_to_token == build_vocab(corpus).id_to_token

    def test_frequency_then_lexicographic_order(self):
        vocab = build_vocab(["b b a a c"])
        assert vocab.id_to_token[len(RESERVED_TOKENS):] == ["a", "b", "c"]

    def test_min_freq_zero_rejected(self):
        with pytest.raises(ValueError):
            build_vocab(["a"], min_freq=0)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            build_vocab([])

    def test_reserved_never_induced(self):
        vocab = build_vocab(["pad cls encode"])
        assert vocab.id_of("pad") >= len(RESERVED_TOKENS)


class TestEncodeText:
    def test_cls_framing(self):
        vocab = build_vocab(["a b"])
        seq = encode_text("a b", vocab, MODE_CLS)
        assert seq.ids == [CLS_ID, vocab.id_of("a"), vocab.id_of("b")]
        assert seq.mask == [1, 1, 1]

    def test_encode_framing_appends(self):
        vocab = build_vocab(["a b"])
        seq = encode_text("a b", vocab, MODE_ENCODE)
        assert seq.ids[-1] == ENCODE_ID

    def test_decode_framing_prepends(self):
        vocab = build_vocab(["a b"])
        seq = encode_text("a b", vocab, MODE_DECODE)
        assert seq.ids[0] == DECODE_ID

    def test_oov_maps_to_unk(self):
        vocab = build_vocab(["a b"])
        seq = encode_text("a z", vocab, MODE_CLS)
        assert UNK_ID in seq.ids

    def test_truncation_preserves_frame_token(self):
        vocab = build_vocab(["w"])
        long_text = " ".join(["w"] * 200)
        for mode, check in ((MODE_CLS, lambda ids: ids[0] == CLS_ID),
                            (MODE_ENCODE, lambda ids: ids[-1] == ENCODE_ID),
                            (MODE_DECODE, lambda ids: ids[0] == DECODE_ID)):
            seq = encode_text(long_text, vocab, mode, max_len=64)
            assert len(seq.ids) == 64
            assert check(seq.ids)

    def test_unknown_mode_rejected(self):
        vocab = build_vocab(["a"])
        with pytest.raises(TokenizerError):
            encode_text("a", vocab, "summarize")

    def test_mask_counts_real_tokens(self):
        vocab = build_vocab(["a b c"])
        seq = encode_text("a b c", vocab, MODE_CLS)
        assert sum(seq.mask) == len(seq.ids)


class TestDecodeTokens:
    def test_round_trip(self):
        vocab = build_vocab(["the cat sat"])
        seq = encode_text("the cat", vocab, MODE_CLS)
        assert decode_tokens(seq.ids, vocab) == "the cat"

    def test_strips_frame_and_eos(self):
        vocab = build_vocab(["a"])
        assert decode_tokens([DECODE_ID, vocab.id_of("a"), EOS_ID], vocab) == "a"

    def test_empty(self):
        vocab = build_vocab(["a"])
        assert decode_tokens([], vocab) == ""

    def test_out_of_range_id_rejected(self):
        vocab = build_vocab(["a"])
        with pytest.raises(TokenizerError):
            decode_tokens([len(vocab)], vocab)


WORDS = st.lists(st.sampled_from("alpha beta gamma delta eps".split()),
                 min_size=0, max_size=10)


@settings(max_examples=50, deadline=None)
@given(WORDS, st.sampled_from([MODE_CLS, MODE_ENCODE, MODE_DECODE]))
def test_round_trip_property(words, mode):
    text = " ".join(words)
    vocab = build_vocab(["alpha beta gamma delta eps"])
    seq = encode_text(text, vocab, mode)
    assert decode_tokens(seq.ids, vocab) == text


def test_vocab_save_load_round_trip(tmp_path):
    vocab = build_vocab(["the quick brown fox jumps"])
    vocab.save(tmp_path / "vocab.txt")
    from nanovlm.tokenizer import Vocab
    loaded = Vocab.load(tmp_path / "vocab.txt")
    assert loaded.id_to_token == vocab.id_to_token


def test_collate_pads_and_masks():
    vocab = build_vocab(["a b c d"])
    seqs = [encode_text("a", vocab, MODE_CLS), encode_text("a b c d", vocab, MODE_CLS)]
    ids, mask = collate(seqs)
    assert ids.shape == mask.shape == (2, 5)
    assert mask[0].sum() == 2 and mask[1].sum() == 5
    assert (ids[0, 2:] == PAD_ID).all()


def test_collate_rejects_mixed_modes():
    vocab = build_vocab(["a"])
    with pytest.raises(TokenizerError):
        collate([encode_text("a", vocab, MODE_CLS), encode_text("a", vocab, MODE_ENCODE)])
