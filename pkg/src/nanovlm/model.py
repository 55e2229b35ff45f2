"""The four transformer sub-networks and their heads, as pure functions.

All forwards take a ModelParams registry (dict of named Tensors) plus plain
numpy id/mask arrays and return Tensors, so the same code path serves
training (with graph) and inference (inside no_grad()). Pre-LN residual
blocks throughout; the token embedding table is shared by the text encoder,
fusion encoder, and decoder, and the LM head is weight-tied to it.

Ablation switches on ModelConfig replace individual attention blocks with an
identity on the residual branch (the block's contribution becomes zero).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .tokenizer import CLS_ID, DECODE_ID, ENCODE_ID, MODE_CLS, MODE_ENCODE, Vocab


class ModelError(Exception):
    pass


class FrameError(ModelError):
    """Input sequence is framed for a different role."""


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    heads: int = 4
    head_dim: int = 16
    layers: int = 4
    ff_mult: int = 4
    max_text_len: int = 64
    max_answer_len: int = 96
    itc_proj_dim: int = 32
    tau_init: float = 0.07
    tau_min: float = 0.01
    tau_max: float = 0.5
    num_patches: int = 49
    patch_dim: int = 3072
    share_fusion_text_layers: bool = False
    ablate_sa: bool = False
    ablate_ca: bool = False
    ablate_csa: bool = False

    def __post_init__(self):
        if self.heads * self.head_dim != self.embed_dim:
            raise ModelError(
                f"heads*head_dim must equal embed_dim: {self.heads}*{self.head_dim} != {self.embed_dim}")
        for name in ("embed_dim", "heads", "head_dim", "layers", "ff_mult", "max_text_len",
                     "max_answer_len", "itc_proj_dim", "num_patches", "patch_dim", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")
        if not (1 <= self.layers <= 8):
            raise ModelError("layers must be in 1..8")

    @property
    def decoder_ctx_len(self) -> int:
        # question prefix + <decode> + answer
        return self.max_text_len + 1 + self.max_answer_len

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def micro_config(vocab_size: int = 16) -> ModelConfig:
    """1-layer, 8-d configuration small enough for exhaustive gradient checks."""
    return ModelConfig(vocab_size=vocab_size, embed_dim=8, heads=2, head_dim=4,
                       layers=1, ff_mult=2, max_text_len=8, max_answer_len=8,
                       itc_proj_dim=4, num_patches=4, patch_dim=6)


# ---------------------------------------------------------------------------
# parameter registry


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    out = rng.standard_normal(shape)
    for _ in range(8):
        bad = np.abs(out) > 2.0
        if not bad.any():
            break
        out[bad] = rng.standard_normal(int(bad.sum()))
    return (np.clip(out, -2.0, 2.0) * std).astype(dtype)


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Truncated-normal (std 0.02) weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def w(name, shape):
        params[name] = Tensor(_trunc_normal(rng, shape, 0.02, dtype), requires_grad=True)

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    d = cfg.embed_dim
    ffd = cfg.ff_mult * d

    def attn_block(prefix):
        for part in ("q", "k", "v", "o"):
            w(f"{prefix}.{part}.w", (d, d))
            zeros(f"{prefix}.{part}.b", (d,))

    def ff_block(prefix):
        w(f"{prefix}.w1", (d, ffd))
        zeros(f"{prefix}.b1", (ffd,))
        w(f"{prefix}.w2", (ffd, d))
        zeros(f"{prefix}.b2", (d,))

    def ln(prefix):
        ones(f"{prefix}.g", (d,))
        zeros(f"{prefix}.b", (d,))

    w("tok.emb", (cfg.vocab_size, d))
    zeros("lm.bias", (cfg.vocab_size,))

    # image encoder
    w("img.patch_proj.w", (cfg.patch_dim, d))
    zeros("img.patch_proj.b", (d,))
    w("img.cls", (1, d))
    w("img.pos", (cfg.num_patches + 1, d))
    for i in range(cfg.layers):
        ln(f"img.l{i}.ln_sa")
        attn_block(f"img.l{i}.sa")
        ln(f"img.l{i}.ln_ff")
        ff_block(f"img.l{i}.ff")
    ln("img.ln_out")

    # text encoder
    w("txt.pos", (cfg.max_text_len, d))
    for i in range(cfg.layers):
        ln(f"txt.l{i}.ln_sa")
        attn_block(f"txt.l{i}.sa")
        ln(f"txt.l{i}.ln_ff")
        ff_block(f"txt.l{i}.ff")
    ln("txt.ln_out")

    # image-grounded text encoder (fusion); self-attn/FF can be borrowed from
    # the text encoder when share_fusion_text_layers is set
    w("fus.pos", (cfg.max_text_len, d))
    for i in range(cfg.layers):
        if not cfg.share_fusion_text_layers:
            ln(f"fus.l{i}.ln_sa")
            attn_block(f"fus.l{i}.sa")
        ln(f"fus.l{i}.ln_ca")
        attn_block(f"fus.l{i}.ca")
        if not cfg.share_fusion_text_layers:
            ln(f"fus.l{i}.ln_ff")
            ff_block(f"fus.l{i}.ff")
    ln("fus.ln_out")
    w("fus.itm.w", (d, 1))
    zeros("fus.itm.b", (1,))

    # image-grounded text decoder
    w("dec.pos", (cfg.decoder_ctx_len, d))
    for i in range(cfg.layers):
        ln(f"dec.l{i}.ln_csa")
        attn_block(f"dec.l{i}.csa")
        ln(f"dec.l{i}.ln_ca")
        attn_block(f"dec.l{i}.ca")
        ln(f"dec.l{i}.ln_ff")
        ff_block(f"dec.l{i}.ff")
    ln("dec.ln_out")

    # contrastive projection heads and temperature
    w("itc.img.w", (d, cfg.itc_proj_dim))
    w("itc.txt.w", (d, cfg.itc_proj_dim))
    params["itc.tau"] = Tensor(np.asarray(cfg.tau_init, dtype=dtype), requires_grad=True)

    return params


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    out = {}
    for name, p in params.items():
        out[name] = Tensor(p.data.copy(), requires_grad=p.requires_grad)
    return out


# ---------------------------------------------------------------------------
# building blocks


def _linear(x: Tensor, params, prefix: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def _mha(params, prefix: str, cfg: ModelConfig, q_in: Tensor, kv_in: Tensor,
         bias: np.ndarray | None) -> Tensor:
    """Multi-head attention. bias is an additive (B or 1, 1, Sq, Sk) mask."""
    b, sq, d = q_in.shape
    sk = kv_in.shape[1]
    h, hd = cfg.heads, cfg.head_dim

    def split_heads(x: Tensor, s: int) -> Tensor:
        return T.transpose(T.reshape(x, (b, s, h, hd)), (0, 2, 1, 3))

    q = split_heads(_linear(q_in, params, f"{prefix}.q"), sq)
    k = split_heads(_linear(kv_in, params, f"{prefix}.k"), sk)
    v = split_heads(_linear(kv_in, params, f"{prefix}.v"), sk)
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    if bias is not None:
        scores = T.add(scores, bias.astype(q_in.dtype))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, sq, d))
    return _linear(ctx, params, f"{prefix}.o")


def _ff(params, prefix: str, x: Tensor) -> Tensor:
    hidden = T.gelu(T.add(T.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return T.add(T.matmul(hidden, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _ln(params, prefix: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def pad_bias(mask: np.ndarray) -> np.ndarray:
    """(B, S) 1/0 mask -> additive (B, 1, 1, S) key bias."""
    return (1.0 - mask.astype(np.float64))[:, None, None, :] * T.MASK_NEG


def causal_bias(s: int) -> np.ndarray:
    """Strict lower-triangular visibility as an additive (1, 1, S, S) bias."""
    return np.triu(np.full((s, s), T.MASK_NEG), k=1)[None, None]


# ---------------------------------------------------------------------------
# sub-network forwards


def encode_image(params, cfg: ModelConfig, patches) -> tuple[Tensor, Tensor]:
    """(B, num_patches, patch_dim) patches -> (cls (B, D), sequence (B, N+1, D))."""
    if not isinstance(patches, Tensor):
        patches = Tensor(np.asarray(patches))
    if patches.data.ndim == 2:
        patches = T.reshape(patches, (1,) + patches.shape)
    b, n, pd = patches.shape
    if n != cfg.num_patches or pd != cfg.patch_dim:
        raise ModelError(f"patch sequence {patches.shape} does not match config "
                         f"({cfg.num_patches}, {cfg.patch_dim})")
    x = _linear(patches, params, "img.patch_proj")
    cls = T.reshape(params["img.cls"], (1, 1, cfg.embed_dim))
    cls = T.add(cls, Tensor(np.zeros((b, 1, cfg.embed_dim), dtype=x.dtype)))
    x = T.concat([cls, x], axis=1)
    x = T.add(x, params["img.pos"])
    for i in range(cfg.layers):
        if not cfg.ablate_sa:
            normed = _ln(params, f"img.l{i}.ln_sa", x)
            x = T.add(x, _mha(params, f"img.l{i}.sa", cfg, normed, normed, None))
        x = T.add(x, _ff(params, f"img.l{i}.ff", _ln(params, f"img.l{i}.ln_ff", x)))
    x = _ln(params, "img.ln_out", x)
    return x[:, 0, :], x


def encode_text(params, cfg: ModelConfig, ids: np.ndarray, mask: np.ndarray,
                mode: str = MODE_CLS) -> tuple[Tensor, Tensor]:
    """cls-framed (B, S) ids -> (cls (B, D), sequence (B, S, D))."""
    if mode != MODE_CLS:
        raise FrameError(f"text encoder expects cls-framed input, got {mode!r}")
    if not (ids[:, 0] == CLS_ID).all():
        raise FrameError("cls-framed sequences must start with <cls>")
    b, s = ids.shape
    if s > cfg.max_text_len:
        raise ModelError(f"text length {s} exceeds max_text_len {cfg.max_text_len}")
    x = T.add(T.embedding(params["tok.emb"], ids), params["txt.pos"][:s, :])
    bias = pad_bias(mask)
    for i in range(cfg.layers):
        if not cfg.ablate_sa:
            normed = _ln(params, f"txt.l{i}.ln_sa", x)
            x = T.add(x, _mha(params, f"txt.l{i}.sa", cfg, normed, normed, bias))
        x = T.add(x, _ff(params, f"txt.l{i}.ff", _ln(params, f"txt.l{i}.ln_ff", x)))
    x = _ln(params, "txt.ln_out", x)
    return x[:, 0, :], x


def fuse(params, cfg: ModelConfig, ids: np.ndarray, mask: np.ndarray,
         image_seq: Tensor, mode: str = MODE_ENCODE) -> tuple[Tensor, Tensor]:
    """Encode-framed text + image sequence -> (multimodal (B, D), itm logit (B,)).

    The multimodal embedding is read at the <encode> slot (last real token);
    cross-attention queries are text, keys/values the image sequence.
    """
    if mode != MODE_ENCODE:
        raise FrameError(f"fusion encoder expects encode-framed input, got {mode!r}")
    b, s = ids.shape
    enc_pos = mask.sum(axis=1) - 1
    if not (ids[np.arange(b), enc_pos] == ENCODE_ID).all():
        raise FrameError("encode-framed sequences must end with <encode>")
    if image_seq.data.shape[0] != b:
        raise ModelError(f"{b} texts vs {image_seq.data.shape[0]} image sequences")
    sub = "txt" if cfg.share_fusion_text_layers else "fus"
    x = T.add(T.embedding(params["tok.emb"], ids), params["fus.pos"][:s, :])
    bias = pad_bias(mask)
    for i in range(cfg.layers):
        if not cfg.ablate_sa:
            normed = _ln(params, f"{sub}.l{i}.ln_sa", x)
            x = T.add(x, _mha(params, f"{sub}.l{i}.sa", cfg, normed, normed, bias))
        if not cfg.ablate_ca:
            x = T.add(x, _mha(params, f"fus.l{i}.ca", cfg,
                              _ln(params, f"fus.l{i}.ln_ca", x), image_seq, None))
        x = T.add(x, _ff(params, f"{sub}.l{i}.ff", _ln(params, f"{sub}.l{i}.ln_ff", x)))
    x = _ln(params, "fus.ln_out", x)
    mm = T.gather_rows(x, enc_pos)
    itm_logit = T.reshape(_linear(mm, params, "fus.itm"), (b,))
    return mm, itm_logit


def decoder_forward(params, cfg: ModelConfig, ids: np.ndarray, mask: np.ndarray,
                    image_seq: Tensor) -> Tensor:
    """Causal decoder over [question..., <decode>, answer...] -> (B, S, V) logits.

    Causal self-attention (strictly no look-ahead), cross-attention to the
    image sequence, LM head tied to the token embedding table.
    """
    b, s = ids.shape
    if not (ids == DECODE_ID).any(axis=1).all():
        raise FrameError("decoder input must contain a <decode> token in every row")
    if s > cfg.decoder_ctx_len:
        raise ModelError(f"decoder context {s} exceeds capacity {cfg.decoder_ctx_len}")
    if image_seq.data.shape[0] != b:
        raise ModelError(f"{b} texts vs {image_seq.data.shape[0]} image sequences")
    x = T.add(T.embedding(params["tok.emb"], ids), params["dec.pos"][:s, :])
    bias = causal_bias(s) + pad_bias(mask)
    for i in range(cfg.layers):
        if not cfg.ablate_csa:
            normed = _ln(params, f"dec.l{i}.ln_csa", x)
            x = T.add(x, _mha(params, f"dec.l{i}.csa", cfg, normed, normed, bias))
        if not cfg.ablate_ca:
            x = T.add(x, _mha(params, f"dec.l{i}.ca", cfg,
                              _ln(params, f"dec.l{i}.ln_ca", x), image_seq, None))
        x = T.add(x, _ff(params, f"dec.l{i}.ff", _ln(params, f"dec.l{i}.ln_ff", x)))
    x = _ln(params, "dec.ln_out", x)
    logits = T.matmul(x, T.transpose(params["tok.emb"]))
    return T.add(logits, params["lm.bias"])


def itc_project(params, image_cls: Tensor, text_cls: Tensor) -> tuple[Tensor, Tensor]:
    """Project both cls embeddings into the shared space and L2-normalize."""
    v = T.normalize_rows(T.matmul(image_cls, params["itc.img.w"]))
    t = T.normalize_rows(T.matmul(text_cls, params["itc.txt.w"]))
    return v, t


ITC_ONLY_PARAMS = ("itc.img.w", "itc.txt.w", "itc.tau")


def clamp_tau(params, cfg: ModelConfig) -> None:
    """Project the learnable temperature back into its allowed range."""
    np.clip(params["itc.tau"].data, cfg.tau_min, cfg.tau_max, out=params["itc.tau"].data)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(out_dir, params: dict[str, Tensor], cfg: ModelConfig,
                    seed: int, vocab: Vocab | None = None) -> None:
    """Directory with manifest.json + weights.bin (little-endian float32)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "seed": seed,
        "config": cfg.to_dict(),
        "params": [{"name": n, "shape": list(p.data.shape)} for n, p in params.items()],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    with open(out / "weights.bin", "wb") as fh:
        for p in params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    if vocab is not None:
        vocab.save(out / "vocab.txt")


def load_checkpoint(ckpt_dir) -> tuple[dict[str, Tensor], ModelConfig, int, Vocab | None]:
    ckpt = Path(ckpt_dir)
    manifest = json.loads((ckpt / "manifest.json").read_text(encoding="utf-8"))
    if manifest["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ModelError(f"unsupported checkpoint format {manifest['format_version']}")
    cfg = ModelConfig.from_dict(manifest["config"])
    raw = (ckpt / "weights.bin").read_bytes()
    params: dict[str, Tensor] = {}
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[entry["name"]] = Tensor(arr.astype(np.float32), requires_grad=True)
        offset += count * 4
    if offset != len(raw):
        raise ModelError("weights.bin size does not match manifest")
    vocab = Vocab.load(ckpt / "vocab.txt") if (ckpt / "vocab.txt").exists() else None
    return params, cfg, manifest["seed"], vocab
