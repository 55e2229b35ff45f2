"""The three training objectives and their weighted combination.

Contrastive alignment (symmetric InfoNCE over the in-batch similarity
matrix), image-text matching (binary cross-entropy, computed from logits),
and autoregressive language modeling (masked next-token NLL, normalized per
predicted token so answers of different lengths contribute on one scale).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ObjectiveError(Exception):
    pass


def itc_loss(v: Tensor, t: Tensor, tau) -> Tensor:
    """Symmetric contrastive loss over N projected (image, text) pairs.

    v, t: (N, P) unit-norm rows; tau: positive temperature (float or scalar
    Tensor). Both directions share the full N x N similarity matrix; the
    result is the mean of the image-to-text and text-to-image terms.
    """
    if not isinstance(tau, Tensor):
        tau = Tensor(np.asarray(tau, dtype=v.dtype))
    if float(tau.data) <= 0.0:
        raise ObjectiveError(f"temperature must be positive, got {float(tau.data)}")
    n = v.shape[0]
    if n < 1 or t.shape[0] != n:
        raise ObjectiveError(f"need matched nonempty batches, got {v.shape} vs {t.shape}")
    sim = T.matmul(v, T.transpose(t))
    scaled = T.mul(sim, T.reciprocal(tau))
    diag = np.arange(n)
    loss_i2t = T.cross_entropy_rows(scaled, diag)
    loss_t2i = T.cross_entropy_rows(T.transpose(scaled), diag)
    return T.mul(T.add(loss_i2t, loss_t2i), 0.5)


def itm_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Binary cross-entropy over match logits.

    labels are 0/1 per pair. Working on logits keeps the loss finite even for
    saturated predictions: BCE(x, y) = softplus(x) - x*y.
    """
    labels = np.asarray(labels, dtype=logits.dtype)
    if logits.shape[0] == 0:
        raise ObjectiveError("itm_loss needs a nonempty batch")
    if labels.shape != logits.shape:
        raise ObjectiveError(f"labels shape {labels.shape} != logits shape {logits.shape}")
    per_pair = T.sub(T.softplus(logits), T.mul(logits, labels))
    return T.t_mean(per_pair)


def lm_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Masked next-token NLL, averaged over the masked positions.

    logits: (B, S, V); targets: (B, S) next-token ids; mask: (B, S) with 1 at
    positions whose prediction counts (answer tokens and <eos>; never pads or
    the positions that merely echo the prompt).
    """
    b, s, vocab = logits.shape
    mask = np.asarray(mask)
    if mask.sum() == 0:
        raise ObjectiveError("lm_loss mask selects no positions")
    flat = T.reshape(logits, (b * s, vocab))
    return T.cross_entropy_rows(flat, np.asarray(targets).reshape(-1),
                                mask.reshape(-1).astype(np.float64))


def joint_loss(itc: Tensor | None, itm: Tensor | None, lm: Tensor | None,
               weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> Tensor:
    """Weighted sum of the three objectives; zero-weight terms may be None."""
    if any(w < 0 for w in weights):
        raise ObjectiveError(f"loss weights must be nonnegative, got {weights}")
    total: Tensor | None = None
    for w, term, name in zip(weights, (itc, itm, lm), ("itc", "itm", "lm")):
        if w == 0.0:
            continue
        if term is None:
            raise ObjectiveError(f"{name} loss missing but has weight {w}")
        piece = T.mul(term, float(w))
        total = piece if total is None else T.add(total, piece)
    if total is None:
        total = Tensor(np.asarray(0.0, dtype=np.float32))
    return total
