"""Joint-objective training: batching, LR schedule, early stopping, k-fold
cross-validation, and the ablation harness.

A training item pairs one image (as a patch sequence) with one
(instruction, answer) text pair. The answer text plays the contrastive/match
role opposite the image; the instruction conditions the decoder as a causal
prefix placed before <decode>.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .imaging import load_normalize, patchify
from .model import (ModelConfig, clamp_tau, clone_params, decoder_forward,
                    encode_image, encode_text, fuse, init_params, itc_project,
                    save_checkpoint)
from .objectives import itc_loss, itm_loss, joint_loss, lm_loss
from .optim import adam_init, adam_step
from .tokenizer import (DECODE_ID, EOS_ID, MODE_CLS, MODE_ENCODE, PAD_ID,
                        Vocab, collate, encode_text as encode_tokens,
                        tokenize_words)

ABLATION_VARIANTS = ("none", "no_itc", "no_ctc", "no_sa", "no_ca", "no_csa")


class TrainerError(Exception):
    pass


class TrainingDiverged(TrainerError):
    """Loss went NaN/Inf; carries the step and seed for reproduction."""


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 48
    scheduler_patience: int = 5
    scheduler_min_delta: float = 1e-4
    early_stop_patience: int = 10
    k_folds: int = 10
    seed: int = 0
    ablation: str = "none"
    weight_itc: float = 1.0
    weight_itm: float = 1.0
    weight_lm: float = 1.0

    def __post_init__(self):
        if self.batch_size < 2:
            raise TrainerError("batch_size must be >= 2 (contrastive loss needs in-batch negatives)")
        if self.k_folds < 2:
            raise TrainerError("k_folds must be >= 2")
        if self.scheduler_patience < 1 or self.early_stop_patience < 1:
            raise TrainerError("patience values must be >= 1")
        if self.epochs < 1:
            raise TrainerError("epochs must be >= 1")
        if self.ablation not in ABLATION_VARIANTS:
            raise TrainerError(f"unknown ablation variant {self.ablation!r}")


def apply_ablation(mcfg: ModelConfig, tcfg: TrainConfig) -> tuple[ModelConfig, tuple[float, float, float]]:
    """Map a variant name onto loss weights / identity-block switches.

    The result tables label the matching-loss ablation "CTC"; it is the
    binary cross-entropy (ITM) term here.
    """
    weights = [tcfg.weight_itc, tcfg.weight_itm, tcfg.weight_lm]
    if tcfg.ablation == "no_itc":
        weights[0] = 0.0
    elif tcfg.ablation == "no_ctc":
        weights[1] = 0.0
    elif tcfg.ablation == "no_sa":
        mcfg = replace(mcfg, ablate_sa=True)
    elif tcfg.ablation == "no_ca":
        mcfg = replace(mcfg, ablate_ca=True)
    elif tcfg.ablation == "no_csa":
        mcfg = replace(mcfg, ablate_csa=True)
    return mcfg, tuple(weights)


# ---------------------------------------------------------------------------
# dataset preparation


@dataclass
class TrainItem:
    patches: np.ndarray          # (num_patches, patch_dim) float32
    question: str
    answer: str
    category: str = ""
    cls_seq: object = None       # answer, cls-framed
    enc_seq: object = None       # answer, encode-framed
    dec_input: list[int] = field(default_factory=list)
    dec_target: list[int] = field(default_factory=list)
    dec_weight: list[int] = field(default_factory=list)
    answer_key: tuple = ()


def build_item(patches: np.ndarray, question: str, answer: str, vocab: Vocab,
               mcfg: ModelConfig, category: str = "") -> TrainItem:
    cls_seq = encode_tokens(answer, vocab, MODE_CLS, mcfg.max_text_len)
    enc_seq = encode_tokens(answer, vocab, MODE_ENCODE, mcfg.max_text_len)
    q_ids = [vocab.id_of(w) for w in tokenize_words(question)][: mcfg.max_text_len - 1]
    a_ids = [vocab.id_of(w) for w in tokenize_words(answer)][: mcfg.max_answer_len - 1]
    dec_input = q_ids + [DECODE_ID] + a_ids
    dec_target = dec_input[1:] + [EOS_ID]
    decode_at = len(q_ids)
    dec_weight = [1 if i >= decode_at else 0 for i in range(len(dec_input))]
    return TrainItem(patches=patches.astype(np.float32), question=question, answer=answer,
                     category=category, cls_seq=cls_seq, enc_seq=enc_seq,
                     dec_input=dec_input, dec_target=dec_target, dec_weight=dec_weight,
                     answer_key=tuple(enc_seq.ids))


def prepare_items(records, vocab: Vocab, mcfg: ModelConfig, images_root) -> list[TrainItem]:
    """Instruction records -> train items; image files are loaded once each."""
    root = Path(images_root)
    cache: dict[str, np.ndarray] = {}
    items = []
    for rec in records:
        path = str(rec.image)
        if path not in cache:
            img = load_normalize((root / path).read_bytes())
            cache[path] = patchify(img).astype(np.float32)
        items.append(build_item(cache[path], rec.instruction, rec.answer, vocab, mcfg,
                                category=rec.category))
    return items


def vocab_from_records(records, min_freq: int = 1) -> Vocab:
    from .tokenizer import build_vocab
    corpus = []
    for rec in records:
        corpus.append(rec.instruction)
        corpus.append(rec.answer)
    return build_vocab(corpus, min_freq=min_freq)


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    patches: np.ndarray
    cls_ids: np.ndarray
    cls_mask: np.ndarray
    enc_ids: np.ndarray
    enc_mask: np.ndarray
    neg_index: np.ndarray
    dec_ids: np.ndarray
    dec_mask: np.ndarray
    dec_targets: np.ndarray
    dec_weights: np.ndarray

    @property
    def size(self) -> int:
        return self.patches.shape[0]


def assemble_batch(items: list[TrainItem], rng: np.random.Generator) -> Batch:
    b = len(items)
    patches = np.stack([it.patches for it in items])
    cls_ids, cls_mask = collate([it.cls_seq for it in items])
    enc_ids, enc_mask = collate([it.enc_seq for it in items])

    # one in-batch negative per pair: a different caption where possible
    neg_index = np.zeros(b, dtype=np.int64)
    for i, it in enumerate(items):
        others = [j for j in range(b) if j != i and items[j].answer_key != it.answer_key]
        if not others:
            others = [j for j in range(b) if j != i]
        neg_index[i] = others[rng.integers(len(others))]

    width = max(len(it.dec_input) for it in items)
    dec_ids = np.full((b, width), PAD_ID, dtype=np.int64)
    dec_mask = np.zeros((b, width), dtype=np.int64)
    dec_targets = np.full((b, width), PAD_ID, dtype=np.int64)
    dec_weights = np.zeros((b, width), dtype=np.int64)
    for i, it in enumerate(items):
        n = len(it.dec_input)
        dec_ids[i, :n] = it.dec_input
        dec_mask[i, :n] = 1
        dec_targets[i, :n] = it.dec_target
        dec_weights[i, :n] = it.dec_weight
    return Batch(patches, cls_ids, cls_mask, enc_ids, enc_mask, neg_index,
                 dec_ids, dec_mask, dec_targets, dec_weights)


def forward_losses(params, mcfg: ModelConfig, batch: Batch,
                   weights: tuple[float, float, float]):
    """Forward the three heads; returns (itc, itm, lm, joint) Tensors.

    Zero-weight objectives are skipped entirely, so their private parameters
    see no gradient at all (the ablation contract).
    """
    w_itc, w_itm, w_lm = weights
    img_cls, img_seq = encode_image(params, mcfg, batch.patches)

    itc = None
    if w_itc > 0:
        txt_cls, _ = encode_text(params, mcfg, batch.cls_ids, batch.cls_mask)
        v, t = itc_project(params, img_cls, txt_cls)
        itc = itc_loss(v, t, params["itc.tau"])

    itm = None
    if w_itm > 0:
        ids = np.concatenate([batch.enc_ids, batch.enc_ids[batch.neg_index]])
        mask = np.concatenate([batch.enc_mask, batch.enc_mask[batch.neg_index]])
        image_rows = T.concat([img_seq, img_seq], axis=0)
        _, logits = fuse(params, mcfg, ids, mask, image_rows)
        labels = np.concatenate([np.ones(batch.size), np.zeros(batch.size)])
        itm = itm_loss(logits, labels)

    lm = None
    if w_lm > 0:
        logits = decoder_forward(params, mcfg, batch.dec_ids, batch.dec_mask, img_seq)
        lm = lm_loss(logits, batch.dec_targets, batch.dec_weights)

    return itc, itm, lm, joint_loss(itc, itm, lm, weights)


# ---------------------------------------------------------------------------
# schedules


@dataclass
class PlateauSchedule:
    """Halve the LR when the watched loss stagnates for `patience` epochs."""
    lr: float
    patience: int = 5
    min_delta: float = 1e-4
    factor: float = 0.5
    best: float = float("inf")
    bad_epochs: int = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


@dataclass
class EarlyStopping:
    patience: int = 10
    min_delta: float = 1e-4
    best: float = float("inf")
    bad_epochs: int = 0

    def step(self, val_loss: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


def kfold_split(n_items: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle then contiguous slices; fold sizes differ by at most 1."""
    if n_items < k:
        raise TrainerError(f"cannot split {n_items} items into {k} folds")
    order = np.random.default_rng(seed).permutation(n_items)
    return [fold.copy() for fold in np.array_split(order, k)]


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: dict
    history: list[dict]
    epoch_log: list[dict]
    best_val: float
    stopped_epoch: int


def _loss_val(t) -> float:
    return float(t.data) if t is not None else float("nan")


def _eval_loss(params, mcfg, items, weights, batch_size, rng) -> float:
    total, count = 0.0, 0
    with T.no_grad():
        for lo in range(0, len(items), batch_size):
            chunk = items[lo:lo + batch_size]
            if len(chunk) < 2:
                continue
            batch = assemble_batch(chunk, rng)
            _, _, _, joint = forward_losses(params, mcfg, batch, weights)
            total += float(joint.data) * len(chunk)
            count += len(chunk)
    return total / count if count else float("nan")


def train(mcfg: ModelConfig, tcfg: TrainConfig, train_items: list[TrainItem],
          val_items: list[TrainItem] | None = None, params: dict | None = None,
          out_dir=None, vocab: Vocab | None = None) -> TrainResult:
    """Seed-deterministic joint training; keeps the best-validation weights.

    Per step: batch -> three heads -> weighted joint loss -> backward -> Adam.
    Per epoch: validation loss drives the plateau LR schedule and early
    stopping. A non-finite loss aborts immediately with diagnostics.
    """
    if not train_items:
        raise TrainerError("empty training set")
    mcfg_run, weights = apply_ablation(mcfg, tcfg)
    rng = np.random.default_rng(tcfg.seed)
    if params is None:
        params = init_params(mcfg_run, tcfg.seed)
    adam = adam_init(params, tcfg.lr)
    sched = PlateauSchedule(lr=tcfg.lr, patience=tcfg.scheduler_patience,
                            min_delta=tcfg.scheduler_min_delta)
    stopper = EarlyStopping(patience=tcfg.early_stop_patience,
                            min_delta=tcfg.scheduler_min_delta)

    history: list[dict] = []
    epoch_log: list[dict] = []
    best_params = clone_params(params)
    best_val = float("inf")
    step = 0
    stopped_epoch = tcfg.epochs

    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(train_items))
        epoch_joint, epoch_n = 0.0, 0
        for lo in range(0, len(order), tcfg.batch_size):
            chunk = [train_items[i] for i in order[lo:lo + tcfg.batch_size]]
            if len(chunk) < 2:
                continue  # contrastive terms degenerate on singleton batches
            batch = assemble_batch(chunk, rng)
            itc, itm, lm, joint = forward_losses(params, mcfg_run, batch, weights)
            if not np.isfinite(joint.data):
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (epoch {epoch}, seed {tcfg.seed})")
            T.backward(joint)
            adam.lr = sched.lr
            adam_step(params, adam)
            clamp_tau(params, mcfg_run)
            T.zero_grads(params)
            step += 1
            epoch_joint += float(joint.data) * len(chunk)
            epoch_n += len(chunk)
            history.append({
                "step": step,
                "itc": "" if weights[0] == 0 else f"{_loss_val(itc):.6f}",
                "itm": "" if weights[1] == 0 else f"{_loss_val(itm):.6f}",
                "lm": "" if weights[2] == 0 else f"{_loss_val(lm):.6f}",
                "joint": f"{float(joint.data):.6f}",
                "lr": f"{sched.lr:.8f}",
            })

        train_loss = epoch_joint / max(epoch_n, 1)
        if val_items:
            val_loss = _eval_loss(params, mcfg_run, val_items, weights, tcfg.batch_size, rng)
        else:
            val_loss = train_loss
        sched.step(val_loss)
        improved, should_stop = stopper.step(val_loss)
        if improved or best_val == float("inf"):
            best_params = clone_params(params)
            best_val = val_loss
        epoch_log.append({"epoch": epoch, "train": train_loss, "val": val_loss,
                          "lr": sched.lr})
        if should_stop:
            stopped_epoch = epoch + 1
            break

    result = TrainResult(params=best_params, history=history, epoch_log=epoch_log,
                         best_val=best_val, stopped_epoch=stopped_epoch)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_history_csv(out / "history.csv", history)
        save_checkpoint(out / "checkpoint", best_params, mcfg_run, tcfg.seed, vocab)
    return result


def write_history_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "itc", "itm", "lm", "joint", "lr"])
        writer.writeheader()
        writer.writerows(history)


def train_kfold(mcfg: ModelConfig, tcfg: TrainConfig, items: list[TrainItem],
                out_dir=None, vocab: Vocab | None = None) -> list[dict]:
    """Train once per fold (fold = validation split); returns per-fold summary."""
    folds = kfold_split(len(items), tcfg.k_folds, tcfg.seed)
    summary = []
    for fi, fold in enumerate(folds):
        val_idx = set(fold.tolist())
        train_part = [items[i] for i in range(len(items)) if i not in val_idx]
        val_part = [items[i] for i in fold]
        fold_dir = None if out_dir is None else Path(out_dir) / f"fold_{fi}"
        result = train(mcfg, tcfg, train_part, val_part, out_dir=fold_dir, vocab=vocab)
        summary.append({"fold": fi, "best_val": result.best_val,
                        "stopped_epoch": result.stopped_epoch})
    return summary


# ---------------------------------------------------------------------------
# ablation harness


def run_ablation(mcfg: ModelConfig, tcfg: TrainConfig, items: list[TrainItem],
                 vocab: Vocab, eval_items: list[TrainItem] | None = None,
                 out_dir=None, variants=ABLATION_VARIANTS) -> dict:
    """Train every variant with a shared seed and report metric drops vs baseline.

    Drop is (baseline - variant) / baseline in percent, computed per metric on
    greedy generations over the eval items.
    """
    from .inference import GenerationConfig, generate
    from .metrics import evaluate_text, percentage_drop

    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise TrainerError(f"unknown ablation variant {v!r}")
    eval_items = eval_items if eval_items is not None else items
    gcfg = GenerationConfig(max_len=mcfg.max_answer_len)
    results: dict[str, dict] = {}
    for variant in variants:
        tcfg_v = replace(tcfg, ablation=variant)
        mcfg_v, _ = apply_ablation(mcfg, tcfg_v)
        outcome = train(mcfg, tcfg_v, items)
        pairs = []
        with T.no_grad():
            for it in eval_items:
                answer = generate(outcome.params, mcfg_v, vocab, it.patches,
                                  it.question, gcfg)
                pairs.append((answer, it.answer))
        report = evaluate_text(pairs)
        results[variant] = {"metrics": report.mean, "best_val": outcome.best_val}

    base = results[variants[0]]["metrics"]
    for variant in variants:
        drops = {}
        for metric, base_value in base.items():
            value = results[variant]["metrics"][metric]
            drops[metric] = 0.0 if base_value == 0 else percentage_drop(base_value, value)
        results[variant]["drop_pct"] = drops

    report = {"variants": results, "metric_names": list(base.keys())}
    if out_dir is not None:
        import json
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
        (out / "ablation.md").write_text(ablation_markdown(report), encoding="utf-8")
    return report


def ablation_markdown(report: dict) -> str:
    metrics = report["metric_names"]
    lines = ["| variant | " + " | ".join(metrics) + " |",
             "|" + "---|" * (len(metrics) + 1)]
    for name, entry in report["variants"].items():
        cells = []
        for m in metrics:
            value = entry["metrics"][m]
            drop = entry["drop_pct"][m]
            cells.append(f"{value:.3f} (↓ {drop:.2f}%)" if name != "none" else f"{value:.3f}")
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines)
