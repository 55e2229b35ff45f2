"""Text-generation and classification metrics.

Text metrics tokenize exactly like the model pipeline (lowercase, punctuation
dropped, hyphenated compounds kept whole) so a generated answer is scored on
the same words it was trained on. METEOR uses exact + Porter-stem matching
only; there is no synonym dictionary offline, which is the documented reason
its oracle band is wider than BLEU/ROUGE's.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .stemmer import stem
from .tokenizer import tokenize_words


class MetricError(Exception):
    pass


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def bleu_n(candidate: str, references, n: int) -> float:
    """BLEU-n: geometric mean of clipped k-gram precisions times brevity penalty.

    Zero precisions are floored at 1e-9 instead of zeroing the whole score, so
    near-miss short texts land near 0 rather than at exactly 0.
    """
    if not 1 <= n <= 4:
        raise MetricError(f"n must be in 1..4, got {n}")
    if isinstance(references, str):
        references = [references]
    refs = [tokenize_words(r) for r in references]
    refs = [r for r in refs if r]
    if not refs:
        raise MetricError("bleu_n needs at least one nonempty reference")
    cand = tokenize_words(candidate)
    if not cand:
        return 0.0

    log_sum = 0.0
    for k in range(1, n + 1):
        cand_counts = _ngrams(cand, k)
        total = sum(cand_counts.values())
        if total == 0:
            p = 1e-9
        else:
            max_ref: Counter = Counter()
            for r in refs:
                for ng, c in _ngrams(r, k).items():
                    max_ref[ng] = max(max_ref[ng], c)
            clipped = sum(min(c, max_ref[ng]) for ng, c in cand_counts.items())
            p = clipped / total if clipped > 0 else 1e-9
        log_sum += math.log(p)

    c = len(cand)
    r = min((len(t) for t in refs), key=lambda rl: (abs(rl - c), rl))
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / n)


# ---------------------------------------------------------------------------
# ROUGE


def rouge_n(candidate: str, reference: str, n: int) -> float:
    """ROUGE-N as the F1 of n-gram overlap."""
    ref = tokenize_words(reference)
    if not ref:
        raise MetricError("rouge_n needs a nonempty reference")
    cand = tokenize_words(candidate)
    ref_counts = _ngrams(ref, n)
    cand_counts = _ngrams(cand, n)
    n_ref = sum(ref_counts.values())
    n_cand = sum(cand_counts.values())
    if n_ref == 0 or n_cand == 0:
        return 0.0
    overlap = sum(min(c, ref_counts[ng]) for ng, c in cand_counts.items())
    if overlap == 0:
        return 0.0
    precision = overlap / n_cand
    recall = overlap / n_ref
    return 2.0 * precision * recall / (precision + recall)


def _lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """ROUGE-L as the F1 over the longest common subsequence (beta = 1)."""
    ref = tokenize_words(reference)
    if not ref:
        raise MetricError("rouge_l needs a nonempty reference")
    cand = tokenize_words(candidate)
    if not cand:
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# METEOR


def _align(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """In-order greedy alignment: exact matches first, then stem matches."""
    matches: list[tuple[int, int]] = []
    used_ref = [False] * len(ref)
    matched_cand = [False] * len(cand)
    for ci, word in enumerate(cand):
        for ri, rword in enumerate(ref):
            if not used_ref[ri] and rword == word:
                matches.append((ci, ri))
                used_ref[ri] = True
                matched_cand[ci] = True
                break
    cand_stems = [stem(w) for w in cand]
    ref_stems = [stem(w) for w in ref]
    for ci, cstem in enumerate(cand_stems):
        if matched_cand[ci]:
            continue
        for ri, rstem in enumerate(ref_stems):
            if not used_ref[ri] and rstem == cstem:
                matches.append((ci, ri))
                used_ref[ri] = True
                break
    return sorted(matches)


def _count_chunks(matches: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for ci, ri in matches:
        if prev is None or ci != prev[0] + 1 or ri != prev[1] + 1:
            chunks += 1
        prev = (ci, ri)
    return chunks


def meteor(candidate: str, reference: str, alpha: float = 0.9,
           beta: float = 3.0, gamma: float = 0.5) -> float:
    """Unigram-alignment METEOR with a fragmentation penalty."""
    cand = tokenize_words(candidate)
    ref = tokenize_words(reference)
    if not cand or not ref:
        return 0.0
    matches = _align(cand, ref)
    m = len(matches)
    if m == 0:
        return 0.0
    precision = m / len(cand)
    recall = m / len(ref)
    fmean = precision * recall / (alpha * precision + (1.0 - alpha) * recall)
    penalty = gamma * (_count_chunks(matches) / m) ** beta
    return fmean * (1.0 - penalty)


# ---------------------------------------------------------------------------
# corpus reports

TEXT_METRICS = ("bleu2", "bleu4", "rouge1", "rouge2", "rougeL", "meteor")


def score_pair(candidate: str, reference: str) -> dict[str, float]:
    return {
        "bleu2": bleu_n(candidate, [reference], 2),
        "bleu4": bleu_n(candidate, [reference], 4),
        "rouge1": rouge_n(candidate, reference, 1),
        "rouge2": rouge_n(candidate, reference, 2),
        "rougeL": rouge_l(candidate, reference),
        "meteor": meteor(candidate, reference),
    }


@dataclass
class MetricReport:
    per_sample: list[dict] = field(default_factory=list)
    mean: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean, "per_sample": self.per_sample}, indent=2)


def evaluate_text(pairs: list[tuple[str, str]]) -> MetricReport:
    """Score (candidate, reference) pairs; corpus score = mean of per-sample."""
    if not pairs:
        raise MetricError("no pairs to evaluate")
    rows = [score_pair(c, r) for c, r in pairs]
    mean = {k: float(np.mean([row[k] for row in rows])) for k in TEXT_METRICS}
    return MetricReport(per_sample=rows, mean=mean)


def text_markdown_table(named_means: dict[str, dict], metrics=TEXT_METRICS) -> str:
    header = "| method | " + " | ".join(metrics) + " |"
    sep = "|" + "---|" * (len(metrics) + 1)
    lines = [header, sep]
    for name, mean in named_means.items():
        lines.append("| " + name + " | "
                     + " | ".join(f"{mean[m]:.3f}" for m in metrics) + " |")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# classification


def topk_accuracy(rankings: list, labels: list, k: int) -> float:
    """Fraction of samples whose true label is in the top k of its ranking."""
    if k < 1:
        raise MetricError(f"k must be >= 1, got {k}")
    if len(rankings) != len(labels):
        raise MetricError("rankings and labels lengths differ")
    if not rankings:
        raise MetricError("no samples")
    hits = sum(1 for ranking, label in zip(rankings, labels) if label in list(ranking)[:k])
    return hits / len(rankings)


def prf_confusion(predictions: list, labels: list, classes: list | None = None) -> dict:
    """Per-class precision/recall/F1 plus macro averages and confusion matrix.

    Confusion rows are true classes, columns predictions, so each row sums to
    that class's support.
    """
    if len(predictions) != len(labels):
        raise MetricError("predictions and labels lengths differ")
    if classes is None:
        classes = sorted(set(labels) | set(predictions))
    index = {c: i for i, c in enumerate(classes)}
    for value in list(predictions) + list(labels):
        if value not in index:
            raise MetricError(f"value {value!r} not in class set")
    n = len(classes)
    confusion = np.zeros((n, n), dtype=np.int64)
    for pred, true in zip(predictions, labels):
        confusion[index[true], index[pred]] += 1

    per_class = {}
    for c, i in index.items():
        tp = confusion[i, i]
        fp = confusion[:, i].sum() - tp
        fn = confusion[i, :].sum() - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (2 * precision * recall / (precision + recall)) if precision + recall else 0.0
        per_class[c] = {"precision": float(precision), "recall": float(recall),
                        "f1": float(f1), "support": int(tp + fn)}
    return {
        "classes": list(classes),
        "confusion": confusion.tolist(),
        "per_class": per_class,
        "macro": {
            "precision": float(np.mean([v["precision"] for v in per_class.values()])),
            "recall": float(np.mean([v["recall"] for v in per_class.values()])),
            "f1": float(np.mean([v["f1"] for v in per_class.values()])),
        },
        "accuracy": float(np.trace(confusion) / max(confusion.sum(), 1)),
    }


def prf_markdown_table(report: dict) -> str:
    lines = ["| category | precision | recall | f1 |", "|---|---|---|---|"]
    for c in report["classes"]:
        row = report["per_class"][c]
        lines.append(f"| {c} | {row['precision']:.3f} | {row['recall']:.3f} | {row['f1']:.3f} |")
    macro = report["macro"]
    lines.append(f"| macro | {macro['precision']:.3f} | {macro['recall']:.3f} | {macro['f1']:.3f} |")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# comparison arithmetic used in result reports


def relative_improvement_pct(ours: float, next_best: float) -> float:
    """(ours - next_best) / next_best, in percent."""
    if next_best == 0:
        raise MetricError("next_best must be nonzero")
    return (ours - next_best) / next_best * 100.0


def percentage_drop(baseline: float, variant: float) -> float:
    """(baseline - variant) / baseline, in percent."""
    if baseline == 0:
        raise MetricError("baseline must be nonzero")
    return (baseline - variant) / baseline * 100.0
