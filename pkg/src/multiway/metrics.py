"""Corpus metrics for captioning, retrieval, grounding, and VQA.

All functions take plain python/numpy values so they can be tested against
hand-worked fixtures without touching a model.
"""
from __future__ import annotations

import math
from collections import Counter, defaultdict

import numpy as np


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# n-gram helpers


def _ngram_counts(words: list[str], max_n: int) -> dict[int, Counter]:
    out = {}
    for n in range(1, max_n + 1):
        out[n] = Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))
    return out


# ---------------------------------------------------------------------------
# BLEU


def corpus_bleu(candidates: list[list[str]], references: list[list[list[str]]],
                max_n: int = 4) -> float:
    """Corpus-level BLEU: clipped modified n-gram precision, geometric mean
    with uniform weights, multiplied by the brevity penalty. No smoothing, so
    any empty precision bucket zeroes the score.
    """
    if len(candidates) != len(references):
        raise MetricError("candidate and reference counts differ")
    if not candidates:
        raise MetricError("empty corpus")
    matched = np.zeros(max_n)
    guessed = np.zeros(max_n)
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise MetricError("a candidate has no references")
        cand_len += len(cand)
        # closest reference length (ties toward the shorter one)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        cand_counts = _ngram_counts(cand, max_n)
        ref_counts: dict[int, Counter] = {n: Counter() for n in range(1, max_n + 1)}
        for ref in refs:
            for n, counts in _ngram_counts(ref, max_n).items():
                for gram, c in counts.items():
                    ref_counts[n][gram] = max(ref_counts[n][gram], c)
        for n in range(1, max_n + 1):
            for gram, c in cand_counts[n].items():
                matched[n - 1] += min(c, ref_counts[n][gram])
                guessed[n - 1] += c
    if (guessed == 0).any() or (matched == 0).any():
        return 0.0
    log_precision = np.log(matched / guessed).mean()
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / max(cand_len, 1))
    return float(brevity * math.exp(log_precision))


# ---------------------------------------------------------------------------
# CIDEr-D


def cider_d(candidates: list[list[str]], references: list[list[list[str]]],
            max_n: int = 4, sigma: float = 6.0) -> tuple[float, list[float]]:
    """Consensus captioning score: tf-idf n-gram cosine with clipped candidate
    counts and a Gaussian length penalty, averaged over n-gram orders, scaled
    by 10. Document frequencies come from the reference corpus itself, so a
    single-image corpus is undefined and rejected.
    """
    if len(candidates) != len(references):
        raise MetricError("candidate and reference counts differ")
    n_images = len(candidates)
    if n_images < 2:
        raise MetricError("cider needs at least two images (idf is degenerate)")
    doc_freq: dict[int, Counter] = {n: Counter() for n in range(1, max_n + 1)}
    for refs in references:
        if not refs:
            raise MetricError("a candidate has no references")
        seen: set = set()
        for ref in refs:
            for n, counts in _ngram_counts(ref, max_n).items():
                for gram in counts:
                    seen.add((n, gram))
        for n, gram in seen:
            doc_freq[n][gram] += 1
    log_corpus = math.log(n_images)

    def tfidf_vec(words: list[str]):
        vec = {n: defaultdict(float) for n in range(1, max_n + 1)}
        norm = {n: 0.0 for n in range(1, max_n + 1)}
        for n, counts in _ngram_counts(words, max_n).items():
            for gram, tf in counts.items():
                idf = log_corpus - math.log(max(1.0, doc_freq[n][gram]))
                vec[n][gram] = tf * idf
                norm[n] += vec[n][gram] ** 2
        return vec, {n: math.sqrt(v) for n, v in norm.items()}

    scores = []
    for cand, refs in zip(candidates, references):
        cand_vec, cand_norm = tfidf_vec(cand)
        total = 0.0
        for ref in refs:
            ref_vec, ref_norm = tfidf_vec(ref)
            delta = len(cand) - len(ref)
            penalty = math.exp(-(delta ** 2) / (2.0 * sigma ** 2))
            for n in range(1, max_n + 1):
                dot = sum(min(cand_vec[n][g], ref_vec[n][g]) * ref_vec[n][g]
                          for g in cand_vec[n])
                if cand_norm[n] != 0.0 and ref_norm[n] != 0.0:
                    total += penalty * dot / (cand_norm[n] * ref_norm[n])
        scores.append(10.0 * total / (max_n * len(refs)))
    return float(np.mean(scores)), scores


# ---------------------------------------------------------------------------
# retrieval recall


def directional_recall(scores: np.ndarray, relevant: list[set[int]],
                       ks: tuple[int, ...] = (1, 5, 10)) -> dict[int, float]:
    """R@k over a score matrix [queries, gallery]; a query counts when any of
    its relevant gallery items lands in the top k. Score ties break toward
    the lower gallery index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise MetricError(f"score matrix must be 2-d, got {scores.shape}")
    q, g = scores.shape
    if len(relevant) != q:
        raise MetricError("relevance list length != query count")
    if any(not r for r in relevant):
        raise MetricError("every query needs at least one relevant item")
    # stable sort on negated scores keeps the lower index first among ties
    order = np.argsort(-scores, axis=1, kind="stable")
    out = {}
    for k in ks:
        if k > g:
            raise MetricError(f"k={k} exceeds gallery size {g}")
        hits = sum(1 for i in range(q) if relevant[i].intersection(order[i, :k]))
        out[k] = hits / q
    return out


def mean_recall(t2i: dict[int, float], i2t: dict[int, float]) -> float:
    """Mean of the six directional recalls (both directions, all k)."""
    vals = [t2i[k] for k in sorted(t2i)] + [i2t[k] for k in sorted(i2t)]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# boxes


def box_iou(a, b) -> float:
    """Intersection over union of (x1, y1, x2, y2) boxes on a shared grid."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        raise MetricError(f"degenerate box: {a} vs {b}")
    ix = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    iy = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = ix * iy
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def grounding_scores(pred_boxes, gold_boxes, threshold: float = 0.5) -> dict:
    if len(pred_boxes) != len(gold_boxes) or not pred_boxes:
        raise MetricError("prediction and gold box counts differ or are empty")
    ious = [box_iou(p, g) for p, g in zip(pred_boxes, gold_boxes)]
    return {
        "mean_iou": float(np.mean(ious)),
        f"acc@{threshold}": float(np.mean([i >= threshold for i in ious])),
        "ious": ious,
    }


# ---------------------------------------------------------------------------
# VQA


def vqa_scores(records: list[tuple[str, str, str]]) -> dict:
    """records: (question_type, predicted, gold). Exact string match.

    Reports accuracy per type, micro overall, and the macro average over the
    types that appear.
    """
    if not records:
        raise MetricError("no vqa records")
    by_type: dict[str, list[bool]] = defaultdict(list)
    for qtype, pred, gold in records:
        by_type[qtype].append(pred == gold)
    out = {f"acc_{t}": float(np.mean(v)) for t, v in sorted(by_type.items())}
    out["overall"] = float(np.mean([pred for v in by_type.values() for pred in v]))
    out["average"] = float(np.mean([np.mean(v) for v in by_type.values()]))
    return out
