"""Task-level evaluation drivers: run the model over a split and reduce the
outputs with the corpus metrics. Each driver returns a report dict plus
per-sample prediction records suitable for a JSONL dump.
"""
from __future__ import annotations

import numpy as np

from .data import normalize_bbox
from .infer import (answer_question, generate, ground, retrieve,
                    self_consistency_holds, zero_shot_classify, EmbeddingIndex)
from .metrics import (MetricError, cider_d, corpus_bleu, directional_recall,
                      grounding_scores, mean_recall, vqa_scores)
from .model import MultiwayModel
from .scenes import CATEGORIES
from .vocab import Vocabulary


def _scene_of(sample_id: str) -> str:
    return sample_id.rsplit("_", 1)[0]


def eval_captioning(model: MultiwayModel, vocab: Vocabulary, samples,
                    task: str = "caption_short") -> tuple[dict, list[dict]]:
    """Greedy captions vs the gold caption of each image."""
    subset = [s for s in samples if s.task == task]
    if not subset:
        raise MetricError(f"no {task} samples to evaluate")
    candidates, references, preds = [], [], []
    for s in subset:
        emitted = generate(model, vocab, s.image, task=task)
        hyp = vocab.decode(emitted).split()
        refs = [s.text.split()]
        candidates.append(hyp)
        references.append(refs)
        preds.append({"id": s.id, "task": task, "output": " ".join(hyp), "gold": s.text})
    report = {
        "n": len(subset),
        "bleu1": corpus_bleu(candidates, references, max_n=1),
        "bleu4": corpus_bleu(candidates, references, max_n=4),
        "cider_d": cider_d(candidates, references)[0],
    }
    return report, preds


def retrieval_embeddings(model: MultiwayModel, samples, task: str = "caption_short",
                         limit: int | None = None):
    """Unit embeddings for a caption gallery: one text per sample, one image
    per distinct scene, plus the relevance sets implied by caption equality."""
    subset = [s for s in samples if s.task == task]
    if limit is not None:
        subset = subset[:limit]
    if len(subset) < 2:
        raise MetricError("retrieval needs at least two caption samples")
    scene_order: list[str] = []
    scene_caption: dict[str, str] = {}
    images: dict[str, np.ndarray] = {}
    for s in subset:
        sid = _scene_of(s.id)
        if sid not in scene_caption:
            scene_order.append(sid)
            scene_caption[sid] = s.text
            images[sid] = s.image
    text_rows = np.stack([model.encode_text(s.retrieval_tokens).data for s in subset])
    image_rows = np.stack([model.encode_image(images[sid]).data for sid in scene_order])
    # a text matches every scene whose gold caption is the same string
    caption_to_scenes: dict[str, set[int]] = {}
    for gi, sid in enumerate(scene_order):
        caption_to_scenes.setdefault(scene_caption[sid], set()).add(gi)
    t2i_relevant = [caption_to_scenes[s.text] for s in subset]
    text_by_caption: dict[str, set[int]] = {}
    for qi, s in enumerate(subset):
        text_by_caption.setdefault(s.text, set()).add(qi)
    i2t_relevant = [text_by_caption[scene_caption[sid]] for sid in scene_order]
    return subset, scene_order, text_rows, image_rows, t2i_relevant, i2t_relevant


def eval_retrieval(model: MultiwayModel, vocab: Vocabulary, samples,
                   task: str = "caption_short", limit: int | None = None,
                   ks: tuple[int, ...] = (1, 5, 10)) -> tuple[dict, list[dict]]:
    subset, scene_order, text_rows, image_rows, t2i_rel, i2t_rel = \
        retrieval_embeddings(model, samples, task, limit)
    ks = tuple(k for k in ks if k <= min(len(scene_order), len(subset)))
    sims = text_rows @ image_rows.T
    t2i = directional_recall(sims, t2i_rel, ks)
    i2t = directional_recall(sims.T, i2t_rel, ks)
    report = {"n_text": len(subset), "n_image": len(scene_order)}
    for k in ks:
        report[f"t2i_r@{k}"] = t2i[k]
        report[f"i2t_r@{k}"] = i2t[k]
    report["mean_recall"] = mean_recall(t2i, i2t)
    preds = []
    index = EmbeddingIndex([str(i) for i in range(len(scene_order))],
                           image_rows.astype(np.float32))
    for qi, s in enumerate(subset):
        top = retrieve(index, text_rows[qi], k=min(max(ks), len(scene_order)))
        preds.append({"id": s.id, "task": "retrieval",
                      "output": [scene_order[int(i)] for i, _ in top],
                      "gold": sorted(scene_order[g] for g in t2i_rel[qi])})
    return report, preds


def eval_grounding(model: MultiwayModel, vocab: Vocabulary, samples,
                   threshold: float = 0.5) -> tuple[dict, list[dict]]:
    subset = [s for s in samples if s.task == "grounding"]
    if not subset:
        raise MetricError("no grounding samples to evaluate")
    pred_boxes, gold_boxes, preds = [], [], []
    for s in subset:
        h, w = s.image.shape[:2]
        gold = normalize_bbox(s.bbox_px, w, h)
        box = ground(model, vocab, s.image, s.text)
        pred_boxes.append(box)
        gold_boxes.append(gold)
        preds.append({"id": s.id, "task": "grounding",
                      "output": list(box), "gold": list(gold)})
    scores = grounding_scores(pred_boxes, gold_boxes, threshold)
    report = {"n": len(subset), "mean_iou": scores["mean_iou"],
              f"acc@{threshold}": scores[f"acc@{threshold}"]}
    return report, preds


def eval_vqa(model: MultiwayModel, vocab: Vocabulary, samples,
             questions=None) -> tuple[dict, list[dict]]:
    """Answer accuracy, grouped by question type.

    `questions` overrides the manifest questions with (sample, text, answer,
    qtype) tuples, which is how fresh held-out questions are evaluated.
    """
    if questions is None:
        subset = [s for s in samples if s.task == "vqa"]
        questions = [(s, s.text, s.answer, s.question_type or "unknown") for s in subset]
    if not questions:
        raise MetricError("no vqa questions to evaluate")
    records, preds = [], []
    for s, text, answer, qtype in questions:
        predicted = answer_question(model, vocab, s.image, text)
        records.append((qtype, predicted, answer))
        preds.append({"id": s.id, "task": "vqa", "question": text,
                      "output": predicted, "gold": answer, "type": qtype})
    return vqa_scores(records), preds


def eval_classification(model: MultiwayModel, vocab: Vocabulary, samples) -> tuple[dict, list[dict]]:
    """Zero-shot category accuracy over single-object scenes.

    The gold label is parsed from the short caption ('one red square' names
    exactly one object), so no extra annotation is needed.
    """
    preds = []
    hits = 0
    total = 0
    for s in samples:
        if s.task != "caption_short":
            continue
        words = s.text.split()
        if "and" in words or words[0] != "one":
            continue  # multi-object scene
        gold = words[-1]
        predicted, _ = zero_shot_classify(model, vocab, s.image, list(CATEGORIES))
        hits += predicted == gold
        total += 1
        preds.append({"id": s.id, "task": "classify", "output": predicted, "gold": gold})
    if total == 0:
        raise MetricError("no single-object scenes to classify")
    return {"n": total, "accuracy": hits / total}, preds


def teacher_forced_accuracy(model: MultiwayModel, vocab: Vocabulary, samples,
                            task: str = "caption_short") -> float:
    """Fraction of caption slots predicted correctly when each is re-masked
    with the gold prefix (and the rest of the sequence) in place."""
    subset = [s for s in samples if s.task == task]
    if not subset:
        raise MetricError(f"no {task} samples")
    hits = 0
    total = 0
    for s in subset:
        for pos in s.mask_candidates:
            probe = s.tokens.copy()
            probe[pos] = vocab.mask_id
            logits = model.cross_forward(s.image, probe)
            hits += int(np.argmax(logits.data[pos])) == int(s.tokens[pos])
            total += 1
    return hits / total


def self_consistency_rate(model: MultiwayModel, vocab: Vocabulary, samples,
                          task: str = "caption_short", limit: int | None = None) -> float:
    """Share of generated sequences whose every emitted slot survives the
    re-mask-and-argmax probe."""
    subset = [s for s in samples if s.task == task]
    if limit is not None:
        subset = subset[:limit]
    if not subset:
        raise MetricError(f"no {task} samples")
    ok = 0
    for s in subset:
        emitted = generate(model, vocab, s.image, task=task)
        ok += self_consistency_holds(model, vocab, s.image, task, emitted)
    return ok / len(subset)
