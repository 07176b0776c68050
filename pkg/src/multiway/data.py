"""Dataset assembly: token sequences per task, masking, manifests, batching.

Sequence layout, one sample per line of the manifest:
  caption    [<txt_cls>] [prompt] caption-words ... [<eos>]
  vqa        [<txt_cls>] [vqa:] question-words ... answer-word [<eos>]
  grounding  [<txt_cls>] [bounding-box:] query-words ... 4 coord tokens [<eos>]

Maskable positions are task-specific: the whole body plus the closing <eos>
for captions and vqa (question words included), and exactly the four
coordinate tokens for grounding (always all four, so the single-pass box
decoder sees the same shape at train and test time).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream_rng
from .scenes import (generate_question, generate_scene, grounding_target,
                     lexicon_lines, long_caption, read_ppm, short_caption,
                     write_ppm)
from .vocab import Vocabulary, build_vocab

TASKS = ("caption_short", "caption_long", "vqa", "grounding")

COORD_STEPS = 100  # boxes live on the [0, 100] integer grid


class DataError(ValueError):
    """Corrupt or inconsistent dataset content."""


@dataclass
class Sample:
    id: str
    image: np.ndarray  # uint8 [H, W, 3]
    task: str
    text: str  # caption, question, or grounding query (no prompt, no answer)
    answer: str | None = None
    bbox_px: tuple[int, int, int, int] | None = None
    retrieval_eligible: bool = False
    question_type: str | None = None
    tokens: np.ndarray = field(default=None, repr=False)  # full sequence
    mask_candidates: np.ndarray = field(default=None, repr=False)
    retrieval_tokens: np.ndarray = field(default=None, repr=False)  # prompt-free


@dataclass
class MaskedSequence:
    tokens: np.ndarray  # input ids with <mask> substituted
    positions: np.ndarray  # indices that were masked, ascending
    targets: np.ndarray  # original ids at those indices


def normalize_bbox(bbox_px, width: int, height: int) -> tuple[int, int, int, int]:
    """Map a pixel box to the [0, 100] grid, round half up.

    Degenerate results (zero width/height after rounding) are widened by one
    step so every box stays a box.
    """
    x1, y1, x2, y2 = bbox_px
    if not (0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height):
        raise DataError(f"bbox {bbox_px} outside raster {width}x{height}")

    def scale(v, extent):
        return int(math.floor(COORD_STEPS * v / extent + 0.5))

    nx1, nx2 = scale(x1, width), scale(x2, width)
    ny1, ny2 = scale(y1, height), scale(y2, height)
    if nx1 == nx2:
        if nx2 < COORD_STEPS:
            nx2 += 1
        else:
            nx1 -= 1
    if ny1 == ny2:
        if ny2 < COORD_STEPS:
            ny2 += 1
        else:
            ny1 -= 1
    return nx1, ny1, nx2, ny2


def build_sequence(vocab: Vocabulary, task: str, text: str, answer: str | None = None,
                   bbox_norm: tuple[int, int, int, int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Token ids for one sample plus the indices masking may touch."""
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}")
    ids = [vocab.txt_cls_id, vocab.prompt_id(task)]
    body = vocab.encode_words(text)
    if task in ("caption_short", "caption_long"):
        start = len(ids)
        ids.extend(body)
        ids.append(vocab.eos_id)
        candidates = np.arange(start, len(ids))
    elif task == "vqa":
        if answer is None:
            raise DataError("vqa sample needs an answer")
        answer_ids = vocab.encode_words(answer)
        if len(answer_ids) != 1:
            raise DataError(f"vqa answer {answer!r} must be a single token")
        start = len(ids)
        ids.extend(body)
        ids.extend(answer_ids)
        ids.append(vocab.eos_id)
        # masking only the answer makes answers memorized, not learned; the
        # question words must be fair game too
        candidates = np.arange(start, len(ids))
    else:
        if bbox_norm is None:
            raise DataError("grounding sample needs a normalized bbox")
        ids.extend(body)
        start = len(ids)
        ids.extend(vocab.coord_id(int(v)) for v in bbox_norm)
        ids.append(vocab.eos_id)
        candidates = np.arange(start, start + 4)
    return np.asarray(ids, dtype=np.int64), candidates


def retrieval_tokens(vocab: Vocabulary, text: str) -> np.ndarray:
    """Dual-encoder text sequence: caption words without any task prompt."""
    return np.asarray([vocab.txt_cls_id] + vocab.encode_words(text) + [vocab.eos_id],
                      dtype=np.int64)


def apply_mask(tokens: np.ndarray, candidates: np.ndarray, p_mask: float,
               rng: np.random.Generator, mask_id: int, all_candidates: bool = False) -> MaskedSequence:
    """Replace candidate positions with <mask> at rate p_mask (at least one).

    all_candidates=True masks every candidate, the fixed grounding regime.
    """
    if candidates.size == 0:
        raise DataError("sample has no maskable positions")
    if all_candidates:
        chosen = candidates
    else:
        pick = rng.random(candidates.size) < p_mask
        if not pick.any():
            pick[int(rng.integers(0, candidates.size))] = True
        chosen = candidates[pick]
    out = tokens.copy()
    targets = tokens[chosen].copy()
    out[chosen] = mask_id
    return MaskedSequence(out, chosen.copy(), targets)


def make_batches(samples, batch_size: int, rng: np.random.Generator):
    """Shuffled batches; each yields (batch, retrieval_subset).

    The retrieval subset is the batch's retrieval-eligible slice; InfoNCE is
    skipped by the caller when it has fewer than two pairs.
    """
    if batch_size < 2:
        raise DataError("batch_size must be at least 2")
    order = rng.permutation(len(samples))
    out = []
    for start in range(0, len(samples), batch_size):
        batch = [samples[i] for i in order[start:start + batch_size]]
        retrieval = [s for s in batch if s.retrieval_eligible]
        out.append((batch, retrieval))
    return out


# ---------------------------------------------------------------------------
# dataset generation and manifest I/O


def generate_dataset(out_dir, n_train: int, n_test: int, seed: int,
                     questions_per_scene: int = 1) -> dict:
    """Write images, per-split JSONL manifests, and the vocabulary file.

    Each scene yields one short caption, one long caption, one grounding
    target, and `questions_per_scene` distinct questions. Raising the
    question count trades caption supervision for question coverage, which
    helps answer generalization when the training budget can absorb the
    extra samples. Only caption samples are retrieval-eligible.
    """
    if questions_per_scene < 1:
        raise DataError("questions_per_scene must be at least 1")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    vocab = build_vocab(lexicon_lines())
    vocab.save(out_dir / "vocab.txt")
    counts = {}
    for split, n in (("train", n_train), ("test", n_test)):
        records = []
        for i in range(n):
            scene_id = f"{split}_{i:05d}"
            scene = generate_scene(stream_rng(seed, "scene", split, i))
            image_rel = f"images/{scene_id}.ppm"
            write_ppm(out_dir / image_rel, scene.pixels)
            query, bbox = grounding_target(scene, stream_rng(seed, "grounding", split, i))
            records.extend([
                {"id": f"{scene_id}_caps", "image": image_rel, "task": "caption_short",
                 "text": short_caption(scene), "retrieval_eligible": True},
                {"id": f"{scene_id}_capl", "image": image_rel, "task": "caption_long",
                 "text": long_caption(scene), "retrieval_eligible": True},
                {"id": f"{scene_id}_gnd", "image": image_rel, "task": "grounding",
                 "text": query, "bbox_px": list(bbox), "retrieval_eligible": False},
            ])
            asked: set[str] = set()
            for k in range(questions_per_scene):
                # retry on text collisions; sparse scenes can exhaust the
                # template space, in which case the duplicate is kept
                for attempt in range(32):
                    question, answer, qtype = generate_question(
                        scene, stream_rng(seed, "question", split, i, k, attempt))
                    if question not in asked:
                        break
                asked.add(question)
                records.append(
                    {"id": f"{scene_id}_vqa{k}", "image": image_rel, "task": "vqa",
                     "text": question, "answer": answer, "question_type": qtype,
                     "retrieval_eligible": False})
        with open(out_dir / f"{split}.jsonl", "w", encoding="utf-8") as f:
            for rec in records:
                f.write(json.dumps(rec) + "\n")
        counts[split] = len(records)
    return counts


def load_split(data_dir, split: str, vocab: Vocabulary | None = None) -> list[Sample]:
    """Read one split's manifest into fully tokenized samples."""
    data_dir = Path(data_dir)
    if vocab is None:
        vocab = Vocabulary.load(data_dir / "vocab.txt")
    path = data_dir / f"{split}.jsonl"
    if not path.exists():
        raise DataError(f"missing manifest {path}")
    samples: list[Sample] = []
    seen_ids: set[str] = set()
    images: dict[str, np.ndarray] = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{line_no}: bad JSON ({e})") from e
        for key in ("id", "image", "task", "text"):
            if key not in rec:
                raise DataError(f"{path}:{line_no}: missing field {key!r}")
        if rec["id"] in seen_ids:
            raise DataError(f"{path}:{line_no}: duplicate id {rec['id']!r}")
        seen_ids.add(rec["id"])
        image_rel = rec["image"]
        if image_rel not in images:
            images[image_rel] = read_ppm(data_dir / image_rel)
        image = images[image_rel]
        task = rec["task"]
        bbox_px = tuple(rec["bbox_px"]) if rec.get("bbox_px") is not None else None
        bbox_norm = None
        if task == "grounding":
            if bbox_px is None:
                raise DataError(f"{path}:{line_no}: grounding sample without bbox_px")
            bbox_norm = normalize_bbox(bbox_px, image.shape[1], image.shape[0])
        tokens, candidates = build_sequence(
            vocab, task, rec["text"], rec.get("answer"), bbox_norm)
        eligible = bool(rec.get("retrieval_eligible", False))
        samples.append(Sample(
            id=rec["id"], image=image, task=task, text=rec["text"],
            answer=rec.get("answer"), bbox_px=bbox_px,
            retrieval_eligible=eligible,
            question_type=rec.get("question_type"),
            tokens=tokens, mask_candidates=candidates,
            retrieval_tokens=retrieval_tokens(vocab, rec["text"]) if eligible else None))
    return samples


def scene_ids(samples) -> list[str]:
    """Distinct scene ids (sample id minus the task suffix), first-seen order."""
    seen = []
    got = set()
    for s in samples:
        sid = s.id.rsplit("_", 1)[0]
        if sid not in got:
            got.add(sid)
            seen.append(sid)
    return seen


def heldout_questions(samples, seed: int) -> list[tuple]:
    """One fresh templated question per vqa scene of a split.

    Rebuilds each scene from the generation seed (verified against the
    stored image) and draws from a stream the manifest never touched,
    retrying any draw that collides with a question the scene was trained
    on. Returns (sample, question, answer, question_type) tuples; the
    sample is the scene's first vqa record, kept for its id and image.
    """
    by_scene: dict[str, list] = {}
    order: list[str] = []
    for s in samples:
        if s.task != "vqa":
            continue
        sid = s.id.rsplit("_", 1)[0]
        if sid not in by_scene:
            by_scene[sid] = []
            order.append(sid)
        by_scene[sid].append(s)
    out = []
    for sid in order:
        group = by_scene[sid]
        split, idx = sid.rsplit("_", 1)
        scene = generate_scene(stream_rng(seed, "scene", split, int(idx)))
        if not np.array_equal(scene.pixels, group[0].image):
            raise DataError(f"seed {seed} does not reproduce scene {group[0].id}")
        trained = {s.text for s in group}
        for attempt in range(64):
            q, a, t = generate_question(
                scene, stream_rng(seed, "question-heldout", split, int(idx), attempt))
            if q not in trained:
                break
        out.append((group[0], q, a, t))
    return out
