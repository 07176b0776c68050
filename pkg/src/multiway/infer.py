"""Inference: greedy masked-slot decoding, single-pass box prediction,
embedding index with cosine retrieval, and prompt-based classification.

Generation appends one <mask>, takes the argmax at that slot, and repeats
until <eos>; because a text position never attends past itself, re-masking
any emitted position later reproduces the same prediction.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import MultiwayModel
from .vocab import TASK_PROMPTS, Vocabulary


class EmbeddingIndexError(ValueError):
    """Embedding index is empty, malformed, or queried out of range."""


def generate(model: MultiwayModel, vocab: Vocabulary, image: np.ndarray,
             task: str = "caption_short", prompt_text: str | None = None,
             max_len: int | None = None) -> list[int]:
    """Greedy decode; returns emitted token ids (prompt and <eos> excluded).

    prompt_text supplies the fixed textual context (a question for vqa).
    """
    seq = [vocab.txt_cls_id, vocab.prompt_id(task)]
    if prompt_text:
        seq.extend(vocab.encode_words(prompt_text))
    budget = model.config.max_text_len - len(seq) - 1
    if max_len is not None:
        budget = min(budget, max_len)
    emitted: list[int] = []
    for _ in range(budget):
        trial = np.asarray(seq + [vocab.mask_id], dtype=np.int64)
        logits = model.cross_forward(image, trial)
        next_id = int(np.argmax(logits.data[-1]))
        if next_id == vocab.eos_id:
            break
        seq.append(next_id)
        emitted.append(next_id)
    return emitted


def self_consistency_holds(model: MultiwayModel, vocab: Vocabulary, image: np.ndarray,
                           task: str, emitted: list[int],
                           prompt_text: str | None = None) -> bool:
    """Re-mask each emitted slot of the finished sequence, one at a time,
    and check the model reproduces the token it chose during decoding."""
    prefix = [vocab.txt_cls_id, vocab.prompt_id(task)]
    if prompt_text:
        prefix.extend(vocab.encode_words(prompt_text))
    full = np.asarray(prefix + emitted + [vocab.eos_id], dtype=np.int64)
    for offset, want in enumerate(emitted + [vocab.eos_id]):
        pos = len(prefix) + offset
        probe = full.copy()
        probe[pos] = vocab.mask_id
        logits = model.cross_forward(image, probe)
        if int(np.argmax(logits.data[pos])) != int(want):
            return False
    return True


def ground(model: MultiwayModel, vocab: Vocabulary, image: np.ndarray,
           query: str) -> tuple[int, int, int, int]:
    """Predict a box for a referring expression in one forward pass.

    All four coordinate slots are masked jointly (matching how grounding is
    trained); each argmax is restricted to the coordinate-token block. A
    malformed corner ordering is repaired by swapping, and a zero-extent
    side is widened one step.
    """
    prefix = [vocab.txt_cls_id, vocab.prompt_id("grounding")]
    prefix.extend(vocab.encode_words(query))
    seq = np.asarray(prefix + [vocab.mask_id] * 4 + [vocab.eos_id], dtype=np.int64)
    logits = model.cross_forward(image, seq).data
    coord_lo = vocab.coord_ids.start
    coord_hi = vocab.coord_ids.stop
    values = []
    for slot in range(4):
        row = logits[len(prefix) + slot, coord_lo:coord_hi]
        values.append(int(np.argmax(row)))
    x1, y1, x2, y2 = values
    if x1 > x2:
        x1, x2 = x2, x1
    if y1 > y2:
        y1, y2 = y2, y1
    if x1 == x2:
        x2 = x2 + 1 if x2 < 100 else x2
        x1 = x1 - 1 if x1 == x2 else x1
    if y1 == y2:
        y2 = y2 + 1 if y2 < 100 else y2
        y1 = y1 - 1 if y1 == y2 else y1
    return x1, y1, x2, y2


def answer_question(model: MultiwayModel, vocab: Vocabulary, image: np.ndarray,
                    question: str) -> str:
    """Single-word answer via greedy decoding conditioned on the question."""
    emitted = generate(model, vocab, image, task="vqa",
                       prompt_text=question, max_len=1)
    return vocab.decode(emitted) if emitted else ""


# ---------------------------------------------------------------------------
# embedding index


MIDX_MAGIC = b"MIDX"


@dataclass
class EmbeddingIndex:
    ids: list[str]
    vectors: np.ndarray  # float32 [count, dim], unit rows

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise EmbeddingIndexError(f"index vectors must be 2-d, got {self.vectors.shape}")
        if len(self.ids) != self.vectors.shape[0]:
            raise EmbeddingIndexError("id count does not match vector count")
        if len(set(self.ids)) != len(self.ids):
            raise EmbeddingIndexError("duplicate ids in index")
        if len(self.ids):
            norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
            if not np.allclose(norms, 1.0, atol=1e-4):
                raise EmbeddingIndexError("index vectors must be unit-norm")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def build_image_index(model: MultiwayModel, items) -> EmbeddingIndex:
    """items: iterable of (id, uint8 raster)."""
    ids, rows = [], []
    for item_id, image in items:
        ids.append(str(item_id))
        rows.append(model.encode_image(image).data.astype(np.float32))
    return EmbeddingIndex(ids, np.stack(rows) if rows else np.zeros((0, model.config.proj_dim)))


def build_text_index(model: MultiwayModel, items) -> EmbeddingIndex:
    """items: iterable of (id, token-id sequence)."""
    ids, rows = [], []
    for item_id, tokens in items:
        ids.append(str(item_id))
        rows.append(model.encode_text(tokens).data.astype(np.float32))
    return EmbeddingIndex(ids, np.stack(rows) if rows else np.zeros((0, model.config.proj_dim)))


def save_index(index: EmbeddingIndex, path) -> None:
    blob = bytearray()
    blob += MIDX_MAGIC
    blob += struct.pack("<I", len(index))
    blob += struct.pack("<I", index.dim)
    for item_id, row in zip(index.ids, index.vectors):
        encoded = item_id.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += np.ascontiguousarray(row, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_index(path) -> EmbeddingIndex:
    raw = Path(path).read_bytes()
    if raw[:4] != MIDX_MAGIC:
        raise EmbeddingIndexError(f"{path}: not an embedding index (bad magic)")
    pos = 4
    if len(raw) < 12:
        raise EmbeddingIndexError(f"{path}: truncated header")
    count, dim = struct.unpack_from("<II", raw, pos)
    pos += 8
    ids, rows = [], []
    for _ in range(count):
        if pos + 2 > len(raw):
            raise EmbeddingIndexError(f"{path}: truncated id length")
        (id_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        if pos + id_len + 4 * dim > len(raw):
            raise EmbeddingIndexError(f"{path}: truncated item")
        ids.append(raw[pos:pos + id_len].decode("utf-8"))
        pos += id_len
        rows.append(np.frombuffer(raw[pos:pos + 4 * dim], dtype="<f4").copy())
        pos += 4 * dim
    if pos != len(raw):
        raise EmbeddingIndexError(f"{path}: {len(raw) - pos} trailing bytes")
    vectors = np.stack(rows) if rows else np.zeros((0, dim), dtype=np.float32)
    return EmbeddingIndex(ids, vectors)


def retrieve(index: EmbeddingIndex, query: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Top-k by cosine similarity (dot product of unit vectors).

    Ties break toward the lexicographically smaller id so rankings are
    reproducible across platforms.
    """
    if len(index) == 0:
        raise EmbeddingIndexError("cannot retrieve from an empty index")
    if not 1 <= k <= len(index):
        raise EmbeddingIndexError(f"k must lie in [1, {len(index)}], got {k}")
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != index.dim:
        raise EmbeddingIndexError(f"query dim {query.shape[0]} != index dim {index.dim}")
    scores = index.vectors.astype(np.float64) @ query
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.ids[i]))
    return [(index.ids[i], float(scores[i])) for i in order[:k]]


def zero_shot_classify(model: MultiwayModel, vocab: Vocabulary, image: np.ndarray,
                       class_names: list[str],
                       template: str = "a satellite photo of {}") -> tuple[str, np.ndarray]:
    """Score classes by prompt-text similarity; first argmax wins ties."""
    if not class_names:
        raise ValueError("class_names must be non-empty")
    img = model.encode_image(image).data
    scores = np.empty(len(class_names), dtype=np.float64)
    for i, name in enumerate(class_names):
        words = vocab.encode_words(template.format(name))
        tokens = np.asarray([vocab.txt_cls_id] + words + [vocab.eos_id], dtype=np.int64)
        scores[i] = float(model.encode_text(tokens).data @ img)
    return class_names[int(np.argmax(scores))], scores
