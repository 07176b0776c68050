"""Closed vocabulary: reserved controls, single-token task prompts,
a contiguous coordinate-token block, then the corpus words.

The id layout is fixed by construction:
  0..5     <pad> <bos> <eos> <mask> <img_cls> <txt_cls>
  6..9     task prompt tokens (each a single token despite inner spaces)
  10..110  <coord_0> .. <coord_100>
  111..    corpus words, lexicographically sorted

Unknown words are a hard error: generation can only ever emit known ids, so
an out-of-vocabulary word in input text means corrupt data, not a soft case.
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

RESERVED = ("<pad>", "<bos>", "<eos>", "<mask>", "<img_cls>", "<txt_cls>")

TASK_PROMPTS = {
    "caption_short": "short caption:",
    "caption_long": "long caption:",
    "vqa": "vqa:",
    "grounding": "bounding-box:",
}

COORD_COUNT = 101  # <coord_0> .. <coord_100> inclusive


class UnknownTokenError(KeyError):
    """A word outside the closed vocabulary was encountered."""


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")
        for i, tok in enumerate(RESERVED):
            if self.tokens[i] != tok:
                raise ValueError(f"token {i} must be {tok!r}, got {self.tokens[i]!r}")
        self._coord_base = len(RESERVED) + len(TASK_PROMPTS)
        for v in range(COORD_COUNT):
            want = f"<coord_{v}>"
            got = self.tokens[self._coord_base + v]
            if got != want:
                raise ValueError(f"coordinate block broken at id {self._coord_base + v}: {got!r}")

    # fixed control ids
    pad_id = 0
    bos_id = 1
    eos_id = 2
    mask_id = 3
    img_cls_id = 4
    txt_cls_id = 5

    def __len__(self) -> int:
        return len(self.tokens)

    def prompt_id(self, task: str) -> int:
        if task not in TASK_PROMPTS:
            raise KeyError(f"unknown task {task!r}")
        return self.index[TASK_PROMPTS[task]]

    def coord_id(self, value: int) -> int:
        if not 0 <= value < COORD_COUNT:
            raise ValueError(f"coordinate value {value} outside [0, {COORD_COUNT - 1}]")
        return self._coord_base + value

    @property
    def coord_ids(self) -> range:
        return range(self._coord_base, self._coord_base + COORD_COUNT)

    def is_coord(self, token_id: int) -> bool:
        return self._coord_base <= token_id < self._coord_base + COORD_COUNT

    def coord_value(self, token_id: int) -> int:
        if not self.is_coord(token_id):
            raise ValueError(f"id {token_id} is not a coordinate token")
        return token_id - self._coord_base

    def encode_words(self, text: str) -> list[int]:
        """Tokenize plain text (whitespace words, case-folded) to ids.

        Task prompt literals are matched whole if the text starts with one.
        """
        text = text.strip().lower()
        ids: list[int] = []
        for prompt in TASK_PROMPTS.values():
            if text.startswith(prompt):
                ids.append(self.index[prompt])
                text = text[len(prompt):].strip()
                break
        for word in text.split():
            if word not in self.index:
                raise UnknownTokenError(f"word {word!r} is not in the vocabulary")
            ids.append(self.index[word])
        return ids

    def decode(self, ids: Iterable[int], skip_controls: bool = True) -> str:
        words = []
        for i in ids:
            tok = self.tokens[i]
            if skip_controls and tok in RESERVED:
                continue
            words.append(tok)
        return " ".join(words)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln != ""])


def build_vocab(corpus_lines: Iterable[str]) -> Vocabulary:
    """Assemble the fixed id layout, with corpus words sorted at the tail."""
    words: set[str] = set()
    for line in corpus_lines:
        for word in line.strip().lower().split():
            words.add(word)
    tokens = list(RESERVED)
    tokens.extend(TASK_PROMPTS.values())
    tokens.extend(f"<coord_{v}>" for v in range(COORD_COUNT))
    tokens.extend(sorted(words))
    return Vocabulary(tokens)
