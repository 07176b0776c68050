"""Sequence assembly, masking, box normalization, and manifest round trips."""
import json

import numpy as np
import pytest

from multiway.data import (COORD_STEPS, DataError, apply_mask, build_sequence,
                           generate_dataset, heldout_questions, load_split,
                           make_batches, normalize_bbox, retrieval_tokens,
                           scene_ids)
from multiway.rng import stream_rng
from multiway.scenes import generate_question, generate_scene, lexicon_lines
from multiway.vocab import Vocabulary, build_vocab


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(lexicon_lines())


# ---------------------------------------------------------------------------
# box normalization


def test_normalize_bbox_worked_example():
    assert normalize_bbox((3, 5, 17, 29), 32, 32) == (9, 16, 53, 91)


def test_normalize_bbox_full_frame():
    assert normalize_bbox((0, 0, 32, 32), 32, 32) == (0, 0, 100, 100)


def test_normalize_bbox_rounds_half_up():
    # 100 * 1 / 200 = 0.5 exactly; half-up gives 1, not banker's 0
    assert normalize_bbox((1, 1, 100, 100), 200, 200) == (1, 1, 50, 50)
    # 100 * 3 / 200 = 1.5 exactly
    assert normalize_bbox((3, 3, 100, 100), 200, 200)[0] == 2


def test_normalize_bbox_widens_degenerate_low():
    got = normalize_bbox((100, 100, 101, 101), 20000, 20000)
    assert got == (1, 1, 2, 2)


def test_normalize_bbox_widens_degenerate_at_top():
    got = normalize_bbox((9999, 9999, 10000, 10000), 10000, 10000)
    assert got == (99, 99, 100, 100)


def test_normalize_bbox_rejects_bad_boxes():
    with pytest.raises(DataError):
        normalize_bbox((5, 5, 5, 9), 32, 32)  # zero width
    with pytest.raises(DataError):
        normalize_bbox((-1, 0, 8, 8), 32, 32)
    with pytest.raises(DataError):
        normalize_bbox((0, 0, 33, 8), 32, 32)


def test_normalize_bbox_output_in_range():
    rng = np.random.default_rng(0)
    for _ in range(200):
        x1 = int(rng.integers(0, 31))
        y1 = int(rng.integers(0, 31))
        x2 = int(rng.integers(x1 + 1, 33))
        y2 = int(rng.integers(y1 + 1, 33))
        nx1, ny1, nx2, ny2 = normalize_bbox((x1, y1, x2, y2), 32, 32)
        assert 0 <= nx1 < nx2 <= COORD_STEPS
        assert 0 <= ny1 < ny2 <= COORD_STEPS


# ---------------------------------------------------------------------------
# sequence assembly


def test_caption_sequence_layout(vocab):
    ids, cand = build_sequence(vocab, "caption_short", "one red square")
    words = vocab.encode_words("one red square")
    assert ids[0] == vocab.txt_cls_id
    assert ids[1] == vocab.prompt_id("caption_short")
    assert list(ids[2:2 + len(words)]) == words
    assert ids[-1] == vocab.eos_id
    # every word and the closing <eos> is maskable; cls and prompt are not
    assert list(cand) == list(range(2, len(ids)))


def test_vqa_sequence_layout(vocab):
    ids, cand = build_sequence(vocab, "vqa", "is there a red square", answer="yes")
    assert ids[1] == vocab.prompt_id("vqa")
    assert ids[-2] == vocab.encode_words("yes")[0]
    assert ids[-1] == vocab.eos_id
    # question words are maskable alongside the answer and <eos>
    assert list(cand) == list(range(2, len(ids)))


def test_vqa_answer_slot_oracle(vocab):
    # single-token answers pin the question/answer boundary at length-2
    for i in range(100):
        scene = generate_scene(stream_rng(99, "scene", "oracle", i))
        question, answer, _ = generate_question(scene, stream_rng(99, "q", i))
        ids, _ = build_sequence(vocab, "vqa", question, answer=answer)
        assert ids[-2] == vocab.encode_words(answer)[0]
        assert ids[-1] == vocab.eos_id


def test_grounding_sequence_layout(vocab):
    ids, cand = build_sequence(vocab, "grounding", "the red square",
                               bbox_norm=(9, 16, 53, 91))
    assert ids[1] == vocab.prompt_id("grounding")
    coords = ids[-5:-1]
    assert [vocab.coord_value(int(t)) for t in coords] == [9, 16, 53, 91]
    assert ids[-1] == vocab.eos_id
    # exactly the four coordinate slots, never the words or <eos>
    assert list(cand) == [len(ids) - 5, len(ids) - 4, len(ids) - 3, len(ids) - 2]


def test_build_sequence_errors(vocab):
    with pytest.raises(DataError):
        build_sequence(vocab, "translation", "hi")
    with pytest.raises(DataError):
        build_sequence(vocab, "vqa", "is there a red square")  # no answer
    with pytest.raises(DataError):
        build_sequence(vocab, "vqa", "how many squares are there",
                       answer="two squares")  # multi-token answer
    with pytest.raises(DataError):
        build_sequence(vocab, "grounding", "the red square")  # no box


def test_retrieval_tokens_have_no_prompt(vocab):
    toks = retrieval_tokens(vocab, "one red square")
    assert toks[0] == vocab.txt_cls_id
    assert toks[-1] == vocab.eos_id
    prompt_ids = {vocab.prompt_id(t) for t in
                  ("caption_short", "caption_long", "vqa", "grounding")}
    assert not prompt_ids.intersection(toks.tolist())


# ---------------------------------------------------------------------------
# masking


def test_apply_mask_masks_at_least_one(vocab):
    ids, cand = build_sequence(vocab, "caption_short", "one red square")
    rng = stream_rng(0, "mask")
    masked = apply_mask(ids, cand, p_mask=0.0, rng=rng, mask_id=vocab.mask_id)
    assert masked.positions.size == 1
    assert masked.tokens[masked.positions[0]] == vocab.mask_id


def test_apply_mask_all_candidates(vocab):
    ids, cand = build_sequence(vocab, "grounding", "the red square",
                               bbox_norm=(9, 16, 53, 91))
    masked = apply_mask(ids, cand, p_mask=0.3, rng=stream_rng(0, "m"),
                        mask_id=vocab.mask_id, all_candidates=True)
    assert list(masked.positions) == list(cand)
    assert (masked.tokens[cand] == vocab.mask_id).all()
    assert [vocab.coord_value(int(t)) for t in masked.targets] == [9, 16, 53, 91]


def test_apply_mask_preserves_input_and_targets(vocab):
    ids, cand = build_sequence(vocab, "caption_long",
                               "a satellite photo of a red square in the top left")
    before = ids.copy()
    masked = apply_mask(ids, cand, p_mask=0.5, rng=stream_rng(3, "m"),
                        mask_id=vocab.mask_id)
    assert (ids == before).all()  # input untouched
    assert (masked.targets == before[masked.positions]).all()
    untouched = np.setdiff1d(np.arange(len(ids)), masked.positions)
    assert (masked.tokens[untouched] == before[untouched]).all()


def test_apply_mask_deterministic(vocab):
    ids, cand = build_sequence(vocab, "caption_short", "two blue circles")
    a = apply_mask(ids, cand, 0.4, stream_rng(7, "m"), vocab.mask_id)
    b = apply_mask(ids, cand, 0.4, stream_rng(7, "m"), vocab.mask_id)
    assert (a.tokens == b.tokens).all()
    assert (a.positions == b.positions).all()


def test_apply_mask_rejects_empty_candidates(vocab):
    ids, _ = build_sequence(vocab, "caption_short", "one red square")
    with pytest.raises(DataError):
        apply_mask(ids, np.array([], dtype=np.int64), 0.3,
                   stream_rng(0, "m"), vocab.mask_id)


# ---------------------------------------------------------------------------
# batching


def _toy_samples(vocab, n):
    out = []
    for i in range(n):
        ids, cand = build_sequence(vocab, "caption_short", "one red square")
        from multiway.data import Sample
        out.append(Sample(id=f"s{i:03d}", image=np.zeros((32, 32, 3), np.uint8),
                          task="caption_short", text="one red square",
                          retrieval_eligible=(i % 2 == 0), tokens=ids,
                          mask_candidates=cand))
    return out


def test_make_batches_partition(vocab):
    samples = _toy_samples(vocab, 10)
    batches = make_batches(samples, 4, stream_rng(0, "b"))
    sizes = [len(b) for b, _ in batches]
    assert sizes == [4, 4, 2]
    seen = [s.id for b, _ in batches for s in b]
    assert sorted(seen) == sorted(s.id for s in samples)


def test_make_batches_retrieval_subset(vocab):
    samples = _toy_samples(vocab, 8)
    for batch, retrieval in make_batches(samples, 4, stream_rng(1, "b")):
        want = [s for s in batch if s.retrieval_eligible]
        assert [s.id for s in retrieval] == [s.id for s in want]


def test_make_batches_shuffles_and_is_seeded(vocab):
    samples = _toy_samples(vocab, 16)
    a = [[s.id for s in b] for b, _ in make_batches(samples, 4, stream_rng(2, "b"))]
    b = [[s.id for s in b] for b, _ in make_batches(samples, 4, stream_rng(2, "b"))]
    c = [[s.id for s in b] for b, _ in make_batches(samples, 4, stream_rng(3, "b"))]
    assert a == b
    assert a != c


def test_make_batches_rejects_tiny_batch(vocab):
    with pytest.raises(DataError):
        make_batches(_toy_samples(vocab, 4), 1, stream_rng(0, "b"))


# ---------------------------------------------------------------------------
# dataset generation and loading


def test_generate_and_load_round_trip(tmp_path):
    counts = generate_dataset(tmp_path, n_train=6, n_test=2, seed=123)
    assert counts == {"train": 24, "test": 8}
    vocab = Vocabulary.load(tmp_path / "vocab.txt")
    samples = load_split(tmp_path, "train", vocab)
    assert len(samples) == 24
    by_task = {}
    for s in samples:
        by_task.setdefault(s.task, []).append(s)
    assert {k: len(v) for k, v in by_task.items()} == {
        "caption_short": 6, "caption_long": 6, "vqa": 6, "grounding": 6}
    for s in samples:
        assert s.tokens is not None and s.mask_candidates.size > 0
        assert s.image.shape == (32, 32, 3)
        if s.retrieval_eligible:
            assert s.retrieval_tokens is not None
        else:
            assert s.retrieval_tokens is None
        if s.task == "vqa":
            assert s.question_type in ("presence", "count", "compare")
        if s.task == "grounding":
            assert s.bbox_px is not None
    assert len(scene_ids(samples)) == 6


def test_generate_dataset_is_deterministic(tmp_path):
    generate_dataset(tmp_path / "a", n_train=4, n_test=1, seed=9)
    generate_dataset(tmp_path / "b", n_train=4, n_test=1, seed=9)
    a = (tmp_path / "a" / "train.jsonl").read_text()
    b = (tmp_path / "b" / "train.jsonl").read_text()
    assert a == b


def test_samples_share_cached_image(tmp_path):
    generate_dataset(tmp_path, n_train=3, n_test=1, seed=5)
    samples = load_split(tmp_path, "train")
    by_scene = {}
    for s in samples:
        by_scene.setdefault(s.id.rsplit("_", 1)[0], []).append(s)
    for group in by_scene.values():
        first = group[0].image
        for s in group[1:]:
            assert s.image is first


def test_load_split_missing_manifest(tmp_path):
    generate_dataset(tmp_path, n_train=2, n_test=1, seed=1)
    with pytest.raises(DataError):
        load_split(tmp_path, "validation")


def _corrupt_line(tmp_path, mutate):
    generate_dataset(tmp_path, n_train=2, n_test=1, seed=2)
    path = tmp_path / "train.jsonl"
    lines = path.read_text().splitlines()
    lines = mutate(lines)
    path.write_text("\n".join(lines) + "\n")


def test_load_split_rejects_bad_json(tmp_path):
    _corrupt_line(tmp_path, lambda ls: ls[:1] + ["{not json"] + ls[2:])
    with pytest.raises(DataError, match="bad JSON"):
        load_split(tmp_path, "train")


def test_load_split_rejects_duplicate_ids(tmp_path):
    _corrupt_line(tmp_path, lambda ls: ls + [ls[0]])
    with pytest.raises(DataError, match="duplicate id"):
        load_split(tmp_path, "train")


def test_load_split_rejects_missing_field(tmp_path):
    def drop_text(lines):
        rec = json.loads(lines[0])
        del rec["text"]
        return [json.dumps(rec)] + lines[1:]
    _corrupt_line(tmp_path, drop_text)
    with pytest.raises(DataError, match="missing field"):
        load_split(tmp_path, "train")


def test_load_split_rejects_grounding_without_box(tmp_path):
    def drop_box(lines):
        out = []
        for ln in lines:
            rec = json.loads(ln)
            if rec["task"] == "grounding":
                rec.pop("bbox_px", None)
            out.append(json.dumps(rec))
        return out
    _corrupt_line(tmp_path, drop_box)
    with pytest.raises(DataError, match="grounding sample without bbox_px"):
        load_split(tmp_path, "train")


def test_grounding_tokens_encode_normalized_box(tmp_path):
    generate_dataset(tmp_path, n_train=4, n_test=1, seed=11)
    vocab = Vocabulary.load(tmp_path / "vocab.txt")
    for s in load_split(tmp_path, "train", vocab):
        if s.task != "grounding":
            continue
        want = normalize_bbox(s.bbox_px, 32, 32)
        got = tuple(vocab.coord_value(int(t)) for t in s.tokens[s.mask_candidates])
        assert got == want


def test_questions_per_scene_are_distinct(tmp_path):
    generate_dataset(tmp_path, n_train=6, n_test=1, seed=17, questions_per_scene=3)
    samples = load_split(tmp_path, "train")
    by_scene = {}
    for s in samples:
        if s.task == "vqa":
            by_scene.setdefault(s.id.rsplit("_", 1)[0], []).append(s.text)
    assert all(len(texts) == 3 for texts in by_scene.values())
    distinct = sum(len(set(texts)) == 3 for texts in by_scene.values())
    assert distinct >= 5  # collisions allowed only when templates run dry


def test_questions_per_scene_validation(tmp_path):
    counts = generate_dataset(tmp_path / "two", 2, 1, seed=3, questions_per_scene=2)
    assert counts == {"train": 10, "test": 5}
    with pytest.raises(DataError, match="at least 1"):
        generate_dataset(tmp_path / "zero", 2, 1, seed=3, questions_per_scene=0)


def test_heldout_questions_are_fresh_and_deterministic(tmp_path):
    generate_dataset(tmp_path, n_train=8, n_test=2, seed=11)
    samples = load_split(tmp_path, "train")
    trained = {}
    for s in samples:
        if s.task == "vqa":
            trained.setdefault(s.id.rsplit("_", 1)[0], set()).add(s.text)
    first = heldout_questions(samples, seed=11)
    again = heldout_questions(samples, seed=11)
    assert len(first) == 8  # one per scene, not one per vqa sample
    assert first == again
    for s, question, answer, qtype in first:
        assert s.task == "vqa"
        assert question not in trained[s.id.rsplit("_", 1)[0]]
        assert qtype in ("presence", "count", "compare")
        assert answer


def test_heldout_questions_reject_wrong_seed(tmp_path):
    generate_dataset(tmp_path, n_train=2, n_test=1, seed=11)
    samples = load_split(tmp_path, "train")
    with pytest.raises(DataError, match="does not reproduce"):
        heldout_questions(samples, seed=12)
