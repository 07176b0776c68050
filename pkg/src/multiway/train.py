"""Two-stage training recipe.

Stage 1 warms the trunk up on box-prediction alone (every coordinate slot
masked). A separately trained contrastive-only checkpoint, grown from the
same initialization seed, supplies the retrieval flavor; the two are merged
in weight space and stage 2 trains all tasks jointly, balancing the masked
and contrastive losses with descent-rate weights refreshed each epoch.

Both stages get a fresh optimizer; checkpoints from either stage carry no
optimizer state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, checkpoint_from_model, model_from_checkpoint
from .data import DataError, apply_mask, make_batches
from .losses import (EpochLosses, TaskWeights, dwa_weights, info_nce, mlm_loss)
from .model import ModelConfig, MultiwayModel
from .optim import AdamWState, adamw_step, clip_global_norm, warmup_cosine_lr
from .rng import stream_rng
from .tensor import Tape, backward, concat, record_into, zero_grads


class NumericFailure(RuntimeError):
    """A loss stopped being finite; the run must abort."""


@dataclass(frozen=True)
class StageConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    warmup_epochs: int = 1
    seed: int = 0
    dataset: str = "all"  # task selector: all | grounding | captions | retrieval
    p_mask: float = 0.3
    gamma: float = 2.0
    grad_clip: float = 1.0
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size < 2 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size >= 2 and learning_rate must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs)")
        if not 0 < self.p_mask <= 1:
            raise ValueError("p_mask must lie in (0, 1]")
        if self.dataset not in ("all", "grounding", "captions", "retrieval"):
            raise ValueError(f"unknown dataset selector {self.dataset!r}")


def select_samples(samples, selector: str):
    if selector == "all":
        return list(samples)
    if selector == "grounding":
        return [s for s in samples if s.task == "grounding"]
    if selector == "captions":
        return [s for s in samples if s.task.startswith("caption")]
    if selector == "retrieval":
        return [s for s in samples if s.retrieval_eligible]
    raise ValueError(f"unknown dataset selector {selector!r}")


def _resolve_model(stage: StageConfig, model_config: ModelConfig | None,
                   init: Checkpoint | None, dtype) -> MultiwayModel:
    if init is not None:
        return model_from_checkpoint(init, dtype=dtype)
    if model_config is None:
        raise ValueError("either an init checkpoint or a model config is required")
    return MultiwayModel.build(model_config, seed=stage.seed, dtype=dtype)


def _run(model: MultiwayModel, samples, stage: StageConfig, *, stage_tag: str,
         use_mlm: bool, use_nce: bool, use_dwa: bool) -> list[EpochLosses]:
    if not samples:
        raise DataError(f"no samples to train on for stage {stage_tag!r}")
    params = model.params
    state = AdamWState()
    steps_per_epoch = math.ceil(len(samples) / stage.batch_size)
    total_steps = stage.epochs * steps_per_epoch
    warmup_steps = stage.warmup_epochs * steps_per_epoch
    rows: list[EpochLosses] = []
    step = 0
    for epoch in range(1, stage.epochs + 1):
        weights = (dwa_weights(rows, epoch, stage.gamma)
                   if use_dwa else TaskWeights(1.0, 1.0))
        batches = make_batches(samples, stage.batch_size,
                               stream_rng(stage.seed, "batches", stage_tag, epoch))
        epoch_mlm: list[float] = []
        epoch_nce: list[float] = []
        for batch_idx, (batch, retrieval) in enumerate(batches):
            lr = warmup_cosine_lr(step, total_steps, warmup_steps, stage.learning_rate)
            mask_rng = stream_rng(stage.seed, "masking", stage_tag, epoch, batch_idx)
            tape = Tape()
            loss = None
            with record_into(tape):
                if use_mlm:
                    per_sample = []
                    for sample in batch:
                        masked = apply_mask(
                            sample.tokens, sample.mask_candidates, stage.p_mask,
                            mask_rng, MultiwayModel.MASK_ID,
                            all_candidates=sample.task == "grounding")
                        logits = model.cross_forward(sample.image, masked.tokens)
                        per_sample.append(mlm_loss(logits, masked).reshape(1))
                    l_mlm = concat(per_sample).mean()
                    epoch_mlm.append(float(l_mlm.data))
                    loss = l_mlm * weights.mlm
                if use_nce and len(retrieval) >= 2:
                    text_rows = [model.encode_text(s.retrieval_tokens)
                                 .reshape(1, model.config.proj_dim) for s in retrieval]
                    image_rows = [model.encode_image(s.image)
                                  .reshape(1, model.config.proj_dim) for s in retrieval]
                    l_nce = info_nce(concat(text_rows), concat(image_rows),
                                     model.temperature())
                    epoch_nce.append(float(l_nce.data))
                    weighted = l_nce * weights.infonce
                    loss = weighted if loss is None else loss + weighted
            if loss is None:
                step += 1
                continue  # batch had nothing trainable (tiny retrieval slice)
            if not np.isfinite(float(loss.data)):
                raise NumericFailure(
                    f"non-finite loss in {stage_tag} at epoch {epoch}, batch {batch_idx}")
            zero_grads(params)
            backward(loss, tape)
            grads = {name: p.grad for name, p in params.items()}
            clip_global_norm(grads, stage.grad_clip)
            adamw_step(params, grads, state, lr=lr, weight_decay=stage.weight_decay)
            model.clamp_temperature()
            step += 1
        rows.append(EpochLosses(
            epoch=epoch,
            mlm=float(np.mean(epoch_mlm)) if epoch_mlm else None,
            infonce=float(np.mean(epoch_nce)) if epoch_nce else None,
            lambda_mlm=weights.mlm, lambda_infonce=weights.infonce))
    return rows


def train_stage1_vg(stage: StageConfig, samples, model_config: ModelConfig | None = None,
                    init: Checkpoint | None = None,
                    dtype=np.float64) -> tuple[Checkpoint, list[EpochLosses]]:
    """Box-prediction warm-up; expects grounding samples only."""
    bad = [s.task for s in samples if s.task != "grounding"]
    if bad:
        raise DataError(f"stage-1 warm-up takes grounding samples only, got {bad[:3]}")
    model = _resolve_model(stage, model_config, init, dtype)
    rows = _run(model, samples, stage, stage_tag="vg",
                use_mlm=True, use_nce=False, use_dwa=False)
    return checkpoint_from_model(model), rows


def train_retrieval_only(stage: StageConfig, samples, model_config: ModelConfig | None = None,
                         init: Checkpoint | None = None,
                         dtype=np.float64) -> tuple[Checkpoint, list[EpochLosses]]:
    """Contrastive-only counterpart used as the second merge operand."""
    eligible = [s for s in samples if s.retrieval_eligible]
    if len(eligible) < 2:
        raise DataError("retrieval training needs at least two eligible samples")
    model = _resolve_model(stage, model_config, init, dtype)
    rows = _run(model, eligible, stage, stage_tag="retrieval",
                use_mlm=False, use_nce=True, use_dwa=False)
    return checkpoint_from_model(model), rows


def train_stage2_multitask(stage: StageConfig, samples, model_config: ModelConfig | None = None,
                           init: Checkpoint | None = None,
                           dtype=np.float64) -> tuple[Checkpoint, list[EpochLosses]]:
    """Joint masked-token plus contrastive training with per-epoch reweighting."""
    model = _resolve_model(stage, model_config, init, dtype)
    rows = _run(model, samples, stage, stage_tag="multitask",
                use_mlm=True, use_nce=True, use_dwa=True)
    return checkpoint_from_model(model), rows
