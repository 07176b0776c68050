"""Training objectives: masked-token loss, symmetric InfoNCE, and the
dynamic task weighting that balances them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MaskedSequence
from .tensor import ShapeMismatch, Tensor, cross_entropy, matmul, transpose


def mlm_loss(logits: Tensor, masked: MaskedSequence) -> Tensor:
    """Mean negative log-likelihood of the original ids at masked slots."""
    full_targets = masked.tokens.copy()
    full_targets[masked.positions] = masked.targets
    return cross_entropy(logits, full_targets, masked.positions)


def info_nce(text_emb: Tensor, image_emb: Tensor, tau: Tensor) -> Tensor:
    """Symmetric in-batch contrastive loss over row-aligned unit embeddings.

    Row i of each matrix is a positive pair; every other row in the batch is
    a negative. Both retrieval directions contribute equally.
    """
    n = text_emb.shape[0]
    if n < 2:
        raise ShapeMismatch("info_nce needs at least two pairs")
    if text_emb.shape != image_emb.shape:
        raise ShapeMismatch(
            f"embedding shapes differ: {text_emb.shape} vs {image_emb.shape}")
    logits = matmul(text_emb, transpose(image_emb)) / tau
    diagonal = np.arange(n)
    t2i = cross_entropy(logits, diagonal, diagonal)
    i2t = cross_entropy(transpose(logits), diagonal, diagonal)
    return (t2i + i2t) * 0.5


@dataclass(frozen=True)
class TaskWeights:
    mlm: float
    infonce: float


@dataclass
class EpochLosses:
    epoch: int
    mlm: float | None
    infonce: float | None
    lambda_mlm: float
    lambda_infonce: float


def _ratio(new: float | None, old: float | None) -> float:
    # missing history (task skipped a whole epoch) and zero denominators both
    # fall back to the neutral ratio
    if new is None or old is None or old == 0.0:
        return 1.0
    return new / old


def dwa_weights(history: list[EpochLosses], epoch: int, gamma: float = 2.0,
                m: float = 2.0) -> TaskWeights:
    """Descent-rate softmax weights for (mlm, infonce), summing to m exactly.

    `epoch` is the 1-based index about to run; the first two epochs have no
    usable ratio and get the neutral weighting.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if epoch <= 2 or len(history) < 2:
        w_mlm = w_nce = 1.0
    else:
        prev, before = history[-1], history[-2]
        w_mlm = _ratio(prev.mlm, before.mlm)
        w_nce = _ratio(prev.infonce, before.infonce)
    e_mlm = float(np.exp(w_mlm / gamma))
    e_nce = float(np.exp(w_nce / gamma))
    lam_mlm = m * e_mlm / (e_mlm + e_nce)
    return TaskWeights(lam_mlm, m - lam_mlm)


def write_loss_csv(path, rows: list[EpochLosses]) -> None:
    def fmt(x):
        return "" if x is None else f"{x:.10g}"

    lines = ["epoch,l_mlm,l_infonce,lambda_mlm,lambda_infonce"]
    for r in rows:
        lines.append(f"{r.epoch},{fmt(r.mlm)},{fmt(r.infonce)},"
                     f"{fmt(r.lambda_mlm)},{fmt(r.lambda_infonce)}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
