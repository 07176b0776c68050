"""Multiway transformer: one trunk, shared self-attention, modality-expert
feed-forward blocks, usable two ways.

Cross mode concatenates image patches and text tokens for masked-token
generation (text positions see the image bidirectionally but themselves only
causally); dual mode encodes a single modality and projects a pooled state
onto the shared retrieval space. The top `vl_expert_layers` blocks carry a
third fused expert that only cross mode routes through.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import stream_rng
from .tensor import (ShapeMismatch, Tensor, concat, gelu, layer_norm,
                     masked_softmax, matmul, scatter_rows, take_rows,
                     texp, transpose, unit_normalize)

LOG_TAU_INIT = float(np.log(0.07))
LOG_TAU_MIN = float(np.log(1e-3))
LOG_TAU_MAX = 0.0  # tau is capped at 1

POOL_MODES = ("cls", "mean")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    layers: int = 4
    hidden_dim: int = 64
    heads: int = 4
    image_size: int = 32
    patch_size: int = 8
    vl_expert_layers: int = 3
    max_text_len: int = 48
    proj_dim: int = 64
    pool: str = "cls"

    def __post_init__(self):
        if self.vocab_size <= 0:
            raise ValueError("vocab_size must be positive")
        if self.hidden_dim % self.heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by patch {self.patch_size}")
        if not 0 <= self.vl_expert_layers <= self.layers:
            raise ValueError("vl_expert_layers must lie in [0, layers]")
        if self.pool not in POOL_MODES:
            raise ValueError(f"pool must be one of {POOL_MODES}")

    @property
    def side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_image_tokens(self) -> int:
        return self.side * self.side + 1  # patches plus the image cls slot

    @property
    def ffn_dim(self) -> int:
        return 4 * self.hidden_dim

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size


# publication-scale reference dimensions, reported by the parameter-count utility
FULL_SCALE = dict(layers=12, hidden_dim=768, heads=12,
                  image_size=224, patch_size=16, vl_expert_layers=3)


def build_generation_mask(n_img: int, n_txt: int) -> np.ndarray:
    """Cross-mode attention mask over [image tokens | text tokens].

    Image rows attend to every image token and nothing else; text rows attend
    to all image tokens plus text positions up to and including their own.
    """
    t = n_img + n_txt
    mask = np.zeros((t, t), dtype=bool)
    mask[:n_img, :n_img] = True
    mask[n_img:, :n_img] = True
    mask[n_img:, n_img:] = np.tril(np.ones((n_txt, n_txt), dtype=bool))
    return mask


def _layer_experts(config: ModelConfig, layer: int) -> tuple[str, ...]:
    if layer >= config.layers - config.vl_expert_layers:
        return ("vision", "language", "vl")
    return ("vision", "language")


def init_params(config: ModelConfig, seed: int, dtype=np.float64) -> dict[str, Tensor]:
    """Fresh parameters in a fixed construction (and checkpoint) order."""
    rng = stream_rng(seed, "init")
    d = config.hidden_dim
    f = config.ffn_dim

    def normal(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape).astype(dtype))

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype))

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype))

    p: dict[str, Tensor] = {}
    p["embed/token"] = normal(config.vocab_size, d)
    p["embed/text_pos"] = normal(config.max_text_len, d)
    p["embed/patch_proj/w"] = normal(config.patch_dim, d)
    p["embed/patch_proj/b"] = zeros(d)
    p["embed/patch_pos_row"] = normal(config.side, d)
    p["embed/patch_pos_col"] = normal(config.side, d)
    p["embed/patch_pos_cls"] = normal(1, d)
    for layer in range(config.layers):
        base = f"block{layer}"
        p[f"{base}/ln_attn/gain"] = ones(d)
        p[f"{base}/ln_attn/bias"] = zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{base}/attn/{name}"] = normal(d, d)
        for name in ("bq", "bk", "bv", "bo"):
            p[f"{base}/attn/{name}"] = zeros(d)
        p[f"{base}/ln_ffn/gain"] = ones(d)
        p[f"{base}/ln_ffn/bias"] = zeros(d)
        for expert in _layer_experts(config, layer):
            p[f"{base}/expert_{expert}/w1"] = normal(d, f)
            p[f"{base}/expert_{expert}/b1"] = zeros(f)
            p[f"{base}/expert_{expert}/w2"] = normal(f, d)
            p[f"{base}/expert_{expert}/b2"] = zeros(d)
    p["final_norm/gain"] = ones(d)
    p["final_norm/bias"] = zeros(d)
    p["proj_image/w"] = normal(d, config.proj_dim)
    p["proj_image/b"] = zeros(config.proj_dim)
    p["proj_text/w"] = normal(d, config.proj_dim)
    p["proj_text/b"] = zeros(config.proj_dim)
    p["temperature/log_tau"] = Tensor(np.asarray(LOG_TAU_INIT, dtype=dtype))
    return p


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter total for a config (no model built)."""
    d = config.hidden_dim
    f = config.ffn_dim
    embed = (config.vocab_size * d + config.max_text_len * d
             + config.patch_dim * d + d + 2 * config.side * d + d)
    per_expert = d * f + f + f * d + d
    experts = (2 * config.layers + config.vl_expert_layers) * per_expert
    attn = config.layers * (4 * d * d + 4 * d)
    norms = config.layers * 4 * d + 2 * d
    heads = 2 * (d * config.proj_dim + config.proj_dim)
    return embed + attn + norms + experts + heads + 1


class MultiwayModel:
    """Parameter container plus the two forward modes."""

    # token-id constants mirrored from the vocabulary layout
    PAD_ID, BOS_ID, EOS_ID, MASK_ID, IMG_CLS_ID, TXT_CLS_ID = range(6)

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: ModelConfig, seed: int, dtype=np.float64) -> "MultiwayModel":
        return cls(config, init_params(config, seed, dtype))

    @property
    def dtype(self):
        return self.params["embed/token"].dtype

    def temperature(self) -> Tensor:
        return texp(self.params["temperature/log_tau"])

    def clamp_temperature(self) -> None:
        """Keep log-tau inside its box after an optimizer step."""
        p = self.params["temperature/log_tau"]
        p.data = np.clip(p.data, LOG_TAU_MIN, LOG_TAU_MAX)

    # ------------------------------------------------------------------
    # embedding assembly

    def patch_embed(self, image: np.ndarray) -> Tensor:
        """[n_image_tokens, D]: image cls slot then row-major patch tokens."""
        cfg = self.config
        if image.shape != (cfg.image_size, cfg.image_size, 3):
            raise ShapeMismatch(
                f"image must be {(cfg.image_size, cfg.image_size, 3)}, got {image.shape}")
        s, ps = cfg.side, cfg.patch_size
        pixels = np.asarray(image, dtype=self.dtype) / 255.0
        flat = (pixels.reshape(s, ps, s, ps, 3)
                .transpose(0, 2, 1, 3, 4)
                .reshape(s * s, cfg.patch_dim))
        content = matmul(Tensor(flat), self.params["embed/patch_proj/w"]) \
            + self.params["embed/patch_proj/b"]
        rows = np.repeat(np.arange(s), s)
        cols = np.tile(np.arange(s), s)
        pos = take_rows(self.params["embed/patch_pos_row"], rows) \
            + take_rows(self.params["embed/patch_pos_col"], cols)
        cls = take_rows(self.params["embed/token"], [self.IMG_CLS_ID]) \
            + self.params["embed/patch_pos_cls"]
        return concat([cls, content + pos])

    def _text_embed(self, tokens: np.ndarray) -> Tensor:
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size == 0:
            raise ShapeMismatch("token sequence must be non-empty and 1-d")
        if tokens.size > cfg.max_text_len:
            raise ShapeMismatch(
                f"text length {tokens.size} exceeds max_text_len {cfg.max_text_len}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ShapeMismatch("token id outside vocabulary")
        return take_rows(self.params["embed/token"], tokens) \
            + take_rows(self.params["embed/text_pos"], np.arange(tokens.size))

    # ------------------------------------------------------------------
    # trunk

    def _attention(self, h: Tensor, mask: np.ndarray, layer: int) -> Tensor:
        cfg = self.config
        p = self.params
        base = f"block{layer}/attn"
        t = h.shape[0]
        nh, dh = cfg.heads, cfg.hidden_dim // cfg.heads
        q = matmul(h, p[f"{base}/wq"]) + p[f"{base}/bq"]
        k = matmul(h, p[f"{base}/wk"]) + p[f"{base}/bk"]
        v = matmul(h, p[f"{base}/wv"]) + p[f"{base}/bv"]
        qh = transpose(q.reshape(t, nh, dh), (1, 0, 2))
        kh = transpose(k.reshape(t, nh, dh), (1, 0, 2))
        vh = transpose(v.reshape(t, nh, dh), (1, 0, 2))
        scores = matmul(qh, transpose(kh, (0, 2, 1))) * (1.0 / np.sqrt(dh))
        weights = masked_softmax(scores, mask[None, :, :])
        ctx = transpose(matmul(weights, vh), (1, 0, 2)).reshape(t, cfg.hidden_dim)
        return matmul(ctx, p[f"{base}/wo"]) + p[f"{base}/bo"]

    def _expert_ffn(self, x: Tensor, layer: int, expert: str) -> Tensor:
        p = self.params
        base = f"block{layer}/expert_{expert}"
        hidden = gelu(matmul(x, p[f"{base}/w1"]) + p[f"{base}/b1"])
        return matmul(hidden, p[f"{base}/w2"]) + p[f"{base}/b2"]

    def _routed_ffn(self, x: Tensor, layer: int, mode: str, n_img: int) -> Tensor:
        """Route rows to modality experts; unused experts are never touched."""
        cfg = self.config
        t = x.shape[0]
        fused = mode == "cross" and layer >= cfg.layers - cfg.vl_expert_layers
        if fused:
            return self._expert_ffn(x, layer, "vl")
        if n_img == t:
            return self._expert_ffn(x, layer, "vision")
        if n_img == 0:
            return self._expert_ffn(x, layer, "language")
        img_idx = np.arange(n_img)
        txt_idx = np.arange(n_img, t)
        img_out = self._expert_ffn(take_rows(x, img_idx), layer, "vision")
        txt_out = self._expert_ffn(take_rows(x, txt_idx), layer, "language")
        return scatter_rows(img_out, img_idx, t) + scatter_rows(txt_out, txt_idx, t)

    def _trunk(self, h: Tensor, mask: np.ndarray, mode: str, n_img: int) -> Tensor:
        p = self.params
        for layer in range(self.config.layers):
            base = f"block{layer}"
            normed = layer_norm(h, p[f"{base}/ln_attn/gain"], p[f"{base}/ln_attn/bias"])
            h = h + self._attention(normed, mask, layer)
            normed = layer_norm(h, p[f"{base}/ln_ffn/gain"], p[f"{base}/ln_ffn/bias"])
            h = h + self._routed_ffn(normed, layer, mode, n_img)
        return layer_norm(h, p["final_norm/gain"], p["final_norm/bias"])

    # ------------------------------------------------------------------
    # public forward modes

    def cross_forward(self, image: np.ndarray, tokens: np.ndarray) -> Tensor:
        """Joint forward for generation: logits [n_txt, vocab] over text slots.

        The output head is tied to the token embedding table.
        """
        img = self.patch_embed(image)
        txt = self._text_embed(tokens)
        n_img = img.shape[0]
        n_txt = txt.shape[0]
        mask = build_generation_mask(n_img, n_txt)
        h = self._trunk(concat([img, txt]), mask, "cross", n_img)
        text_states = take_rows(h, n_img + np.arange(n_txt))
        return matmul(text_states, transpose(self.params["embed/token"]))

    def _pool(self, h: Tensor) -> Tensor:
        if self.config.pool == "cls":
            return take_rows(h, [0])
        return h.mean(axis=0).reshape(1, self.config.hidden_dim)

    def encode_image(self, image: np.ndarray) -> Tensor:
        """Dual-mode image embedding: unit-norm [proj_dim] vector."""
        img = self.patch_embed(image)
        n = img.shape[0]
        h = self._trunk(img, np.ones((n, n), dtype=bool), "dual", n)
        pooled = matmul(self._pool(h), self.params["proj_image/w"]) \
            + self.params["proj_image/b"]
        return unit_normalize(pooled).reshape(self.config.proj_dim)

    def encode_text(self, tokens: np.ndarray) -> Tensor:
        """Dual-mode text embedding: unit-norm [proj_dim] vector."""
        txt = self._text_embed(tokens)
        n = txt.shape[0]
        h = self._trunk(txt, np.ones((n, n), dtype=bool), "dual", 0)
        pooled = matmul(self._pool(h), self.params["proj_text/w"]) \
            + self.params["proj_text/b"]
        return unit_normalize(pooled).reshape(self.config.proj_dim)
