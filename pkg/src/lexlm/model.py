"""Decoder-only transformer: shrink-scaled rotary positions, grouped-query
attention, RMSNorm pre-norm, SwiGLU feed-forward, bias-free dense layers,
and input/output embeddings tied to one matrix.

Weights are immutable during forward passes and shareable across threads;
the trainer mutates them single-writer between forwards.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as tk
from .errors import ContextOverflowError
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "LayerWeights",
    "ModelWeights",
    "effective_positions",
    "rope_angles",
    "apply_rope",
    "gqa_attention",
    "forward",
    "param_count",
    "init_weights",
]


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults are the full-scale recipe;
    tests use much smaller instances."""

    dim: int = 768
    n_layers: int = 12
    n_heads: int = 12
    n_kv_groups: int = 4
    ffn_hidden: int = 2048
    vocab_size: int = 15575
    max_context: int = 8192
    rope_theta: float = 10000.0
    shrink_factor: float = 32.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.dim % self.n_heads != 0:
            raise ValueError("dim must be divisible by n_heads")
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even for rotary pairs")
        if not (1 <= self.n_kv_groups <= self.n_heads):
            raise ValueError("n_kv_groups must be in [1, n_heads]")
        if self.n_heads % self.n_kv_groups != 0:
            raise ValueError("n_heads must be divisible by n_kv_groups")
        if self.shrink_factor < 1:
            raise ValueError("shrink_factor must be >= 1")
        if self.norm_eps <= 0:
            raise ValueError("norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.n_kv_groups * self.head_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LayerWeights:
    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ffn_norm: Tensor
    w1: Tensor
    w3: Tensor
    w2: Tensor


@dataclass
class ModelWeights:
    """Named parameter set. The output projection is the same storage as
    token_embedding (weight tying): mutating one mutates the other."""

    token_embedding: Tensor
    layers: list[LayerWeights]
    final_norm: Tensor

    @property
    def output_projection(self) -> Tensor:
        return self.token_embedding

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Fixed iteration order; the tied matrix appears once."""
        params: list[tuple[str, Tensor]] = [("token_embedding", self.token_embedding)]
        for i, layer in enumerate(self.layers):
            for f in ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "w3", "w2"):
                params.append((f"layers.{i}.{f}", getattr(layer, f)))
        params.append(("final_norm", self.final_norm))
        return params

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()


def init_weights(config: ModelConfig, seed: int = 0) -> ModelWeights:
    """normal(0, 0.02) dense/embedding init; residual outputs (wo, w2)
    scaled by 1/sqrt(2*n_layers); norm gains start at 1."""
    rng = np.random.default_rng(seed)
    res_scale = 1.0 / math.sqrt(2 * max(config.n_layers, 1))

    def dense(rows: int, cols: int, scale: float = 1.0) -> Tensor:
        w = rng.normal(0.0, 0.02 * scale, size=(rows, cols))
        return tk.tensor(w, requires_grad=True)

    def gain(n: int) -> Tensor:
        return tk.tensor(np.ones(n), requires_grad=True)

    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            attn_norm=gain(config.dim),
            wq=dense(config.dim, config.dim),
            wk=dense(config.dim, config.kv_dim),
            wv=dense(config.dim, config.kv_dim),
            wo=dense(config.dim, config.dim, res_scale),
            ffn_norm=gain(config.dim),
            w1=dense(config.dim, config.ffn_hidden),
            w3=dense(config.dim, config.ffn_hidden),
            w2=dense(config.ffn_hidden, config.dim, res_scale),
        ))
    return ModelWeights(
        token_embedding=dense(config.vocab_size, config.dim),
        layers=layers,
        final_norm=gain(config.dim),
    )


def param_count(config: ModelConfig) -> int:
    """Exact parameter inventory, counting the tied matrix once."""
    per_layer = (
        config.dim                      # attn norm gain
        + config.dim * config.dim       # wq
        + 2 * config.dim * config.kv_dim  # wk, wv
        + config.dim * config.dim       # wo
        + config.dim                    # ffn norm gain
        + 2 * config.dim * config.ffn_hidden  # w1, w3
        + config.ffn_hidden * config.dim      # w2
    )
    return config.vocab_size * config.dim + config.n_layers * per_layer + config.dim


def effective_positions(position_ids: Sequence[int], shrink_factor: float) -> list[float]:
    """Divide raw position ids by the shrink factor; the results are the
    rotary angle multipliers, so positions trained far beyond the physical
    window land back inside it (e.g. 4000/16 = 250)."""
    if shrink_factor < 1:
        raise ValueError("shrink_factor must be >= 1")
    out = []
    for p in position_ids:
        if p < 0:
            raise ValueError(f"negative position id {p}")
        out.append(p / shrink_factor)
    return out


def rope_angles(positions: Sequence[float], head_dim: int, theta: float) -> np.ndarray:
    """Angle table [T, 1, head_dim/2]: angles[t, 0, i] = m_t * theta^(-2i/head_dim)."""
    if head_dim % 2 != 0:
        raise ValueError("head_dim must be even")
    pos = np.asarray(positions, dtype=np.float64)
    freqs = theta ** (-2.0 * np.arange(head_dim // 2) / head_dim)
    return np.einsum("t,i->ti", pos, freqs)[:, None, :]


def apply_rope(x: Tensor, positions: Sequence[float], theta: float) -> Tensor:
    """Rotate each head's (2i, 2i+1) pair of x [T, H, head_dim] by its
    position-dependent angle. Pair norms are preserved."""
    return tk.rotate_pairs(x, rope_angles(positions, x.shape[-1], theta))


def gqa_attention(x: Tensor, layer: LayerWeights, config: ModelConfig,
                  positions: Sequence[float] | None = None,
                  causal: bool = True) -> Tensor:
    """One attention sublayer on pre-normalized input x [T, dim].

    Projects n_heads query heads and n_kv_groups key/value heads, applies
    rotary rotation to both, runs (by default causally masked) softmax
    attention within each group, then mixes heads with wo.
    """
    t_len = x.shape[0]
    if t_len > config.max_context:
        raise ContextOverflowError(f"sequence length {t_len} > max_context {config.max_context}")
    if positions is None:
        positions = effective_positions(range(t_len), config.shrink_factor)

    q = tk.reshape(tk.matmul(x, layer.wq), (t_len, config.n_heads, config.head_dim))
    k = tk.reshape(tk.matmul(x, layer.wk), (t_len, config.n_kv_groups, config.head_dim))
    v = tk.reshape(tk.matmul(x, layer.wv), (t_len, config.n_kv_groups, config.head_dim))

    q = apply_rope(q, positions, config.rope_theta)
    k = apply_rope(k, positions, config.rope_theta)

    attended = tk.causal_attention(q, k, v, causal=causal)
    return tk.matmul(tk.reshape(attended, (t_len, config.dim)), layer.wo)


def forward(weights: ModelWeights, config: ModelConfig, token_ids: Sequence[int]) -> Tensor:
    """Logits [T, vocab] for one token sequence.

    embed -> n_layers x (x + attn(norm(x)); x + ffn(norm(x))) -> final norm
    -> tied output projection. Logits at position t depend only on ids[:t+1].
    """
    t_len = len(token_ids)
    if t_len == 0:
        raise ValueError("empty token sequence")
    if t_len > config.max_context:
        raise ContextOverflowError(f"sequence length {t_len} > max_context {config.max_context}")

    positions = effective_positions(range(t_len), config.shrink_factor)
    x = tk.embedding(weights.token_embedding, token_ids)
    for layer in weights.layers:
        h = tk.rmsnorm(x, layer.attn_norm, config.norm_eps)
        x = tk.add(x, gqa_attention(h, layer, config, positions))
        h = tk.rmsnorm(x, layer.ffn_norm, config.norm_eps)
        x = tk.add(x, tk.swiglu_ffn(h, layer.w1, layer.w3, layer.w2))
    x = tk.rmsnorm(x, weights.final_norm, config.norm_eps)
    return tk.matmul(x, tk.transpose(weights.token_embedding))
