import numpy as np
import pytest

from lexlm.model import LayerWeights, ModelConfig, ModelWeights, init_weights


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(dim=16, n_layers=2, n_heads=4, n_kv_groups=2,
                       ffn_hidden=32, vocab_size=23, max_context=64,
                       shrink_factor=4.0)


@pytest.fixture
def tiny_weights(tiny_config) -> ModelWeights:
    return init_weights(tiny_config, seed=7)


def as_float64(weights: ModelWeights) -> ModelWeights:
    """Copy of the weights at float64 for finite-difference probes."""
    from lexlm import tensor as tk

    def conv(t):
        return tk.tensor(t.data.astype(np.float64), dtype=np.float64, requires_grad=True)

    return ModelWeights(
        token_embedding=conv(weights.token_embedding),
        layers=[LayerWeights(**{f: conv(getattr(layer, f)) for f in
                                ("attn_norm", "wq", "wk", "wv", "wo",
                                 "ffn_norm", "w1", "w3", "w2")})
                for layer in weights.layers],
        final_norm=conv(weights.final_norm),
    )
