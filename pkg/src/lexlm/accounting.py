"""Training-efficiency and environmental accounting.

Pure closed-form helpers: perplexity, throughput, model-FLOPs utilization,
and carbon footprint. The FLOPs-per-token estimate is the usual dense
forward+backward cost 6*N plus the attention-score term 12*L*dim*seq_len;
both pieces are documented here so the accounting is auditable rather than
falsely precise. No shared state anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .model import ModelConfig, param_count

__all__ = [
    "RunAccounting",
    "perplexity",
    "flops_per_token",
    "mfu",
    "carbon",
    "throughput",
    "CARBON_INTENSITY",
]

# tCO2eq per MWh of the reference grid mix.
CARBON_INTENSITY = 0.385


@dataclass
class RunAccounting:
    """Inputs and derived figures for one run's efficiency report."""

    mean_loss: float = 0.0
    tokens_per_sec: float = 0.0
    flops_per_token: float = 0.0
    peak_flops: float = 0.0
    gpu_hours: float = 0.0
    gpu_power_watts: float = 0.0
    pue: float = 1.0
    carbon_intensity: float = CARBON_INTENSITY

    def __post_init__(self):
        if self.pue < 1:
            raise ValueError("PUE cannot be below 1")
        for name in ("tokens_per_sec", "flops_per_token", "peak_flops",
                     "gpu_hours", "gpu_power_watts", "carbon_intensity"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def perplexity(mean_loss: float) -> float:
    """exp of the mean per-token negative log-likelihood."""
    if not math.isfinite(mean_loss):
        raise ValueError("mean loss must be finite")
    return math.exp(mean_loss)


def flops_per_token(config: ModelConfig, seq_len: int | None = None) -> float:
    """6*N dense cost plus 12*n_layers*dim*seq_len attention-score cost.

    seq_len defaults to the model's max context; the trainer passes its
    actual training sequence length.
    """
    if seq_len is None:
        seq_len = config.max_context
    return 6.0 * param_count(config) + 12.0 * config.n_layers * config.dim * seq_len


def mfu(tokens_per_sec: float, flops_per_token: float, peak_flops: float) -> float:
    """Achieved fraction of hardware peak FLOPs, as a percentage."""
    if peak_flops <= 0:
        raise ValueError("peak_flops must be positive")
    return 100.0 * tokens_per_sec * flops_per_token / peak_flops


def carbon(gpu_hours: float, power_watts: float, pue: float,
           intensity: float = CARBON_INTENSITY) -> tuple[float, float]:
    """(kWh, tCO2eq) for a run: energy = hours * watts * PUE, emissions =
    MWh * intensity."""
    if gpu_hours < 0 or power_watts < 0 or intensity < 0:
        raise ValueError("inputs must be nonnegative")
    if pue < 1:
        raise ValueError("PUE cannot be below 1")
    kwh = gpu_hours * power_watts * pue / 1000.0
    tco2eq = kwh / 1000.0 * intensity
    return kwh, tco2eq


def throughput(token_count: int, elapsed_seconds: float) -> float:
    """Tokens per second."""
    if elapsed_seconds <= 0:
        raise ValueError("elapsed time must be positive")
    return token_count / elapsed_seconds
