"""Pretraining and instruction fine-tuning loops.

AdamW with decoupled weight decay (norm gains and the tied embedding are
never decayed), global-norm gradient clipping, linear warmup followed by a
cosine/constant/linear schedule, gradient accumulation normalized by the
total token count of the whole iteration (which makes accumulation exactly
equivalent to one large batch), JSON-lines metrics, and a binary
checkpoint format that round-trips training bit-identically.

All shuffling is a pure function of (seed, epoch), so resuming from a
checkpoint replays the identical data order. The optimizer step is
single-writer over the weights.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import accounting
from . import tensor as tk
from .errors import FormatError, NumericError
from .model import ModelConfig, ModelWeights, forward, init_weights
from .tensor import Tensor, no_grad

__all__ = [
    "TrainPlan",
    "TrainState",
    "FinetuneExample",
    "FinetuneResult",
    "RunSink",
    "lr_at",
    "clip_gradients",
    "adamw_step",
    "pretrain",
    "finetune",
    "evaluate_loss",
    "save_checkpoint",
    "load_checkpoint",
]

IGNORE_INDEX = -1
ADAM_EPS = 1e-8
CHECKPOINT_MAGIC = b"AYN1"

# A100-class dense peak, used only to scale MFU records.
DEFAULT_PEAK_FLOPS = 312e12


@dataclass
class TrainPlan:
    """Schedule and optimizer constants. Defaults are the full-scale
    pretraining recipe; `finetuning()` gives the instruction-tuning one."""

    max_lr: float = 0.003
    min_lr: float = 3e-4
    warmup_steps: int = 1000
    lr_decay_steps: int = 100_000
    batch_size: int = 8
    grad_accum_steps: int = 8
    seq_len: int = 8192
    grad_clip_norm: float = 1.0
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    scheduler_kind: str = "cosine"
    epochs: int = 1
    mask_prompt: bool = False

    def __post_init__(self):
        if self.warmup_steps >= self.lr_decay_steps:
            raise ValueError("warmup_steps must be below lr_decay_steps")
        if self.scheduler_kind not in ("cosine", "constant", "linear"):
            raise ValueError(f"unknown scheduler kind {self.scheduler_kind!r}")
        if self.min_lr > self.max_lr:
            raise ValueError("min_lr must not exceed max_lr")

    @property
    def tokens_per_iteration(self) -> int:
        return self.batch_size * self.grad_accum_steps * self.seq_len

    @classmethod
    def pretraining(cls, **overrides) -> "TrainPlan":
        plan = cls(**overrides)
        if not math.isclose(plan.min_lr, 0.1 * plan.max_lr, rel_tol=1e-9):
            raise ValueError("pretraining wants min_lr == 0.1 * max_lr")
        return plan

    @classmethod
    def finetuning(cls, **overrides) -> "TrainPlan":
        base = dict(max_lr=2e-5, min_lr=2e-6, warmup_steps=1, lr_decay_steps=2,
                    batch_size=8, grad_accum_steps=1, seq_len=8192,
                    weight_decay=0.0, scheduler_kind="cosine", epochs=3)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        return cls(**d)


@dataclass
class TrainState:
    """Optimizer moments plus everything needed to resume a run exactly."""

    step: int
    rng_seed: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    loss_window: list[float] = field(default_factory=list)

    LOSS_WINDOW = 100

    @classmethod
    def new(cls, weights: ModelWeights, seed: int) -> "TrainState":
        m = {name: np.zeros_like(p.data) for name, p in weights.named_parameters()}
        v = {name: np.zeros_like(p.data) for name, p in weights.named_parameters()}
        return cls(step=0, rng_seed=seed, m=m, v=v)

    def push_loss(self, loss: float) -> None:
        self.loss_window.append(loss)
        if len(self.loss_window) > self.LOSS_WINDOW:
            del self.loss_window[0]


@dataclass
class FinetuneExample:
    ids: list[int]
    prompt_len: int


@dataclass
class FinetuneResult:
    val_loss: float | None
    steps: int
    visit_counts: np.ndarray


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def lr_at(plan: TrainPlan, t: int) -> float:
    """Learning rate at optimizer step t (linear warmup, then the plan's
    scheduler kind decaying toward min_lr until lr_decay_steps)."""
    if t < 0:
        raise ValueError("negative step")
    if t < plan.warmup_steps:
        return plan.max_lr * t / plan.warmup_steps
    if t >= plan.lr_decay_steps:
        return plan.min_lr if plan.scheduler_kind != "constant" else plan.max_lr
    if plan.scheduler_kind == "constant":
        return plan.max_lr
    ratio = (t - plan.warmup_steps) / (plan.lr_decay_steps - plan.warmup_steps)
    if plan.scheduler_kind == "linear":
        return plan.max_lr + (plan.min_lr - plan.max_lr) * ratio
    return plan.min_lr + 0.5 * (1.0 + math.cos(math.pi * ratio)) * (plan.max_lr - plan.min_lr)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def decay_applies(name: str) -> bool:
    """Norm gains and the tied embedding are excluded from weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return not (leaf.endswith("norm") or leaf == "token_embedding")


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most
    max_norm; returns the pre-clip global norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = math.sqrt(total)
    if not math.isfinite(norm):
        raise NumericError("gradient norm is not finite")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adamw_step(state: TrainState, params: dict[str, Tensor],
               grads: dict[str, np.ndarray], lr: float, plan: TrainPlan) -> None:
    """One decoupled-weight-decay Adam update; increments state.step."""
    t = state.step + 1
    bc1 = 1.0 - plan.beta1 ** t
    bc2 = 1.0 - plan.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= plan.beta1
        m += (1.0 - plan.beta1) * g
        v *= plan.beta2
        v += (1.0 - plan.beta2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if plan.weight_decay and decay_applies(name):
            update = update + plan.weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype)
    state.step = t


# ---------------------------------------------------------------------------
# run output sink
# ---------------------------------------------------------------------------


class RunSink:
    """Writes the metrics JSON-lines stream and rolling checkpoint for a
    run directory. Checkpoints replace atomically, so an aborted step
    leaves the last good checkpoint on disk."""

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.metrics_path = self.out_dir / "metrics.jsonl"
        self.checkpoint_path = self.out_dir / "checkpoint.ayn"
        self._metrics_fh = open(self.metrics_path, "a", encoding="utf-8")

    def metrics(self, record: dict) -> None:
        self._metrics_fh.write(json.dumps(record) + "\n")
        self._metrics_fh.flush()

    def checkpoint(self, weights, config, plan, state) -> None:
        tmp = self.checkpoint_path.with_suffix(".tmp")
        save_checkpoint(tmp, weights, config, plan, state)
        tmp.replace(self.checkpoint_path)

    def close(self) -> None:
        self._metrics_fh.close()


# ---------------------------------------------------------------------------
# data order
# ---------------------------------------------------------------------------


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng((seed, epoch)).permutation(n)


class _ShuffledStream:
    """Maps a flat sample index to an item, reshuffling once per epoch with
    a seeded generator; pure in (seed, index) so resume replays exactly."""

    def __init__(self, items: Sequence, seed: int):
        self.items = items
        self.seed = seed
        self._epoch = -1
        self._order: np.ndarray | None = None

    def __getitem__(self, index: int):
        epoch, offset = divmod(index, len(self.items))
        if epoch != self._epoch:
            self._order = _epoch_order(len(self.items), self.seed, epoch)
            self._epoch = epoch
        return self.items[int(self._order[offset])]


# ---------------------------------------------------------------------------
# loss over one micro-batch
# ---------------------------------------------------------------------------


def _backward_window(weights: ModelWeights, config: ModelConfig,
                     inputs: Sequence[int], targets: Sequence[int]) -> tuple[float, int]:
    """Forward + backward one sequence; accumulates sum-NLL gradients into
    the parameter grad buffers. Returns (sum_nll, token_count)."""
    logits = forward(weights, config, inputs)
    loss = tk.cross_entropy(logits, targets, ignore_index=IGNORE_INDEX)
    loss.backward(scale=float(loss.token_count))
    return loss.mean_nll * loss.token_count, loss.token_count


def evaluate_loss(weights: ModelWeights, config: ModelConfig,
                  windows: Iterable[tuple[Sequence[int], Sequence[int]]]) -> float:
    """Mean NLL (nats/token) over the given windows, no gradients."""
    total_nll = 0.0
    total_tokens = 0
    with no_grad():
        for inputs, targets in windows:
            logits = forward(weights, config, inputs)
            loss = tk.cross_entropy(logits, targets, ignore_index=IGNORE_INDEX)
            total_nll += loss.mean_nll * loss.token_count
            total_tokens += loss.token_count
    if total_tokens == 0:
        raise ValueError("no evaluable tokens")
    return total_nll / total_tokens


def _run_steps(weights: ModelWeights, config: ModelConfig, plan: TrainPlan,
               state: TrainState, max_steps: int,
               batch_for_step: Callable[[int], list[tuple[Sequence[int], Sequence[int]]]],
               sink: RunSink | None, val_loader: Callable[[], float] | None,
               eval_interval: int, checkpoint_interval: int,
               peak_flops: float) -> None:
    params = dict(weights.named_parameters())
    flops_token = accounting.flops_per_token(config, plan.seq_len)

    while state.step < max_steps:
        t0 = time.perf_counter()
        weights.zero_grad()
        iter_nll = 0.0
        iter_tokens = 0
        for inputs, targets in batch_for_step(state.step):
            sum_nll, n_tok = _backward_window(weights, config, inputs, targets)
            iter_nll += sum_nll
            iter_tokens += n_tok
        grads = {}
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            g /= iter_tokens
            grads[name] = g
        grad_norm = clip_gradients(grads, plan.grad_clip_norm)
        lr = lr_at(plan, state.step + 1)
        adamw_step(state, params, grads, lr, plan)

        elapsed = time.perf_counter() - t0
        loss = iter_nll / iter_tokens
        state.push_loss(loss)
        if sink is not None:
            tps = accounting.throughput(plan.tokens_per_iteration, elapsed)
            sink.metrics({
                "step": state.step,
                "loss": loss,
                "lr": lr,
                "grad_norm": grad_norm,
                "tokens_per_sec": tps,
                "mfu": accounting.mfu(tps, flops_token, peak_flops),
            })
            if val_loader is not None and state.step % eval_interval == 0:
                val_loss = val_loader()
                sink.metrics({
                    "step": state.step,
                    "val_loss": val_loss,
                    "perplexity": accounting.perplexity(val_loss),
                })
            if state.step % checkpoint_interval == 0:
                sink.checkpoint(weights, config, plan, state)
    if sink is not None:
        sink.checkpoint(weights, config, plan, state)


def pretrain(weights: ModelWeights, config: ModelConfig,
             windows: Sequence[tuple[Sequence[int], Sequence[int]]],
             plan: TrainPlan, *, seed: int = 0, state: TrainState | None = None,
             sink: RunSink | None = None,
             val_windows: Sequence[tuple[Sequence[int], Sequence[int]]] | None = None,
             max_steps: int | None = None, eval_interval: int = 50,
             checkpoint_interval: int = 100,
             peak_flops: float = DEFAULT_PEAK_FLOPS) -> TrainState:
    """Run optimizer steps over packed (inputs, targets) windows.

    Each step accumulates gradients over grad_accum_steps micro-batches of
    batch_size windows, normalizes by the iteration's total non-ignored
    token count, clips, and applies AdamW at lr_at(step). Window order
    reshuffles every epoch from the seed. Emits loss / lr / grad_norm /
    tokens_per_sec / mfu records per step, validation loss and perplexity
    every eval_interval, and a rolling checkpoint. A NumericError aborts
    the run with the last good checkpoint still on disk.
    """
    if not windows:
        raise ValueError("no training windows")
    if state is None:
        state = TrainState.new(weights, seed)
    stream = _ShuffledStream(windows, state.rng_seed)
    per_iter = plan.batch_size * plan.grad_accum_steps

    def batch_for_step(step: int):
        return [stream[step * per_iter + j] for j in range(per_iter)]

    val_loader = None
    if val_windows:
        val_loader = lambda: evaluate_loss(weights, config, val_windows)
    _run_steps(weights, config, plan, state,
               max_steps if max_steps is not None else plan.lr_decay_steps,
               batch_for_step, sink, val_loader,
               eval_interval, checkpoint_interval, peak_flops)
    return state


def finetune(weights: ModelWeights, config: ModelConfig,
             examples: Sequence[FinetuneExample], plan: TrainPlan, *,
             seed: int = 0, warmup_ratio: float = 0.05,
             val_examples: Sequence[FinetuneExample] | None = None,
             sink: RunSink | None = None,
             peak_flops: float = DEFAULT_PEAK_FLOPS) -> FinetuneResult:
    """Full-parameter supervised fine-tuning for plan.epochs epochs.

    Each epoch visits every example exactly once in a seeded shuffled
    order (the final iteration of an epoch may be smaller). Warmup spans
    round(warmup_ratio * total_steps) and the decay horizon is the whole
    run. Loss covers the full sequence unless plan.mask_prompt is set, in
    which case prompt positions are ignored. Returns the validation loss
    for scheduler-kind selection.
    """
    if not examples:
        raise ValueError("no fine-tuning examples")
    n = len(examples)
    per_iter = plan.batch_size * plan.grad_accum_steps
    steps_per_epoch = math.ceil(n / per_iter)
    total_steps = plan.epochs * steps_per_epoch
    warmup = int(round(warmup_ratio * total_steps))
    eff_plan = dataclasses.replace(
        plan, warmup_steps=warmup, lr_decay_steps=max(total_steps, warmup + 1))
    state = TrainState.new(weights, seed)
    visit_counts = np.zeros(n, dtype=np.int64)

    def window_of(ex: FinetuneExample):
        inputs = ex.ids[:-1]
        targets = list(ex.ids[1:])
        if plan.mask_prompt:
            cut = min(max(ex.prompt_len - 1, 0), len(targets))
            for i in range(cut):
                targets[i] = IGNORE_INDEX
        return inputs, targets

    def batch_for_step(step: int):
        epoch, chunk = divmod(step, steps_per_epoch)
        order = _epoch_order(n, seed, epoch)
        picked = order[chunk * per_iter:(chunk + 1) * per_iter]
        for i in picked:
            visit_counts[int(i)] += 1
        return [window_of(examples[int(i)]) for i in picked]

    _run_steps(weights, config, eff_plan, state, total_steps,
               batch_for_step, sink, None, 1, max(total_steps, 1), peak_flops)

    val_loss = None
    if val_examples:
        val_loss = evaluate_loss(weights, config, [window_of(ex) for ex in val_examples])
    return FinetuneResult(val_loss=val_loss, steps=state.step, visit_counts=visit_counts)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def _tensor_entries(weights: ModelWeights, state: TrainState) -> list[tuple[str, np.ndarray]]:
    entries = [(name, p.data) for name, p in weights.named_parameters()]
    entries += [(f"adam_m.{name}", arr) for name, arr in state.m.items()]
    entries += [(f"adam_v.{name}", arr) for name, arr in state.v.items()]
    return entries


def save_checkpoint(path: str | Path, weights: ModelWeights, config: ModelConfig,
                    plan: TrainPlan, state: TrainState) -> None:
    """Binary layout: magic "AYN1", u32 little-endian header length, UTF-8
    JSON header, then raw little-endian float32 payloads in directory order."""
    entries = _tensor_entries(weights, state)
    directory = []
    offset = 0
    for name, arr in entries:
        nbytes = arr.size * 4
        directory.append({"name": name, "shape": list(arr.shape),
                          "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "version": 1,
        "config": config.to_dict(),
        "plan": plan.to_dict(),
        "step": state.step,
        "rng_seed": state.rng_seed,
        "loss_window": state.loss_window,
        "tensors": directory,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelWeights, ModelConfig, TrainPlan, TrainState]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + header_len:
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != 1:
        raise FormatError(f"unsupported checkpoint version {header.get('version')!r}")

    config = ModelConfig.from_dict(header["config"])
    plan = TrainPlan.from_dict(header["plan"])
    payload = raw[8 + header_len:]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise FormatError(f"truncated payload for tensor {entry['name']}")
        arr = np.frombuffer(payload[start:start + nbytes], dtype="<f4")
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)

    weights = init_weights(config, seed=0)
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for name, p in weights.named_parameters():
        for key, dest in ((name, None), (f"adam_m.{name}", m), (f"adam_v.{name}", v)):
            if key not in tensors:
                raise FormatError(f"checkpoint is missing tensor {key}")
            arr = tensors[key]
            if arr.shape != p.data.shape:
                raise FormatError(f"tensor {key} has shape {arr.shape}, expected {p.data.shape}")
            if dest is None:
                p.data = arr.copy()
            else:
                dest[name] = arr.copy()
    state = TrainState(step=header["step"], rng_seed=header["rng_seed"],
                       m=m, v=v, loss_window=list(header["loss_window"]))
    return weights, config, plan, state
