"""Dense tensor container with tape-based reverse-mode differentiation.

The op set is deliberately closed: exactly the kernels the decoder model
composes (matmul, elementwise add/mul, silu, rmsnorm, embedding lookup,
rotary pair rotation, fused causal grouped-query attention, cross-entropy).
Storage is float32 by default; reductions accumulate in float64. Every
kernel checks its output for NaN/Inf and raises NumericError immediately.

Kernels are pure functions of their inputs and safe to call from multiple
threads on shared read-only tensors; gradient accumulation into a tensor
is single-writer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError

__all__ = [
    "Tensor",
    "LossValue",
    "tensor",
    "zeros",
    "no_grad",
    "add",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "silu",
    "rmsnorm",
    "embedding",
    "rotate_pairs",
    "causal_attention",
    "swiglu_ffn",
    "cross_entropy",
    "grad_check",
]

FD_STEP = 1e-4

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")
    return arr


class Tensor:
    """N-dimensional float array plus optional gradient buffer.

    `data` is a row-major numpy array (float32 by default; float64 is used
    for finite-difference probes). `grad`, once backward has run, has the
    same shape and dtype as `data`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 _parents: tuple[Tensor, ...] = (),
                 _backward: Callable[[np.ndarray], None] | None = None):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | float | None = None) -> None:
        """Reverse sweep through the recorded graph rooted at this tensor."""
        if seed is None:
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=self.data.dtype)
        if seed.shape != self.data.shape:
            seed = np.broadcast_to(seed, self.data.shape).copy()

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            else:
                node.accumulate_grad(g)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse topological order, iterative to keep deep graphs safe."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], list[tuple[Tensor, np.ndarray]]],
          op: str) -> Tensor:
    """Record one whole-tensor op on the tape (if grad is enabled)."""
    _check_finite(data, op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def tensor(values, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    arr = np.ascontiguousarray(np.asarray(values, dtype=dtype))
    _check_finite(arr, "tensor")
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g):
        return [(a, g), (b, g)]

    return _make(out, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward(g):
        return [(a, g * b.data), (b, g * a.data)]

    return _make(out, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product [m,k]@[k,n] -> [m,n]; dA = g@B^T, dB = A^T@g."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return _make(out, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    out = np.ascontiguousarray(a.data.T)

    def backward(g):
        return [(a, np.ascontiguousarray(g.T))]

    return _make(out, (a,), backward, "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = np.ascontiguousarray(a.data.reshape(shape))
    prev = a.shape

    def backward(g):
        return [(a, g.reshape(prev))]

    return _make(out, (a,), backward, "reshape")


def silu(a: Tensor) -> Tensor:
    """silu(z) = z * sigmoid(z)."""
    # tanh form of the sigmoid never overflows
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = a.data * sig

    def backward(g):
        # d/dz [z*sig] = sig * (1 + z*(1-sig))
        return [(a, g * sig * (1.0 + a.data * (1.0 - sig)))]

    return _make(out, (a,), backward, "silu")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-vector x / sqrt(mean(x^2)+eps) * weight over the last axis."""
    if eps <= 0:
        raise ValueError("rmsnorm: eps must be positive")
    d = x.shape[-1]
    if weight.shape != (d,):
        raise ValueError(f"rmsnorm: weight shape {weight.shape} != ({d},)")
    ms = np.mean(np.square(x.data, dtype=np.float64), axis=-1, keepdims=True)
    inv = ((ms + eps) ** -0.5).astype(x.dtype)
    out = x.data * inv * weight.data

    def backward(g):
        gw = g * weight.data
        # d(inv)/dx_i = -x_i * inv^3 / d; chain through x*inv
        dot = np.sum((x.data * gw).astype(np.float64), axis=-1, keepdims=True)
        gx = inv * gw - (x.data * (inv ** 3) * (dot / d)).astype(x.dtype)
        gweight = np.sum((x.data * inv * g).astype(np.float64),
                         axis=tuple(range(x.data.ndim - 1))).astype(weight.dtype)
        return [(x, gx), (weight, gweight)]

    return _make(out, (x, weight), backward, "rmsnorm")


# ---------------------------------------------------------------------------
# lookup / position ops
# ---------------------------------------------------------------------------


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row gather table[ids]; backward scatters into the table rows."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("embedding: ids must be a flat sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError("embedding: token id out of range")
    out = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return [(table, gt)]

    return _make(out, (table,), backward, "embedding")


def rotate_pairs(x: Tensor, angles: np.ndarray) -> Tensor:
    """Rotate each (x[..., 2i], x[..., 2i+1]) pair by angles[..., i].

    x: [T, H, head_dim] with even head_dim; angles: [T, 1, head_dim/2]
    (broadcast over heads). Backward rotates the gradient by -angles.
    """
    if x.shape[-1] % 2 != 0:
        raise ValueError("rotate_pairs: last extent must be even")
    cos = np.cos(angles).astype(x.dtype)
    sin = np.sin(angles).astype(x.dtype)
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return [(x, gx)]

    return _make(out, (x,), backward, "rotate_pairs")


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def causal_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = True) -> Tensor:
    """Fused softmax attention with grouped key/value heads.

    q: [T, H, head_dim]; k, v: [T, G, head_dim] with H % G == 0. Query head
    h reads group h // (H // G). Scores are scaled by 1/sqrt(head_dim) and,
    unless causal is disabled, strictly masked so position t attends to
    keys <= t. Returns [T, H, head_dim].
    """
    t_len, n_heads, head_dim = q.shape
    if k.shape != v.shape or k.shape[0] != t_len or k.shape[2] != head_dim:
        raise ValueError(f"causal_attention: k/v shape {k.shape} incompatible with q {q.shape}")
    n_groups = k.shape[1]
    if n_heads % n_groups != 0:
        raise ValueError("causal_attention: head count not divisible by group count")
    per_group = n_heads // n_groups
    scale = 1.0 / math.sqrt(head_dim)

    # [G, R, T, d] queries against [G, T, d] keys/values
    q4 = np.ascontiguousarray(q.data.transpose(1, 0, 2).reshape(n_groups, per_group, t_len, head_dim))
    k3 = np.ascontiguousarray(k.data.transpose(1, 0, 2))
    v3 = np.ascontiguousarray(v.data.transpose(1, 0, 2))

    scores = np.einsum("grtd,gsd->grts", q4, k3) * scale
    if causal:
        neg = np.array(-np.inf, dtype=scores.dtype)
        mask = np.triu(np.ones((t_len, t_len), dtype=bool), k=1)
        scores = np.where(mask, neg, scores)

    scores -= scores.max(axis=-1, keepdims=True)
    expd = np.exp(scores)
    denom = expd.sum(axis=-1, keepdims=True, dtype=np.float64)
    weights = (expd / denom).astype(q.dtype)

    out4 = np.einsum("grts,gsd->grtd", weights, v3)
    out = np.ascontiguousarray(out4.reshape(n_heads, t_len, head_dim).transpose(1, 0, 2))

    def backward(g):
        g4 = np.ascontiguousarray(g.transpose(1, 0, 2).reshape(n_groups, per_group, t_len, head_dim))
        dweights = np.einsum("grtd,gsd->grts", g4, v3)
        gv3 = np.einsum("grts,grtd->gsd", weights, g4)
        # softmax backward per row; masked entries have weight exactly 0
        row = np.sum((dweights * weights).astype(np.float64), axis=-1, keepdims=True)
        dscores = weights * (dweights - row.astype(weights.dtype))
        gq4 = np.einsum("grts,gsd->grtd", dscores, k3) * scale
        gk3 = np.einsum("grts,grtd->gsd", dscores, q4) * scale
        gq = np.ascontiguousarray(gq4.reshape(n_heads, t_len, head_dim).transpose(1, 0, 2))
        gk = np.ascontiguousarray(gk3.transpose(1, 0, 2))
        gv = np.ascontiguousarray(gv3.transpose(1, 0, 2))
        return [(q, gq), (k, gk), (v, gv)]

    return _make(out, (q, k, v), backward, "causal_attention")


# ---------------------------------------------------------------------------
# feed-forward
# ---------------------------------------------------------------------------


def swiglu_ffn(x: Tensor, w1: Tensor, w3: Tensor, w2: Tensor) -> Tensor:
    """Gated feed-forward (silu(x@W1) * (x@W3)) @ W2, no biases."""
    gate = silu(matmul(x, w1))
    lin = matmul(x, w3)
    return matmul(mul(gate, lin), w2)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


@dataclass
class LossValue:
    """Mean negative log-likelihood in nats plus contributing token count."""

    mean_nll: float
    token_count: int
    _node: Tensor | None = field(default=None, repr=False, compare=False)

    def backward(self, scale: float = 1.0) -> None:
        """Seed d(mean_nll) = scale and sweep the tape.

        scale=token_count turns the gradients into sum-NLL gradients, which
        is what gradient accumulation across micro-batches wants.
        """
        if self._node is None:
            raise RuntimeError("loss has no recorded graph")
        self._node.backward(np.asarray(scale, dtype=self._node.data.dtype))


def cross_entropy(logits: Tensor, targets: Sequence[int],
                  ignore_index: int = -1) -> LossValue:
    """Mean -log softmax(logits)[target] over non-ignored positions.

    Gradient w.r.t. logits is (softmax - one_hot) / token_count at the kept
    rows and zero at ignored rows.
    """
    if logits.data.ndim != 2:
        raise ValueError("cross_entropy expects [T, V] logits")
    t_len, vocab = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (t_len,):
        raise ValueError(f"cross_entropy: {t_len} rows but {tgt.shape} targets")
    keep = tgt != ignore_index
    n_tokens = int(keep.sum())
    if n_tokens == 0:
        raise ValueError("cross_entropy: every position is ignored")
    kept_tgt = tgt[keep]
    if kept_tgt.min() < 0 or kept_tgt.max() >= vocab:
        raise IndexError("cross_entropy: target id out of range")

    x = logits.data.astype(np.float64)
    x -= x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=1))
    nll = lse[keep] - x[keep, kept_tgt]
    mean_nll = float(nll.sum() / n_tokens)
    if not math.isfinite(mean_nll):
        raise NumericError("cross_entropy produced non-finite loss")

    def backward(g):
        # g is the scalar seed broadcast over shape ()
        probs = np.exp(x - lse[:, None])
        probs[keep, kept_tgt] -= 1.0
        probs[~keep] = 0.0
        gl = (probs * (float(g) / n_tokens)).astype(logits.dtype)
        return [(logits, gl)]

    node = _make(np.asarray(mean_nll, dtype=logits.dtype), (logits,), backward, "cross_entropy")
    return LossValue(mean_nll=mean_nll, token_count=n_tokens, _node=node)


# ---------------------------------------------------------------------------
# verification harness
# ---------------------------------------------------------------------------


def grad_check(fn: Callable[..., Tensor | LossValue], inputs: Sequence[Tensor],
               step: float = FD_STEP) -> float:
    """Max relative error between tape gradients and central differences.

    `fn` maps the input tensors to a Tensor (any shape) or a LossValue.
    Non-scalar outputs are reduced with a fixed random projection so both
    routes differentiate the same scalar. Errors are measured relative to
    the largest gradient magnitude of each input (with a 1e-12 floor).
    Callers should pass float64 tensors for probe-precision checks.
    """
    proj_rng = np.random.default_rng(0)
    proj: np.ndarray | None = None

    def scalar_of(out) -> tuple[float, Tensor]:
        nonlocal proj
        if isinstance(out, LossValue):
            return out.mean_nll, out._node
        if proj is None:
            proj = proj_rng.standard_normal(out.data.shape)
        val = float(np.sum(out.data.astype(np.float64) * proj))
        return val, out

    for t in inputs:
        t.zero_grad()
        t.requires_grad = True
    value, node = scalar_of(fn(*inputs))
    if isinstance(node, Tensor) and proj is not None:
        node.backward(proj.astype(node.data.dtype))
    else:
        node.backward()

    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = np.zeros_like(analytic, dtype=np.float64)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus, _ = scalar_of(fn(*inputs))
            flat[i] = orig - step
            minus, _ = scalar_of(fn(*inputs))
            flat[i] = orig
            num_flat[i] = (plus - minus) / (2.0 * step)
        if not np.all(np.isfinite(numeric)):
            raise NumericError("grad_check: non-finite finite-difference probe")
        denom = max(float(np.abs(analytic).max(initial=0.0)),
                    float(np.abs(numeric).max(initial=0.0)), 1e-12)
        worst = max(worst, float(np.abs(analytic.astype(np.float64) - numeric).max(initial=0.0)) / denom)
    return worst
