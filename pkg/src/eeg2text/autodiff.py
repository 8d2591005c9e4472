"""Differentiable tensor ops used by every model block, plus Adam and a finite-difference checker.

Reverse-mode bookkeeping (graph recording, topological backward) is torch
autograd; the ops here pin down shapes, the textbook forward definitions and
the finiteness contract. :func:`numerical_grad` only ever calls the forward
function, so it is an independent oracle for the analytic gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from eeg2text.data import PAD


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def check_finite(x: torch.Tensor, op: str) -> torch.Tensor:
    if _CHECK_FINITE and not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"{op} produced non-finite values")
    return x


def _same_shape(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as exc:
        raise ShapeError(f"{op}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}") from exc


# ---------------------------------------------------------------- elementwise / linear algebra

def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b, "add")
    return check_finite(a + b, "add")


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b, "mul")
    return check_finite(a * b, "mul")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return check_finite(a @ b, "matmul")


def transpose(a: torch.Tensor) -> torch.Tensor:
    if a.ndim < 2:
        raise ShapeError("transpose needs at least 2 dimensions")
    return a.transpose(-2, -1)


def reshape(a: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    if math.prod(s for s in shape if s != -1) == 0 or (
        -1 not in shape and math.prod(shape) != a.numel()
    ):
        raise ShapeError(f"reshape: cannot view {tuple(a.shape)} as {tuple(shape)}")
    return a.reshape(*shape)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``[out, in]``."""
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[-1]}")
    y = x @ weight.transpose(0, 1)
    if bias is not None:
        y = y + bias
    return check_finite(y, "linear")


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return check_finite(e / e.sum(dim=axis, keepdim=True), "softmax")


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    return check_finite(shifted - torch.log(torch.exp(shifted).sum(dim=axis, keepdim=True)), "log_softmax")


def layer_norm(x: torch.Tensor, weight: torch.Tensor | None = None, bias: torch.Tensor | None = None,
               eps: float = 1e-5) -> torch.Tensor:
    """Normalize the last axis with the biased variance, then scale and shift."""
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    y = centered / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return check_finite(y, "layer_norm")


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact (erf) GELU."""
    return check_finite(0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0))), "gelu")


def relu(x: torch.Tensor) -> torch.Tensor:
    return check_finite(torch.clamp(x, min=0), "relu")


def embedding_lookup(table: torch.Tensor, ids) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: id out of range [0, {table.shape[0]})")
    return table[ids]


# ---------------------------------------------------------------- convolutions

def conv1d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None, stride: int = 1) -> torch.Tensor:
    """Valid cross-correlation: ``[C_in, T] -> [C_out, (T - k) // stride + 1]`` (leading batch dim optional)."""
    unbatched = x.ndim == 2
    if unbatched:
        x = x[None]
    c_out, c_in, k = weight.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv1d: input has {x.shape[1]} channels, kernel expects {c_in}")
    if k > x.shape[-1]:
        raise ShapeError(f"conv1d: kernel length {k} exceeds input length {x.shape[-1]}")
    if stride < 1:
        raise ShapeError("conv1d: stride must be >= 1")
    y = torch.nn.functional.conv1d(x, weight, bias, stride=stride)
    return check_finite(y[0] if unbatched else y, "conv1d")


def conv_transpose1d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                     stride: int = 1) -> torch.Tensor:
    """Adjoint of :func:`conv1d`: ``[C_in, T'] -> [C_out, (T' - 1) * stride + k]``; ``weight`` is ``[C_in, C_out, k]``."""
    unbatched = x.ndim == 2
    if unbatched:
        x = x[None]
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose1d: input has {x.shape[1]} channels, kernel expects {weight.shape[0]}")
    y = torch.nn.functional.conv_transpose1d(x, weight, bias, stride=stride)
    return check_finite(y[0] if unbatched else y, "conv_transpose1d")


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: tuple[int, int] = (1, 1)) -> torch.Tensor:
    """Valid 2-D cross-correlation over ``[C_in, H, W]``."""
    unbatched = x.ndim == 3
    if unbatched:
        x = x[None]
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    if weight.shape[2] > x.shape[2] or weight.shape[3] > x.shape[3]:
        raise ShapeError(f"conv2d: kernel {tuple(weight.shape[2:])} exceeds input {tuple(x.shape[2:])}")
    y = torch.nn.functional.conv2d(x, weight, bias, stride=stride)
    return check_finite(y[0] if unbatched else y, "conv2d")


# ---------------------------------------------------------------- attention

@dataclass
class AttentionWeights:
    """Projection matrices ``[D, D]`` (``[out, in]`` layout) and biases ``[D]``."""

    wq: torch.Tensor
    wk: torch.Tensor
    wv: torch.Tensor
    wo: torch.Tensor
    bq: torch.Tensor | None = None
    bk: torch.Tensor | None = None
    bv: torch.Tensor | None = None
    bo: torch.Tensor | None = None


def multi_head_attention(query: torch.Tensor, key: torch.Tensor, value: torch.Tensor,
                         w: AttentionWeights, n_heads: int, causal: bool = False) -> torch.Tensor:
    """Scaled dot-product attention over ``[len, D]`` inputs (leading batch dims allowed).

    Self-attention passes the same tensor three times; cross-attention
    passes the decoder states as ``query`` and the encoder memory as
    ``key``/``value``. ``causal`` forbids position i from seeing j > i.
    """
    d = query.shape[-1]
    if d % n_heads:
        raise ShapeError(f"d_model {d} not divisible by n_heads {n_heads}")
    if key.shape[-2] != value.shape[-2]:
        raise ShapeError("key and value lengths differ")
    dh = d // n_heads

    def heads(x):
        return x.reshape(*x.shape[:-1], n_heads, dh).transpose(-3, -2)

    q = heads(linear(query, w.wq, w.bq))
    k = heads(linear(key, w.wk, w.bk))
    v = heads(linear(value, w.wv, w.bv))
    scores = (q @ k.transpose(-2, -1)) / math.sqrt(dh)
    if causal:
        lq, lk = scores.shape[-2], scores.shape[-1]
        future = torch.ones(lq, lk, dtype=torch.bool).triu(1 + lk - lq)
        scores = scores.masked_fill(future, float("-inf"))
    attn = softmax(scores, axis=-1)
    out = (attn @ v).transpose(-3, -2)
    out = out.reshape(*out.shape[:-2], d)
    return linear(out, w.wo, w.bo)


# ---------------------------------------------------------------- losses

def cross_entropy(logits: torch.Tensor, targets, ignore_id: int | None = PAD) -> torch.Tensor:
    """Mean negative log-likelihood of ``targets`` over non-ignored positions."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise ShapeError(f"cross_entropy: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    keep = torch.ones_like(targets, dtype=torch.bool) if ignore_id is None else targets != ignore_id
    if not bool(keep.any()):
        raise ValueError("cross_entropy: no supervised positions (all targets ignored)")
    kept = targets[keep]
    if int(kept.min()) < 0 or int(kept.max()) >= logits.shape[1]:
        raise ValueError(f"cross_entropy: target id outside [0, {logits.shape[1]})")
    logp = log_softmax(logits[keep], axis=-1)
    nll = -logp.gather(1, kept[:, None]).squeeze(1)
    return check_finite(nll.mean(), "cross_entropy")


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    diff = pred - target
    return check_finite((diff * diff).mean(), "mse")


def backward(loss: torch.Tensor, params: Iterable[torch.Tensor] = ()) -> None:
    """Populate ``.grad``; listed ``params`` the loss does not reach get zero grads."""
    if loss.numel() != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss.requires_grad:
        loss.backward()
    for p in params:
        if p.requires_grad and p.grad is None:
            p.grad = torch.zeros_like(p)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor | None], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place.

    Only names present in ``grads`` with a non-None gradient move; their
    moments are created lazily. The step counter is shared across names.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return state


# ---------------------------------------------------------------- finite differences

def numerical_grad(f: Callable[[], float], arrays: Sequence[np.ndarray], eps: float = 1e-5) -> list[np.ndarray]:
    """Central differences of scalar ``f()`` w.r.t. each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f())
            flat[i] = orig - eps
            fm = float(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor: float = 1e-7) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def gradcheck(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], eps: float = 1e-5,
              floor: float = 1e-7) -> float:
    """Max relative error between autograd and central differences for scalar ``fn(*inputs)``.

    Inputs must be float64 leaf tensors; the oracle perturbs their numpy views.
    """
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    backward(out, leaves)
    analytic = [x.grad.numpy().copy() for x in leaves]
    arrays = [x.detach().numpy() for x in leaves]

    def f():
        with torch.no_grad():
            return fn(*[torch.from_numpy(a) for a in arrays]).item()

    numeric = numerical_grad(f, arrays, eps)
    return max(max_relative_error(a, n, floor) for a, n in zip(analytic, numeric))
