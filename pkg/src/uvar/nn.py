"""Small module system, layers and the optimizer on top of the autodiff core."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)


class Module:
    """Attribute-based parameter container.

    Parameters are Tensor attributes; children are Module attributes or lists
    of Modules. Names are dotted paths, registered in attribute order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, rng, din: int, dout: int, bias: bool = True, std: float = 0.02, zero: bool = False, dtype=np.float64):
        w = np.zeros((din, dout), dtype=dtype) if zero else trunc_normal(rng, (din, dout), std, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(dout, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}weight", self.weight
        if self.bias is not None:
            yield f"{prefix}bias", self.bias


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float64):
        self.weight = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0, std: float | None = None, dtype=np.float64):
        std = std if std is not None else 1.0 / math.sqrt(k * k * cin)
        self.weight = Tensor(trunc_normal(rng, (k, k, cin, cout), std, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}weight", self.weight
        yield f"{prefix}bias", self.bias


def attention(q: Tensor, k: Tensor, v: Tensor, allow: np.ndarray) -> Tensor:
    """Scaled dot-product attention; q, k, v are (B, H, L, dh); allow broadcasts to (B, H, L, L)."""
    dh = q.shape[-1]
    scores = F.matmul(q, F.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    probs = F.softmax(scores, axis=-1, mask=allow)
    return F.matmul(probs, v)


class SelfAttention(Module):
    def __init__(self, rng, d: int, n_heads: int, dtype=np.float64):
        if d % n_heads:
            raise ValueError(f"d_model {d} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.qkv = Linear(rng, d, 3 * d, dtype=dtype)
        self.out = Linear(rng, d, d, dtype=dtype)

    def __call__(self, x: Tensor, allow: np.ndarray) -> Tensor:
        b, n, d = x.shape
        h = self.n_heads
        qkv = self.qkv(x).reshape(b, n, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        y = attention(q, k, v, allow)
        return self.out(y.transpose(0, 2, 1, 3).reshape(b, n, d))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, rng, d: int, n_heads: int, mlp_ratio: int = 4, dtype=np.float64):
        self.ln1 = LayerNorm(d, dtype)
        self.attn = SelfAttention(rng, d, n_heads, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.fc1 = Linear(rng, d, mlp_ratio * d, dtype=dtype)
        self.fc2 = Linear(rng, mlp_ratio * d, d, dtype=dtype)

    def __call__(self, x: Tensor, allow: np.ndarray) -> Tensor:
        x = x + self.attn(self.ln1(x), allow)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


# ---- optimisation ----------------------------------------------------------

@dataclass
class AdamWState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


class AdamW:
    """Adam with decoupled weight decay over a fixed set of named parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.0, grad_clip: float | None = 1.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.state = AdamWState(0, {k: np.zeros_like(p.data) for k, p in params.items()},
                                {k: np.zeros_like(p.data) for k, p in params.items()})

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for k in sorted(self.params):
            g = self.params[k].grad
            if g is not None:
                total += float(np.sum(np.square(g, dtype=np.float64)))
        return math.sqrt(total)

    def step(self, lr: float | None = None) -> float:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        st = self.state
        st.step += 1
        norm = self.grad_norm()
        clip = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            clip = self.grad_clip / (norm + 1e-12)
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for k in sorted(self.params):
            p = self.params[k]
            if p.grad is None:
                continue
            g = p.grad * clip
            m, v = st.m[k], st.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype, copy=False)
        return norm


def cosine_lr(step: int, total: int, base_lr: float, warmup_ratio: float = 0.1, min_ratio: float = 0.0) -> float:
    """Linear warmup then cosine decay; ``step`` counts from 0."""
    warm = int(round(warmup_ratio * total))
    if warm and step < warm:
        return base_lr * (step + 1) / warm
    span = max(1, total - warm)
    t = min(1.0, (step - warm) / span)
    return base_lr * (min_ratio + (1 - min_ratio) * 0.5 * (1.0 + math.cos(math.pi * t)))
