"""Layers built on :mod:`wordconf.autodiff`: linear, layer norm, attention,
transformer decoder block, and a bidirectional LSTM."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Parameter container. Attributes that are Tensors or Modules (or lists
    of Modules) are discovered by name, giving stable dotted names."""

    def named_tensors(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_tensors(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_tensors(f"{name}.{i}."))
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_tensors().items() if t.requires_grad}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _uniform(rng, d_in, d_out, (d_in, d_out))
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, d_kv: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ValueError("d_model must be divisible by heads")
        self.heads = heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_kv, d_model, rng)
        self.v = Linear(d_kv, d_model, rng)
        self.o = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return ad.transpose(x.reshape(b, n, self.heads, d // self.heads), (0, 2, 1, 3))

    def __call__(self, x: Tensor, memory: Tensor, mask: np.ndarray) -> Tensor:
        """``mask``: (B, n_query, n_key) bool, True = may attend."""
        q, k, v = self._split(self.q(x)), self._split(self.k(memory)), self._split(self.v(memory))
        out = ad.attention(q, k, v, mask[:, None, :, :])
        b, h, n, dh = out.shape
        return self.o(ad.transpose(out, (0, 2, 1, 3)).reshape(b, n, h * dh))


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.up = Linear(d_model, d_ff, rng)
        self.down = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ad.gelu(self.up(x)))


class DecoderBlock(Module):
    """Pre-norm decoder block: masked self-attention, then the sum of one
    cross-attention per memory source, then a feed-forward layer."""

    def __init__(self, d_model: int, memory_dims: list[int], heads: int, d_ff: int,
                 rng: np.random.Generator):
        self.ln_self = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, d_model, heads, rng)
        self.ln_cross = LayerNorm(d_model)
        self.cross = [MultiHeadAttention(d_model, d, heads, rng) for d in memory_dims]
        self.ln_ff = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, rng)

    def __call__(self, x: Tensor, self_mask: np.ndarray,
                 memories: list[tuple[Tensor, np.ndarray]]) -> Tensor:
        h = self.ln_self(x)
        x = x + self.self_attn(h, h, self_mask)
        if memories:
            h = self.ln_cross(x)
            mixed = None
            for attn, (mem, mask) in zip(self.cross, memories):
                part = attn(h, mem, mask)
                mixed = part if mixed is None else mixed + part
            x = x + mixed
        return x + self.ff(self.ln_ff(x))


class LSTM(Module):
    """Single-direction LSTM; gate order i, f, g, o."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        self.d_hidden = d_hidden
        self.w_in = _uniform(rng, d_in, 4 * d_hidden, (d_in, 4 * d_hidden))
        self.w_rec = _uniform(rng, d_hidden, 4 * d_hidden, (d_hidden, 4 * d_hidden))
        b = np.zeros(4 * d_hidden)
        b[d_hidden:2 * d_hidden] = 1.0  # forget-gate bias
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        """x: (B, T, d_in) -> hidden states (B, T, d_hidden). Padding must
        sit at the end of each row; outputs there are garbage and must be
        masked by the caller."""
        n, steps, _ = x.shape
        hd = self.d_hidden
        pre = ad.matmul(x, self.w_in) + self.bias
        h = Tensor(np.zeros((n, hd)))
        c = Tensor(np.zeros((n, hd)))
        outs = []
        for t in range(steps):
            z = pre[:, t, :] + ad.matmul(h, self.w_rec)
            i = ad.sigmoid(z[:, :hd])
            f = ad.sigmoid(z[:, hd:2 * hd])
            g = ad.tanh(z[:, 2 * hd:3 * hd])
            o = ad.sigmoid(z[:, 3 * hd:])
            c = f * c + i * g
            h = o * ad.tanh(c)
            outs.append(h.reshape(n, 1, hd))
        return ad.concat(outs, axis=1)


def reverse_index(lengths: np.ndarray, steps: int) -> np.ndarray:
    """Per-row index that reverses the first ``lengths[r]`` steps and leaves
    the padded tail in place."""
    t = np.arange(steps)[None, :]
    lengths = np.asarray(lengths)[:, None]
    return np.where(t < lengths, lengths - 1 - t, t)


class BiLSTM(Module):
    """Bidirectional LSTM; output is the concatenation of both directions."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        self.fwd = LSTM(d_in, d_hidden, rng)
        self.bwd = LSTM(d_in, d_hidden, rng)

    def __call__(self, x: Tensor, lengths: np.ndarray) -> Tensor:
        n, steps, _ = x.shape
        rev = reverse_index(lengths, steps)
        rows = np.arange(n)[:, None]
        forward = self.fwd(x)
        backward = self.bwd(x[rows, rev])[rows, rev]
        return ad.concat([forward, backward], axis=-1)
