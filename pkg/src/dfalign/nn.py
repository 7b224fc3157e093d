"""Neural building blocks on top of the autodiff engine.

Layers are plain classes holding Parameters; ``parameters()`` returns them in
a stable order so checkpoints and optimizers can rely on it.  Transformer
blocks are pre-norm: zeroing an attention output projection and the second
feed-forward matrix turns a block into the identity, which several
initialization contracts and tests rely on.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numerics as nm
from .errors import ShapeError
from .numerics import Parameter, Tensor


class Linear:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 name: str, zero_init: bool = False, bias: bool = True):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
        self.w = Parameter(w, f"{name}.w")
        self.b = Parameter(np.zeros(d_out), f"{name}.b") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = nm.matmul(nm.as_row(x), self.w) if x.data.ndim == 1 else nm.matmul(x, self.w)
        if self.b is not None:
            out = out + self.b
        if x.data.ndim == 1:
            out = nm.reshape(out, (-1,))
        return out

    __call__ = forward

    def parameters(self) -> list[Parameter]:
        return [self.w] + ([self.b] if self.b is not None else [])


class LayerNorm:
    def __init__(self, d: int, name: str, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d), f"{name}.gain")
        self.bias = Parameter(np.zeros(d), f"{name}.bias")
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return nm.layer_norm(x, self.gain, self.bias, self.eps)

    __call__ = forward

    def parameters(self) -> list[Parameter]:
        return [self.gain, self.bias]


class FeedForward:
    def __init__(self, rng: np.random.Generator, d_model: int, hidden: int,
                 name: str, zero_init_out: bool = False):
        self.lin1 = Linear(rng, d_model, hidden, f"{name}.lin1")
        self.lin2 = Linear(rng, hidden, d_model, f"{name}.lin2", zero_init=zero_init_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.lin2(nm.relu(self.lin1(x)))

    __call__ = forward

    def parameters(self) -> list[Parameter]:
        return self.lin1.parameters() + self.lin2.parameters()


class MultiHeadAttention:
    """Scaled dot-product attention with learnable Q/K/V/output projections.

    Queries come from one token set, keys and values from another (pass the
    same tensor twice for self-attention).  Per-head attention rows are
    softmax-normalized, so each row is a probability distribution over keys.
    """

    def __init__(self, rng: np.random.Generator, d_model: int, heads: int,
                 name: str, zero_init_out: bool = False,
                 tie_qk_init: bool = False):
        if d_model % heads != 0:
            raise ShapeError(f"d_model {d_model} not divisible by heads {heads}")
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_model // heads
        self.q = Linear(rng, d_model, d_model, f"{name}.q")
        self.k = Linear(rng, d_model, d_model, f"{name}.k")
        if tie_qk_init:
            # Equal query/key maps make each head's logit a positive
            # semidefinite form, i.e. genuine similarity, from step one.
            self.k.w.data[...] = self.q.w.data
        self.v = Linear(rng, d_model, d_model, f"{name}.v")
        self.out = Linear(rng, d_model, d_model, f"{name}.out", zero_init=zero_init_out)

    def forward(self, queries: Tensor, keys_values: Tensor,
                return_weights: bool = False):
        q = self.q(nm.as_row(queries))
        k = self.k(nm.as_row(keys_values))
        v = self.v(nm.as_row(keys_values))
        scale = 1.0 / np.sqrt(self.d_head)
        head_outs = []
        weights = []
        for h in range(self.heads):
            lo, hi = h * self.d_head, (h + 1) * self.d_head
            qh = nm.slice_cols(q, lo, hi)
            kh = nm.slice_cols(k, lo, hi)
            vh = nm.slice_cols(v, lo, hi)
            attn = nm.softmax_rows(nm.matmul(qh, kh.T) * scale)
            head_outs.append(nm.matmul(attn, vh))
            if return_weights:
                weights.append(attn.data.copy())
        mixed = self.out(nm.concat_cols(head_outs))
        if return_weights:
            return mixed, weights
        return mixed

    __call__ = forward

    def parameters(self) -> list[Parameter]:
        return (self.q.parameters() + self.k.parameters()
                + self.v.parameters() + self.out.parameters())


class TransformerBlock:
    """Pre-norm residual block: attention then feed-forward.

    With ``context=None`` the block self-attends over its input rows; with a
    context it cross-attends from the (normalized) input tokens to the raw
    context tokens.
    """

    def __init__(self, rng: np.random.Generator, d_model: int, heads: int,
                 hidden: int, name: str, zero_init_out: bool = False):
        self.ln1 = LayerNorm(d_model, f"{name}.ln1")
        self.attn = MultiHeadAttention(rng, d_model, heads, f"{name}.attn",
                                       zero_init_out=zero_init_out)
        self.ln2 = LayerNorm(d_model, f"{name}.ln2")
        self.ff = FeedForward(rng, d_model, hidden, f"{name}.ff",
                              zero_init_out=zero_init_out)

    def forward(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        normed = self.ln1(x)
        kv = normed if context is None else nm.as_row(context)
        x = x + self.attn(normed, kv)
        x = x + self.ff(self.ln2(x))
        return x

    __call__ = forward

    def parameters(self) -> list[Parameter]:
        return (self.ln1.parameters() + self.attn.parameters()
                + self.ln2.parameters() + self.ff.parameters())


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of one or many integer timesteps.

    Scalar input yields shape (dim,); a sequence yields (len(t), dim).
    """
    scalar = np.isscalar(t)
    ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    args = ts[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2 == 1:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb[0] if scalar else emb


def randomize_parameters(params: Sequence[Parameter], rng: np.random.Generator,
                         scale: float = 0.3) -> None:
    """Overwrite every parameter with Gaussian noise (test helper: makes
    zero-initialized projections carry gradient signal)."""
    for p in params:
        p.data[...] = rng.normal(0.0, scale, size=p.data.shape)
