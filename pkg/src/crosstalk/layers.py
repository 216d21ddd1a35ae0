"""Encoder/decoder building blocks: conformer pieces and a transformer decoder.

Layers are plain classes holding parameter Tensors; ``params()`` returns a
flat name -> Tensor mapping with dotted prefixes for serialization.  Forward
passes take ``train``/``rng`` so dropout stays deterministic under a seeded
generator and disappears entirely at evaluation.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError


def _flatten(children: dict) -> dict:
    out = {}
    for name, child in children.items():
        if isinstance(child, Tensor):
            out[name] = child
        else:
            for key, value in child.params().items():
                out[f"{name}.{key}"] = value
    return out


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """uniform(-s, s) with s = 1/sqrt(fan_in); the shared weight init."""
    s = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)


class Linear:
    def __init__(self, rng, n_in: int, n_out: int):
        self.w = uniform_init(rng, (n_in, n_out), n_in)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)

    def params(self):
        return {"w": self.w, "b": self.b}


class LayerNorm:
    def __init__(self, d: int, eps: float = 1e-6):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}


class RelPosBias:
    """Learned per-head bias over clamped query/key offsets.

    bias(i, j) depends only on clamp(j - i, -max_dist, max_dist), so it is
    invariant to shifting both indices: the distance signal self-attention
    needs without rotated-key machinery.
    """

    def __init__(self, heads: int, max_dist: int):
        self.max_dist = max_dist
        self.table = Tensor(np.zeros((heads, 2 * max_dist + 1)), requires_grad=True)

    def matrix(self, head: int, n_q: int, n_k: int) -> Tensor:
        offs = np.arange(n_k)[None, :] - np.arange(n_q)[:, None]
        idx = np.clip(offs, -self.max_dist, self.max_dist) + self.max_dist
        return ad.take(self.table[head], idx)

    def all_heads(self, n_q: int, n_k: int) -> Tensor:
        """Bias for every head at once, shaped (heads, n_q, n_k)."""
        offs = np.arange(n_k)[None, :] - np.arange(n_q)[:, None]
        idx = np.clip(offs, -self.max_dist, self.max_dist) + self.max_dist
        heads, span = self.table.shape
        flat = np.arange(heads)[:, None, None] * span + idx[None, :, :]
        return ad.take(ad.reshape(self.table, (-1,)), flat)

    def params(self):
        return {"table": self.table}


class MultiHeadAttention:
    """Scaled dot-product attention with optional relative-position bias."""

    def __init__(self, rng, d: int, heads: int, max_dist: int | None = None,
                 dropout: float = 0.0):
        if d % heads != 0:
            raise ShapeError(f"width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.dropout = dropout
        self.wq = Linear(rng, d, d)
        self.wk = Linear(rng, d, d)
        self.wv = Linear(rng, d, d)
        self.wo = Linear(rng, d, d)
        self.rel_bias = RelPosBias(heads, max_dist) if max_dist is not None else None

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask=None, train: bool = False,
                 rng=None, sink: list | None = None) -> Tensor:
        n_q = q_in.shape[0]
        n_k = kv_in.shape[0]
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (n_q, n_k):
                raise ShapeError(f"mask shape {mask.shape} != ({n_q}, {n_k})")
            if not mask.any(axis=1).all():
                raise ContractError("attention mask has a fully masked row")
            mask_add = Tensor(np.where(mask, 0.0, -np.inf))
        q = self.wq(q_in)
        k = self.wk(kv_in)
        v = self.wv(kv_in)
        # Batch the heads: (n, d) -> (heads, n, head_dim).
        qh = ad.transpose_axes(ad.reshape(q, (n_q, self.heads, self.head_dim)),
                               (1, 0, 2))
        kh = ad.transpose_axes(ad.reshape(k, (n_k, self.heads, self.head_dim)),
                               (1, 2, 0))
        vh = ad.transpose_axes(ad.reshape(v, (n_k, self.heads, self.head_dim)),
                               (1, 0, 2))
        scores = ad.mul(ad.bmm(qh, kh), Tensor(1.0 / np.sqrt(self.head_dim)))
        if self.rel_bias is not None:
            scores = ad.add(scores, self.rel_bias.all_heads(n_q, n_k))
        if mask is not None:
            scores = ad.add(scores, mask_add)
        attn = ad.softmax(scores, axis=2)
        if sink is not None:
            for h in range(self.heads):
                sink.append(attn.data[h].copy())
        if train and self.dropout > 0.0:
            attn = ad.dropout(attn, self.dropout, rng)
        ctx = ad.transpose_axes(ad.bmm(attn, vh), (1, 0, 2))
        return self.wo(ad.reshape(ctx, (n_q, self.d)))

    def params(self):
        children = {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}
        if self.rel_bias is not None:
            children["rel_bias"] = self.rel_bias
        return _flatten(children)


class FeedForward:
    def __init__(self, rng, d: int, ff: int, dropout: float = 0.0):
        self.lin1 = Linear(rng, d, ff)
        self.lin2 = Linear(rng, ff, d)
        self.dropout = dropout

    def __call__(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        h = ad.swish(self.lin1(x))
        if train and self.dropout > 0.0:
            h = ad.dropout(h, self.dropout, rng)
        return self.lin2(h)

    def params(self):
        return _flatten({"lin1": self.lin1, "lin2": self.lin2})


class ConvModule:
    """Pointwise expansion + GLU, depthwise conv, layer-norm, pointwise out."""

    def __init__(self, rng, d: int, kernel: int):
        if kernel % 2 == 0:
            raise ShapeError(f"depthwise kernel must be odd, got {kernel}")
        self.pw1 = Linear(rng, d, 2 * d)
        self.dw_w = uniform_init(rng, (kernel, d), kernel)
        self.dw_b = Tensor(np.zeros(d), requires_grad=True)
        self.norm = LayerNorm(d)
        self.pw2 = Linear(rng, d, d)
        self.d = d

    def __call__(self, x: Tensor) -> Tensor:
        h = self.pw1(x)
        a = h[:, : self.d]
        b = h[:, self.d:]
        h = ad.mul(a, ad.sigmoid(b))  # GLU
        h = ad.depthwise_conv1d(h, self.dw_w, self.dw_b)
        h = ad.swish(self.norm(h))
        return self.pw2(h)

    def params(self):
        return _flatten({"pw1": self.pw1, "dw_w": self.dw_w, "dw_b": self.dw_b,
                         "norm": self.norm, "pw2": self.pw2})


class ConformerBlock:
    """Macaron arrangement: half-FF, attention, convolution, half-FF, norm."""

    def __init__(self, rng, d: int, heads: int, ff: int, kernel: int,
                 max_dist: int, dropout: float = 0.0):
        self.ff1 = FeedForward(rng, d, ff, dropout)
        self.attn = MultiHeadAttention(rng, d, heads, max_dist, dropout)
        self.conv = ConvModule(rng, d, kernel)
        self.ff2 = FeedForward(rng, d, ff, dropout)
        self.norm_ff1 = LayerNorm(d)
        self.norm_attn = LayerNorm(d)
        self.norm_conv = LayerNorm(d)
        self.norm_ff2 = LayerNorm(d)
        self.norm_out = LayerNorm(d)

    def __call__(self, x: Tensor, mask=None, train: bool = False, rng=None,
                 sink: list | None = None) -> Tensor:
        half = Tensor(0.5)
        x = ad.add(x, ad.mul(self.ff1(self.norm_ff1(x), train, rng), half))
        h = self.norm_attn(x)
        x = ad.add(x, self.attn(h, h, mask, train, rng, sink))
        x = ad.add(x, self.conv(self.norm_conv(x)))
        x = ad.add(x, ad.mul(self.ff2(self.norm_ff2(x), train, rng), half))
        return self.norm_out(x)

    def params(self):
        return _flatten({
            "ff1": self.ff1, "attn": self.attn, "conv": self.conv, "ff2": self.ff2,
            "norm_ff1": self.norm_ff1, "norm_attn": self.norm_attn,
            "norm_conv": self.norm_conv, "norm_ff2": self.norm_ff2,
            "norm_out": self.norm_out,
        })


class ConvSubsampler:
    """Two (kernel 3, stride 2, valid) conv stages and a linear projection.

    Output length is ``output_length(T)``, exposed as part of the contract;
    callers size their targets against it.
    """

    MIN_FRAMES = 8

    def __init__(self, rng, feat_dim: int, d: int):
        self.conv1_w = uniform_init(rng, (3, feat_dim, d), 3 * feat_dim)
        self.conv1_b = Tensor(np.zeros(d), requires_grad=True)
        self.conv2_w = uniform_init(rng, (3, d, d), 3 * d)
        self.conv2_b = Tensor(np.zeros(d), requires_grad=True)
        self.proj = Linear(rng, d, d)

    @staticmethod
    def output_length(n_frames: int) -> int:
        stage = lambda n: (n - 1) // 2  # kernel 3, stride 2, no padding
        return stage(stage(n_frames))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[0] < self.MIN_FRAMES:
            raise ShapeError(
                f"input too short: {x.shape[0]} frames, need >= {self.MIN_FRAMES} "
                "for two stride-2 stages"
            )
        h = ad.swish(ad.conv1d(x, self.conv1_w, self.conv1_b, stride=2))
        h = ad.swish(ad.conv1d(h, self.conv2_w, self.conv2_b, stride=2))
        return self.proj(h)

    def params(self):
        return _flatten({"conv1_w": self.conv1_w, "conv1_b": self.conv1_b,
                         "conv2_w": self.conv2_w, "conv2_b": self.conv2_b,
                         "proj": self.proj})


class DecoderBlock:
    def __init__(self, rng, d: int, heads: int, ff: int, max_dist: int,
                 dropout: float = 0.0):
        self.self_attn = MultiHeadAttention(rng, d, heads, max_dist, dropout)
        self.cross_attn = MultiHeadAttention(rng, d, heads, None, dropout)
        self.ff = FeedForward(rng, d, ff, dropout)
        self.norm_self = LayerNorm(d)
        self.norm_cross = LayerNorm(d)
        self.norm_ff = LayerNorm(d)

    def __call__(self, x: Tensor, memory: Tensor, causal: np.ndarray,
                 train: bool = False, rng=None,
                 cross_sink: list | None = None) -> Tensor:
        h = self.norm_self(x)
        x = ad.add(x, self.self_attn(h, h, causal, train, rng))
        x = ad.add(x, self.cross_attn(self.norm_cross(x), memory, None,
                                      train, rng, cross_sink))
        x = ad.add(x, self.ff(self.norm_ff(x), train, rng))
        return x

    def params(self):
        return _flatten({"self_attn": self.self_attn, "cross_attn": self.cross_attn,
                         "ff": self.ff, "norm_self": self.norm_self,
                         "norm_cross": self.norm_cross, "norm_ff": self.norm_ff})


class Decoder:
    """Autoregressive transformer decoder over a fixed memory."""

    def __init__(self, rng, vocab: int, d: int, heads: int, ff: int,
                 n_blocks: int, max_dist: int, dropout: float = 0.0):
        self.embed = uniform_init(rng, (vocab, d), d)
        self.blocks = [DecoderBlock(rng, d, heads, ff, max_dist, dropout)
                       for _ in range(n_blocks)]
        self.norm_out = LayerNorm(d)
        self.out = Linear(rng, d, vocab)

    def __call__(self, targets, memory: Tensor, train: bool = False, rng=None,
                 cross_sink: list | None = None) -> Tensor:
        """Teacher-forced logits; position t sees targets <= t and all memory."""
        if memory.shape[0] == 0:
            raise ContractError("decoder memory is empty")
        targets = np.asarray(targets, dtype=np.int64)
        if targets.size == 0:
            raise ContractError("decoder targets are empty")
        x = ad.take(self.embed, targets)
        causal = np.tril(np.ones((len(targets), len(targets)), dtype=bool))
        for block in self.blocks:
            x = block(x, memory, causal, train, rng, cross_sink)
        return self.out(self.norm_out(x))

    def params(self):
        children = {"embed": self.embed}
        for i, block in enumerate(self.blocks):
            children[f"block{i}"] = block
        children["norm_out"] = self.norm_out
        children["out"] = self.out
        return _flatten(children)
