"""Building blocks: CBAM, dual position/channel attention, ConvNeXt-style
blocks, the transformer block, plus stem and downsample layers.

Blocks accept [C,H,W] or [B,C,H,W] input (an unbatched tensor is promoted to
batch 1 and squeezed back). All parameters are float32 by default; pass
dtype=np.float64 when a block feeds the finite-difference checker.
"""

import numpy as np

from .tensor import (Tensor, add, concat, conv2d, dropout, gelu, layer_norm,
                     linear, matmul, mul, pool2d, relu, reshape, sigmoid,
                     softmax, transpose, tsqrt, tsum)

LN_EPS = 1e-6
LAYER_SCALE_INIT = 1e-6
GRN_EPS = 1e-6


def trunc_normal(shape, rng, std=0.02, dtype=np.float32):
    """Normal(0, std) resampled until every draw lies within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return Tensor(out.astype(dtype), requires_grad=True)


def _param(array, dtype):
    return Tensor(np.asarray(array, dtype=dtype), requires_grad=True)


class Module:
    """Minimal parameter container; children discovered from attributes."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}{i}.")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def param_count(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _batched(x):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected [C,H,W] or [B,C,H,W], got shape {x.shape}")


def _debatch(y, squeeze):
    return reshape(y, y.shape[1:]) if squeeze else y


class Cbam(Module):
    """Sequential channel gate then spatial gate, both sigmoid-bounded.

    Channel gate: shared bias-free MLP (reduction r) over global avg- and
    max-pooled descriptors. Spatial gate: 7x7 conv over the stacked
    channel-wise avg/max maps.
    """

    def __init__(self, channels, reduction=16, rng=None, dtype=np.float32):
        if channels % reduction != 0:
            raise ValueError(f"channels={channels} not divisible by reduction={reduction}")
        rng = rng or np.random.default_rng(0)
        hidden = channels // reduction
        self.reduction = reduction
        self.mlp_w0 = trunc_normal((channels, hidden), rng, dtype=dtype)
        self.mlp_w1 = trunc_normal((hidden, channels), rng, dtype=dtype)
        self.spatial_kernel = trunc_normal((1, 2, 7, 7), rng, dtype=dtype)

    def _mlp(self, pooled):
        return linear(relu(linear(pooled, self.mlp_w0)), self.mlp_w1)

    def channel_attention(self, x):
        """[.., C, H, W] -> gate [.., C, 1, 1] in (0, 1)."""
        x4, squeeze = _batched(x)
        avg = pool2d(x4, "avg")
        mx = pool2d(x4, "max")
        gate = sigmoid(add(self._mlp(avg), self._mlp(mx)))
        gate = reshape(gate, gate.shape + (1, 1))
        return _debatch(gate, squeeze)

    def spatial_attention(self, x):
        """[.., C, H, W] -> gate [.., 1, H, W] in (0, 1)."""
        x4, squeeze = _batched(x)
        stacked = concat([pool2d(x4, "avg", axis="channel"),
                          pool2d(x4, "max", axis="channel")], axis=-3)
        gate = sigmoid(conv2d(stacked, self.spatial_kernel, padding=3))
        return _debatch(gate, squeeze)

    def forward(self, x):
        x4, squeeze = _batched(x)
        refined = mul(x4, self.channel_attention(x4))
        refined = mul(refined, self.spatial_attention(refined))
        return _debatch(refined, squeeze)


class PositionAttention(Module):
    """Pixel-pair attention: softmax over dot-product similarities of
    1x1-projected feature maps, residual with learnable scale (init 0, so the
    block starts as the identity)."""

    def __init__(self, channels, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.conv_b = trunc_normal((channels, channels, 1, 1), rng, dtype=dtype)
        self.conv_c = trunc_normal((channels, channels, 1, 1), rng, dtype=dtype)
        self.conv_d = trunc_normal((channels, channels, 1, 1), rng, dtype=dtype)
        self.alpha = _param(0.0, dtype)

    def attention(self, x):
        """[B, N, N] position-similarity map; each column sums to 1."""
        x4, _ = _batched(x)
        bsz, c, h, w = x4.shape
        n = h * w
        b = reshape(conv2d(x4, self.conv_b), (bsz, c, n))
        cc = reshape(conv2d(x4, self.conv_c), (bsz, c, n))
        energy = matmul(transpose(b, (0, 2, 1)), cc)   # [B, N, N], (i, j) = B_i . C_j
        return softmax(energy, axis=-2)                # normalize over i

    def forward(self, x):
        x4, squeeze = _batched(x)
        bsz, c, h, w = x4.shape
        attn = self.attention(x4)
        d = reshape(conv2d(x4, self.conv_d), (bsz, c, h * w))
        context = reshape(matmul(d, attn), (bsz, c, h, w))
        return _debatch(add(mul(self.alpha, context), x4), squeeze)


class ChannelPairAttention(Module):
    """Channel-pair attention: softmax over channel-similarity of the raw
    features, residual with learnable scale (init 0 -> identity)."""

    def __init__(self, dtype=np.float32):
        self.beta = _param(0.0, dtype)

    def attention(self, x):
        """[B, C, C] channel-similarity map; each row sums to 1."""
        x4, _ = _batched(x)
        bsz, c, h, w = x4.shape
        flat = reshape(x4, (bsz, c, h * w))
        energy = matmul(flat, transpose(flat, (0, 2, 1)))   # [B, C, C], (j, i) = A_j . A_i
        return softmax(energy, axis=-1)                     # normalize over i

    def forward(self, x):
        x4, squeeze = _batched(x)
        bsz, c, h, w = x4.shape
        flat = reshape(x4, (bsz, c, h * w))
        context = reshape(matmul(self.attention(x4), flat), (bsz, c, h, w))
        return _debatch(add(mul(self.beta, context), x4), squeeze)


class DualAttention(Module):
    """Position and channel attention run in parallel on the same input and
    fused by elementwise sum."""

    def __init__(self, channels, rng=None, dtype=np.float32):
        self.position = PositionAttention(channels, rng=rng, dtype=dtype)
        self.channel = ChannelPairAttention(dtype=dtype)

    def forward(self, x):
        return add(self.position(x), self.channel(x))


class ConvNextBlock(Module):
    """Depthwise 7x7 conv -> channel LayerNorm -> pointwise expand 4x ->
    GELU (-> optional GRN) -> pointwise contract, layer-scaled residual."""

    def __init__(self, channels, use_grn=False, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        hidden = 4 * channels
        self.channels = channels
        self.use_grn = use_grn
        self.dw_kernel = trunc_normal((channels, 1, 7, 7), rng, dtype=dtype)
        self.ln_gamma = _param(np.ones(channels), dtype)
        self.ln_beta = _param(np.zeros(channels), dtype)
        self.w1 = trunc_normal((channels, hidden), rng, dtype=dtype)
        self.b1 = _param(np.zeros(hidden), dtype)
        self.w2 = trunc_normal((hidden, channels), rng, dtype=dtype)
        self.b2 = _param(np.zeros(channels), dtype)
        self.layer_scale = _param(np.full(channels, LAYER_SCALE_INIT), dtype)
        if use_grn:
            self.grn_gamma = _param(np.zeros(hidden), dtype)
            self.grn_beta = _param(np.zeros(hidden), dtype)

    def _grn(self, t):
        # t is channels-last [B, H, W, 4C]; per-channel L2 over space,
        # normalized by the channel mean (identity at gamma=beta=0)
        sq = tsum(mul(t, t), axis=(1, 2), keepdims=True)
        gx = tsqrt(sq)
        nx = gx / (gx.mean(axis=-1, keepdims=True) + GRN_EPS)
        return add(add(mul(self.grn_gamma, mul(t, nx)), self.grn_beta), t)

    def forward(self, x):
        x4, squeeze = _batched(x)
        c = self.channels
        h = conv2d(x4, self.dw_kernel, padding=3, groups=c)
        h = layer_norm(h, self.ln_gamma, self.ln_beta, axis=-3, eps=LN_EPS)
        h = transpose(h, (0, 2, 3, 1))
        h = gelu(linear(h, self.w1, self.b1))
        if self.use_grn:
            h = self._grn(h)
        h = linear(h, self.w2, self.b2)
        h = transpose(h, (0, 3, 1, 2))
        scaled = mul(reshape(self.layer_scale, (c, 1, 1)), h)
        return _debatch(add(x4, scaled), squeeze)


class TransformerBlock(Module):
    """Pre-LN multi-head self-attention and MLP (ratio 4, GELU), both with
    residuals and optional training-mode dropout. Operates on [B,C,H,W] by
    flattening the spatial grid to H*W tokens of width C."""

    def __init__(self, dim, heads=8, dropout_p=0.1, pos_embed_tokens=None,
                 rng=None, dtype=np.float32):
        if dim % heads != 0:
            raise ValueError(f"dim={dim} not divisible by heads={heads}")
        rng = rng or np.random.default_rng(0)
        hidden = 4 * dim
        self.dim = dim
        self.heads = heads
        self.dropout_p = dropout_p
        self.ln1_gamma = _param(np.ones(dim), dtype)
        self.ln1_beta = _param(np.zeros(dim), dtype)
        self.wq = trunc_normal((dim, dim), rng, dtype=dtype)
        self.bq = _param(np.zeros(dim), dtype)
        self.wk = trunc_normal((dim, dim), rng, dtype=dtype)
        self.bk = _param(np.zeros(dim), dtype)
        self.wv = trunc_normal((dim, dim), rng, dtype=dtype)
        self.bv = _param(np.zeros(dim), dtype)
        self.wo = trunc_normal((dim, dim), rng, dtype=dtype)
        self.bo = _param(np.zeros(dim), dtype)
        self.ln2_gamma = _param(np.ones(dim), dtype)
        self.ln2_beta = _param(np.zeros(dim), dtype)
        self.w1 = trunc_normal((dim, hidden), rng, dtype=dtype)
        self.b1 = _param(np.zeros(hidden), dtype)
        self.w2 = trunc_normal((hidden, dim), rng, dtype=dtype)
        self.b2 = _param(np.zeros(dim), dtype)
        if pos_embed_tokens:
            self.pos_embed = trunc_normal((pos_embed_tokens, dim), rng, dtype=dtype)

    def attention_param_count(self):
        return sum(p.size for p in (self.wq, self.bq, self.wk, self.bk,
                                    self.wv, self.bv, self.wo, self.bo))

    def mlp_param_count(self):
        return sum(p.size for p in (self.w1, self.b1, self.w2, self.b2))

    def _heads_split(self, t, bsz, n):
        t = reshape(t, (bsz, n, self.heads, self.dim // self.heads))
        return transpose(t, (0, 2, 1, 3))

    def forward(self, x, training=False, rng=None):
        x4, squeeze = _batched(x)
        bsz, c, h, w = x4.shape
        if c != self.dim:
            raise ValueError(f"expected {self.dim} channels, got {c}")
        n = h * w
        tokens = transpose(reshape(x4, (bsz, c, n)), (0, 2, 1))   # [B, N, C]
        if hasattr(self, "pos_embed"):
            if self.pos_embed.shape[0] != n:
                raise ValueError(f"pos_embed built for {self.pos_embed.shape[0]} tokens, got {n}")
            tokens = add(tokens, self.pos_embed)

        t = layer_norm(tokens, self.ln1_gamma, self.ln1_beta, axis=-1, eps=LN_EPS)
        q = self._heads_split(linear(t, self.wq, self.bq), bsz, n)
        k = self._heads_split(linear(t, self.wk, self.bk), bsz, n)
        v = self._heads_split(linear(t, self.wv, self.bv), bsz, n)
        scale = 1.0 / np.sqrt(self.dim // self.heads)
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), scale)
        context = matmul(softmax(scores, axis=-1), v)              # [B, h, N, dh]
        context = reshape(transpose(context, (0, 2, 1, 3)), (bsz, n, c))
        attended = dropout(linear(context, self.wo, self.bo),
                           self.dropout_p, training, rng)
        tokens = add(tokens, attended)

        m = layer_norm(tokens, self.ln2_gamma, self.ln2_beta, axis=-1, eps=LN_EPS)
        m = linear(gelu(linear(m, self.w1, self.b1)), self.w2, self.b2)
        tokens = add(tokens, dropout(m, self.dropout_p, training, rng))

        out = reshape(transpose(tokens, (0, 2, 1)), (bsz, c, h, w))
        return _debatch(out, squeeze)


class Stem(Module):
    """Patchify entry: 4x4 stride-4 conv to the first stage width, then
    channel LayerNorm. The 4x4 kernel is what the published per-layer
    parameter count (4,704 for 3->96) pins down."""

    def __init__(self, in_channels, out_channels, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.weight = trunc_normal((out_channels, in_channels, 4, 4), rng, dtype=dtype)
        self.bias = _param(np.zeros(out_channels), dtype)
        self.ln_gamma = _param(np.ones(out_channels), dtype)
        self.ln_beta = _param(np.zeros(out_channels), dtype)

    def forward(self, x):
        x4, squeeze = _batched(x)
        if x4.shape[-1] % 4 or x4.shape[-2] % 4:
            raise ValueError(f"stem needs spatial dims divisible by 4, got {x4.shape}")
        h = conv2d(x4, self.weight, self.bias, stride=4)
        h = layer_norm(h, self.ln_gamma, self.ln_beta, axis=-3, eps=LN_EPS)
        return _debatch(h, squeeze)


class Downsample(Module):
    """Inter-stage transition: channel LayerNorm then 2x2 stride-2 conv that
    doubles the channel count and halves each spatial dim."""

    def __init__(self, in_channels, out_channels, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.ln_gamma = _param(np.ones(in_channels), dtype)
        self.ln_beta = _param(np.zeros(in_channels), dtype)
        self.weight = trunc_normal((out_channels, in_channels, 2, 2), rng, dtype=dtype)
        self.bias = _param(np.zeros(out_channels), dtype)

    def forward(self, x):
        x4, squeeze = _batched(x)
        if x4.shape[-1] % 2 or x4.shape[-2] % 2:
            raise ValueError(f"downsample needs even spatial dims, got {x4.shape}")
        h = layer_norm(x4, self.ln_gamma, self.ln_beta, axis=-3, eps=LN_EPS)
        h = conv2d(h, self.weight, self.bias, stride=2)
        return _debatch(h, squeeze)
