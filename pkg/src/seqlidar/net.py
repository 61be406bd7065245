"""Spatio-temporal UNet that predicts the noise of an equirectangular sequence.

Tensors inside the network use the [B*F, C, h, w] layout for spatial work
(frames folded into the batch axis) and are viewed as [B, F, C, h, w] only
for the frame-axis convolutions and temporal attention.

Conditioning paths:

* road sketch: concatenated to the noised frames before the first layer;
* object prior: a zero-initialised copy of the encoder adds residuals to
  every decoder skip connection;
* caption: token embeddings fused with the timestep embedding feed a
  zero-initialised cross-attention at the bottleneck.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from seqlidar import functional as fn
from seqlidar.bundle import ConditionBundle
from seqlidar.errors import ConfigurationError, DimensionError, VocabularyError
from seqlidar.nn import Conv2d, GroupNorm, Linear, Module, Parameter, TemporalConv
from seqlidar.scene import VOCAB
from seqlidar.tensor import Tensor, as_tensor, concat, reshape, sigmoid, silu, transpose

TIME_DIM = 128


@dataclass(frozen=True)
class NetConfig:
    channels: int = 32
    scales: int = 4
    fourier_k: int = 6
    heads: int = 4
    groups: int = 8
    vocab_size: int = len(VOCAB)
    blocks_per_scale: int = 2

    def __post_init__(self):
        if self.scales not in (3, 4):
            raise ConfigurationError(f"scales must be 3 or 4, got {self.scales}")
        if self.channels < 1 or self.fourier_k < 1 or self.heads < 1:
            raise ConfigurationError("channels, fourier_k and heads must be positive")
        if (self.channels * 2 ** (self.scales - 1)) % self.heads:
            raise ConfigurationError("bottleneck width must be divisible by the head count")

    @property
    def widths(self):
        return [self.channels * 2**s for s in range(self.scales)]

    @property
    def time_dim(self):
        return 4 * self.channels

    def to_dict(self):
        return asdict(self)


def fourier_grid(H, W, K):
    """[4K, H, W] sinusoidal features of normalized pixel coordinates.

    Column j maps to azimuth ``-1 + 2j/W`` and row i to elevation
    ``1 - 2i/H`` (both in [-1, 1)); per coordinate the channels are
    ``sin(2^k pi u), cos(2^k pi u)`` for k = 0..K-1.
    """
    theta = -1.0 + 2.0 * np.arange(W) / W
    phi = 1.0 - 2.0 * np.arange(H) / H
    grids = np.meshgrid(phi, theta, indexing="ij")[::-1]
    chans = []
    for u in grids:
        for k in range(K):
            arg = (2.0**k) * math.pi * u
            chans += [np.sin(arg), np.cos(arg)]
    return np.stack(chans)


def fourier_features(cfg, K=6):
    return fourier_grid(cfg.H, cfg.W, K)


def timestep_embedding(t, dim=TIME_DIM):
    """Sinusoidal embedding of continuous t in [0, 1] (scaled by 1000)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1) * 1000.0
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _multihead(q, k, v, heads):
    """Attention over [N, L, C] operands split into ``heads`` heads."""
    N, L, C = q.shape
    Lk = k.shape[1]
    dh = C // heads

    def split(x, n):
        return reshape(transpose(reshape(x, (N, n, heads, dh)), (0, 2, 1, 3)), (N * heads, n, dh))

    out = fn.attention(split(q, L), split(k, Lk), split(v, Lk))
    return reshape(transpose(reshape(out, (N, heads, L, dh)), (0, 2, 1, 3)), (N, L, C))


class TimeMLP(Module):
    def __init__(self, out_dim, rng, dtype):
        self.fc1 = Linear(TIME_DIM, out_dim, rng, dtype=dtype)
        self.fc2 = Linear(out_dim, out_dim, rng, dtype=dtype)

    def forward(self, t):
        emb = Tensor(timestep_embedding(t), dtype=self.fc1.weight.dtype)
        return self.fc2(silu(self.fc1(emb)))


class SpatioTemporalConvBlock(Module):
    """Circular-padded spatial path and (3,1,1) temporal path mixed by a learnable alpha."""

    def __init__(self, c_in, c_out, time_dim, fourier_k, groups, rng, dtype):
        self.norm1 = GroupNorm(c_in, groups, dtype)
        self.conv1 = Conv2d(c_in + 4 * fourier_k, c_out, 3, rng=rng, dtype=dtype)
        self.time_proj = Linear(time_dim, 2 * c_out, rng, dtype=dtype)
        self.norm2 = GroupNorm(c_out, groups, dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng=rng, dtype=dtype)
        self.skip = Conv2d(c_in, c_out, 1, rng=rng, dtype=dtype) if c_in != c_out else None
        self.norm_t = GroupNorm(c_out, groups, dtype)
        self.temporal = TemporalConv(c_out, c_out, rng, dtype)
        self.mix_logit = Parameter(np.zeros(()), dtype)
        self.fourier_k = fourier_k
        self.c_out = c_out
        self.alpha_override = None
        self._ff_cache = {}

    def alpha(self):
        if self.alpha_override is not None:
            return float(self.alpha_override)
        return float(1.0 / (1.0 + np.exp(-self.mix_logit.data)))

    def _fourier(self, n, h, w, dtype):
        key = (h, w, np.dtype(dtype).str)
        if key not in self._ff_cache:
            self._ff_cache[key] = fourier_grid(h, w, self.fourier_k).astype(dtype)
        ff = Tensor(self._ff_cache[key][None])
        ff.data = np.broadcast_to(ff.data, (n,) + ff.shape[1:])
        return ff

    def spatial(self, x, temb, frames):
        n, _, h, w = x.shape
        a = silu(self.norm1(x))
        a = concat([a, self._fourier(n, h, w, x.dtype)], axis=1)
        a = self.conv1(a)
        mod = self.time_proj(silu(temb))
        B = mod.shape[0]
        scale = reshape(mod[:, : self.c_out], (B, 1, self.c_out, 1, 1))
        shift = reshape(mod[:, self.c_out :], (B, 1, self.c_out, 1, 1))
        a = reshape(self.norm2(a), (B, frames, self.c_out, h, w))
        a = reshape(a * (scale + 1.0) + shift, (n, self.c_out, h, w))
        a = self.conv2(silu(a))
        res = x if self.skip is None else self.skip(x)
        return a + res

    def temporal_path(self, xs, frames):
        n, c, h, w = xs.shape
        a = silu(self.norm_t(xs))
        a = self.temporal(reshape(a, (n // frames, frames, c, h, w)))
        return xs + reshape(a, (n, c, h, w))

    def forward(self, x, temb, frames):
        """x: [B*F, C_in, h, w] -> [B*F, C_out, h, w]."""
        xs = self.spatial(x, temb, frames)
        if self.alpha_override is not None:
            a = float(self.alpha_override)
            if a == 1.0:
                return xs
            xt = self.temporal_path(xs, frames)
            return xs * a + xt * (1.0 - a)
        xt = self.temporal_path(xs, frames)
        alpha = sigmoid(self.mix_logit)
        return xs * alpha + xt * (1.0 - alpha)


class FactorizedAttention(Module):
    """Spatial attention within each frame, then temporal attention per pixel."""

    def __init__(self, channels, heads, groups, rng, dtype):
        self.heads = heads
        self.norm_s = GroupNorm(channels, groups, dtype)
        self.qkv_s = Linear(channels, 3 * channels, rng, dtype=dtype)
        self.out_s = Linear(channels, channels, rng, dtype=dtype)
        self.norm_t = GroupNorm(channels, groups, dtype)
        self.qkv_t = Linear(channels, 3 * channels, rng, dtype=dtype)
        self.out_t = Linear(channels, channels, rng, dtype=dtype)

    @staticmethod
    def _qkv(proj, tokens):
        C = tokens.shape[-1]
        qkv = proj(tokens)
        return qkv[..., :C], qkv[..., C : 2 * C], qkv[..., 2 * C :]

    def spatial(self, x):
        n, c, h, w = x.shape
        tokens = transpose(reshape(self.norm_s(x), (n, c, h * w)), (0, 2, 1))
        q, k, v = self._qkv(self.qkv_s, tokens)
        out = self.out_s(_multihead(q, k, v, self.heads))
        return x + reshape(transpose(out, (0, 2, 1)), (n, c, h, w))

    def temporal(self, x, frames):
        n, c, h, w = x.shape
        B = n // frames
        a = reshape(self.norm_t(x), (B, frames, c, h * w))
        tokens = reshape(transpose(a, (0, 3, 1, 2)), (B * h * w, frames, c))
        q, k, v = self._qkv(self.qkv_t, tokens)
        out = self.out_t(_multihead(q, k, v, self.heads))
        out = transpose(reshape(out, (B, h * w, frames, c)), (0, 2, 3, 1))
        return x + reshape(out, (n, c, h, w))

    def forward(self, x, frames):
        return self.temporal(self.spatial(x), frames)


class CaptionCrossAttention(Module):
    """Bottleneck tokens attend to caption embeddings fused with the timestep."""

    def __init__(self, channels, vocab_size, time_dim, heads, groups, rng, dtype):
        self.heads = heads
        self.vocab_size = vocab_size
        self.embed = Parameter(rng.standard_normal((vocab_size, channels)) * 0.5, dtype)
        self.time_proj = Linear(time_dim, channels, rng, dtype=dtype)
        self.norm = GroupNorm(channels, groups, dtype)
        self.q = Linear(channels, channels, rng, dtype=dtype)
        self.k = Linear(channels, channels, rng, dtype=dtype)
        self.v = Linear(channels, channels, rng, dtype=dtype)
        self.out = Linear(channels, channels, rng, zero=True, dtype=dtype)

    def forward(self, x, captions, temb, frames):
        n, c, h, w = x.shape
        B = n // frames
        for cap in captions:
            for tok in cap:
                if not 0 <= tok < self.vocab_size:
                    raise VocabularyError(f"token id {tok} outside vocabulary of {self.vocab_size}")
        time_tok = self.time_proj(silu(temb))
        a = reshape(self.norm(x), (B, frames, c, h * w))
        queries = reshape(transpose(a, (0, 1, 3, 2)), (B, frames * h * w, c))
        outs = []
        for b in range(B):
            cap = captions[b]
            q = self.q(queries[b : b + 1])
            if len(cap) == 0:
                outs.append(q * 0.0)
                continue
            ctx = self.embed[np.asarray(cap, dtype=np.int64)] + time_tok[b : b + 1]
            ctx = reshape(ctx, (1, len(cap), c))
            outs.append(_multihead(q, self.k(ctx), self.v(ctx), self.heads))
        out = self.out(concat(outs, axis=0))
        out = transpose(reshape(out, (B, frames, h * w, c)), (0, 1, 3, 2))
        return x + reshape(out, (n, c, h, w))


class Encoder(Module):
    """Input convolution plus the down path; returns the skip tensors."""

    def __init__(self, cfg, in_channels, rng, dtype):
        self.in_conv = Conv2d(in_channels, cfg.channels, 3, rng=rng, dtype=dtype)
        blocks, downs = [], []
        ch = cfg.channels
        for s, width in enumerate(cfg.widths):
            for _ in range(cfg.blocks_per_scale):
                blocks.append(SpatioTemporalConvBlock(ch, width, cfg.time_dim, cfg.fourier_k, cfg.groups, rng, dtype))
                ch = width
            if s < cfg.scales - 1:
                downs.append(Conv2d(ch, ch, 3, stride=2, rng=rng, dtype=dtype))
        self.blocks = blocks
        self.downs = downs
        self.cfg = cfg

    def skip_channels(self):
        return [w for w in self.cfg.widths for _ in range(self.cfg.blocks_per_scale)]

    def forward(self, x, temb, frames):
        h = self.in_conv(x)
        skips = []
        k = 0
        for s in range(self.cfg.scales):
            for _ in range(self.cfg.blocks_per_scale):
                h = self.blocks[k](h, temb, frames)
                skips.append(h)
                k += 1
            if s < self.cfg.scales - 1:
                h = self.downs[s](h)
        return h, skips


class ControlBranch(Module):
    """Encoder copy fed with [noised frames, object prior]; zero-initialised outputs."""

    def __init__(self, cfg, rng, dtype):
        self.encoder = Encoder(cfg, 4, rng, dtype)
        self.zero_convs = [Conv2d(c, c, 1, rng=rng, zero=True, dtype=dtype) for c in self.encoder.skip_channels()]

    def check_topology(self, backbone):
        if self.encoder.skip_channels() != backbone.skip_channels():
            raise ConfigurationError(
                f"control branch skips {self.encoder.skip_channels()} != backbone {backbone.skip_channels()}"
            )

    def forward(self, x_t, prior, temb, frames):
        _, skips = self.encoder(concat([x_t, prior], axis=1), temb, frames)
        return [zc(s) for zc, s in zip(self.zero_convs, skips)]


def inject_sketch(x_t_seq, sketch):
    """Channel concatenation [noised(2), sketch(2)] -> [B, F, 4, H, W]."""
    x_t_seq, sketch = as_tensor(x_t_seq), as_tensor(sketch, dtype=as_tensor(x_t_seq).dtype)
    if x_t_seq.ndim != 5 or sketch.ndim != 5:
        raise DimensionError("inject_sketch expects [B, F, 2, H, W] tensors")
    if x_t_seq.shape[:2] != sketch.shape[:2] or x_t_seq.shape[3:] != sketch.shape[3:]:
        raise DimensionError(f"noised input {x_t_seq.shape} and sketch {sketch.shape} are not aligned")
    return concat([x_t_seq, sketch], axis=2)


class SequenceNoisePredictor(Module):
    """The full conditional noise predictor eps_hat(x_t, t, conditions)."""

    def __init__(self, cfg=None, seed=0, dtype=np.float32):
        cfg = cfg or NetConfig()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.time_mlp = TimeMLP(cfg.time_dim, rng, dtype)
        self.encoder = Encoder(cfg, 4, rng, dtype)
        mid = cfg.widths[-1]
        self.mid1 = SpatioTemporalConvBlock(mid, mid, cfg.time_dim, cfg.fourier_k, cfg.groups, rng, dtype)
        self.attn = FactorizedAttention(mid, cfg.heads, cfg.groups, rng, dtype)
        self.caption_attn = CaptionCrossAttention(mid, cfg.vocab_size, cfg.time_dim, cfg.heads, cfg.groups, rng, dtype)
        self.mid2 = SpatioTemporalConvBlock(mid, mid, cfg.time_dim, cfg.fourier_k, cfg.groups, rng, dtype)
        blocks, ups = [], []
        ch = mid
        for s in reversed(range(cfg.scales)):
            width = cfg.widths[s]
            for _ in range(cfg.blocks_per_scale):
                blocks.append(SpatioTemporalConvBlock(ch + width, width, cfg.time_dim, cfg.fourier_k, cfg.groups, rng, dtype))
                ch = width
            if s > 0:
                ups.append(Conv2d(ch, ch, 3, rng=rng, dtype=dtype))
        self.dec_blocks = blocks
        self.ups = ups
        self.out_norm = GroupNorm(cfg.channels, cfg.groups, dtype)
        self.out_conv = Conv2d(cfg.channels, 2, 3, rng=rng, zero=True, dtype=dtype)
        self.control = ControlBranch(cfg, rng, dtype)
        self.control.check_topology(self.encoder)
        self.use_control = True

    @property
    def dtype(self):
        return self.out_conv.weight.dtype

    def conv_blocks(self):
        return list(self.encoder.blocks) + [self.mid1, self.mid2] + list(self.dec_blocks) + list(self.control.encoder.blocks)

    def set_alpha_override(self, value):
        for blk in self.conv_blocks():
            blk.alpha_override = value

    def check_input(self, x_t, cond):
        if x_t.ndim != 5 or x_t.shape[2] != 2:
            raise DimensionError(f"noised input must be [B, F, 2, H, W], got {x_t.shape}")
        H, W = x_t.shape[3:]
        div = 2 ** (self.cfg.scales - 1)
        if H % div or W % div:
            raise DimensionError(f"H and W must be divisible by {div}, got {H}x{W}")
        if cond.sketch.shape != x_t.shape:
            raise DimensionError(f"conditions {cond.sketch.shape} do not match input {x_t.shape}")

    def forward(self, x_t, t, cond):
        """Predict the noise; ``x_t`` [B, F, 2, H, W], ``t`` [B], batched conditions."""
        if not isinstance(cond, ConditionBundle):
            raise DimensionError("conditions must be a ConditionBundle")
        cond = cond.batched()
        x_t = as_tensor(x_t, dtype=self.dtype)
        if x_t.dtype != self.dtype:
            x_t = Tensor(x_t.data.astype(self.dtype))
        self.check_input(x_t, cond)
        B, F, _, H, W = x_t.shape
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (B,))
        temb = self.time_mlp(t)

        inp = reshape(inject_sketch(x_t, cond.sketch.astype(self.dtype)), (B * F, 4, H, W))
        h, skips = self.encoder(inp, temb, F)
        if self.use_control:
            prior = Tensor(cond.prior.reshape(B * F, 2, H, W).astype(self.dtype))
            residuals = self.control(reshape(x_t, (B * F, 2, H, W)), prior, temb, F)
            skips = [s + r for s, r in zip(skips, residuals)]

        h = self.mid1(h, temb, F)
        h = self.attn(h, F)
        h = self.caption_attn(h, cond.caption, temb, F)
        h = self.mid2(h, temb, F)

        k = 0
        for i, s in enumerate(reversed(range(self.cfg.scales))):
            for _ in range(self.cfg.blocks_per_scale):
                h = self.dec_blocks[k](concat([h, skips.pop()], axis=1), temb, F)
                k += 1
            if s > 0:
                h = self.ups[i](fn.upsample_nearest2x(h))
        out = self.out_conv(silu(self.out_norm(h)))
        return reshape(out, (B, F, 2, H, W))
