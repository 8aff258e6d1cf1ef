"""Token mixers over a neighbor-token matrix.

Four interchangeable mixers (adaptive, pooling, token-axis MLP, single-head
attention), the hierarchical offset schedule that widens the lookback window
with depth, and the per-token channel mixer. All layer functions are pure:
they read bound parameter Values and return a new Value.

The adaptive mixer is a fused differentiable operation: its backward pass is
derived analytically and registered on the tape, which keeps per-layer work
at O(N * K * d) instead of materializing N x N mixing matrices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import numcore as nc
from .numcore import ConfigError, ContractError, ShapeError, Value

__all__ = [
    "OffsetSchedule",
    "hierarchical_offsets",
    "AdaptiveLayer",
    "PoolingLayer",
    "MlpLayer",
    "AttentionLayer",
    "ChannelParams",
    "adaptive_mix",
    "adaptive_mix_batched",
    "pooling_mix",
    "mlp_mix",
    "attention_mix",
    "channel_mix",
    "token_block",
]


class OffsetSchedule:
    """Per-layer backward offsets derived from spans s1 < s2 < ... < sL.

    Layer 1 aggregates the contiguous window {0, ..., s1-1}; layer l >= 2
    aggregates the gapped interval [s_{l-1}, s_l]. Stacking layers therefore
    reaches back (s1 - 1) + s2 + ... + sL positions.
    """

    def __init__(self, spans: Sequence[int]):
        spans = [int(s) for s in spans]
        if not spans or spans[0] < 1 or any(b <= a for a, b in zip(spans, spans[1:])):
            raise ConfigError(f"spans must be strictly increasing positive integers, got {spans}")
        self.spans = spans

    @property
    def num_layers(self) -> int:
        return len(self.spans)

    def offsets(self, layer: int) -> np.ndarray:
        if not 1 <= layer <= self.num_layers:
            raise IndexError(f"layer {layer} outside 1..{self.num_layers}")
        if layer == 1:
            return np.arange(self.spans[0])
        return np.arange(self.spans[layer - 2], self.spans[layer - 1] + 1)

    def kernel_size(self, layer: int) -> int:
        return len(self.offsets(layer))

    def max_lookback(self) -> int:
        return (self.spans[0] - 1) + sum(self.spans[1:])


def hierarchical_offsets(spans: Sequence[int], layer: int) -> np.ndarray:
    return OffsetSchedule(spans).offsets(layer)


@dataclass
class AdaptiveLayer:
    """One adaptive-mixer layer: offsets plus its bound parameters.

    ``fusion`` is the coefficient blending order weights against recency
    weights; a plain float pins it (ablations), a 1x1 Value learns it.
    """

    offsets: np.ndarray
    order_logits: Value
    fusion: Union[Value, float]


@dataclass
class PoolingLayer:
    window: int


@dataclass
class MlpLayer:
    w1: Value
    b1: Value
    w2: Value
    b2: Value


@dataclass
class AttentionLayer:
    wq: Value
    wk: Value
    wv: Value
    wo: Value


@dataclass
class ChannelParams:
    ln_gain: Value
    ln_bias: Value
    w1: Value
    b1: Value
    w2: Value
    b2: Value


def _masked_softmax(scores: np.ndarray) -> np.ndarray:
    """Softmax over the last axis treating -inf entries as absent; rows with
    no finite entry come out all zero."""
    m = scores.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(scores - m)
    s = e.sum(axis=-1, keepdims=True)
    return e / np.where(s > 0.0, s, 1.0)


def adaptive_mix(tokens: Value, times, offsets, order_logits: Value,
                 fusion: Union[Value, float]) -> Value:
    """Causal weighted average over the offset window.

    Row i becomes sum_p alpha_p * tokens[i-p] over valid offsets (i-p >= 0),
    where alpha blends a softmax over learned order logits with a softmax
    over negative time gaps. Rows whose window is entirely out of range pass
    through unchanged.
    """
    times = np.asarray(times, dtype=np.float64)
    h = tokens.data
    n, d = h.shape
    if len(times) != n:
        raise ShapeError(f"times length {len(times)} does not match token count {n}")
    if np.any(np.diff(times) < 0):
        raise ContractError("token times must be non-decreasing")
    offsets = np.asarray(offsets, dtype=np.int64)
    k = len(offsets)
    if order_logits.data.shape != (1, k):
        raise ShapeError(
            f"order logits shape {order_logits.data.shape} does not match {k} offsets")

    tape = tokens.tape
    valid = offsets[None, :] <= np.arange(n)[:, None]
    covered = valid.any(axis=1)
    gaps = np.full((n, k), np.inf)
    for j, p in enumerate(offsets):
        if p < n:
            gaps[p:, j] = times[p:] - times[: n - p]
    theta = _masked_softmax(-gaps)
    order_scores = np.where(valid, order_logits.data[0][None, :], -np.inf)
    order_w = _masked_softmax(order_scores)
    fusion_is_value = isinstance(fusion, Value)
    fuse = float(fusion.data[0, 0]) if fusion_is_value else float(fusion)
    alpha = fuse * order_w + (1.0 - fuse) * theta

    out_data = np.zeros_like(h)
    for j, p in enumerate(offsets):
        if p < n:
            out_data[p:] += alpha[p:, j:j + 1] * h[: n - p]
    out_data[~covered] = h[~covered]

    nz = int(valid.sum())
    tape.flops += 2 * nz * d + 10 * nz + int((~covered).sum()) * d

    want = tokens.want_grad or order_logits.want_grad or (
        fusion_is_value and fusion.want_grad)
    out = Value(out_data, tape, want)
    if want:
        def back():
            g = out.grad
            if g is None:
                return
            if tokens.want_grad:
                dh = np.zeros_like(h)
                for j, p in enumerate(offsets):
                    if p < n:
                        dh[: n - p] += alpha[p:, j:j + 1] * g[p:]
                dh[~covered] += g[~covered]
                nc.accumulate_grad(tokens, dh)
            need_order = order_logits.want_grad and fuse != 0.0
            need_fuse = fusion_is_value and fusion.want_grad
            if need_order or need_fuse:
                dalpha = np.zeros((n, k))
                for j, p in enumerate(offsets):
                    if p < n:
                        dalpha[p:, j] = (g[p:] * h[: n - p]).sum(axis=1)
                if need_order:
                    go = fuse * dalpha
                    ds = order_w * (go - (go * order_w).sum(axis=1, keepdims=True))
                    nc.accumulate_grad(order_logits, ds.sum(axis=0, keepdims=True))
                if need_fuse:
                    dfuse = float((dalpha * (order_w - theta)).sum())
                    nc.accumulate_grad(fusion, np.array([[dfuse]]))
        tape.record(back)
    return out


def adaptive_mix_batched(tokens: Value, times, pad_lens, offsets,
                         order_logits: Value, fusion: Union[Value, float]) -> Value:
    """Adaptive mixing over a batch of equally padded sequences.

    ``tokens`` stacks R sequences of ``n`` rows each into an (R*n) x d matrix;
    block r's first ``pad_lens[r]`` rows are padding. Offsets never reach into
    the padding and padded rows pass through unchanged, so each block matches
    what :func:`adaptive_mix` computes on its unpadded sequence.
    """
    times = np.asarray(times, dtype=np.float64)
    pads = np.asarray(pad_lens, dtype=np.int64)
    r, n = times.shape
    rows, d = tokens.data.shape
    if rows != r * n:
        raise ShapeError(f"token rows {rows} do not form {r} blocks of {n}")
    if np.any(np.diff(times, axis=1) < 0):
        raise ContractError("token times must be non-decreasing within each block")
    offsets = np.asarray(offsets, dtype=np.int64)
    k = len(offsets)
    if order_logits.data.shape != (1, k):
        raise ShapeError(
            f"order logits shape {order_logits.data.shape} does not match {k} offsets")

    tape = tokens.tape
    h3 = tokens.data.reshape(r, n, d)
    local = np.arange(n)
    valid = local[None, :, None] - offsets[None, None, :] >= pads[:, None, None]
    covered = valid.any(axis=2)
    gaps = np.full((r, n, k), np.inf)
    for j, p in enumerate(offsets):
        if p < n:
            gaps[:, p:, j] = times[:, p:] - times[:, : n - p]
    gaps[~valid] = np.inf
    theta = _masked_softmax(-gaps)
    order_scores = np.where(valid, order_logits.data[0][None, None, :], -np.inf)
    order_w = _masked_softmax(order_scores)
    fusion_is_value = isinstance(fusion, Value)
    fuse = float(fusion.data[0, 0]) if fusion_is_value else float(fusion)
    alpha = fuse * order_w + (1.0 - fuse) * theta

    out3 = np.zeros_like(h3)
    for j, p in enumerate(offsets):
        if p < n:
            out3[:, p:, :] += alpha[:, p:, j, None] * h3[:, : n - p, :]
    out3[~covered] = h3[~covered]

    nz = int(valid.sum())
    tape.flops += 2 * nz * d + 10 * nz + int((~covered).sum()) * d

    want = tokens.want_grad or order_logits.want_grad or (
        fusion_is_value and fusion.want_grad)
    out = Value(out3.reshape(rows, d), tape, want)
    if want:
        def back():
            g = out.grad
            if g is None:
                return
            g3 = g.reshape(r, n, d)
            if tokens.want_grad:
                dh = np.zeros_like(h3)
                for j, p in enumerate(offsets):
                    if p < n:
                        dh[:, : n - p, :] += alpha[:, p:, j, None] * g3[:, p:, :]
                dh[~covered] += g3[~covered]
                nc.accumulate_grad(tokens, dh.reshape(rows, d))
            need_order = order_logits.want_grad and fuse != 0.0
            need_fuse = fusion_is_value and fusion.want_grad
            if need_order or need_fuse:
                dalpha = np.zeros((r, n, k))
                for j, p in enumerate(offsets):
                    if p < n:
                        dalpha[:, p:, j] = (g3[:, p:, :] * h3[:, : n - p, :]).sum(axis=2)
                if need_order:
                    go = fuse * dalpha
                    ds = order_w * (go - (go * order_w).sum(axis=2, keepdims=True))
                    nc.accumulate_grad(order_logits, ds.sum(axis=(0, 1)).reshape(1, k))
                if need_fuse:
                    dfuse = float((dalpha * (order_w - theta)).sum())
                    nc.accumulate_grad(fusion, np.array([[dfuse]]))
        tape.record(back)
    return out


def pooling_mix(tokens: Value, window: int) -> Value:
    """Mean over the most recent ``window`` tokens, truncated at the start."""
    window = int(window)
    if window < 1:
        raise ContractError(f"pooling window must be >= 1, got {window}")
    h = tokens.data
    n, d = h.shape
    tape = tokens.tape
    cs = np.vstack([np.zeros((1, d)), np.cumsum(h, axis=0)])
    hi = np.arange(1, n + 1)
    lo = np.maximum(0, hi - window)
    counts = (hi - lo).astype(np.float64)[:, None]
    out_data = (cs[hi] - cs[lo]) / counts
    tape.flops += 4 * n * d
    out = Value(out_data, tape, tokens.want_grad)
    if out.want_grad:
        def back():
            g = out.grad
            if g is None:
                return
            a = g / counts
            cs_a = np.vstack([np.zeros((1, d)), np.cumsum(a, axis=0)])
            j = np.arange(n)
            nc.accumulate_grad(tokens, cs_a[np.minimum(n, j + window)] - cs_a[j])
        tape.record(back)
    return out


def mlp_mix(tokens: Value, params: MlpLayer, activation: str = "gelu") -> Value:
    """Token-axis MLP; weight shapes are rigid in the token count."""
    n = tokens.data.shape[0]
    if params.w1.data.shape[1] != n:
        raise ConfigError(
            f"token-mixing weights were built for {params.w1.data.shape[1]} tokens, "
            f"got a sequence of {n}")
    act = _activation(activation)
    hidden = act(nc.add(nc.matmul(params.w1, tokens), params.b1))
    return nc.add(nc.matmul(params.w2, hidden), params.b2)


def attention_mix(tokens: Value, params: AttentionLayer) -> Value:
    """Single-head scaled dot-product attention with output projection."""
    q = nc.matmul(tokens, params.wq)
    k = nc.matmul(tokens, params.wk)
    v = nc.matmul(tokens, params.wv)
    d_k = params.wq.data.shape[1]
    weights = nc.softmax_rows(nc.scale(nc.matmul(q, nc.transpose(k)), 1.0 / np.sqrt(d_k)))
    return nc.matmul(nc.matmul(weights, v), params.wo)


def _activation(name: str):
    if name == "gelu":
        return nc.gelu
    if name == "relu":
        return nc.relu
    raise ConfigError(f"unknown activation {name!r}")


def channel_mix(h: Value, params: ChannelParams, activation: str = "gelu",
                residual: bool = True) -> Value:
    """Feed-forward over layer-normed input, plus residual unless ablated."""
    act = _activation(activation)
    z = nc.layer_norm_rows(h, params.ln_gain, params.ln_bias)
    f = act(nc.add(nc.matmul(z, params.w1), params.b1))
    f = nc.add(nc.matmul(f, params.w2), params.b2)
    return nc.add(h, f) if residual else f


MixerLayer = Union[AdaptiveLayer, PoolingLayer, MlpLayer, AttentionLayer]


def token_block(tokens: Value, times, mixer: MixerLayer, channel: ChannelParams,
                activation: str = "gelu", residual: bool = True,
                use_channel_mixer: bool = True) -> Value:
    """One full block: residual around the token mixer, then the channel mixer."""
    if isinstance(mixer, AdaptiveLayer):
        mixed = adaptive_mix(tokens, times, mixer.offsets, mixer.order_logits, mixer.fusion)
    elif isinstance(mixer, PoolingLayer):
        mixed = pooling_mix(tokens, mixer.window)
    elif isinstance(mixer, MlpLayer):
        mixed = mlp_mix(tokens, mixer, activation)
    elif isinstance(mixer, AttentionLayer):
        mixed = attention_mix(tokens, mixer)
    else:
        raise ConfigError(f"unknown mixer layer type {type(mixer).__name__}")
    h = nc.add(tokens, mixed) if residual else mixed
    if use_channel_mixer:
        h = channel_mix(h, channel, activation, residual)
    return h
