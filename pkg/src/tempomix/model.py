"""The end-to-end network: embed neighbors, stack token blocks, mean readout,
link predictor, and the binary cross-entropy objective.

Parameters live in a flat name -> float64-array mapping so the optimizer,
gradient checks, and checkpoints all share one addressing scheme. A forward
pass binds the arrays onto a tape (as leaves when training, constants when
evaluating) and builds the graph through the pure layer functions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from . import mixers as mx
from .encoders import EncoderParams, embed_neighbors, time_encode_rows
from .numcore import ConfigError, ContractError, Tape, Value
from .tgraph import TemporalStore

__all__ = [
    "PROB_CLAMP",
    "ModelConfig",
    "ModelParams",
    "BoundModel",
    "init_params",
    "bind",
    "node_repr_value",
    "node_repr",
    "predict_link_value",
    "predict_link",
    "bce_loss",
    "batch_loss",
    "score_pairs",
    "effective_fusions",
    "save_checkpoint",
    "load_checkpoint",
]

PROB_CLAMP = 1e-12  # probabilities are clamped to [PROB_CLAMP, 1-PROB_CLAMP] before logs

MIXERS = ("adaptive", "pooling", "mlp", "attention")
ACTIVATIONS = ("gelu", "relu")
MLP_TOKEN_RATIO = 0.5  # hidden token count = ceil(ratio * n_max)


@dataclass
class ModelConfig:
    """Architecture plus ablation switches; layer count equals len(spans)."""

    dim: int = 32
    time_dim: int = 100
    spans: tuple = (2, 4, 8)
    mixer: str = "adaptive"
    activation: str = "gelu"
    n_max: int = 10
    no_lp: bool = False      # pin order/recency fusion to 0 (recency only)
    no_rt: bool = False      # pin fusion to 1 (order weights only)
    no_resnet: bool = False
    no_cm: bool = False

    def __post_init__(self):
        self.spans = tuple(int(s) for s in self.spans)
        if self.mixer not in MIXERS:
            raise ConfigError(f"mixer must be one of {MIXERS}, got {self.mixer!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not 1 <= len(self.spans) <= 3:
            raise ConfigError(f"layer count {len(self.spans)} outside the searched range 1..3")
        mx.OffsetSchedule(self.spans)  # validates monotone positive spans
        if self.dim < 1 or self.time_dim < 1 or self.n_max < 1:
            raise ConfigError("dim, time_dim and n_max must be positive")
        if self.no_lp and self.no_rt:
            raise ConfigError("no_lp and no_rt are mutually exclusive")

    @property
    def num_layers(self) -> int:
        return len(self.spans)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spans"] = list(self.spans)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**dict(d))


@dataclass
class ModelParams:
    """All learnable tensors keyed by a flat canonical name."""

    config: ModelConfig
    node_dim: int
    edge_dim: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.node_dim, self.edge_dim,
                           {k: v.copy() for k, v in self.tensors.items()})


def _glorot(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in, fan_out = shape
    std = np.sqrt(2.0 / (fan_in + fan_out)) if fan_in + fan_out else 1.0
    return rng.normal(scale=std, size=shape)


def init_params(config: ModelConfig, node_dim: int, edge_dim: int, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    d = config.dim
    t = {
        "enc.node": _glorot(rng, (node_dim, d)),
        "enc.edge": _glorot(rng, (edge_dim, d)),
        "enc.time": _glorot(rng, (config.time_dim, d)),
    }
    schedule = mx.OffsetSchedule(config.spans)
    for i in range(config.num_layers):
        if config.mixer == "adaptive":
            k = schedule.kernel_size(i + 1)
            t[f"layer{i}.order"] = np.zeros((1, k))
            t[f"layer{i}.fuse"] = np.zeros((1, 1))
        elif config.mixer == "attention":
            for name in ("wq", "wk", "wv", "wo"):
                t[f"layer{i}.{name}"] = _glorot(rng, (d, d))
        elif config.mixer == "mlp":
            hidden = int(np.ceil(MLP_TOKEN_RATIO * config.n_max))
            t[f"layer{i}.tw1"] = _glorot(rng, (hidden, config.n_max))
            t[f"layer{i}.tb1"] = np.zeros((hidden, 1))
            t[f"layer{i}.tw2"] = _glorot(rng, (config.n_max, hidden))
            t[f"layer{i}.tb2"] = np.zeros((config.n_max, 1))
        t[f"layer{i}.ln_gain"] = np.ones((1, d))
        t[f"layer{i}.ln_bias"] = np.zeros((1, d))
        t[f"layer{i}.ff_w1"] = _glorot(rng, (d, 4 * d))
        t[f"layer{i}.ff_b1"] = np.zeros((1, 4 * d))
        t[f"layer{i}.ff_w2"] = _glorot(rng, (4 * d, d))
        t[f"layer{i}.ff_b2"] = np.zeros((1, d))
    t["pred.w1"] = _glorot(rng, (2 * d, d))
    t["pred.b1"] = np.zeros((1, d))
    # zero final layer: an untrained model scores every pair at exactly 0.5
    t["pred.w2"] = np.zeros((d, 1))
    t["pred.b2"] = np.zeros((1, 1))
    return ModelParams(config, node_dim, edge_dim, t)


class BoundModel:
    """A parameter set bound onto one tape, ready to build forward graphs."""

    def __init__(self, config: ModelConfig, values: Mapping[str, Value]):
        self.config = config
        self.values = values
        self.encoder = EncoderParams(values["enc.node"], values["enc.edge"],
                                     values["enc.time"])
        schedule = mx.OffsetSchedule(config.spans)
        self.layers: list[tuple] = []
        for i in range(config.num_layers):
            if config.mixer == "adaptive":
                if config.no_lp:
                    fusion = 0.0
                elif config.no_rt:
                    fusion = 1.0
                else:
                    fusion = nc.sigmoid(values[f"layer{i}.fuse"])
                mixer = mx.AdaptiveLayer(offsets=schedule.offsets(i + 1),
                                         order_logits=values[f"layer{i}.order"],
                                         fusion=fusion)
            elif config.mixer == "pooling":
                mixer = mx.PoolingLayer(window=schedule.kernel_size(i + 1))
            elif config.mixer == "mlp":
                mixer = mx.MlpLayer(values[f"layer{i}.tw1"], values[f"layer{i}.tb1"],
                                    values[f"layer{i}.tw2"], values[f"layer{i}.tb2"])
            else:
                mixer = mx.AttentionLayer(values[f"layer{i}.wq"], values[f"layer{i}.wk"],
                                          values[f"layer{i}.wv"], values[f"layer{i}.wo"])
            channel = mx.ChannelParams(
                values[f"layer{i}.ln_gain"], values[f"layer{i}.ln_bias"],
                values[f"layer{i}.ff_w1"], values[f"layer{i}.ff_b1"],
                values[f"layer{i}.ff_w2"], values[f"layer{i}.ff_b2"])
            self.layers.append((mixer, channel))
        self.pred = (values["pred.w1"], values["pred.b1"],
                     values["pred.w2"], values["pred.b2"])

    @property
    def tape(self) -> Tape:
        return self.values["enc.time"].tape


def bind(params: ModelParams, tape: Tape, trainable: bool = True) -> BoundModel:
    wrap = tape.leaf if trainable else tape.constant
    values = {k: wrap(v) for k, v in params.tensors.items()}
    return BoundModel(params.config, values)


def node_repr_value(bound: BoundModel, store: TemporalStore, node: int, t: float) -> Value:
    """Temporal representation of ``node`` just before time ``t`` (1 x dim)."""
    cfg = bound.config
    seq = store.recent_neighbors(node, t, cfg.n_max)
    tokens, _ = embed_neighbors(seq, t, store.stream, bound.encoder)
    times = np.asarray(seq.times) if len(seq) else np.array([t])
    if cfg.mixer == "mlp":
        # the token-axis MLP is rigid in N: left-pad to n_max with zero rows
        n = tokens.data.shape[0]
        if n < cfg.n_max:
            pad = bound.tape.constant(np.zeros((cfg.n_max - n, cfg.dim)))
            tokens = nc.concat_rows([pad, tokens])
            times = np.concatenate([np.full(cfg.n_max - n, times[0]), times])
    for mixer, channel in bound.layers:
        tokens = mx.token_block(tokens, times, mixer, channel,
                                activation=cfg.activation,
                                residual=not cfg.no_resnet,
                                use_channel_mixer=not cfg.no_cm)
    return nc.mean_rows(tokens)


def node_repr(store: TemporalStore, node: int, t: float, config: ModelConfig,
              params: ModelParams) -> np.ndarray:
    """Evaluation-path representation as a plain length-dim vector."""
    if params.config != config:
        raise ConfigError("params were initialized for a different config")
    bound = bind(params, Tape(), trainable=False)
    return node_repr_value(bound, store, node, t).data[0].copy()


def _predictor_logits(bound: BoundModel, x: Value) -> Value:
    w1, b1, w2, b2 = bound.pred
    hidden = nc.relu(nc.add(nc.matmul(x, w1), b1))
    return nc.add(nc.matmul(hidden, w2), b2)


def predict_link_value(bound: BoundModel, z_u: Value, z_v: Value) -> Value:
    """Interaction probability from two 1 x dim representations."""
    return nc.sigmoid(_predictor_logits(bound, nc.concat_cols(z_u, z_v)))


def predict_link(z_u: np.ndarray, z_v: np.ndarray, params: ModelParams) -> float:
    tape = Tape()
    bound = bind(params, tape, trainable=False)
    zu = tape.constant(np.asarray(z_u, dtype=np.float64).reshape(1, -1))
    zv = tape.constant(np.asarray(z_v, dtype=np.float64).reshape(1, -1))
    return float(predict_link_value(bound, zu, zv).data[0, 0])


def bce_loss(pos_probs: Sequence[float], neg_probs: Sequence[float]) -> float:
    """Summed binary cross-entropy on probabilities (clamped before logs)."""
    pos = np.asarray(pos_probs, dtype=np.float64)
    neg = np.asarray(neg_probs, dtype=np.float64)
    if pos.size == 0 and neg.size == 0:
        raise ContractError("bce_loss: need at least one probability")
    pos = np.clip(pos, PROB_CLAMP, 1.0 - PROB_CLAMP)
    neg = np.clip(neg, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-(np.log(pos).sum() + np.log(1.0 - neg).sum()))


def _batched_reprs(bound: BoundModel, store: TemporalStore,
                   keys: Sequence[tuple[int, float]]) -> Value:
    """Representations for distinct (node, t) keys, one per output row.

    Adaptive-mixer fast path: every sequence is left-padded to n_max and the
    whole batch flows through stacked tensors; the batched mixer masks both
    causally invalid offsets and padding, and the readout averages only real
    rows, so each row matches the per-sequence computation.
    """
    cfg = bound.config
    stream = store.stream
    n = cfg.n_max
    r = len(keys)
    tape = bound.tape
    seqs = [store.recent_neighbors(node, t, n) for node, t in keys]
    pads = np.array([n - len(s) if len(s) else n - 1 for s in seqs], dtype=np.int64)
    times = np.empty((r, n))
    te_rows = np.zeros((r * n, cfg.time_dim))
    nf_rows = np.zeros((r * n, stream.node_dim)) if stream.node_dim else None
    ef_rows = np.zeros((r * n, stream.edge_dim)) if stream.edge_dim else None
    for i, ((node, t), seq) in enumerate(zip(keys, seqs)):
        base = i * n
        pad = pads[i]
        if len(seq):
            times[i, :pad] = seq.times[0]
            times[i, pad:] = seq.times
            te_rows[base + pad:base + n] = time_encode_rows(t - seq.times, cfg.time_dim)
            if nf_rows is not None:
                nf_rows[base + pad:base + n] = stream.node_feats[seq.neighbor_ids]
            if ef_rows is not None:
                ef_rows[base + pad:base + n] = stream.edge_feats[seq.edge_ids]
        else:
            times[i, :] = t  # single all-zero token, mirroring the padding row
    tokens = nc.matmul(tape.constant(te_rows), bound.encoder.w_time)
    if nf_rows is not None:
        tokens = nc.add(tokens, nc.matmul(tape.constant(nf_rows), bound.encoder.w_node))
    if ef_rows is not None:
        tokens = nc.add(tokens, nc.matmul(tape.constant(ef_rows), bound.encoder.w_edge))
    for mixer, channel in bound.layers:
        mixed = mx.adaptive_mix_batched(tokens, times, pads, mixer.offsets,
                                        mixer.order_logits, mixer.fusion)
        h = mixed if cfg.no_resnet else nc.add(tokens, mixed)
        if cfg.no_cm:
            tokens = h
        else:
            tokens = mx.channel_mix(h, channel, cfg.activation,
                                    residual=not cfg.no_resnet)
    return nc.mean_rows_blocks(tokens, n, pads)


def _stacked_reprs(bound: BoundModel, store: TemporalStore,
                   keys: Sequence[tuple[int, float]]) -> Value:
    """Per-sequence fallback for mixers without a batched kernel."""
    return nc.concat_rows([node_repr_value(bound, store, node, t) for node, t in keys])


def _pair_probs(bound: BoundModel, store: TemporalStore,
                endpoint_pairs: Sequence[tuple[tuple[int, float], tuple[int, float]]]) -> Value:
    keys: dict[tuple[int, float], int] = {}
    for a, b in endpoint_pairs:
        keys.setdefault(a, len(keys))
        keys.setdefault(b, len(keys))
    key_list = list(keys)
    if bound.config.mixer == "adaptive":
        reprs = _batched_reprs(bound, store, key_list)
    else:
        reprs = _stacked_reprs(bound, store, key_list)
    left = nc.gather_rows(reprs, [keys[a] for a, _ in endpoint_pairs])
    right = nc.gather_rows(reprs, [keys[b] for _, b in endpoint_pairs])
    return nc.sigmoid(_predictor_logits(bound, nc.concat_cols(left, right)))


def batch_loss(bound: BoundModel, store: TemporalStore,
               queries: Sequence[tuple[int, int, int, float]]) -> Value:
    """Summed cross-entropy over (src, dst, negative_dst, t) queries.

    Representations are computed once per distinct (node, time) pair; the
    positive pair and its negative share the source representation.
    """
    if not queries:
        raise ContractError("batch_loss: empty query batch")
    tape = bound.tape
    endpoint_pairs = [((u, t), (v, t)) for u, v, _, t in queries]
    endpoint_pairs += [((u, t), (neg, t)) for u, _, neg, t in queries]
    probs = nc.clamp(_pair_probs(bound, store, endpoint_pairs),
                     PROB_CLAMP, 1.0 - PROB_CLAMP)
    b = len(queries)
    pos_sel = tape.constant(np.concatenate([np.ones(b), np.zeros(b)]).reshape(1, -1))
    neg_sel = tape.constant(np.concatenate([np.zeros(b), np.ones(b)]).reshape(1, -1))
    ones = tape.constant(np.ones((2 * b, 1)))
    pos_term = nc.matmul(pos_sel, nc.log(probs))
    neg_term = nc.matmul(neg_sel, nc.log(nc.add(nc.scale(probs, -1.0), ones)))
    return nc.scale(nc.add(pos_term, neg_term), -1.0)


def score_pairs(params: ModelParams, store: TemporalStore,
                pairs: Sequence[tuple[int, int, float]]) -> np.ndarray:
    """Probabilities for (src, dst, t) pairs on the no-gradient path."""
    if not pairs:
        return np.zeros(0)
    bound = bind(params, Tape(), trainable=False)
    endpoint_pairs = [((u, t), (v, t)) for u, v, t in pairs]
    return _pair_probs(bound, store, endpoint_pairs).data[:, 0].copy()


def effective_fusions(params: ModelParams) -> list[float]:
    """Per-layer order/recency fusion coefficient actually used in forward."""
    cfg = params.config
    if cfg.mixer != "adaptive":
        return []
    out = []
    for i in range(cfg.num_layers):
        if cfg.no_lp:
            out.append(0.0)
        elif cfg.no_rt:
            out.append(1.0)
        else:
            raw = float(params.tensors[f"layer{i}.fuse"][0, 0])
            out.append(float(nc._stable_sigmoid(np.array([[raw]]))[0, 0]))
    return out


CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, path) -> None:
    """JSON checkpoint; float64 payloads round-trip bit-exactly."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "node_dim": params.node_dim,
        "edge_dim": params.edge_dim,
        "effective_fusion": effective_fusions(params),
        "tensors": {
            name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            for name, arr in sorted(params.tensors.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> ModelParams:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {doc.get('format_version')}")
    config = ModelConfig.from_dict(doc["config"])
    tensors = {}
    for name, spec in doc["tensors"].items():
        arr = np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
        tensors[name] = arr
    return ModelParams(config, int(doc["node_dim"]), int(doc["edge_dim"]), tensors)
