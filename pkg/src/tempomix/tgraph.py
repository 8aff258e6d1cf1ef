"""Temporal event store.

Ingestion of timestamped interaction streams, chronological splitting,
strict-past most-recent-neighbor queries, negative destination sampling, and
a synthetic stream generator used as a test fixture.

A stream is columnar (numpy arrays) and immutable after construction; the
per-node adjacency built by :class:`TemporalStore` is likewise immutable and
safe to share across threads.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ParseError",
    "ValidationError",
    "SplitError",
    "SamplingError",
    "SpecError",
    "Event",
    "EventStream",
    "NeighborSequence",
    "TemporalStore",
    "ingest_csv",
    "write_csv",
    "chronological_split",
    "recent_neighbors",
    "sample_negative",
    "SyntheticSpec",
    "generate_synthetic",
]


class ParseError(ValueError):
    """A data file is malformed."""


class ValidationError(ValueError):
    """A stream violates its invariants."""


class SplitError(ValueError):
    """Split ratios or stream size make a chronological split impossible."""


class SamplingError(ValueError):
    """Negative sampling has no valid candidate."""


class SpecError(ValueError):
    """A synthetic stream spec is invalid."""


@dataclass(frozen=True)
class Event:
    """One timestamped interaction."""

    src: int
    dst: int
    t: float
    edge_feat: np.ndarray
    label: float


class EventStream:
    """A time-sorted sequence of interactions plus node/edge features.

    Columns are exposed as read-only properties so that tests can interpose
    access-recording subclasses.
    """

    def __init__(self, src, dst, t, edge_feats, labels=None, node_count=None,
                 node_feats=None, validate=True):
        self._src = np.asarray(src, dtype=np.int64)
        self._dst = np.asarray(dst, dtype=np.int64)
        self._t = np.asarray(t, dtype=np.float64)
        self._edge_feats = np.asarray(edge_feats, dtype=np.float64)
        if self._edge_feats.ndim != 2:
            self._edge_feats = self._edge_feats.reshape(len(self._src), -1)
        if labels is None:
            labels = np.zeros(len(self._src))
        self._labels = np.asarray(labels, dtype=np.float64)
        if node_count is None:
            node_count = int(max(self._src.max(initial=-1), self._dst.max(initial=-1)) + 1)
        self._node_count = int(node_count)
        if node_feats is None:
            node_feats = np.zeros((self._node_count, 0))
        self._node_feats = np.asarray(node_feats, dtype=np.float64)
        if validate:
            self._validate()

    def _validate(self):
        n = len(self._src)
        for name, col in (("dst", self._dst), ("t", self._t), ("labels", self._labels)):
            if len(col) != n:
                raise ValidationError(f"column {name} has length {len(col)}, expected {n}")
        if self._edge_feats.shape[0] != n:
            raise ValidationError("edge feature rows do not match event count")
        if n and np.any(self._t < 0):
            raise ValidationError("timestamps must be non-negative")
        if n and np.any(np.diff(self._t) < 0):
            raise ValidationError("events must be sorted by timestamp")
        if n and (self._src.max() >= self._node_count or self._dst.max() >= self._node_count):
            raise ValidationError("node id exceeds node_count")
        if self._node_feats.shape[0] != self._node_count:
            raise ValidationError("node feature rows do not match node_count")

    @property
    def src(self) -> np.ndarray:
        return self._src

    @property
    def dst(self) -> np.ndarray:
        return self._dst

    @property
    def t(self) -> np.ndarray:
        return self._t

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    @property
    def edge_feats(self) -> np.ndarray:
        return self._edge_feats

    @property
    def node_feats(self) -> np.ndarray:
        return self._node_feats

    @property
    def node_count(self) -> int:
        return self._node_count

    @property
    def edge_dim(self) -> int:
        return self._edge_feats.shape[1]

    @property
    def node_dim(self) -> int:
        return self._node_feats.shape[1]

    def __len__(self) -> int:
        return len(self._src)

    def event(self, i: int) -> Event:
        return Event(int(self.src[i]), int(self.dst[i]), float(self.t[i]),
                     self.edge_feats[i], float(self.labels[i]))

    def slice(self, lo: int, hi: int) -> "EventStream":
        """A view of events [lo, hi) sharing the node universe."""
        return EventStream(self.src[lo:hi], self.dst[lo:hi], self.t[lo:hi],
                           self.edge_feats[lo:hi], self.labels[lo:hi],
                           node_count=self.node_count, node_feats=self.node_feats,
                           validate=False)

    def destinations(self) -> np.ndarray:
        """Sorted unique destination ids (the negative-sampling candidate set)."""
        return np.unique(self.dst)

    def shift_times(self, offset: float) -> "EventStream":
        """Copy of the stream with every timestamp moved by ``offset``."""
        return EventStream(self.src, self.dst, self.t + offset, self.edge_feats,
                           self.labels, node_count=self.node_count,
                           node_feats=self.node_feats)


def ingest_csv(path) -> EventStream:
    """Read `src,dst,timestamp,label,feat...` rows (one header line).

    Ids are opaque tokens, compacted to 0..node_count-1 in order of first
    appearance in the time-sorted stream; sorting is stable so rows with
    equal timestamps keep their file order.
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, expected a header line") from None
        width = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 4:
                raise ParseError(f"{path}: line {lineno}: expected at least 4 fields, got {len(row)}")
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(
                    f"{path}: line {lineno}: expected {width} fields, got {len(row)}")
            try:
                t = float(row[2])
                label = float(row[3])
                feats = [float(x) for x in row[4:]]
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            if t < 0:
                raise ValidationError(f"{path}: line {lineno}: negative timestamp {t}")
            rows.append((row[0].strip(), row[1].strip(), t, label, feats))
    if not rows:
        raise ParseError(f"{path}: no data rows")

    order = np.argsort([r[2] for r in rows], kind="stable")
    ids: dict[str, int] = {}
    src = np.empty(len(rows), dtype=np.int64)
    dst = np.empty(len(rows), dtype=np.int64)
    t = np.empty(len(rows))
    labels = np.empty(len(rows))
    feats = np.empty((len(rows), len(rows[0][4])))
    for out_i, in_i in enumerate(order):
        u, v, ts, lab, fs = rows[in_i]
        src[out_i] = ids.setdefault(u, len(ids))
        dst[out_i] = ids.setdefault(v, len(ids))
        t[out_i] = ts
        labels[out_i] = lab
        feats[out_i] = fs
    return EventStream(src, dst, t, feats, labels, node_count=len(ids))


def write_csv(stream: EventStream, path) -> None:
    """Serialize a stream so that ``ingest_csv`` reproduces it exactly."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["src", "dst", "timestamp", "label"]
                        + [f"f{i}" for i in range(stream.edge_dim)])
        for i in range(len(stream)):
            writer.writerow([int(stream.src[i]), int(stream.dst[i]),
                             repr(float(stream.t[i])), repr(float(stream.labels[i]))]
                            + [repr(float(x)) for x in stream.edge_feats[i]])


def chronological_split(stream: EventStream, r_train: float, r_val: float):
    """First floor(r_train*n) events, next floor(r_val*n), remainder."""
    if len(stream) == 0:
        raise SplitError("cannot split an empty stream")
    if not (0 < r_train and 0 <= r_val and r_train + r_val < 1):
        raise SplitError(f"invalid split ratios train={r_train}, val={r_val}")
    n = len(stream)
    n_train = int(np.floor(r_train * n))
    n_val = int(np.floor(r_val * n))
    return (stream.slice(0, n_train),
            stream.slice(n_train, n_train + n_val),
            stream.slice(n_train + n_val, n))


@dataclass(frozen=True)
class NeighborSequence:
    """Up to N_max most recent strictly-past interactions of one node.

    Ordered oldest to newest; ``neighbor_ids`` holds the counterpart node of
    each interaction and ``edge_ids`` indexes into the originating stream.
    """

    neighbor_ids: np.ndarray
    times: np.ndarray
    edge_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.neighbor_ids)


class TemporalStore:
    """Per-node time-sorted adjacency for O(log E + N_max) recency queries.

    Adjacency is undirected: an interaction makes each endpoint the other's
    neighbor. Ties in timestamp keep stream order.
    """

    def __init__(self, stream: EventStream):
        self.stream = stream
        self.node_count = stream.node_count
        n = len(stream)
        # interleave the two endpoint views so a stable sort by owner keeps
        # every node's entries ordered by (time, stream position, src side)
        owners = np.empty(2 * n, dtype=np.int64)
        counterparts = np.empty(2 * n, dtype=np.int64)
        times = np.empty(2 * n)
        edge_ids = np.empty(2 * n, dtype=np.int64)
        owners[0::2], owners[1::2] = stream.src, stream.dst
        counterparts[0::2], counterparts[1::2] = stream.dst, stream.src
        times[0::2] = times[1::2] = stream.t
        edge_ids[0::2] = edge_ids[1::2] = np.arange(n, dtype=np.int64)
        order = np.argsort(owners, kind="stable")
        owners = owners[order]
        bounds = np.searchsorted(owners, np.arange(self.node_count + 1))
        self._nbr = counterparts[order]
        self._time = times[order]
        self._eid = edge_ids[order]
        self._lo = bounds[:-1]
        self._hi = bounds[1:]

    def recent_neighbors(self, node: int, t: float, n_max: int) -> NeighborSequence:
        if not (0 <= node < self.node_count):
            raise ValidationError(f"node {node} outside 0..{self.node_count - 1}")
        if t < 0:
            raise ValidationError(f"query time must be non-negative, got {t}")
        lo, hi = self._lo[node], self._hi[node]
        end = lo + np.searchsorted(self._time[lo:hi], t, side="left")
        start = max(lo, end - n_max)
        return NeighborSequence(self._nbr[start:end], self._time[start:end],
                                self._eid[start:end])


def recent_neighbors(store: TemporalStore, node: int, t: float, n_max: int) -> NeighborSequence:
    return store.recent_neighbors(node, t, n_max)


def sample_negative(rng: np.random.Generator, src: int, true_dst: int,
                    candidates: np.ndarray) -> int:
    """Uniform draw over ``candidates`` minus the observed destination."""
    candidates = np.asarray(candidates)
    valid = candidates[candidates != true_dst]
    if len(valid) == 0:
        raise SamplingError(f"no negative candidate for destination {true_dst}")
    return int(valid[rng.integers(len(valid))])


@dataclass
class SyntheticSpec:
    """Parameters of the generated stream; accepted as a JSON document.

    ``periodic`` makes each source repeat its previous destination with
    probability ``p_repeat`` (otherwise it switches to a uniformly chosen
    different destination). ``endpoint_onehot`` edge features carry indicator
    coordinates for both endpoints, which is what makes the repeat pattern
    learnable from token sequences alone.
    """

    n_src: int = 10
    n_dst: int = 10
    n_events: int = 1000
    pattern: str = "uniform"
    p_repeat: float = 0.9
    time_step: float = 1.0
    edge_feat_kind: str = "endpoint_onehot"

    def __post_init__(self):
        if self.n_src <= 0 or self.n_dst <= 0:
            raise SpecError("node counts must be positive")
        if self.n_events < 0:
            raise SpecError("event count must be non-negative")
        if self.pattern not in ("uniform", "periodic"):
            raise SpecError(f"unknown pattern {self.pattern!r}")
        if not (0.0 <= self.p_repeat <= 1.0):
            raise SpecError("p_repeat must lie in [0, 1]")
        if self.edge_feat_kind not in ("none", "endpoint_onehot"):
            raise SpecError(f"unknown edge_feat_kind {self.edge_feat_kind!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSpec":
        return cls.from_dict(json.loads(text))


def generate_synthetic(spec: SyntheticSpec, seed: int) -> EventStream:
    """Deterministic stream for the given seed. Sources are 0..n_src-1,
    destinations n_src..n_src+n_dst-1; timestamps advance by ``time_step``."""
    rng = np.random.default_rng(seed)
    n = spec.n_events
    src = rng.integers(spec.n_src, size=n)
    dst = np.empty(n, dtype=np.int64)
    prev = np.full(spec.n_src, -1, dtype=np.int64)
    repeat_draw = rng.random(n)
    for i in range(n):
        u = src[i]
        if (spec.pattern == "periodic" and prev[u] >= 0
                and repeat_draw[i] < spec.p_repeat):
            d = prev[u]
        else:
            d = int(rng.integers(spec.n_dst))
            if spec.pattern == "periodic" and prev[u] >= 0 and spec.n_dst > 1:
                while d == prev[u] - spec.n_src:
                    d = int(rng.integers(spec.n_dst))
            d += spec.n_src
        dst[i] = d
        prev[u] = d
    t = np.arange(n, dtype=np.float64) * spec.time_step
    node_count = spec.n_src + spec.n_dst
    if spec.edge_feat_kind == "endpoint_onehot":
        feats = np.zeros((n, node_count))
        feats[np.arange(n), src] = 1.0
        feats[np.arange(n), dst] = 1.0
    else:
        feats = np.zeros((n, 0))
    return EventStream(src, dst, t, feats, node_count=node_count)
