"""Star-graph planning instances: sampling, serialization, oracle paths, scoring.

A star graph G(d, l) has d arms of l-1 vertices each radiating from a single
center. An instance is serialized as a flat token sequence: the edge list as
consecutive vertex-id pairs, then the (source, target) pair, then the
connecting path. No separator tokens are used. Vertex ids are drawn without
replacement from a global pool of size N; token ids are the identity map
0..N-1, with one extra reserved mask token id N.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

STRP_MAGIC = b"STRP"
STRP_VERSION = 1
_HEADER = struct.Struct("<4sHHHII")  # magic, version, d, l, N, seq_len


@dataclass(frozen=True)
class StarSpec:
    """Shape of the star: d arms, l vertices per source-to-leaf path, pool size N."""

    d: int
    l: int
    pool_size: int = 100

    def __post_init__(self):
        if self.d < 2 or self.l < 2:
            raise ConfigError(f"degenerate star spec d={self.d}, l={self.l}: need d >= 2 and l >= 2")
        if self.pool_size < self.n_vertices:
            raise ConfigError(
                f"pool_size={self.pool_size} too small for d={self.d}, l={self.l}: "
                f"need at least {self.n_vertices}"
            )

    @property
    def n_vertices(self) -> int:
        return 1 + self.d * (self.l - 1)

    @property
    def n_edges(self) -> int:
        return self.d * (self.l - 1)

    @property
    def prefix_len(self) -> int:
        # edge pairs + (source, target)
        return 2 * self.n_edges + 2

    @property
    def path_len(self) -> int:
        return self.l


@dataclass(frozen=True)
class TaskVariant:
    """Output-region transform. `hint_k` only matters for hinted decoding."""

    kind: str
    hint_k: int = 2

    KINDS = ("original", "first_order", "ell_order", "hinted")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown task variant {self.kind!r}")
        if self.kind == "hinted" and self.hint_k < 0:
            raise ConfigError("hinted variant needs hint_k >= 0")

    @classmethod
    def original(cls) -> "TaskVariant":
        return cls("original")

    @classmethod
    def first_order(cls) -> "TaskVariant":
        return cls("first_order")

    @classmethod
    def ell_order(cls) -> "TaskVariant":
        return cls("ell_order")

    @classmethod
    def hinted(cls, k: int = 2) -> "TaskVariant":
        return cls("hinted", hint_k=k)

    @classmethod
    def parse(cls, label: str) -> "TaskVariant":
        if label.startswith("hinted"):
            _, _, k = label.partition(":")
            return cls.hinted(int(k) if k else 2)
        return cls(label)

    @property
    def label(self) -> str:
        return f"hinted:{self.hint_k}" if self.kind == "hinted" else self.kind

    def region_len(self, l: int) -> int:
        # ell_order keeps the (information-free) center copy plus the junction vertex
        return 2 if self.kind == "ell_order" else l

    def transform(self, path: np.ndarray) -> np.ndarray:
        """Map a forward path [center, ..., leaf] to this variant's target region."""
        if self.kind == "first_order":
            return path[::-1].copy()
        if self.kind == "ell_order":
            return path[:2].copy()
        return path.copy()  # original and hinted train on forward paths


@dataclass(frozen=True)
class Vocabulary:
    """Vertex ids occupy [0, n_vertices); the single mask token sits at the end."""

    n_vertices: int

    @property
    def mask_id(self) -> int:
        return self.n_vertices

    @property
    def size(self) -> int:
        return self.n_vertices + 1


@dataclass(frozen=True)
class StarGraph:
    center: int
    arms: tuple[tuple[int, ...], ...]
    target_arm: int

    def __post_init__(self):
        ids = [self.center] + [v for arm in self.arms for v in arm]
        if len(set(ids)) != len(ids):
            raise ValueError("star graph vertex ids must be distinct")
        if not 0 <= self.target_arm < len(self.arms):
            raise ValueError("target_arm out of range")
        if len({len(arm) for arm in self.arms}) != 1:
            raise ValueError("all arms must have equal length")

    @property
    def d(self) -> int:
        return len(self.arms)

    @property
    def l(self) -> int:
        return len(self.arms[0]) + 1

    @property
    def target_leaf(self) -> int:
        return self.arms[self.target_arm][-1]

    def edges(self) -> list[tuple[int, int]]:
        """Directed edges (toward the leaves), arm-major order."""
        out = []
        for arm in self.arms:
            prev = self.center
            for v in arm:
                out.append((prev, v))
                prev = v
        return out

    def depth_of(self, vertex: int) -> int:
        """Hops from the center: 0 for the center, l-1 for a leaf."""
        if vertex == self.center:
            return 0
        for arm in self.arms:
            for j, v in enumerate(arm):
                if v == vertex:
                    return j + 1
        raise KeyError(f"vertex {vertex} not in graph")


@dataclass(frozen=True)
class Instance:
    graph: StarGraph
    prefix: np.ndarray
    region: np.ndarray
    variant: TaskVariant

    @property
    def tokens(self) -> np.ndarray:
        return np.concatenate([self.prefix, self.region])


def sample_graph(spec: StarSpec, rng: np.random.Generator) -> StarGraph:
    """Draw vertex ids uniformly without replacement and pick a uniform target arm."""
    vertices, targets = _sample_batch(spec, rng, 1)
    return _graph_from_row(spec, vertices[0], int(targets[0]))


def oracle_path(graph: StarGraph) -> np.ndarray:
    """The unique source-to-target path [center, v_1, ..., leaf], length l."""
    return np.array([graph.center, *graph.arms[graph.target_arm]], dtype=np.int64)


def serialize(
    graph: StarGraph,
    variant: TaskVariant = TaskVariant.original(),
    rng: np.random.Generator | None = None,
    edge_order: str = "shuffled",
) -> tuple[np.ndarray, np.ndarray]:
    """Token serialization: (prefix = edges + source + target, variant target region).

    edge_order "shuffled" permutes whole edge pairs uniformly (requires rng);
    "arm-major" lists each arm's edges center-outward in arm order.
    """
    edges = np.array(graph.edges(), dtype=np.int64)
    if edge_order == "shuffled":
        if rng is None:
            raise ValueError("edge_order='shuffled' needs an rng")
        edges = edges[rng.permutation(len(edges))]
    elif edge_order != "arm-major":
        raise ConfigError(f"unknown edge_order {edge_order!r}")
    prefix = np.concatenate([edges.reshape(-1), [graph.center, graph.target_leaf]])
    region = variant.transform(oracle_path(graph))
    return prefix.astype(np.int64), region.astype(np.int64)


def parse_prefix(tokens: np.ndarray, spec: StarSpec) -> StarGraph:
    """Rebuild the StarGraph from a serialized prefix (any edge order).

    Arms are ordered by first appearance of their junction vertex in the edge
    list; this is a presentation choice only, identity is settled by
    `fingerprint`.
    """
    tokens = np.asarray(tokens)
    if tokens.shape[0] < spec.prefix_len:
        raise ValueError("prefix too short for spec")
    edge_toks = tokens[: 2 * spec.n_edges]
    source = int(tokens[spec.prefix_len - 2])
    target = int(tokens[spec.prefix_len - 1])
    succ: dict[int, int] = {}
    junctions: list[int] = []
    for i in range(spec.n_edges):
        head, tail = int(edge_toks[2 * i]), int(edge_toks[2 * i + 1])
        if head == source:
            junctions.append(tail)
        else:
            if head in succ:
                raise ValueError(f"vertex {head} has multiple outgoing edges; not a star")
            succ[head] = tail
    if len(junctions) != spec.d:
        raise ValueError(f"expected {spec.d} arms at source, found {len(junctions)}")
    arms = []
    for junction in junctions:
        arm = [junction]
        while arm[-1] in succ:
            arm.append(succ[arm[-1]])
        if len(arm) != spec.l - 1:
            raise ValueError("arm length mismatch while parsing prefix")
        arms.append(tuple(arm))
    graph = StarGraph(center=source, arms=tuple(arms), target_arm=0)
    for t, arm in enumerate(arms):
        if arm[-1] == target:
            return StarGraph(center=source, arms=tuple(arms), target_arm=t)
    raise ValueError("target token is not a leaf of any arm")


def fingerprint(graph: StarGraph) -> int:
    """64-bit identity hash, invariant to edge shuffling and arm order."""
    vertices = np.concatenate([[graph.center], np.array(graph.arms, dtype=np.int64).reshape(-1)])
    spec = StarSpec(graph.d, graph.l, pool_size=1 + graph.d * (graph.l - 1))
    canon = _canonical_batch(spec, vertices[None, :], np.array([graph.target_arm]))
    return int(_fingerprint_batch(graph.d, graph.l, canon)[0])


def exact_match(pred: np.ndarray, gold: np.ndarray) -> int:
    pred = np.asarray(pred)
    gold = np.asarray(gold)
    if pred.shape != gold.shape:
        raise ValueError(f"prediction/gold length mismatch: {pred.shape} vs {gold.shape}")
    return int(np.array_equal(pred, gold))


def testset_score(preds: np.ndarray, golds: np.ndarray) -> float:
    """Fraction of predictions that match token-by-token."""
    preds = np.asarray(preds)
    golds = np.asarray(golds)
    if preds.shape != golds.shape:
        raise ValueError(f"prediction/gold shape mismatch: {preds.shape} vs {golds.shape}")
    return float((preds == golds).all(axis=1).mean())


def count_distinct_instances(spec: StarSpec) -> int:
    """Number of distinct instances under arm-order-invariant identity."""
    k = spec.d * (spec.l - 1)
    ordered = spec.pool_size * math.perm(spec.pool_size - 1, k)
    return ordered // math.factorial(spec.d) * spec.d


# --- vectorized internals -------------------------------------------------

def _sample_batch(spec: StarSpec, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """n rows of (vertex ids in slot order [center, arm0..., arm1...], target arm)."""
    keys = rng.random((n, spec.pool_size))
    vertices = np.argsort(keys, axis=1)[:, : spec.n_vertices].astype(np.int64)
    targets = rng.integers(0, spec.d, size=n)
    return vertices, targets


def _arms_view(spec: StarSpec, vertices: np.ndarray) -> np.ndarray:
    return vertices[:, 1:].reshape(-1, spec.d, spec.l - 1)


def _edges_batch(spec: StarSpec, vertices: np.ndarray) -> np.ndarray:
    """(n, n_edges, 2) arm-major directed edges."""
    arms = _arms_view(spec, vertices)
    center = vertices[:, 0]
    heads = np.concatenate([np.broadcast_to(center[:, None, None], arms[:, :, :1].shape), arms[:, :, :-1]], axis=2)
    return np.stack([heads, arms], axis=-1).reshape(len(vertices), spec.n_edges, 2)


def _serialize_batch(
    spec: StarSpec,
    vertices: np.ndarray,
    targets: np.ndarray,
    variant: TaskVariant,
    rng: np.random.Generator | None,
    edge_order: str,
) -> np.ndarray:
    """(n, seq_len) full sequences: prefix followed by the variant target region."""
    n = len(vertices)
    edges = _edges_batch(spec, vertices)
    if edge_order == "shuffled":
        perm = np.argsort(rng.random((n, spec.n_edges)), axis=1)
        edges = np.take_along_axis(edges, perm[:, :, None], axis=1)
    elif edge_order != "arm-major":
        raise ConfigError(f"unknown edge_order {edge_order!r}")
    arms = _arms_view(spec, vertices)
    center = vertices[:, 0]
    leaves = arms[np.arange(n), targets, -1]
    paths = np.concatenate([center[:, None], arms[np.arange(n), targets]], axis=1)
    if variant.kind == "first_order":
        region = paths[:, ::-1]
    elif variant.kind == "ell_order":
        region = paths[:, :2]
    else:
        region = paths
    return np.concatenate([edges.reshape(n, -1), center[:, None], leaves[:, None], region], axis=1)


def _canonical_batch(spec: StarSpec, vertices: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Canonical prefixes: arms sorted by junction id, arm-major edges."""
    n = len(vertices)
    arms = _arms_view(spec, vertices)
    order = np.argsort(arms[:, :, 0], axis=1)
    arms_sorted = np.take_along_axis(arms, order[:, :, None], axis=1)
    canon_vertices = np.concatenate([vertices[:, :1], arms_sorted.reshape(n, -1)], axis=1)
    edges = _edges_batch(spec, canon_vertices)
    center = vertices[:, 0]
    leaves = arms[np.arange(n), targets, -1]
    return np.concatenate([edges.reshape(n, -1), center[:, None], leaves[:, None]], axis=1)


def _fingerprint_batch(d: int, l: int, canonical: np.ndarray) -> np.ndarray:
    prefix = struct.pack("<HH", d, l)
    data = np.ascontiguousarray(canonical.astype("<u2"))
    out = np.empty(len(canonical), dtype=np.uint64)
    for i, row in enumerate(data):
        out[i] = int.from_bytes(hashlib.blake2b(prefix + row.tobytes(), digest_size=8).digest(), "little")
    return out


def _graph_from_row(spec: StarSpec, vertices: np.ndarray, target: int) -> StarGraph:
    arms = tuple(tuple(int(v) for v in arm) for arm in _arms_view(spec, vertices[None, :])[0])
    return StarGraph(center=int(vertices[0]), arms=arms, target_arm=target)


# --- test sets and training streams ---------------------------------------

@dataclass
class TestSet:
    spec: StarSpec
    variant: TaskVariant
    seed: int
    prefixes: np.ndarray  # (size, prefix_len)
    regions: np.ndarray   # (size, region_len)
    fingerprints: np.ndarray  # (size,) uint64
    graphs: list[StarGraph] = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.prefixes)

    @property
    def fingerprint_set(self) -> set[int]:
        return set(int(f) for f in self.fingerprints)

    def instance(self, i: int) -> Instance:
        return Instance(self.graphs[i], self.prefixes[i], self.regions[i], self.variant)

    def instances(self) -> list[Instance]:
        return [self.instance(i) for i in range(self.size)]


def build_testset(
    spec: StarSpec,
    size: int,
    seed: int,
    variant: TaskVariant = TaskVariant.original(),
    edge_order: str = "shuffled",
) -> TestSet:
    """Deterministic held-out set of `size` unique instances (by fingerprint)."""
    if size < 1:
        raise ConfigError("test set size must be >= 1")
    total = count_distinct_instances(spec)
    if size > total:
        raise ConfigError(
            f"requested {size} instances but StarSpec(d={spec.d}, l={spec.l}, "
            f"pool_size={spec.pool_size}) only admits {total} distinct instances"
        )
    rng = np.random.default_rng(seed)
    seen: set[int] = set()
    rows_v, rows_t, fps = [], [], []
    stalled = 0
    while len(seen) < size:
        batch = max(256, size - len(seen))
        vertices, targets = _sample_batch(spec, rng, batch)
        canon = _canonical_batch(spec, vertices, targets)
        batch_fp = _fingerprint_batch(spec.d, spec.l, canon)
        progressed = False
        for i, fp in enumerate(batch_fp):
            fp = int(fp)
            if fp in seen:
                continue
            seen.add(fp)
            rows_v.append(vertices[i])
            rows_t.append(int(targets[i]))
            fps.append(fp)
            progressed = True
            if len(seen) == size:
                break
        stalled = 0 if progressed else stalled + 1
        if stalled > 1000:
            raise ConfigError(f"instance sampling stalled for spec {spec}; space nearly exhausted")
    vertices = np.stack(rows_v)
    targets = np.array(rows_t)
    seqs = _serialize_batch(spec, vertices, targets, variant, rng, edge_order)
    prefixes = seqs[:, : spec.prefix_len]
    regions = seqs[:, spec.prefix_len :]
    graphs = [_graph_from_row(spec, vertices[i], int(targets[i])) for i in range(size)]
    return TestSet(spec, variant, seed, prefixes, regions, np.array(fps, dtype=np.uint64), graphs)


class InstanceStream:
    """On-the-fly unique training instances, rejecting the forbidden set.

    Single-epoch guarantee: no fingerprint is emitted twice, and nothing in
    `forbidden` (the held-out test set) is ever emitted. Deterministic given
    (spec, variant, seed, forbidden).
    """

    def __init__(
        self,
        spec: StarSpec,
        variant: TaskVariant,
        seed: int,
        forbidden: set[int] | None = None,
        edge_order: str = "shuffled",
    ):
        self.spec = spec
        self.variant = variant
        self.edge_order = edge_order
        self.rng = np.random.default_rng(seed)
        self.forbidden = set(forbidden or ())
        self.seen: set[int] = set()
        self._space = count_distinct_instances(spec)

    def next_batch(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """(tokens (n, seq_len), fingerprints (n,)). Raises ConfigError on exhaustion."""
        if len(self.seen) + len(self.forbidden) + n > self._space:
            raise ConfigError(
                f"instance space exhausted for StarSpec(d={self.spec.d}, l={self.spec.l}, "
                f"pool_size={self.spec.pool_size}): {self._space} distinct instances total"
            )
        out_v, out_t, out_fp = [], [], []
        rejects = 0
        while len(out_fp) < n:
            want = n - len(out_fp)
            vertices, targets = _sample_batch(self.spec, self.rng, max(want, 64))
            canon = _canonical_batch(self.spec, vertices, targets)
            fps = _fingerprint_batch(self.spec.d, self.spec.l, canon)
            for i, fp in enumerate(fps):
                fp = int(fp)
                if fp in self.seen or fp in self.forbidden:
                    rejects += 1
                    continue
                self.seen.add(fp)
                out_v.append(vertices[i])
                out_t.append(int(targets[i]))
                out_fp.append(fp)
                if len(out_fp) == n:
                    break
            if rejects > 10000 + 100 * n:
                raise ConfigError(
                    f"rejection sampling starved for StarSpec(d={self.spec.d}, l={self.spec.l}, "
                    f"pool_size={self.spec.pool_size}); instance space nearly exhausted"
                )
        vertices = np.stack(out_v)
        targets = np.array(out_t)
        seqs = _serialize_batch(self.spec, vertices, targets, self.variant, self.rng, self.edge_order)
        return seqs, np.array(out_fp, dtype=np.uint64)

    def state(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "seen": np.fromiter(self.seen, dtype=np.uint64, count=len(self.seen)),
        }

    def restore(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.seen = set(int(f) for f in state["seen"])


# --- dataset files ---------------------------------------------------------

def save_testset(ts: TestSet, path: str | Path, text: bool = True) -> Path:
    """Write the binary record file (and optionally the text twin next to it)."""
    path = Path(path)
    if ts.spec.pool_size >= 1 << 16:
        raise ConfigError("binary format stores u16 tokens; pool_size must be < 65536")
    seqs = np.concatenate([ts.prefixes, ts.regions], axis=1).astype("<u2")
    header = _HEADER.pack(STRP_MAGIC, STRP_VERSION, ts.spec.d, ts.spec.l, ts.spec.pool_size, seqs.shape[1])
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(seqs).tobytes())
    if text:
        with open(path.with_suffix(".txt"), "w") as f:
            for row in seqs:
                f.write(" ".join(str(int(t)) for t in row) + "\n")
    meta = {"d": ts.spec.d, "l": ts.spec.l, "pool_size": ts.spec.pool_size,
            "variant": ts.variant.label, "seed": ts.seed, "size": ts.size}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_testset(path: str | Path) -> TestSet:
    """Read a binary record file; the variant is inferred from the target region."""
    path = Path(path)
    raw = path.read_bytes()
    magic, version, d, l, pool, seq_len = _HEADER.unpack_from(raw, 0)
    if magic != STRP_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != STRP_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    spec = StarSpec(d, l, pool)
    body = np.frombuffer(raw, dtype="<u2", offset=_HEADER.size)
    if body.size % seq_len:
        raise ValueError(f"{path}: truncated record data")
    seqs = body.reshape(-1, seq_len).astype(np.int64)
    prefixes = seqs[:, : spec.prefix_len]
    regions = seqs[:, spec.prefix_len :]
    graphs = [parse_prefix(p, spec) for p in prefixes]
    variant = _infer_variant(spec, graphs, regions)
    vertices = np.stack(
        [np.concatenate([[g.center], np.array(g.arms, dtype=np.int64).reshape(-1)]) for g in graphs]
    )
    targets = np.array([g.target_arm for g in graphs])
    canon = _canonical_batch(spec, vertices, targets)
    fps = _fingerprint_batch(spec.d, spec.l, canon)
    seed = -1  # unknown once on disk; identity lives in the fingerprints
    meta_path = path.with_suffix(".json")
    if meta_path.exists():
        seed = json.loads(meta_path.read_text()).get("seed", -1)
    return TestSet(spec, variant, seed, prefixes, regions, fps, graphs)


def _infer_variant(spec: StarSpec, graphs: list[StarGraph], regions: np.ndarray) -> TaskVariant:
    if regions.shape[1] == 2 and spec.l != 2:
        return TaskVariant.ell_order()
    forward = oracle_path(graphs[0])
    if np.array_equal(regions[0], forward):
        return TaskVariant.original()
    if np.array_equal(regions[0], forward[::-1]):
        return TaskVariant.first_order()
    if regions.shape[1] == 2:
        return TaskVariant.ell_order()
    raise ValueError("target region matches no known task variant")
