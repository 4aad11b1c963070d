"""Cross-scenario multi-graph storage, neighbor sampling and the graph file format.

Binary graph file, all integers little-endian::

    magic       8 bytes  b"CSMGRAPH"
    version     u32      FORMAT_VERSION
    flags       u32      0
    meta_len    u32      length of the UTF-8 JSON metadata that follows
    meta        bytes    sort_keys JSON (effective build config)
    n_nodes     u32
    n_scen      u32
    n_buckets   u32
    scenarios   n_scen  x (u16 length, UTF-8 bytes)
    item ids    n_nodes x (u16 length, UTF-8 bytes)
    buckets     n_nodes x 3 u32   keyword, tag, id bucket
    continuous  n_nodes x 2 f64   log(1+duration_s), log(1+total degree)
    watches     n_nodes x n_scen u32   cleaned watch records per scenario
    per scenario (out-adjacency, rows sorted by src, columns by dst):
        nnz     u64
        indptr  (n_nodes + 1) x u64
        indices nnz x u32
        counts  nnz x u32
    crc32       u32      over every preceding byte

The in-adjacency is rebuilt as the transpose on load.
"""

import json
import struct
import zlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import kernels
from .errors import GraphFormatError, UnknownScenarioError

MAGIC = b"CSMGRAPH"
FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class CSR:
    indptr: np.ndarray
    indices: np.ndarray
    counts: np.ndarray

    @property
    def n_rows(self):
        return len(self.indptr) - 1

    @property
    def nnz(self):
        return len(self.indices)

    def row(self, i):
        a, b = self.indptr[i], self.indptr[i + 1]
        return self.indices[a:b], self.counts[a:b]

    def row_ids(self):
        return np.repeat(np.arange(self.n_rows, dtype=np.int64), np.diff(self.indptr))

    def transpose(self, n_cols=None):
        n_cols = self.n_rows if n_cols is None else n_cols
        return csr_from_edges(self.indices, self.row_ids(), self.counts, n_cols)

    def __eq__(self, other):
        return (
            isinstance(other, CSR)
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.counts, other.counts)
        )


def csr_from_edges(rows, cols, counts, n_rows):
    """CSR with duplicate ``(row, col)`` entries summed, sorted by (row, col)."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    if len(rows):
        order = np.lexsort((cols, rows))
        rows, cols, counts = rows[order], cols[order], counts[order]
        new = np.ones(len(rows), dtype=bool)
        new[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        starts = np.flatnonzero(new)
        counts = np.add.reduceat(counts, starts)
        rows, cols = rows[starts], cols[starts]
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n_rows), out=indptr[1:])
    return CSR(indptr, cols, counts)


@dataclass(frozen=True, eq=False)
class CrossScenarioMultiGraph:
    """Directed item multi-graph with one weighted edge set per scenario.

    ``out_adj[s]`` rows are sources, ``in_adj[s]`` rows are destinations; both
    carry integer transition counts. ``buckets`` and ``continuous`` together
    form the raw feature row of each node.
    """

    item_ids: tuple
    scenarios: tuple
    buckets: np.ndarray
    continuous: np.ndarray
    watch_counts: np.ndarray
    out_adj: tuple
    n_buckets: int
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_edges(cls, item_ids, scenarios, edges, buckets, durations, watch_counts,
                   n_buckets, metadata=None):
        """Build from per-scenario ``(src, dst, count)`` index arrays.

        The log-degree feature column is computed here from the edge counts.
        """
        n = len(item_ids)
        out_adj = tuple(csr_from_edges(src, dst, cnt, n) for src, dst, cnt in edges)
        deg = np.zeros(n, dtype=np.int64)
        for adj in out_adj:
            deg += np.bincount(adj.row_ids(), weights=adj.counts, minlength=n).astype(np.int64)
            deg += np.bincount(adj.indices, weights=adj.counts, minlength=n).astype(np.int64)
        continuous = np.column_stack([
            np.log1p(np.asarray(durations, dtype=np.float64)),
            np.log1p(deg.astype(np.float64)),
        ]) if n else np.zeros((0, 2))
        return cls(
            item_ids=tuple(item_ids),
            scenarios=tuple(scenarios),
            buckets=np.asarray(buckets, dtype=np.int64).reshape(n, 3),
            continuous=continuous,
            watch_counts=np.asarray(watch_counts, dtype=np.int64).reshape(n, len(scenarios)),
            out_adj=out_adj,
            n_buckets=int(n_buckets),
            metadata=dict(metadata or {}),
        )

    @property
    def n_nodes(self):
        return len(self.item_ids)

    @cached_property
    def index(self):
        return {item: i for i, item in enumerate(self.item_ids)}

    @cached_property
    def in_adj(self):
        return tuple(adj.transpose(self.n_nodes) for adj in self.out_adj)

    def scenario_index(self, s):
        if isinstance(s, (int, np.integer)) and 0 <= s < len(self.scenarios):
            return int(s)
        try:
            return self.scenarios.index(s)
        except ValueError:
            raise UnknownScenarioError(s) from None

    def n_edges(self, s=None):
        if s is None:
            return sum(adj.nnz for adj in self.out_adj)
        return self.out_adj[self.scenario_index(s)].nnz

    def in_degree(self, s):
        """Weighted in-degree (sum of transition counts) in scenario ``s``."""
        adj = self.out_adj[self.scenario_index(s)]
        return np.bincount(adj.indices, weights=adj.counts, minlength=self.n_nodes).astype(np.int64)

    def out_degree(self, s):
        adj = self.out_adj[self.scenario_index(s)]
        return np.bincount(adj.row_ids(), weights=adj.counts, minlength=self.n_nodes).astype(np.int64)

    def degree(self, s):
        return self.in_degree(s) + self.out_degree(s)

    def total_degree(self):
        total = np.zeros(self.n_nodes, dtype=np.int64)
        for s in range(len(self.scenarios)):
            total += self.degree(s)
        return total

    def watched_in(self, s):
        """Boolean mask of nodes with at least one cleaned watch in ``s``."""
        return self.watch_counts[:, self.scenario_index(s)] > 0

    @cached_property
    def union_out(self):
        """Out-adjacency over all scenarios, used for negative rejection."""
        rows = np.concatenate([a.row_ids() for a in self.out_adj]) if self.out_adj else []
        cols = np.concatenate([a.indices for a in self.out_adj]) if self.out_adj else []
        cnt = np.concatenate([a.counts for a in self.out_adj]) if self.out_adj else []
        return csr_from_edges(rows, cols, cnt, self.n_nodes)

    def normalized_in_weights(self, s, mode="log"):
        """Per in-edge weight aligned with ``in_adj[s].indices``."""
        return _norm_cache(self, self.scenario_index(s), mode)

    def max_in_degree(self):
        """Largest number of distinct in-neighbors of any node in any scenario."""
        return max((int(np.diff(a.indptr).max(initial=0)) for a in self.in_adj), default=0)

    def __eq__(self, other):
        if not isinstance(other, CrossScenarioMultiGraph):
            return NotImplemented
        return (
            self.item_ids == other.item_ids
            and self.scenarios == other.scenarios
            and self.n_buckets == other.n_buckets
            and np.array_equal(self.buckets, other.buckets)
            and np.array_equal(self.continuous, other.continuous)
            and np.array_equal(self.watch_counts, other.watch_counts)
            and all(a == b for a, b in zip(self.out_adj, other.out_adj))
        )

    __hash__ = None


def _norm_cache(g, s, mode):
    cache = g.__dict__.setdefault("_norm", {})
    key = (s, mode)
    if key not in cache:
        adj = g.in_adj[s]
        if mode == "raw":
            w = adj.counts.astype(np.float64)
        elif mode == "log":
            lw = np.log1p(adj.counts.astype(np.float64))
            rows = adj.row_ids()
            sums = np.bincount(rows, weights=lw, minlength=adj.n_rows)
            w = lw / sums[rows]
        else:
            raise ValueError(f"unknown weight mode {mode!r}")
        w.flags.writeable = False
        cache[key] = w
    return cache[key]


def normalize_weight(count, neighborhood_counts, mode="log"):
    """Edge weight of one in-edge given the counts of the full in-neighborhood.

    ``"log"`` returns ``log(1+c) / sum(log(1+c_j))`` so a node's in-weights sum
    to one; ``"raw"`` returns the count unchanged.
    """
    if mode == "raw":
        return float(count)
    if mode != "log":
        raise ValueError(f"unknown weight mode {mode!r}")
    denom = float(np.sum(np.log1p(np.asarray(neighborhood_counts, dtype=np.float64))))
    return float(np.log1p(count)) / denom


class ScenarioView:
    """Read-only adjacency of one scenario; returned slices are array views."""

    def __init__(self, g, s):
        self.graph = g
        self.s = g.scenario_index(s)
        self.name = g.scenarios[self.s]
        self._in = g.in_adj[self.s]
        self._out = g.out_adj[self.s]

    def in_neighbors(self, i):
        return self._in.row(i)

    def out_neighbors(self, i):
        return self._out.row(i)

    def weight(self, src, dst):
        """Transition count of ``src -> dst``; 0 when absent."""
        cols, counts = self._out.row(src)
        k = np.searchsorted(cols, dst)
        if k < len(cols) and cols[k] == dst:
            return int(counts[k])
        return 0

    def normalized_in(self, i, mode="log"):
        w = self.graph.normalized_in_weights(self.s, mode)
        return w[self._in.indptr[i]:self._in.indptr[i + 1]]

    @property
    def n_edges(self):
        return self._out.nnz


def scenario_subgraph(g, s):
    return ScenarioView(g, s)


def sample_in_neighbors(g, s, node, fanout, rng, mode="log"):
    """Up to ``fanout`` in-neighbors of ``node``, drawn without replacement
    with probability proportional to ``log(1 + count)``.

    Returns ``(neighbor, normalized weight)`` pairs in neighbor order.
    """
    if fanout is not None and fanout < 1:
        raise ValueError("fanout must be >= 1")
    si = g.scenario_index(s)
    adj = g.in_adj[si]
    deg = int(adj.indptr[node + 1] - adj.indptr[node])
    u = rng.random(deg) if fanout is not None and deg > fanout else np.zeros(deg)
    _, pos = kernels.sample_neighbors(adj.indptr, _logw_cache(g, si), np.array([node]), fanout, u)
    w = g.normalized_in_weights(si, mode)
    return [(int(adj.indices[p]), float(w[p])) for p in pos]


@dataclass(frozen=True, eq=False)
class EdgeSet:
    """Edges of one layer and scenario; ``src`` indexes the layer's input
    slots, ``dst`` its output slots. Sorted by ``dst``."""

    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    n_dst: int

    @property
    def n_edges(self):
        return len(self.src)

    @cached_property
    def dst_indptr(self):
        ptr = np.zeros(self.n_dst + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.dst, minlength=self.n_dst), out=ptr[1:])
        return ptr

    @cached_property
    def in_count(self):
        return np.diff(self.dst_indptr)


@dataclass(frozen=True, eq=False)
class SampledBlock:
    """Layered sampled neighborhood for one forward pass.

    ``nodes[l]`` holds the graph node ids available at depth ``l``; every
    ``nodes[l + 1]`` is a prefix of ``nodes[l]`` and ``nodes[-1]`` are the
    unique seeds. ``layers[l][s]`` maps ``nodes[l]`` to ``nodes[l + 1]`` in
    scenario ``s``. ``seed_inverse`` maps each requested seed to its slot.
    """

    nodes: list
    layers: list
    seed_inverse: np.ndarray
    buckets: np.ndarray
    continuous: np.ndarray
    scenarios: tuple

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def seeds(self):
        return self.nodes[-1]


def build_block(g, seeds, fanouts, rng=None, scenarios=None, mode="log"):
    """Sample a ``len(fanouts)``-hop block around ``seeds``.

    ``fanouts[0]`` applies to the hop adjacent to the raw inputs and
    ``fanouts[-1]`` to the hop into the seeds; ``None`` keeps every in-edge.
    """
    scen_idx = [g.scenario_index(s) for s in (scenarios if scenarios is not None else g.scenarios)]
    seeds = np.asarray(seeds, dtype=np.int64)
    uniq, inverse = np.unique(seeds, return_inverse=True)
    n_layers = len(fanouts)
    nodes = [None] * (n_layers + 1)
    layers = [None] * n_layers
    nodes[n_layers] = uniq
    for l in range(n_layers - 1, -1, -1):
        dst = nodes[l + 1]
        fanout = fanouts[l]
        picked = []
        for si in scen_idx:
            adj = g.in_adj[si]
            if fanout is not None and fanout > 0:
                total = int((adj.indptr[dst + 1] - adj.indptr[dst]).sum())
                u = rng.random(total)
            else:
                u = np.zeros(0)
            # sampling probability follows log(1 + count)
            logw = _logw_cache(g, si)
            row, pos = kernels.sample_neighbors(adj.indptr, logw, dst, fanout, u)
            picked.append((row, adj.indices[pos], g.normalized_in_weights(si, mode)[pos]))
        srcs = np.concatenate([p[1] for p in picked]) if picked else np.zeros(0, dtype=np.int64)
        extra = np.setdiff1d(np.unique(srcs), dst, assume_unique=True)
        layer_nodes = np.concatenate([dst, extra])
        order = np.argsort(layer_nodes, kind="stable")
        sorted_nodes = layer_nodes[order]
        layer_edges = []
        for row, src_global, w in picked:
            src_slot = order[np.searchsorted(sorted_nodes, src_global)]
            layer_edges.append(EdgeSet(src_slot.astype(np.int64), row.astype(np.int64),
                                       np.asarray(w, dtype=np.float64), len(dst)))
        nodes[l] = layer_nodes
        layers[l] = layer_edges
    return SampledBlock(
        nodes=nodes,
        layers=layers,
        seed_inverse=inverse.astype(np.int64),
        buckets=g.buckets[nodes[0]],
        continuous=g.continuous[nodes[0]],
        scenarios=tuple(g.scenarios[si] for si in scen_idx),
    )


def _logw_cache(g, s):
    cache = g.__dict__.setdefault("_logw", {})
    if s not in cache:
        cache[s] = np.log1p(g.in_adj[s].counts.astype(np.float64))
    return cache[s]


def full_block(g, seeds, n_layers=2):
    """Block holding every in-edge of the ``n_layers``-hop neighborhood."""
    return build_block(g, seeds, [None] * n_layers)


# -- serialization ---------------------------------------------------------


def _pack_str(s):
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise GraphFormatError(f"identifier too long: {s[:40]!r}...")
    return struct.pack("<H", len(b)) + b


def serialize(g, metadata=None):
    meta = dict(g.metadata)
    if metadata:
        meta.update(metadata)
    meta_b = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    n, ns = g.n_nodes, len(g.scenarios)
    parts = [
        MAGIC,
        struct.pack("<II", FORMAT_VERSION, 0),
        struct.pack("<I", len(meta_b)),
        meta_b,
        struct.pack("<III", n, ns, g.n_buckets),
    ]
    parts += [_pack_str(s) for s in g.scenarios]
    parts += [_pack_str(i) for i in g.item_ids]
    parts.append(g.buckets.astype("<u4").tobytes())
    parts.append(g.continuous.astype("<f8").tobytes())
    parts.append(g.watch_counts.astype("<u4").tobytes())
    for adj in g.out_adj:
        parts.append(struct.pack("<Q", adj.nnz))
        parts.append(adj.indptr.astype("<u8").tobytes())
        parts.append(adj.indices.astype("<u4").tobytes())
        parts.append(adj.counts.astype("<u4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise GraphFormatError(f"truncated graph data at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(
            np.float64 if dt.kind == "f" else np.int64)

    def string(self):
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def deserialize(data):
    data = bytes(data)
    if len(data) < len(MAGIC) + 12 or data[:len(MAGIC)] != MAGIC:
        raise GraphFormatError("not a graph file (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    version = struct.unpack("<I", data[8:12])[0]
    if version != FORMAT_VERSION:
        raise GraphFormatError(f"unsupported graph format version {version}, expected {FORMAT_VERSION}")
    if zlib.crc32(body) != crc:
        raise GraphFormatError("checksum mismatch: corrupt or truncated graph data")
    r = _Reader(body)
    r.take(len(MAGIC) + 8)
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except ValueError as e:
        raise GraphFormatError(f"bad metadata block: {e}") from None
    n, ns, n_buckets = r.unpack("<III")
    scenarios = tuple(r.string() for _ in range(ns))
    item_ids = tuple(r.string() for _ in range(n))
    buckets = r.array("<u4", n * 3).reshape(n, 3)
    continuous = r.array("<f8", n * 2).reshape(n, 2)
    watches = r.array("<u4", n * ns).reshape(n, ns)
    out_adj = []
    for _ in range(ns):
        (nnz,) = r.unpack("<Q")
        indptr = r.array("<u8", n + 1)
        indices = r.array("<u4", nnz)
        counts = r.array("<u4", nnz)
        if indptr[0] != 0 or indptr[-1] != nnz or np.any(np.diff(indptr) < 0):
            raise GraphFormatError("inconsistent CSR row pointers")
        if nnz and (indices.max() >= n or counts.min() < 1):
            raise GraphFormatError("edge index out of range or zero count")
        out_adj.append(CSR(indptr, indices, counts))
    if r.pos != len(body):
        raise GraphFormatError("trailing bytes after graph data")
    return CrossScenarioMultiGraph(
        item_ids=item_ids, scenarios=scenarios, buckets=buckets, continuous=continuous,
        watch_counts=watches, out_adj=tuple(out_adj), n_buckets=n_buckets, metadata=meta,
    )


def save_graph(g, path, metadata=None):
    with open(path, "wb") as f:
        f.write(serialize(g, metadata))


def load_graph(path):
    with open(path, "rb") as f:
        return deserialize(f.read())


def restrict_to_scenario(g, s):
    """Single-scenario graph: edges of ``s`` and the nodes watched in ``s``."""
    si = g.scenario_index(s)
    keep = np.flatnonzero(g.watch_counts[:, si] > 0)
    adj = g.out_adj[si]
    rows = adj.row_ids()
    ok = np.isin(rows, keep) & np.isin(adj.indices, keep)
    remap = np.full(g.n_nodes, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    return _rebuild(g, keep, (g.scenarios[si],),
                    [(remap[rows[ok]], remap[adj.indices[ok]], adj.counts[ok])],
                    g.watch_counts[keep][:, [si]])


def collapse_scenarios(g, name="concat"):
    """One scenario whose edges pool the counts of every scenario."""
    rows = np.concatenate([a.row_ids() for a in g.out_adj])
    cols = np.concatenate([a.indices for a in g.out_adj])
    cnts = np.concatenate([a.counts for a in g.out_adj])
    keep = np.arange(g.n_nodes)
    return _rebuild(g, keep, (name,), [(rows, cols, cnts)],
                    g.watch_counts.sum(axis=1, keepdims=True))


def _rebuild(g, keep, scenarios, edges, watches):
    durations = np.expm1(g.continuous[keep, 0])
    return CrossScenarioMultiGraph.from_edges(
        [g.item_ids[i] for i in keep], scenarios, edges, g.buckets[keep],
        np.rint(durations), watches, g.n_buckets, metadata=g.metadata,
    )
