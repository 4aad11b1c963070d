"""Interaction-log cleaning, transition-pair extraction and multi-graph construction."""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import LogParseError
from .multigraph import CrossScenarioMultiGraph

MAX_GAP_S = 3600
MIN_COMPLETION = 0.03
DEFAULT_BUCKETS = 5000

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class InteractionRecord(NamedTuple):
    user_id: str
    item_id: str
    scenario_id: str
    timestamp: int
    completion_rate: float


class TransitionPair(NamedTuple):
    src: str
    dst: str
    scenario_id: str


def fnv1a64(text):
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def hash_bucket(text, n_buckets=DEFAULT_BUCKETS):
    return fnv1a64(text) % n_buckets


# -- log parsing -----------------------------------------------------------

_FIELDS = ("user_id", "item_id", "scenario_id", "timestamp", "completion_rate")


def parse_log(stream):
    """Parse the five-column tab-separated interaction log.

    ``stream`` may yield ``bytes`` or ``str`` lines. Blank lines are skipped;
    anything else that is not a well-formed record raises
    :class:`LogParseError` naming the line and field.
    """
    records = []
    for line_no, raw in enumerate(stream, start=1):
        if isinstance(raw, bytes):
            try:
                raw = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise LogParseError(line_no, "line", f"invalid UTF-8 ({e.reason})") from None
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != len(_FIELDS):
            raise LogParseError(line_no, "line", f"expected {len(_FIELDS)} tab-separated fields, got {len(parts)}")
        for name, value in zip(_FIELDS[:3], parts[:3]):
            if not value:
                raise LogParseError(line_no, name, "empty value")
        try:
            ts = int(parts[3])
        except ValueError:
            raise LogParseError(line_no, "timestamp", f"not an integer: {parts[3]!r}") from None
        try:
            rate = float(parts[4])
        except ValueError:
            raise LogParseError(line_no, "completion_rate", f"not a number: {parts[4]!r}") from None
        if not math.isfinite(rate) or rate < 0:
            raise LogParseError(line_no, "completion_rate", f"must be finite and >= 0, got {parts[4]!r}")
        records.append(InteractionRecord(parts[0], parts[1], parts[2], ts, rate))
    return records


def format_record(r):
    return f"{r.user_id}\t{r.item_id}\t{r.scenario_id}\t{r.timestamp}\t{r.completion_rate:.6g}\n"


def write_log(records, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(format_record(r) for r in records)


def read_log(path):
    with open(path, "rb") as f:
        return parse_log(f)


# -- cleaning and pairs ----------------------------------------------------


def clean_records(records, catalog_ids):
    """Drop duplicate watches, unregistered items and bounces.

    A record survives when its ``(user, item, scenario, timestamp)`` key has
    not been seen before, its item is in ``catalog_ids`` and its completion
    rate is strictly above 3%.
    """
    catalog_ids = set(catalog_ids)
    seen = set()
    out = []
    for r in records:
        key = (r.user_id, r.item_id, r.scenario_id, r.timestamp)
        if key in seen:
            continue
        seen.add(key)
        if r.item_id not in catalog_ids or r.completion_rate <= MIN_COMPLETION:
            continue
        out.append(r)
    return out


def _sequence_key(r):
    return (r.user_id, r.scenario_id, r.timestamp, r.item_id)


def _pairs_sorted(records, max_gap):
    pairs = []
    prev = None
    for r in sorted(records, key=_sequence_key):
        if (
            prev is not None
            and prev.user_id == r.user_id
            and prev.scenario_id == r.scenario_id
            and r.timestamp - prev.timestamp < max_gap
            and prev.item_id != r.item_id
        ):
            pairs.append(TransitionPair(prev.item_id, r.item_id, r.scenario_id))
        prev = r
    return pairs


def _partition_pairs(args):
    records, max_gap = args
    return _pairs_sorted(records, max_gap)


def extract_transition_pairs(records, max_gap=MAX_GAP_S, workers=1):
    """Adjacent watches of one user in one scenario less than ``max_gap``
    seconds apart, as ``earlier -> later`` pairs.

    Sequences are ordered by timestamp with ties broken by item id;
    immediate rewatches (``src == dst``) are dropped. With ``workers > 1``
    users are split into partitions processed in separate processes; the
    result is identical to the sequential path.
    """
    if workers <= 1:
        return _pairs_sorted(records, max_gap)
    users = sorted({r.user_id for r in records})
    bounds = np.linspace(0, len(users), workers + 1).astype(int)
    part_of = {}
    for k in range(workers):
        for u in users[bounds[k]:bounds[k + 1]]:
            part_of[u] = k
    parts = [[] for _ in range(workers)]
    for r in records:
        parts[part_of[r.user_id]].append(r)
    with ProcessPoolExecutor(max_workers=workers) as ex:
        chunks = list(ex.map(_partition_pairs, [(p, max_gap) for p in parts]))
    return [p for chunk in chunks for p in chunk]


# -- graph -----------------------------------------------------------------


def build_csmg(pairs, catalog, records=(), scenarios=None, n_buckets=DEFAULT_BUCKETS, metadata=None):
    """Assemble the multi-graph from transition pairs.

    Nodes are the items seen in ``pairs`` or ``records`` (sorted by id), so
    watched items without transitions are kept as degree-0 nodes. Edge
    weights count every occurrence of a pair. ``catalog`` maps item ids to
    :class:`~mgfn.synthgen.ItemMeta` (a sequence of them is accepted too).
    """
    if not pairs:
        raise ValueError("build_csmg needs at least one transition pair")
    if not isinstance(catalog, dict):
        catalog = {m.item_id: m for m in catalog}
    items = {p.src for p in pairs} | {p.dst for p in pairs} | {r.item_id for r in records}
    missing = sorted(i for i in items if i not in catalog)
    if missing:
        raise KeyError(f"items missing from catalog: {missing[:5]}")
    item_ids = sorted(items)
    index = {item: i for i, item in enumerate(item_ids)}
    scen = set(p.scenario_id for p in pairs) | {r.scenario_id for r in records}
    if scenarios is None:
        scenarios = sorted(scen)
    else:
        scenarios = list(scenarios)
        extra = scen - set(scenarios)
        if extra:
            raise ValueError(f"pairs or records use undeclared scenarios {sorted(extra)}")
    s_index = {s: k for k, s in enumerate(scenarios)}

    edges = []
    for s in scenarios:
        sel = [p for p in pairs if p.scenario_id == s]
        src = np.fromiter((index[p.src] for p in sel), dtype=np.int64, count=len(sel))
        dst = np.fromiter((index[p.dst] for p in sel), dtype=np.int64, count=len(sel))
        edges.append((src, dst, np.ones(len(sel), dtype=np.int64)))

    watches = np.zeros((len(item_ids), len(scenarios)), dtype=np.int64)
    for r in records:
        watches[index[r.item_id], s_index[r.scenario_id]] += 1

    metas = [catalog[i] for i in item_ids]
    buckets = np.array(
        [[hash_bucket(m.keyword, n_buckets), hash_bucket(m.tag, n_buckets), hash_bucket(m.item_id, n_buckets)]
         for m in metas],
        dtype=np.int64,
    ).reshape(len(metas), 3)
    durations = np.array([m.duration_s for m in metas], dtype=np.float64)
    meta = {"n_buckets": n_buckets}
    meta.update(metadata or {})
    return CrossScenarioMultiGraph.from_edges(
        item_ids, scenarios, edges, buckets, durations, watches, n_buckets, metadata=meta,
    )


def build_from_records(records, catalog, scenarios=None, n_buckets=DEFAULT_BUCKETS, metadata=None, workers=1):
    """Clean, extract pairs and build in one call."""
    if not isinstance(catalog, dict):
        catalog = {m.item_id: m for m in catalog}
    cleaned = clean_records(records, catalog.keys())
    pairs = extract_transition_pairs(cleaned, workers=workers)
    return build_csmg(pairs, catalog, cleaned, scenarios=scenarios, n_buckets=n_buckets, metadata=metadata)


# -- edge composition ------------------------------------------------------


@dataclass(frozen=True)
class EdgeCompositionReport:
    source: str
    target: str
    co_shared: int
    with_co_shared_item: int
    exclusive: int
    total_source: int
    total_target: int

    def _pct(self, n):
        return 100.0 * n / self.total_source if self.total_source else 0.0

    @property
    def percentages(self):
        return (self._pct(self.co_shared), self._pct(self.with_co_shared_item), self._pct(self.exclusive))

    def to_text(self):
        p = self.percentages
        rows = [
            ("Co-shared edges of two scenarios", self.co_shared, f"{p[0]:.2f}%"),
            (f"{self.source}-only edges with >= 1 co-shared item", self.with_co_shared_item, f"{p[1]:.2f}%"),
            (f"{self.source}-only edges of {self.source}-exclusive items", self.exclusive, f"{p[2]:.2f}%"),
            (f"# edges in {self.source} scenario", self.total_source, "100%"),
            (f"(# edges in {self.target} scenario)", self.total_target, ""),
        ]
        width = max(len(r[0]) for r in rows)
        lines = [f"{'Edge type':<{width}}  {'Number':>14}  Percentage"]
        lines += [f"{name:<{width}}  {n:>14,}  {pct}" for name, n, pct in rows]
        return "\n".join(lines) + "\n"

    def to_kv(self):
        p = self.percentages
        pairs = [
            ("source", self.source), ("target", self.target),
            ("co_shared", self.co_shared), ("co_shared_pct", f"{p[0]:.4f}"),
            ("with_co_shared_item", self.with_co_shared_item), ("with_co_shared_item_pct", f"{p[1]:.4f}"),
            ("exclusive", self.exclusive), ("exclusive_pct", f"{p[2]:.4f}"),
            ("total_source", self.total_source), ("total_target", self.total_target),
        ]
        return "".join(f"{k}={v}\n" for k, v in pairs)


def classify_edges(g, source, target):
    """Split the source scenario's edges into the three composition classes.

    An edge is co-shared when the same directed edge exists in ``target``;
    otherwise it counts as having a co-shared item when either endpoint was
    watched in ``target`` (or has target degree), and as exclusive if not.
    """
    si, ti = g.scenario_index(source), g.scenario_index(target)
    src_adj, tgt_adj = g.out_adj[si], g.out_adj[ti]
    rows, cols = src_adj.row_ids(), src_adj.indices
    n = g.n_nodes
    tgt_keys = tgt_adj.row_ids() * n + tgt_adj.indices
    shared_edge = np.isin(rows * n + cols, tgt_keys)
    in_target = g.watched_in(ti) | (g.degree(ti) > 0)
    touches = in_target[rows] | in_target[cols]
    co = int(shared_edge.sum())
    with_item = int((~shared_edge & touches).sum())
    excl = int((~shared_edge & ~touches).sum())
    return EdgeCompositionReport(source, target, co, with_item, excl, src_adj.nnz, tgt_adj.nnz)


def graph_stats_table(g):
    """Node and per-scenario edge counts laid out like a dataset statistics table."""
    rows = [("# Nodes", g.n_nodes), ("# Edges", g.n_edges())]
    rows += [(f"# Edges ({s})", g.n_edges(s)) for s in g.scenarios]
    width = max(len(r[0]) for r in rows)
    return "".join(f"{name:<{width}}  {n:>12,}\n" for name, n in rows)
