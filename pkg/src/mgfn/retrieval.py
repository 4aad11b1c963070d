"""Exact inner-product retrieval, offline metrics and embedding projection."""

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

QUEUE_LEN = 20
PER_QUERY_K = 15
FINAL_K = 100


class EmbeddingTable:
    """Item embeddings as a dense matrix with an id index."""

    def __init__(self, item_ids, vectors):
        vectors = np.asarray(vectors)
        if vectors.ndim != 2 or len(item_ids) != vectors.shape[0]:
            raise ValueError("need one vector row per item id")
        if len(set(item_ids)) != len(item_ids):
            raise ValueError("duplicate item ids")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("non-finite embedding values")
        self.item_ids = list(item_ids)
        self.vectors = vectors
        self.index = {item: i for i, item in enumerate(self.item_ids)}

    def __len__(self):
        return len(self.item_ids)

    def __contains__(self, item):
        return item in self.index

    def __getitem__(self, item):
        return self.vectors[self.index[item]]

    @property
    def dim(self):
        return self.vectors.shape[1]

    def write_tsv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for item, row in zip(self.item_ids, self.vectors):
                f.write(item + "\t" + "\t".join(f"{x:.9g}" for x in row) + "\n")

    @classmethod
    def read_tsv(cls, path):
        ids, rows = [], []
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                try:
                    rows.append([float(x) for x in parts[1:]])
                except ValueError:
                    raise ValueError(f"{path}:{line_no}: non-numeric embedding value") from None
                ids.append(parts[0])
        if len({len(r) for r in rows}) > 1:
            raise ValueError(f"{path}: rows have differing dimensions")
        return cls(ids, np.array(rows, dtype=np.float64).reshape(len(ids), -1))


def _topk(scores, k, id_rank):
    """Indices of the ``k`` best scores, ties to the smaller id rank."""
    n = len(scores)
    if k >= n:
        cand = np.arange(n)
    else:
        thresh = np.partition(scores, n - k)[n - k]
        cand = np.flatnonzero(scores >= thresh)
    order = np.lexsort((id_rank[cand], -scores[cand]))
    return cand[order[:k]]


class ExactIndex:
    """Exhaustive inner-product search over an :class:`EmbeddingTable`."""

    def __init__(self, table):
        if len(table) == 0:
            raise ValueError("empty embedding table")
        self.table = table
        self.matrix = table.vectors
        rank = np.empty(len(table), dtype=np.int64)
        rank[np.argsort(np.array(table.item_ids, dtype=object), kind="stable")] = np.arange(len(table))
        self.id_rank = rank

    def search(self, query, k, exclude=None):
        """Top ``k`` ``(item_id, score)`` pairs for a query vector."""
        scores = self.matrix @ np.asarray(query)
        if exclude is not None:
            scores = scores.copy()
            scores[exclude] = -np.inf
            k = min(k, len(scores) - 1)
        idx = _topk(scores, k, self.id_rank)
        return [(self.table.item_ids[i], float(scores[i])) for i in idx]


def build_index(table):
    return ExactIndex(table)


@dataclass
class UserQueue:
    user_id: str
    queue: list
    history: set = field(default_factory=set)


def build_user_queues(records, scenario, length=QUEUE_LEN):
    """Most recent distinct items per user in ``scenario`` (latest last),
    plus the full watch history used for collision filtering."""
    by_user = defaultdict(list)
    for r in records:
        if r.scenario_id == scenario:
            by_user[r.user_id].append(r)
    queues = {}
    for user in sorted(by_user):
        seq = sorted(by_user[user], key=lambda r: (r.timestamp, r.item_id))
        recent = []
        for r in reversed(seq):
            if r.item_id not in recent:
                recent.append(r.item_id)
                if len(recent) == length:
                    break
        queues[user] = UserQueue(user, recent[::-1], {r.item_id for r in seq})
    return queues


def validation_sets(records, scenario):
    out = defaultdict(set)
    for r in records:
        if r.scenario_id == scenario:
            out[r.user_id].add(r.item_id)
    return dict(out)


def retrieve(queue, index, per_query_k=PER_QUERY_K, final_k=FINAL_K, aggregate="max"):
    """Candidate list for one user.

    Each queue item fetches its ``per_query_k`` highest inner-product
    neighbours (itself excluded); candidates in the watch history are
    dropped; the rest are scored by the max (or sum) inner product over the
    queue and the best ``final_k`` returned, ties broken by item id.
    Queue items missing from the index are skipped.
    """
    if aggregate not in ("max", "sum"):
        raise ValueError("aggregate must be 'max' or 'sum'")
    table = index.table
    q_idx = [table.index[i] for i in queue.queue if i in table.index]
    if not q_idx:
        return []
    scores = index.matrix[q_idx] @ index.matrix.T
    cands = set()
    for row, qi in zip(scores, q_idx):
        row = row.copy()
        row[qi] = -np.inf
        cands.update(_topk(row, min(per_query_k, len(row) - 1), index.id_rank).tolist())
    history = {table.index[i] for i in queue.history if i in table.index}
    cands = np.array(sorted(cands - history), dtype=np.int64)
    if len(cands) == 0:
        return []
    sub = scores[:, cands]
    agg = sub.max(axis=0) if aggregate == "max" else sub.sum(axis=0)
    order = np.lexsort((index.id_rank[cands], -agg))[:final_k]
    return [table.item_ids[i] for i in cands[order]]


def retrieve_all(queues, index, per_query_k=PER_QUERY_K, final_k=FINAL_K, aggregate="max"):
    return {u: retrieve(q, index, per_query_k, final_k, aggregate) for u, q in queues.items()}


@dataclass
class EvalReport:
    precision: float
    recall: float
    n_users: int
    k: int
    hits: dict = field(default_factory=dict)
    outer_watches: int = 0
    outer_unique_items: int = 0
    outer_presence: int = 0

    def to_text(self):
        return (
            f"users evaluated          {self.n_users}\n"
            f"precision@{self.k:<14d} {self.precision:.6f}\n"
            f"recall@{self.k:<17d} {self.recall:.6f}\n"
            f"outer-scenario watches   {self.outer_watches}\n"
            f"unique outer items       {self.outer_unique_items}\n"
            f"outer items retrieved    {self.outer_presence}\n"
        )

    def to_kv(self):
        return (
            f"n_users={self.n_users}\nk={self.k}\nprecision={self.precision:.9g}\n"
            f"recall={self.recall:.9g}\nouter_watches={self.outer_watches}\n"
            f"outer_unique_items={self.outer_unique_items}\nouter_presence={self.outer_presence}\n"
        )


def precision_recall_at_k(retrievals, validation, k=FINAL_K):
    """Mean hits/k and mean hits/|validation| over users with a retrieval
    entry (a training history) and a nonempty validation set."""
    users = sorted(u for u in retrievals if validation.get(u))
    if not users:
        raise ValueError("no users with both training and validation watches")
    hits = {}
    p_sum = r_sum = 0.0
    for u in users:
        truth = validation[u]
        h = len(set(retrievals[u][:k]) & truth)
        hits[u] = h
        p_sum += h / k
        r_sum += h / len(truth)
    return EvalReport(p_sum / len(users), r_sum / len(users), len(users), k, hits)


def exclusive_items(records, source, target):
    """Items watched in ``source`` and never in ``target``."""
    seen_s, seen_t = set(), set()
    for r in records:
        if r.scenario_id == source:
            seen_s.add(r.item_id)
        elif r.scenario_id == target:
            seen_t.add(r.item_id)
    return seen_s - seen_t


def outer_scenario_metrics(retrievals, exclusive, validation):
    """``(watches, unique items, presences)`` of source-exclusive items.

    A watch is an exclusive item that a user was retrieved and also watched
    in validation; unique items and presences count exclusive items across
    all retrieval lists, distinct and with multiplicity.
    """
    watches = presence = 0
    unique = set()
    for u in sorted(retrievals):
        got = set(retrievals[u]) & exclusive
        presence += len(got)
        unique |= got
        watches += len(got & validation.get(u, set()))
    return watches, len(unique), presence


def edge_auc(table, pos_pairs, neg_pairs):
    """Probability that a positive pair outscores a negative pair (ties count half)."""
    def scores(pairs):
        a = np.array([table.index[x] for x, _ in pairs])
        b = np.array([table.index[y] for _, y in pairs])
        return np.einsum("ij,ij->i", table.vectors[a], table.vectors[b])

    pos, neg = scores(pos_pairs), scores(neg_pairs)
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(len(allv))
    sorted_v = allv[order]
    # average ranks for ties
    i = 0
    while i < len(sorted_v):
        j = i
        while j + 1 < len(sorted_v) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    r_pos = ranks[:len(pos)].sum()
    return (r_pos - len(pos) * (len(pos) + 1) / 2.0) / (len(pos) * len(neg))


# -- PCA -------------------------------------------------------------------


def principal_components(X, n_components=2):
    """Mean and leading principal axes of the rows of ``X``.

    Axes come from an exact eigendecomposition of the covariance and are
    sign-fixed so the largest-magnitude coordinate of each is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError("need at least two rows")
    mu = X.mean(axis=0)
    Xc = X - mu
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n_components]
    vals, vecs = vals[order], vecs[:, order]
    if not vals[0] > 1e-12 * max(1.0, float(np.abs(X).max()) ** 2):
        raise ValueError("degenerate embedding table (rank 0)")
    signs = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])])
    return mu, vecs * signs, vals


def pca_project(table, tags, top_t=3, sample_n=500, seed=42, sources=None):
    """Rows ``(item_id, tag, source, x, y)`` for up to ``sample_n`` items from
    each of the ``top_t`` most frequent tags, projected on the top two axes."""
    counts = defaultdict(list)
    for item in table.item_ids:
        if item in tags:
            counts[tags[item]].append(item)
    chosen_tags = sorted(counts, key=lambda t: (-len(counts[t]), t))[:top_t]
    rng = np.random.default_rng(seed)
    picked = []
    for t in chosen_tags:
        items = sorted(counts[t])
        if len(items) > sample_n:
            items = sorted(rng.choice(items, size=sample_n, replace=False).tolist())
        picked += [(i, t) for i in items]
    X = np.array([table[i] for i, _ in picked])
    mu, axes, _ = principal_components(X)
    P = (X - mu) @ axes
    sources = sources or {}
    return [(i, t, sources.get(i, ""), float(P[k, 0]), float(P[k, 1])) for k, (i, t) in enumerate(picked)]


def write_pca_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("item_id,tag,source,x,y\n")
        for item, tag, src, x, y in rows:
            f.write(f"{item},{tag},{src},{x:.9g},{y:.9g}\n")
