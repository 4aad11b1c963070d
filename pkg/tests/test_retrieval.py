import numpy as np
import pytest

from conftest import item
from mgfn.graph_builder import InteractionRecord
from mgfn.retrieval import (
    EmbeddingTable,
    ExactIndex,
    UserQueue,
    build_user_queues,
    edge_auc,
    exclusive_items,
    outer_scenario_metrics,
    pca_project,
    precision_recall_at_k,
    principal_components,
    retrieve,
    validation_sets,
    write_pca_csv,
)


def rec(user, i, scen, ts):
    return InteractionRecord(user, item(i), scen, ts, 1.0)


def brute_retrieve(queue, ids, vecs, per_query_k, final_k):
    """Loop oracle: per-query top lists, union, history removal, max score."""
    pos = {x: k for k, x in enumerate(ids)}
    qs = [q for q in queue.queue if q in pos]
    cands = set()
    for q in qs:
        scored = sorted(((-float(vecs[pos[q]] @ vecs[k]), ids[k]) for k in range(len(ids)) if ids[k] != q))
        cands.update(x for _, x in scored[:per_query_k])
    cands -= set(queue.history)
    best = {c: max(float(vecs[pos[q]] @ vecs[pos[c]]) for q in qs) for c in cands}
    return [c for c in sorted(best, key=lambda c: (-best[c], c))][:final_k]


# -- search ----------------------------------------------------------------------


def test_orthonormal_top1():
    ids = [item(i) for i in range(6)]
    idx = ExactIndex(EmbeddingTable(ids, np.eye(6)))
    for k in range(6):
        assert idx.search(np.eye(6)[k], 1)[0] == (ids[k], 1.0)


def test_k_larger_than_table():
    rng = np.random.default_rng(0)
    ids = [item(i) for i in range(5)]
    t = EmbeddingTable(ids, rng.normal(size=(5, 3)))
    got = ExactIndex(t).search(rng.normal(size=3), 50)
    assert sorted(i for i, _ in got) == ids
    assert [s for _, s in got] == sorted((s for _, s in got), reverse=True)


def test_search_matches_brute_force():
    rng = np.random.default_rng(1)
    ids = [f"x{i:04d}" for i in range(500)]
    V = rng.normal(size=(500, 128))
    idx = ExactIndex(EmbeddingTable(ids, V))
    for q in rng.normal(size=(10, 128)):
        want = np.argsort(-(V @ q), kind="stable")[:15]
        assert [i for i, _ in idx.search(q, 15)] == [ids[k] for k in want]


def test_search_ties_by_id():
    ids = ["b", "a", "d", "c"]
    idx = ExactIndex(EmbeddingTable(ids, np.ones((4, 2))))
    assert [i for i, _ in idx.search(np.ones(2), 3)] == ["a", "b", "c"]


# -- retrieve --------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_retrieve_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(30, 1000))
    ids = [item(i) for i in rng.permutation(n)]
    # small integer coordinates produce many exact score ties
    V = rng.integers(-2, 3, size=(n, 4)).astype(float)
    table = EmbeddingTable(ids, V)
    queue = rng.choice(ids, size=min(20, n), replace=False).tolist()
    history = set(queue) | set(rng.choice(ids, size=5).tolist())
    uq = UserQueue("u", queue, history)
    got = retrieve(uq, ExactIndex(table), per_query_k=15, final_k=100)
    assert got == brute_retrieve(uq, ids, V, 15, 100)
    assert not set(got) & history


def test_retrieve_filters_collisions():
    ids = [item(i) for i in range(4)]
    V = np.array([[1.0, 0], [0.9, 0.1], [0.8, 0.2], [0, 1]])
    uq = UserQueue("u", [ids[0]], {ids[0], ids[1]})
    assert retrieve(uq, ExactIndex(EmbeddingTable(ids, V)), per_query_k=2, final_k=10) == [ids[2]]


def test_retrieve_skips_unknown_and_validates():
    t = EmbeddingTable([item(0), item(1)], np.eye(2))
    assert retrieve(UserQueue("u", ["zzz"], set()), ExactIndex(t)) == []
    with pytest.raises(ValueError):
        retrieve(UserQueue("u", [item(0)], set()), ExactIndex(t), aggregate="mean")


def test_sum_aggregate():
    ids = [item(i) for i in range(4)]
    V = np.array([[1.0, 0], [0, 1.0], [0.9, 0.0], [0.6, 0.6]])
    uq = UserQueue("u", ids[:2], set(ids[:2]))
    idx = ExactIndex(EmbeddingTable(ids, V))
    assert retrieve(uq, idx, aggregate="max") == [ids[2], ids[3]]
    assert retrieve(uq, idx, aggregate="sum") == [ids[3], ids[2]]


# -- queues ----------------------------------------------------------------------


def test_queue_bounded_and_from_history():
    rng = np.random.default_rng(2)
    records = [rec(f"u{u}", int(rng.integers(0, 40)), "A" if rng.random() < 0.8 else "B", int(t))
               for u in range(5) for t in rng.integers(0, 10_000, size=60)]
    queues = build_user_queues(records, "A")
    for u, q in queues.items():
        assert len(q.queue) <= 20 and len(set(q.queue)) == len(q.queue)
        seen = {r.item_id for r in records if r.user_id == u and r.scenario_id == "A"}
        assert set(q.queue) <= seen and q.history == seen


def test_queue_keeps_most_recent():
    records = [rec("u", i % 25, "A", i) for i in range(30)]
    q = build_user_queues(records, "A")["u"]
    assert q.queue == [item(k) for k in list(range(10, 25)) + list(range(5))]


# -- metrics ---------------------------------------------------------------------


def test_precision_five_of_hundred():
    ret = {"u": [item(i) for i in range(100)]}
    r = precision_recall_at_k(ret, {"u": {item(i) for i in range(0, 50, 10)}}, k=100)
    assert r.precision == pytest.approx(0.05) and r.recall == pytest.approx(1.0)


def test_recall_half():
    ret = {"u": [item(i) for i in range(100)]}
    val = {"u": {item(1), item(2), item(500), item(501)}}
    r = precision_recall_at_k(ret, val, k=100)
    assert r.recall == pytest.approx(0.5)


def test_metric_averaging():
    ret = {"a": [item(0)], "b": [item(9)], "c": [item(0)]}
    val = {"a": {item(0)}, "b": {item(1), item(2)}}
    r = precision_recall_at_k(ret, val, k=100)
    assert r.n_users == 2
    assert r.precision == pytest.approx(0.005) and r.recall == pytest.approx(0.5)


def test_recall_one_when_contained():
    ret = {"u": [item(i) for i in range(100)]}
    assert precision_recall_at_k(ret, {"u": {item(3), item(99)}}).recall == 1.0


def test_no_eligible_users():
    with pytest.raises(ValueError):
        precision_recall_at_k({"a": [item(0)]}, {"b": {item(0)}})


def test_outer_metrics():
    records = [rec("u", 1, "S", 0), rec("u", 2, "S", 1), rec("u", 3, "T", 2), rec("u", 3, "S", 3)]
    excl = exclusive_items(records, "S", "T")
    assert excl == {item(1), item(2)}
    ret = {"a": [item(1), item(3)], "b": [item(1), item(2)]}
    assert outer_scenario_metrics(ret, excl, {"a": {item(1)}}) == (1, 2, 3)
    assert outer_scenario_metrics({}, excl, {}) == (0, 0, 0)
    assert outer_scenario_metrics(ret, set(), {"a": {item(1)}}) == (0, 0, 0)


def test_validation_sets():
    records = [rec("u", 1, "A", 0), rec("u", 1, "A", 5), rec("v", 2, "B", 0)]
    assert validation_sets(records, "A") == {"u": {item(1)}}


def test_edge_auc():
    t = EmbeddingTable(["a", "b", "c", "d"], np.array([[1.0], [2.0], [0.0], [-1.0]]))
    assert edge_auc(t, [("a", "b")], [("a", "c"), ("a", "d")]) == 1.0
    assert edge_auc(t, [("a", "d")], [("a", "c")]) == 0.0
    assert edge_auc(t, [("a", "c")], [("b", "c")]) == 0.5


def test_edge_auc_matches_pairwise():
    rng = np.random.default_rng(4)
    ids = [item(i) for i in range(30)]
    t = EmbeddingTable(ids, rng.integers(-1, 2, size=(30, 2)).astype(float))
    pos = [tuple(rng.choice(ids, 2)) for _ in range(40)]
    neg = [tuple(rng.choice(ids, 2)) for _ in range(50)]
    sp = [t[a] @ t[b] for a, b in pos]
    sn = [t[a] @ t[b] for a, b in neg]
    want = np.mean([1.0 if p > n else 0.5 if p == n else 0.0 for p in sp for n in sn])
    assert edge_auc(t, pos, neg) == pytest.approx(want)


# -- embeddings and PCA ------------------------------------------------------------


def test_tsv_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    t = EmbeddingTable([item(i) for i in range(7)], rng.normal(size=(7, 4)))
    t.write_tsv(tmp_path / "e.tsv")
    back = EmbeddingTable.read_tsv(tmp_path / "e.tsv")
    assert back.item_ids == t.item_ids
    assert np.allclose(back.vectors, t.vectors, rtol=1e-8)
    (tmp_path / "bad.tsv").write_text("a\t1\t2\nb\t1\n")
    with pytest.raises(ValueError):
        EmbeddingTable.read_tsv(tmp_path / "bad.tsv")


def test_table_validation():
    with pytest.raises(ValueError):
        EmbeddingTable(["a", "a"], np.zeros((2, 2)))
    with pytest.raises(ValueError):
        EmbeddingTable(["a"], np.array([[np.nan]]))


def test_pca_rank_one():
    d = np.array([3.0, 4.0]) / 5
    X = np.outer(np.linspace(-2, 2, 9), d) + 1.0
    mu, axes, vals = principal_components(X)
    assert np.allclose(mu, 1.0)
    assert abs(axes[:, 0] @ d) == pytest.approx(1.0)
    assert vals[1] == pytest.approx(0.0, abs=1e-12)


def test_pca_against_eigh():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(200, 6)) @ np.diag([5, 3, 1, 0.5, 0.2, 0.1])
    _, axes, vals = principal_components(X)
    w, v = np.linalg.eigh(np.cov(X.T))
    top = v[:, ::-1][:, :2]
    assert np.allclose(vals, w[::-1][:2])
    assert np.allclose(np.abs(axes.T @ top), np.eye(2), atol=1e-8)
    # sign convention: largest coordinate of each axis is positive
    assert np.all(axes[np.argmax(np.abs(axes), axis=0), [0, 1]] > 0)
    _, mirrored, _ = principal_components(-X)
    assert np.allclose(mirrored, axes)


def test_pca_rank_zero():
    with pytest.raises(ValueError):
        principal_components(np.ones((5, 3)))
    with pytest.raises(ValueError):
        principal_components(np.ones((1, 3)))


def test_pca_csv_bound(tmp_path):
    rng = np.random.default_rng(7)
    ids = [item(i) for i in range(900)]
    t = EmbeddingTable(ids, rng.normal(size=(900, 5)))
    tags = {x: f"t{k % 4}" for k, x in enumerate(ids)}
    rows = pca_project(t, tags, top_t=3, sample_n=500, sources={ids[0]: "shared"})
    assert len(rows) <= 1500
    assert {r[1] for r in rows} == {"t0", "t1", "t2"}
    write_pca_csv(rows, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "item_id,tag,source,x,y" and len(lines) == len(rows) + 1
