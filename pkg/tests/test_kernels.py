import numpy as np
import pytest

from conftest import random_graph
from mgfn import _kernels_py, kernels

impls = kernels.implementations()


def random_csr(rng, n_rows, max_deg):
    deg = rng.integers(0, max_deg + 1, size=n_rows)
    indptr = np.concatenate([[0], np.cumsum(deg)])
    weights = rng.random(indptr[-1]) + 0.05
    return indptr, weights


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")
    assert "python" in impls


@pytest.mark.parametrize("fanout", [None, 0, 1, 3, 10, 40])
def test_backends_agree_on_sampling(fanout):
    rng = np.random.default_rng(fanout or 0)
    indptr, weights = random_csr(rng, 300, 30)
    nodes = rng.choice(300, size=120)
    u = rng.random(int((indptr[nodes + 1] - indptr[nodes]).sum()))
    ref = kernels.sample_neighbors(indptr, weights, nodes, fanout, u, impl=_kernels_py)
    for impl in impls.values():
        row, pos = kernels.sample_neighbors(indptr, weights, nodes, fanout, u, impl=impl)
        assert np.array_equal(row, ref[0]) and np.array_equal(pos, ref[1])


def test_sampling_semantics():
    rng = np.random.default_rng(1)
    indptr, weights = random_csr(rng, 50, 12)
    nodes = np.arange(50)
    u = rng.random(indptr[-1])
    row, pos = kernels.sample_neighbors(indptr, weights, nodes, 4, u)
    deg = np.diff(indptr)
    assert np.array_equal(np.bincount(row, minlength=50), np.minimum(deg, 4))
    assert np.all((pos >= indptr[nodes[row]]) & (pos < indptr[nodes[row] + 1]))
    # rows ascending, positions ascending within a row, no repeats
    key = row * indptr[-1] + pos
    assert np.all(np.diff(key) > 0)
    row_all, pos_all = kernels.sample_neighbors(indptr, weights, nodes, None, np.zeros(0))
    assert np.array_equal(pos_all, np.arange(indptr[-1]))


def test_sampling_prefers_heavy_edges():
    indptr = np.array([0, 2])
    weights = np.array([1.0, 1000.0])
    n = 2000
    rng = np.random.default_rng(3)
    _, pos = kernels.sample_neighbors(indptr, weights, np.zeros(n, dtype=np.int64), 1, rng.random(2 * n))
    assert np.mean(pos == 1) > 0.99


def test_backends_agree_on_membership():
    g = random_graph(100, 600, seed=5)
    u = g.union_out
    rng = np.random.default_rng(0)
    heads = rng.integers(0, 100, 5000)
    cands = rng.integers(0, 100, 5000)
    results = [kernels.edges_exist(u.indptr, u.indices, heads, cands, impl=m) for m in impls.values()]
    brute = np.array([c in set(u.row(h)[0].tolist()) for h, c in zip(heads, cands)])
    for r in results:
        assert np.array_equal(r, brute)


def test_membership_empty():
    indptr = np.zeros(4, dtype=np.int64)
    out = kernels.edges_exist(indptr, np.zeros(0), np.array([0, 2]), np.array([1, 1]))
    assert out.tolist() == [False, False]
