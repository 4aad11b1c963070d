"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def _segments(indptr, nodes):
    starts = indptr[nodes]
    lens = indptr[nodes + 1] - starts
    total = int(lens.sum())
    row = np.repeat(np.arange(len(nodes), dtype=np.int64), lens)
    offs = np.cumsum(lens) - lens
    pos = np.arange(total, dtype=np.int64) - np.repeat(offs, lens) + np.repeat(starts, lens)
    return row, pos, lens, offs


def sample_neighbors(indptr, weights, nodes, fanout, uniforms):
    """Weighted sampling without replacement over CSR row segments.

    Each edge gets the key ``log(1 - u) / w`` and the ``fanout`` largest keys
    of a segment survive (ties go to the lower position). Segments no longer
    than ``fanout`` are kept whole. Returns ``(row, pos)`` sorted by row, then
    position.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    row, pos, lens, offs = _segments(indptr, nodes)
    if fanout <= 0 or len(row) == 0:
        return row, pos
    big = lens > fanout
    if not big.any():
        return row, pos
    keys = np.log(1.0 - uniforms[: len(pos)]) / weights[pos]
    order = np.lexsort((pos, -keys, row))
    rank = np.empty(len(pos), dtype=np.int64)
    rank[order] = np.arange(len(pos)) - offs[row[order]]
    keep = (~big[row]) | (rank < fanout)
    return row[keep], pos[keep]


def edges_exist(indptr, indices, heads, cands):
    """Membership of ``(heads[i], cands[i])`` in a CSR with sorted rows."""
    n_rows = len(indptr) - 1
    width = max(n_rows, int(indices.max()) + 1 if len(indices) else 1)
    rows = np.repeat(np.arange(n_rows, dtype=np.int64), np.diff(indptr))
    keys = rows * width + indices
    q = np.asarray(heads, dtype=np.int64) * width + np.asarray(cands, dtype=np.int64)
    at = np.searchsorted(keys, q)
    at_c = np.minimum(at, len(keys) - 1)
    if len(keys) == 0:
        return np.zeros(len(q), dtype=bool)
    return keys[at_c] == q
