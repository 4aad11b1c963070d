# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled sampling kernels.

Both functions mirror :mod:`mgfn._kernels_py` exactly, including tie-breaks,
so the two backends are interchangeable under a fixed random stream.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport log
from libc.stdlib cimport malloc, free, qsort

cnp.import_array()


cdef struct KeyPos:
    double key
    long long pos


cdef int _cmp_keypos(const void *a, const void *b) noexcept nogil:
    cdef KeyPos *x = <KeyPos *> a
    cdef KeyPos *y = <KeyPos *> b
    if x.key > y.key:
        return -1
    if x.key < y.key:
        return 1
    if x.pos < y.pos:
        return -1
    if x.pos > y.pos:
        return 1
    return 0


cdef int _cmp_ll(const void *a, const void *b) noexcept nogil:
    cdef long long x = (<long long *> a)[0]
    cdef long long y = (<long long *> b)[0]
    return (x > y) - (x < y)


def sample_neighbors(const long long[::1] indptr,
                     const double[::1] weights,
                     const long long[::1] nodes,
                     long long fanout,
                     const double[::1] uniforms):
    """Weighted sampling without replacement over CSR row segments.

    Returns ``(row, pos)``: for every kept edge, the index into ``nodes`` of its
    row and the absolute edge position in the CSR arrays.
    """
    cdef Py_ssize_t n = nodes.shape[0]
    cdef Py_ssize_t i, j, m, start, out_n = 0, u_off = 0
    cdef long long node, k
    cdef Py_ssize_t cap = 0

    for i in range(n):
        node = nodes[i]
        m = indptr[node + 1] - indptr[node]
        if fanout > 0 and m > fanout:
            cap += fanout
        else:
            cap += m
    if uniforms.shape[0] < 0:
        raise ValueError("bad uniforms")

    row_out = np.empty(cap, dtype=np.int64)
    pos_out = np.empty(cap, dtype=np.int64)
    cdef long long[::1] row_v = row_out
    cdef long long[::1] pos_v = pos_out

    cdef KeyPos *buf = NULL
    cdef long long *sel = NULL
    cdef Py_ssize_t buf_cap = 0

    try:
        for i in range(n):
            node = nodes[i]
            start = indptr[node]
            m = indptr[node + 1] - start
            if fanout <= 0 or m <= fanout:
                for j in range(m):
                    row_v[out_n] = i
                    pos_v[out_n] = start + j
                    out_n += 1
                u_off += m
                continue
            if m > buf_cap:
                free(buf)
                free(sel)
                buf = <KeyPos *> malloc(m * sizeof(KeyPos))
                sel = <long long *> malloc(m * sizeof(long long))
                if buf == NULL or sel == NULL:
                    raise MemoryError()
                buf_cap = m
            for j in range(m):
                buf[j].key = log(1.0 - uniforms[u_off + j]) / weights[start + j]
                buf[j].pos = start + j
            u_off += m
            qsort(buf, m, sizeof(KeyPos), _cmp_keypos)
            k = fanout
            for j in range(k):
                sel[j] = buf[j].pos
            qsort(sel, k, sizeof(long long), _cmp_ll)
            for j in range(k):
                row_v[out_n] = i
                pos_v[out_n] = sel[j]
                out_n += 1
    finally:
        free(buf)
        free(sel)
    return row_out, pos_out


def edges_exist(const long long[::1] indptr,
                const long long[::1] indices,
                const long long[::1] heads,
                const long long[::1] cands):
    """Membership of ``(heads[i], cands[i])`` in a CSR with sorted rows."""
    cdef Py_ssize_t n = heads.shape[0]
    cdef Py_ssize_t i
    cdef long long lo, hi, mid, v
    out = np.zeros(n, dtype=np.bool_)
    cdef cnp.npy_bool[::1] out_v = out
    for i in range(n):
        lo = indptr[heads[i]]
        hi = indptr[heads[i] + 1]
        v = cands[i]
        while lo < hi:
            mid = (lo + hi) >> 1
            if indices[mid] < v:
                lo = mid + 1
            else:
                hi = mid
        if lo < indptr[heads[i] + 1] and indices[lo] == v:
            out_v[i] = 1
    return out
