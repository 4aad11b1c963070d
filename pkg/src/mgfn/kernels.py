"""Backend selection for the sampling kernels.

The compiled extension is used when it imports; otherwise, or when the
``MGFN_PURE_PYTHON`` environment variable is set to a non-empty value other
than ``0``, the numpy fallback is used. ``BACKEND`` names the active one.
"""

import os

import numpy as np

from . import _kernels_py

_force_py = os.environ.get("MGFN_PURE_PYTHON", "") not in ("", "0")

_compiled = None
if not _force_py:
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "python"


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def sample_neighbors(indptr, weights, nodes, fanout, uniforms, impl=None):
    """See :func:`mgfn._kernels_py.sample_neighbors`.

    ``fanout`` of ``None`` or ``<= 0`` keeps every edge. ``uniforms`` must
    hold one draw in ``[0, 1)`` per edge of the requested rows.
    """
    impl = impl or _impl
    fanout = 0 if fanout is None else int(fanout)
    return impl.sample_neighbors(_i64(indptr), _f64(weights), _i64(nodes), fanout, _f64(uniforms))


def edges_exist(indptr, indices, heads, cands, impl=None):
    impl = impl or _impl
    return impl.edges_exist(_i64(indptr), _i64(indices), _i64(heads), _i64(cands))


def implementations():
    """Mapping of available backend name to module, used by the benchmark."""
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out
