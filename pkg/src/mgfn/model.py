"""Multi-graph fusion network: forward pass, reverse pass and parameter I/O.

Row-vector convention throughout: a layer ``y = W x`` is computed as
``Y = X @ W`` with ``W`` stored as ``(in, out)``.
"""

import json
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from .errors import CheckpointFormatError, ConfigError

CONV_KINDS = ("sage", "gat")
FUSION_KINDS = ("mean", "weighted", "concat")


@dataclass(frozen=True)
class ModelConfig:
    conv_kind: str = "sage"
    fusion_kind: str = "concat"
    n_layers: int = 2
    dropout: float = 0.0
    n_buckets: int = 5000
    leaky_slope: float = 0.2
    dim: int = 128
    hash_dim: int = 32
    n_scenarios: int = 2
    weight_mode: str = "log"
    dtype: str = "float64"

    def __post_init__(self):
        if self.conv_kind not in CONV_KINDS:
            raise ConfigError(f"conv_kind must be one of {CONV_KINDS}, got {self.conv_kind!r}")
        if self.fusion_kind not in FUSION_KINDS:
            raise ConfigError(f"fusion_kind must be one of {FUSION_KINDS}, got {self.fusion_kind!r}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.n_scenarios < 1 or self.n_buckets < 1:
            raise ConfigError("n_scenarios and n_buckets must be >= 1")
        if self.weight_mode not in ("log", "raw"):
            raise ConfigError("weight_mode must be 'log' or 'raw'")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be 'float64' or 'float32'")

    @property
    def raw_dim(self):
        return 3 * self.hash_dim + 2

    @property
    def fused_dim(self):
        return self.dim * self.n_scenarios if self.fusion_kind == "concat" else self.dim

    def to_dict(self):
        return asdict(self)


class ModelParams(dict):
    """Parameter tensors by name.

    Names: ``emb_kw``, ``emb_tag``, ``emb_id``, ``W_m1``, ``b_m1``, ``W_m2``,
    ``b_m2``; per layer ``l`` (1-based) and scenario ``s``: ``W_self.l.s``,
    ``W_nb.l.s``, ``att.l.s``; per layer ``fuse_w.l`` and, below the last
    layer, ``W_proj.l``; then ``W_f1``, ``b_f1``, ``W_f2``, ``b_f2``.
    Every tensor exists for every configuration; those a configuration does
    not use get zero gradients.
    """

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.items()})

    def astype(self, dtype):
        return ModelParams({k: v.astype(dtype) for k, v in self.items()})


def _glorot(rng, fan_in, fan_out, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def init_params(config, seed):
    rng = np.random.default_rng(seed)
    c = config
    d = c.dim
    p = ModelParams()
    for name in ("emb_kw", "emb_tag", "emb_id"):
        p[name] = _glorot(rng, c.n_buckets, c.hash_dim)
    p["W_m1"] = _glorot(rng, c.raw_dim, d)
    p["b_m1"] = np.zeros(d)
    p["W_m2"] = _glorot(rng, d, d)
    p["b_m2"] = np.zeros(d)
    for l in range(1, c.n_layers + 1):
        for s in range(c.n_scenarios):
            p[f"W_self.{l}.{s}"] = _glorot(rng, d, d)
            p[f"W_nb.{l}.{s}"] = _glorot(rng, d, d)
            p[f"att.{l}.{s}"] = _glorot(rng, 2 * d, 1, shape=(2 * d,))
        p[f"fuse_w.{l}"] = np.ones(c.n_scenarios)
        if l < c.n_layers:
            p[f"W_proj.{l}"] = _glorot(rng, d * c.n_scenarios, d)
    p["W_f1"] = _glorot(rng, c.fused_dim, d)
    p["b_f1"] = np.zeros(d)
    p["W_f2"] = _glorot(rng, d, d)
    p["b_f2"] = np.zeros(d)
    return p.astype(np.dtype(c.dtype))


def zeros_like(params):
    return ModelParams({k: np.zeros_like(v) for k, v in params.items()})


# -- building blocks -------------------------------------------------------


def _leaky(x, slope):
    return np.where(x > 0, x, slope * x)


def _leaky_grad(x, slope):
    return np.where(x > 0, 1.0, slope).astype(x.dtype)


def _relu(x):
    return np.maximum(x, 0.0)


def raw_feature_matrix(buckets, continuous, params):
    """Concatenated hash embeddings and continuous features, one row per node."""
    buckets = np.asarray(buckets)
    n_buckets = params["emb_kw"].shape[0]
    if buckets.size and (buckets.min() < 0 or buckets.max() >= n_buckets):
        raise IndexError(f"bucket index out of range [0, {n_buckets})")
    dt = params["W_m1"].dtype
    return np.concatenate([
        params["emb_kw"][buckets[:, 0]],
        params["emb_tag"][buckets[:, 1]],
        params["emb_id"][buckets[:, 2]],
        np.asarray(continuous, dtype=dt),
    ], axis=1)


def feature_transform(buckets, continuous, params, cache=None):
    x = raw_feature_matrix(buckets, continuous, params)
    a = x @ params["W_m1"] + params["b_m1"]
    r = _relu(a)
    h = r @ params["W_m2"] + params["b_m2"]
    if cache is not None:
        cache.update(buckets=np.asarray(buckets), x=x, a=a, r=r)
    return h


def _feature_transform_backward(cache, dh, params, grads):
    hd = params["emb_kw"].shape[1]
    grads["W_m2"] += cache["r"].T @ dh
    grads["b_m2"] += dh.sum(axis=0)
    da = (dh @ params["W_m2"].T) * (cache["a"] > 0)
    grads["W_m1"] += cache["x"].T @ da
    grads["b_m1"] += da.sum(axis=0)
    dx = da @ params["W_m1"].T
    b = cache["buckets"]
    for k, name in enumerate(("emb_kw", "emb_tag", "emb_id")):
        grads[name] += scatter_rows(b[:, k], dx[:, k * hd:(k + 1) * hd], grads[name].shape[0])


def scatter_rows(index, rows, n_out):
    """``out[index[i]] += rows[i]`` as a sparse product."""
    n = len(index)
    S = sp.csr_matrix((np.ones(n, dtype=rows.dtype), (index, np.arange(n))), shape=(n_out, n))
    return S @ rows


def _edge_matrix(edges, values, n_src):
    return sp.csr_matrix((values, edges.src, edges.dst_indptr), shape=(edges.n_dst, n_src))


def sage_layer(edges, h_prev, W_self, W_nb, cache=None):
    """Self transform plus the mean of weighted, transformed in-neighbor messages.

    ``edges.weight`` multiplies each message; the mean divides by the number
    of sampled in-neighbors. Nodes without in-neighbors keep only the self
    term.
    """
    n_dst = edges.n_dst
    cnt = edges.in_count
    scale = edges.weight / np.maximum(cnt, 1)[edges.dst]
    A = _edge_matrix(edges, scale.astype(h_prev.dtype), h_prev.shape[0])
    m = A @ h_prev
    out = h_prev[:n_dst] @ W_self + m @ W_nb
    if cache is not None:
        cache.update(A=A, m=m)
    return out


def _sage_backward(cache, dout, h_prev, W_self, W_nb, dh_prev):
    n_dst = dout.shape[0]
    dW_self = h_prev[:n_dst].T @ dout
    dh_prev[:n_dst] += dout @ W_self.T
    dW_nb = cache["m"].T @ dout
    dh_prev += cache["A"].T @ (dout @ W_nb.T)
    return dW_self, dW_nb


def _segment_sum(values, edges):
    return np.bincount(edges.dst, weights=values, minlength=edges.n_dst)


def _segment_max(values, edges):
    out = np.zeros(edges.n_dst, dtype=values.dtype)
    ptr = edges.dst_indptr
    nonempty = np.flatnonzero(ptr[1:] > ptr[:-1])
    if len(nonempty):
        out[nonempty] = np.maximum.reduceat(values, ptr[:-1][nonempty])
    return out


def segment_softmax(scores, edges):
    """Softmax of edge scores over each destination's in-edges."""
    if len(scores) == 0:
        return scores.copy()
    e = np.exp(scores - _segment_max(scores, edges)[edges.dst])
    return e / _segment_sum(e, edges)[edges.dst]


def gat_layer(edges, h_prev, W_self, W_nb, att, slope=0.2, cache=None):
    """Attention-weighted in-neighbor aggregation with a residual self term.

    The raw score of edge ``j -> i`` is ``LeakyReLU(att . [w W_nb h_j || w W_nb h_i])``
    with ``w`` the edge weight; scores are softmax-normalized per destination
    and the aggregate passes through LeakyReLU before adding ``W_self h_i``.
    """
    n_dst = edges.n_dst
    d = W_nb.shape[1]
    z = h_prev @ W_nb
    z1 = z @ att[:d]
    z2 = z[:n_dst] @ att[d:]
    w = edges.weight.astype(h_prev.dtype)
    pre = w * (z1[edges.src] + z2[edges.dst])
    score = _leaky(pre, slope)
    alpha = segment_softmax(score, edges)
    C = _edge_matrix(edges, alpha * w, h_prev.shape[0])
    agg = C @ z
    out = h_prev[:n_dst] @ W_self + _leaky(agg, slope)
    if cache is not None:
        cache.update(z=z, pre=pre, alpha=alpha, C=C, agg=agg)
    return out


def _gat_backward(cache, dout, edges, h_prev, W_self, W_nb, att, slope, dh_prev):
    n_dst = dout.shape[0]
    d = W_nb.shape[1]
    z, pre, alpha, C, agg = (cache[k] for k in ("z", "pre", "alpha", "C", "agg"))
    w = edges.weight.astype(h_prev.dtype)
    dW_self = h_prev[:n_dst].T @ dout
    dh_prev[:n_dst] += dout @ W_self.T
    dagg = dout * _leaky_grad(agg, slope)
    dz = C.T @ dagg
    dc = np.einsum("ij,ij->i", dagg[edges.dst], z[edges.src]) if edges.n_edges else np.zeros(0)
    dalpha = dc * w
    dscore = alpha * (dalpha - _segment_sum(alpha * dalpha, edges)[edges.dst])
    dpre = dscore * _leaky_grad(pre, slope) * w
    dz1 = np.bincount(edges.src, weights=dpre, minlength=z.shape[0])
    dz2 = np.bincount(edges.dst, weights=dpre, minlength=n_dst)
    datt = np.concatenate([z.T @ dz1, z[:n_dst].T @ dz2])
    dz += np.outer(dz1, att[:d])
    dz[:n_dst] += np.outer(dz2, att[d:])
    dW_nb = h_prev.T @ dz
    dh_prev += dz @ W_nb.T
    return dW_self, dW_nb, datt


def fuse(latents, fusion_kind, params, l, last):
    """Merge per-scenario latents of layer ``l``.

    Concatenation feeds the final MLP directly at the last layer and is
    projected back to ``dim`` by ``W_proj.l`` below it.
    """
    S = len(latents)
    if fusion_kind == "mean":
        return sum(latents) / S
    if fusion_kind == "weighted":
        w = params[f"fuse_w.{l}"]
        return sum(w[s] * h for s, h in enumerate(latents)) / S
    if fusion_kind == "concat":
        hc = np.concatenate(latents, axis=1)
        return hc if last else hc @ params[f"W_proj.{l}"]
    raise ConfigError(f"unknown fusion kind {fusion_kind!r}")


def _fuse_backward(dh, latents, fusion_kind, params, l, last, grads):
    S = len(latents)
    if fusion_kind == "mean":
        return [dh / S for _ in range(S)]
    if fusion_kind == "weighted":
        w = params[f"fuse_w.{l}"]
        grads[f"fuse_w.{l}"] += np.array([np.vdot(dh, h) for h in latents]) / S
        return [dh * (w[s] / S) for s in range(S)]
    if not last:
        hc = np.concatenate(latents, axis=1)
        grads[f"W_proj.{l}"] += hc.T @ dh
        dh = dh @ params[f"W_proj.{l}"].T
    d = latents[0].shape[1]
    return [dh[:, s * d:(s + 1) * d] for s in range(S)]


def final_mlp(h, params, cache=None):
    a = h @ params["W_f1"] + params["b_f1"]
    r = _relu(a)
    out = r @ params["W_f2"] + params["b_f2"]
    if cache is not None:
        cache.update(h=h, a=a, r=r)
    return out


def _final_mlp_backward(cache, dout, params, grads):
    grads["W_f2"] += cache["r"].T @ dout
    grads["b_f2"] += dout.sum(axis=0)
    da = (dout @ params["W_f2"].T) * (cache["a"] > 0)
    grads["W_f1"] += cache["h"].T @ da
    grads["b_f1"] += da.sum(axis=0)
    return da @ params["W_f1"].T


# -- whole network ---------------------------------------------------------


def _check_block(block, config):
    if block.n_layers != config.n_layers:
        raise ConfigError(f"block has {block.n_layers} layers, model expects {config.n_layers}")
    if len(block.scenarios) != config.n_scenarios:
        raise ConfigError(
            f"block covers {len(block.scenarios)} scenarios, model expects {config.n_scenarios}")


def forward(block, params, config, rng=None, training=False, return_cache=False):
    """Embeddings of the block's unique seeds, in slot order.

    Dropout on fused layer outputs is applied only when ``training`` is true
    and ``config.dropout > 0``; ``rng`` then supplies the masks.
    """
    _check_block(block, config)
    cache = {"layers": []} if return_cache else None
    fcache = {} if return_cache else None
    h = feature_transform(block.buckets, block.continuous, params, cache=fcache)
    if return_cache:
        cache["features"] = fcache
    L = config.n_layers
    for l in range(1, L + 1):
        h_prev = h
        latents, op_caches = [], []
        for s, edges in enumerate(block.layers[l - 1]):
            oc = {} if return_cache else None
            if config.conv_kind == "sage":
                out = sage_layer(edges, h_prev, params[f"W_self.{l}.{s}"], params[f"W_nb.{l}.{s}"], cache=oc)
            else:
                out = gat_layer(edges, h_prev, params[f"W_self.{l}.{s}"], params[f"W_nb.{l}.{s}"],
                                params[f"att.{l}.{s}"], config.leaky_slope, cache=oc)
            latents.append(out)
            op_caches.append(oc)
        h = fuse(latents, config.fusion_kind, params, l, last=(l == L))
        mask = None
        if training and config.dropout > 0:
            keep = 1.0 - config.dropout
            mask = (rng.random(h.shape) < keep).astype(h.dtype) / keep
            h = h * mask
        if return_cache:
            cache["layers"].append({"h_prev": h_prev, "latents": latents, "ops": op_caches, "mask": mask})
    mcache = {} if return_cache else None
    emb = final_mlp(h, params, cache=mcache)
    if return_cache:
        cache["final"] = mcache
        return emb, cache
    return emb


def backward(block, params, config, cache, d_emb):
    """Gradients of a scalar loss w.r.t. every tensor in ``params``.

    ``d_emb`` is the loss gradient w.r.t. the output of :func:`forward` and
    ``cache`` the one that call returned.
    """
    grads = zeros_like(params)
    dh = _final_mlp_backward(cache["final"], d_emb, params, grads)
    L = config.n_layers
    for l in range(L, 0, -1):
        lc = cache["layers"][l - 1]
        if lc["mask"] is not None:
            dh = dh * lc["mask"]
        dlat = _fuse_backward(dh, lc["latents"], config.fusion_kind, params, l, l == L, grads)
        h_prev = lc["h_prev"]
        dh_prev = np.zeros_like(h_prev)
        for s, edges in enumerate(block.layers[l - 1]):
            W_self, W_nb = params[f"W_self.{l}.{s}"], params[f"W_nb.{l}.{s}"]
            if config.conv_kind == "sage":
                gs, gn = _sage_backward(lc["ops"][s], dlat[s], h_prev, W_self, W_nb, dh_prev)
            else:
                gs, gn, ga = _gat_backward(lc["ops"][s], dlat[s], edges, h_prev, W_self, W_nb,
                                           params[f"att.{l}.{s}"], config.leaky_slope, dh_prev)
                grads[f"att.{l}.{s}"] += ga
            grads[f"W_self.{l}.{s}"] += gs
            grads[f"W_nb.{l}.{s}"] += gn
        dh = dh_prev
    _feature_transform_backward(cache["features"], dh, params, grads)
    return grads


def embed_nodes(g, params, config, nodes=None, batch_size=1024, fanouts=None, rng=None):
    """Inference embeddings for ``nodes`` (all nodes by default), in order.

    ``fanouts=None`` uses every in-edge; finite fanouts need ``rng``.
    """
    from .multigraph import build_block

    nodes = np.arange(g.n_nodes) if nodes is None else np.asarray(nodes, dtype=np.int64)
    fanouts = fanouts if fanouts is not None else [None] * config.n_layers
    out = np.zeros((len(nodes), config.dim), dtype=params["W_f2"].dtype)
    for start in range(0, len(nodes), batch_size):
        chunk = nodes[start:start + batch_size]
        block = build_block(g, chunk, fanouts, rng=rng, mode=config.weight_mode)
        emb = forward(block, params, config)
        out[start:start + len(chunk)] = emb[block.seed_inverse]
    return out


# -- tensor container ------------------------------------------------------

PARAMS_MAGIC = b"MGFNPRMS"
PARAMS_VERSION = 1


def pack_tensors(magic, version, header, groups):
    """Versioned little-endian container of named float tensors.

    Layout: magic (8 bytes), u32 version, u32 header length, UTF-8 JSON
    header (with a tensor manifest), raw ``<f8`` data in manifest order,
    u32 crc32 of everything before it.
    """
    manifest = []
    blobs = []
    for group, tensors in groups.items():
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            manifest.append({"group": group, "name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
            blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    head = dict(header)
    head["tensors"] = manifest
    hb = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = magic + struct.pack("<II", version, len(hb)) + hb + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def unpack_tensors(data, magic, version):
    data = bytes(data)
    if len(data) < len(magic) + 12 or data[:len(magic)] != magic:
        raise CheckpointFormatError("bad magic")
    ver, hlen = struct.unpack("<II", data[len(magic):len(magic) + 8])
    if ver != version:
        raise CheckpointFormatError(f"unsupported version {ver}, expected {version}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointFormatError("checksum mismatch: corrupt or truncated data")
    off = len(magic) + 8
    try:
        header = json.loads(body[off:off + hlen].decode("utf-8"))
    except ValueError as e:
        raise CheckpointFormatError(f"bad header: {e}") from None
    off += hlen
    groups = {}
    for t in header.pop("tensors"):
        n = int(np.prod(t["shape"], dtype=np.int64))
        if off + 8 * n > len(body):
            raise CheckpointFormatError("truncated tensor data")
        arr = np.frombuffer(body[off:off + 8 * n], dtype="<f8").reshape(t["shape"]).astype(t["dtype"])
        off += 8 * n
        groups.setdefault(t["group"], ModelParams())[t["name"]] = arr
    if off != len(body):
        raise CheckpointFormatError("trailing bytes after tensor data")
    return header, groups


def serialize_params(params, config, metadata=None):
    header = {"model_config": config.to_dict(), "metadata": metadata or {}}
    return pack_tensors(PARAMS_MAGIC, PARAMS_VERSION, header, {"params": params})


def deserialize_params(data):
    header, groups = unpack_tensors(data, PARAMS_MAGIC, PARAMS_VERSION)
    return groups.get("params", ModelParams()), ModelConfig(**header["model_config"])
