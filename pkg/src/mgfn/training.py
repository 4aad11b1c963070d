"""Triplet sampling, BPR loss, Adam and the training loop."""

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kernels
from .errors import ConfigError, NonFiniteGradientError, RejectionExhaustedError
from .model import (
    ModelParams,
    backward,
    embed_nodes,
    forward,
    init_params,
    pack_tensors,
    scatter_rows,
    unpack_tensors,
)
from .multigraph import build_block

log = logging.getLogger(__name__)

NEG_POWER = 0.75
MAX_REJECTIONS = 100


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4000
    n_negatives: int = 5
    lr: float = 0.002
    stop_steps: int = 12000
    negative_strategy: str = "cross_scenario"
    seed: int = 42
    fanouts: tuple = (10, 10)
    log_every: int = 100
    exact_inference_limit: int = 200
    infer_batch: int = 1024

    def __post_init__(self):
        if self.batch_size < 1 or self.n_negatives < 1 or self.stop_steps < 0:
            raise ConfigError("batch_size and n_negatives must be >= 1, stop_steps >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        s = self.negative_strategy
        if s not in ("cross_scenario", "random") and not s.startswith("degree:"):
            raise ConfigError(
                f"negative_strategy must be cross_scenario, random or degree:<scenario>, got {s!r}")
        object.__setattr__(self, "fanouts", tuple(self.fanouts))

    def to_dict(self):
        d = asdict(self)
        d["fanouts"] = list(self.fanouts)
        return d


@dataclass(frozen=True, eq=False)
class TripletBatch:
    heads: np.ndarray
    tails: np.ndarray
    negatives: np.ndarray

    @property
    def seeds(self):
        return np.concatenate([self.heads, self.tails, self.negatives.ravel()])


# -- samplers --------------------------------------------------------------


def degree_target_distribution(g, scenarios=None, power=NEG_POWER):
    """``P(v)`` proportional to the scenario-summed weighted degree to the 3/4."""
    scen = g.scenarios if scenarios is None else scenarios
    deg = np.zeros(g.n_nodes, dtype=np.float64)
    for s in scen:
        deg += g.degree(s)
    if not np.any(deg > 0):
        raise ValueError("all node degrees are zero")
    w = deg ** power
    return w / w.sum()


def negative_distribution(g, strategy):
    if strategy == "cross_scenario":
        return degree_target_distribution(g)
    if strategy == "random":
        return np.full(g.n_nodes, 1.0 / g.n_nodes)
    if strategy.startswith("degree:"):
        return degree_target_distribution(g, scenarios=[strategy.split(":", 1)[1]])
    raise ConfigError(f"unknown negative strategy {strategy!r}")


def _pooled_edges(g):
    cache = g.__dict__.setdefault("_pooled", {})
    if "edges" not in cache:
        src = np.concatenate([a.row_ids() for a in g.out_adj])
        dst = np.concatenate([a.indices for a in g.out_adj])
        cnt = np.concatenate([a.counts for a in g.out_adj]).astype(np.float64)
        cache["edges"] = (src, dst, np.cumsum(cnt))
    return cache["edges"]


def sample_positive_pairs(g, n, rng):
    """``n`` edges drawn with probability proportional to transition count,
    pooled over every scenario."""
    src, dst, cum = _pooled_edges(g)
    if len(src) == 0:
        raise ValueError("graph has no edges")
    k = np.searchsorted(cum, rng.random(n) * cum[-1], side="right")
    k = np.minimum(k, len(src) - 1)
    return src[k], dst[k]


def _draw(cum, n, rng):
    return np.minimum(np.searchsorted(cum, rng.random(n) * cum[-1], side="right"), len(cum) - 1)


def sample_negatives(g, heads, k, strategy, rng, max_attempts=MAX_REJECTIONS, probs=None):
    """``len(heads) x k`` negatives drawn from the strategy's distribution.

    A candidate is rejected when it equals its head or the edge
    ``head -> candidate`` exists in any scenario. Rejected slots are redrawn
    in rounds; a slot still unfilled after ``max_attempts`` draws raises
    :class:`RejectionExhaustedError`.
    """
    heads = np.asarray(heads, dtype=np.int64)
    p = negative_distribution(g, strategy) if probs is None else probs
    cum = np.cumsum(p)
    union = g.union_out
    h = np.repeat(heads, k)
    out = np.empty(len(h), dtype=np.int64)
    pending = np.arange(len(h))
    for _ in range(max_attempts):
        if len(pending) == 0:
            break
        cand = _draw(cum, len(pending), rng)
        hp = h[pending]
        bad = (cand == hp) | kernels.edges_exist(union.indptr, union.indices, hp, cand)
        out[pending[~bad]] = cand[~bad]
        pending = pending[bad]
    if len(pending):
        raise RejectionExhaustedError(int(h[pending[0]]), max_attempts)
    return out.reshape(len(heads), k)


def sample_triplets(g, cfg, rng, probs=None):
    heads, tails = sample_positive_pairs(g, cfg.batch_size, rng)
    negs = sample_negatives(g, heads, cfg.n_negatives, cfg.negative_strategy, rng, probs=probs)
    return TripletBatch(heads, tails, negs)


# -- loss ------------------------------------------------------------------


def softplus(x):
    """``log(1 + exp(x))`` without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(-np.abs(x))))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def bpr_loss(h_head, h_pos, h_neg):
    """Mean over heads of the mean over that head's negatives of
    ``log(1 + exp(h . h_neg - h . h_pos))``.

    ``h_neg`` has shape ``(b, k, d)``; a 2-D array is read as ``k = 1``.
    """
    return bpr_loss_grad(h_head, h_pos, h_neg)[0]


def bpr_loss_grad(h_head, h_pos, h_neg):
    if h_neg.ndim == 2:
        h_neg = h_neg[:, None, :]
    b, k, _ = h_neg.shape
    pos = np.einsum("bd,bd->b", h_head, h_pos)
    neg = np.einsum("bd,bkd->bk", h_head, h_neg)
    x = neg - pos[:, None]
    loss = float(softplus(x).sum() / (b * k))
    g = _sigmoid(x) / (b * k)
    d_neg = g[:, :, None] * h_head[:, None, :]
    d_pos = -g.sum(axis=1)[:, None] * h_head
    d_head = np.einsum("bk,bkd->bd", g, h_neg) - g.sum(axis=1)[:, None] * h_pos
    return loss, d_head, d_pos, d_neg


def batch_loss_and_grads(block, params, config, batch, rng=None, training=True):
    """Forward, BPR loss and full reverse pass for one triplet batch."""
    emb, cache = forward(block, params, config, rng=rng, training=training, return_cache=True)
    inv = block.seed_inverse
    b = len(batch.heads)
    k = batch.negatives.shape[1]
    hh = emb[inv[:b]]
    ht = emb[inv[b:2 * b]]
    hn = emb[inv[2 * b:]].reshape(b, k, -1)
    loss, dh, dt, dn = bpr_loss_grad(hh, ht, hn)
    d_all = np.concatenate([dh, dt, dn.reshape(b * k, -1)]).astype(emb.dtype)
    d_emb = scatter_rows(inv, d_all, emb.shape[0])
    return loss, backward(block, params, config, cache, d_emb)


# -- optimizer -------------------------------------------------------------


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    step: int = 0
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=0.002, **kw):
        z = lambda: ModelParams({k: np.zeros_like(p) for k, p in params.items()})  # noqa: E731
        return cls(m=z(), v=z(), lr=lr, **kw)


def adam_step(params, grads, state, lr=None):
    """One bias-corrected Adam update, in place; returns ``(params, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# -- loop ------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    state: AdamState
    model_config: object = None
    loss_curve: list = field(default_factory=list)
    embeddings: object = None


def inference_fanouts(g, model_config, train_config):
    if g.max_in_degree() <= train_config.exact_inference_limit:
        return [None] * model_config.n_layers
    return list(train_config.fanouts)


def train(g, model_config, train_config, progress=None):
    """Train on ``g`` and embed every node.

    Random streams are derived from ``train_config.seed`` only, so a fixed
    configuration reproduces the same parameters bit for bit.
    """
    from .retrieval import EmbeddingTable

    mc = replace(model_config, n_scenarios=len(g.scenarios), n_buckets=g.n_buckets)
    tc = train_config
    if len(tc.fanouts) != mc.n_layers:
        raise ConfigError(f"need {mc.n_layers} fanouts, got {len(tc.fanouts)}")
    params = init_params(mc, tc.seed)
    state = AdamState.for_params(params, lr=tc.lr)
    sample_rng = np.random.default_rng([tc.seed, 1])
    drop_rng = np.random.default_rng([tc.seed, 2])
    probs = negative_distribution(g, tc.negative_strategy)
    curve = []
    window = []
    for step in range(1, tc.stop_steps + 1):
        batch = sample_triplets(g, tc, sample_rng, probs=probs)
        block = build_block(g, batch.seeds, tc.fanouts, rng=sample_rng, mode=mc.weight_mode)
        loss, grads = batch_loss_and_grads(block, params, mc, batch, rng=drop_rng)
        adam_step(params, grads, state)
        window.append(loss)
        if step % tc.log_every == 0 or step == tc.stop_steps:
            curve.append((step, float(np.mean(window))))
            window = []
            log.info("step %d loss %.5f", step, curve[-1][1])
            if progress is not None:
                progress(step, curve[-1][1])
    infer_rng = np.random.default_rng([tc.seed, 3])
    emb = embed_nodes(g, params, mc, batch_size=tc.infer_batch,
                      fanouts=inference_fanouts(g, mc, tc), rng=infer_rng)
    table = EmbeddingTable(list(g.item_ids), emb)
    return TrainResult(params=params, state=state, model_config=mc, loss_curve=curve, embeddings=table)


# -- checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"MGFNCKPT"
CKPT_VERSION = 1


def serialize_checkpoint(params, state, model_config, train_config=None, metadata=None):
    header = {
        "model_config": model_config.to_dict(),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "step": state.step,
        "adam": {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps},
        "metadata": metadata or {},
    }
    return pack_tensors(CKPT_MAGIC, CKPT_VERSION, header, {"params": params, "adam_m": state.m, "adam_v": state.v})


def deserialize_checkpoint(data):
    """Returns ``(params, state, header)``."""
    from .model import ModelConfig

    header, groups = unpack_tensors(data, CKPT_MAGIC, CKPT_VERSION)
    state = AdamState(m=groups.get("adam_m", ModelParams()), v=groups.get("adam_v", ModelParams()),
                      step=header["step"], **header["adam"])
    header["model_config"] = ModelConfig(**header["model_config"])
    return groups["params"], state, header


def save_checkpoint(path, *args, **kwargs):
    with open(path, "wb") as f:
        f.write(serialize_checkpoint(*args, **kwargs))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return deserialize_checkpoint(f.read())


def write_loss_curve(curve, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("step,loss\n")
        for step, loss in curve:
            f.write(f"{step},{loss:.9g}\n")
