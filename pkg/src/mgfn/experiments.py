"""End-to-end pipelines shared by the command line and the acceptance suite."""

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .graph_builder import build_csmg, clean_records, extract_transition_pairs
from .model import ModelConfig
from .multigraph import collapse_scenarios, restrict_to_scenario
from .retrieval import (
    build_index,
    build_user_queues,
    edge_auc,
    exclusive_items,
    outer_scenario_metrics,
    precision_recall_at_k,
    retrieve_all,
    validation_sets,
)
from .synthgen import SOURCE, TARGET, day_cutoff, split_train_validation, standard_dataset
from .training import TrainConfig, sample_negatives, train

VARIANTS = ("mgfn", "mgfn-mean", "mgfn-weighted", "mgfn-gat", "dataconcat")


@dataclass
class Dataset:
    catalog: list
    train: list
    valid: list
    graph: object = None
    target: str = TARGET
    source: str = SOURCE

    @property
    def catalog_map(self):
        return {m.item_id: m for m in self.catalog}


def prepare(catalog, records, train_days=7, n_buckets=5000, target=TARGET, source=SOURCE,
            cutoff=None, build_graph=True, workers=1):
    """Split at ``cutoff`` (default: ``train_days`` after the first day),
    clean both halves and build the training multi-graph."""
    if not records:
        raise ValueError("empty interaction log")
    cut = day_cutoff(records, train_days) if cutoff is None else cutoff
    train_raw, valid_raw = split_train_validation(records, cut)
    ids = [m.item_id for m in catalog]
    train_c = clean_records(train_raw, ids)
    valid_c = clean_records(valid_raw, ids)
    g = None
    if build_graph:
        scen = sorted({r.scenario_id for r in train_c})
        pairs = extract_transition_pairs(train_c, workers=workers)
        g = build_csmg(pairs, catalog, train_c, scenarios=scen, n_buckets=n_buckets)
    return Dataset(catalog, train_c, valid_c, g, target, source)


def standard(seed=1, exclusive_item_fraction=0.3, **overrides):
    catalog, _, records = standard_dataset(seed, exclusive_item_fraction, **overrides)
    return prepare(catalog, records)


def parse_variant(variant):
    """``(graph transform, model config)`` for a named variant."""
    if variant == "mgfn":
        return None, ModelConfig(conv_kind="sage", fusion_kind="concat")
    if variant == "mgfn-mean":
        return None, ModelConfig(conv_kind="sage", fusion_kind="mean")
    if variant == "mgfn-weighted":
        return None, ModelConfig(conv_kind="sage", fusion_kind="weighted")
    if variant == "mgfn-gat":
        return None, ModelConfig(conv_kind="gat", fusion_kind="concat")
    if variant == "dataconcat":
        return collapse_scenarios, ModelConfig(conv_kind="sage", fusion_kind="mean")
    if variant.startswith("single-scenario:"):
        s = variant.split(":", 1)[1]
        return (lambda g: restrict_to_scenario(g, s)), ModelConfig(conv_kind="sage", fusion_kind="mean")
    raise ConfigError(
        f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)} or single-scenario:<s>")


def variant_graph(g, variant):
    transform, _ = parse_variant(variant)
    return g if transform is None else transform(g)


def evaluate(table, ds, per_query_k=15, final_k=100, aggregate="max", queue_len=20):
    """Target-scenario retrieval metrics plus outer-scenario counts."""
    queues = build_user_queues(ds.train, ds.target, queue_len)
    valid = validation_sets(ds.valid, ds.target)
    index = build_index(table)
    got = retrieve_all(queues, index, per_query_k, final_k, aggregate)
    report = precision_recall_at_k(got, valid, k=final_k)
    excl = exclusive_items(ds.train, ds.source, ds.target)
    w, u, p = outer_scenario_metrics(got, excl, valid)
    report.outer_watches, report.outer_unique_items, report.outer_presence = w, u, p
    return report


def run_variant(ds, variant, train_config, **model_overrides):
    """Train one variant on the dataset's graph; returns ``(result, report)``."""
    transform, mc = parse_variant(variant)
    g = ds.graph if transform is None else transform(ds.graph)
    if model_overrides:
        mc = replace(mc, **model_overrides)
    result = train(g, mc, train_config)
    return result, evaluate(result.embeddings, ds)


def heldout_edge_auc(table, ds, seed=0, n_negatives=1):
    """AUC of validation-day transitions against cross-scenario negatives.

    Only pairs whose two items both have embeddings are scored; negatives
    are drawn per positive head from the training graph and kept when the
    sampled item has an embedding.
    """
    g = ds.graph
    pairs = [(p.src, p.dst) for p in extract_transition_pairs(ds.valid)
             if p.src in g.index and p.dst in g.index and p.src in table and p.dst in table]
    pairs = sorted(set(pairs))
    if not pairs:
        raise ValueError("no held-out pairs")
    heads = np.array([g.index[a] for a, _ in pairs])
    rng = np.random.default_rng(seed)
    negs = sample_negatives(g, heads, n_negatives, "cross_scenario", rng)
    neg_pairs = [(g.item_ids[h], g.item_ids[n]) for h, row in zip(heads, negs) for n in row
                 if g.item_ids[n] in table]
    return edge_auc(table, pairs, neg_pairs)


STRATEGY_LABELS = (
    ("degree-in-target", lambda ds: f"degree:{ds.target}"),
    ("degree-in-source", lambda ds: f"degree:{ds.source}"),
    ("random", lambda ds: "random"),
    ("cross-scenario", lambda ds: "cross_scenario"),
)


def negative_strategy_ablation(ds, train_config, variant="mgfn", **model_overrides):
    """Train one model per negative-sampling strategy; returns rows of
    ``(label, strategy, EvalReport)``."""
    rows = []
    for label, strat in STRATEGY_LABELS:
        tc = replace(train_config, negative_strategy=strat(ds))
        _, report = run_variant(ds, variant, tc, **model_overrides)
        rows.append((label, tc.negative_strategy, report))
    return rows


def comparison_table(rows):
    """Plain-text table of ``(label, strategy-or-variant, EvalReport)`` rows."""
    w = max([len(r[0]) for r in rows] + [8])
    lines = [f"{'Strategy':<{w}}  {'p@100':>10}  {'r@100':>10}  users"]
    for label, _, rep in rows:
        lines.append(f"{label:<{w}}  {rep.precision:>10.6f}  {rep.recall:>10.6f}  {rep.n_users}")
    return "\n".join(lines) + "\n"


def default_train_config(**kw):
    return TrainConfig(**kw)
