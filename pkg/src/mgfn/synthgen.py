"""Deterministic synthetic catalogs and multi-scenario watch logs.

Every item belongs to a topic; users hold a persistent topic preference and
watch in sessions whose consecutive items mostly share a topic. Each
scenario shows topics with its own exposure weights and withholds the items
exclusive to the other scenarios, which produces scenario-wise biased logs
over one shared item pool.
"""

import math
from dataclasses import dataclass

import numpy as np

from .graph_builder import InteractionRecord

DAY_S = 86400
START_TS = 1_700_006_400  # a UTC midnight
KEYWORDS_PER_TOPIC = 6
TAGS_PER_TOPIC = 2
DIRICHLET_ALPHA = 0.3
BOUNCE_WEIGHT = 1.0 / 12.0
STAY_IN_TOPIC = 0.85
IN_SESSION_GAP_P = 0.95
SCENARIO_POP_SIGMA = 1.5


@dataclass(frozen=True)
class ItemMeta:
    item_id: str
    keyword: str
    tag: str
    duration_s: int
    topic: int

    def __post_init__(self):
        if self.duration_s < 1:
            raise ValueError(f"duration_s must be >= 1, got {self.duration_s}")


@dataclass(frozen=True)
class ScenarioProfile:
    scenario_id: str
    exposure_distribution: tuple
    exclusive_item_fraction: float = 0.0
    sessions_per_user_per_day: int = 3

    def __post_init__(self):
        w = np.asarray(self.exposure_distribution, dtype=np.float64)
        if w.ndim != 1 or np.any(w < 0) or not np.any(w > 0):
            raise ValueError("exposure weights must be nonnegative with at least one positive")
        if not 0.0 <= self.exclusive_item_fraction <= 1.0:
            raise ValueError("exclusive_item_fraction must lie in [0, 1]")
        if self.sessions_per_user_per_day < 1:
            raise ValueError("sessions_per_user_per_day must be >= 1")


def generate_catalog(n_items, n_topics, seed):
    if n_items < 1:
        raise ValueError("n_items must be >= 1")
    if not 1 <= n_topics <= n_items:
        raise ValueError("need 1 <= n_topics <= n_items")
    rng = np.random.default_rng(seed)
    topics = rng.permutation(np.arange(n_items) % n_topics)
    kw = rng.integers(KEYWORDS_PER_TOPIC, size=n_items)
    tag = rng.integers(TAGS_PER_TOPIC, size=n_items)
    dur = np.maximum(1, np.rint(rng.lognormal(math.log(120.0), 0.8, size=n_items))).astype(int)
    width = len(str(n_items - 1))
    tw = len(str(n_topics - 1))
    return [
        ItemMeta(
            item_id=f"v{i:0{width}d}",
            keyword=f"kw{topics[i]:0{tw}d}_{kw[i]}",
            tag=f"tag{topics[i]:0{tw}d}_{tag[i]}",
            duration_s=int(dur[i]),
            topic=int(topics[i]),
        )
        for i in range(n_items)
    ]


def exclusive_assignment(n_items, profiles, seed):
    """Item indices withheld from every scenario but one, per profile.

    Candidates are dealt round-robin from one seeded permutation, so raising
    a profile's fraction only ever adds items to its exclusive set.
    """
    perm = np.random.default_rng([seed, 7]).permutation(n_items)
    k = len(profiles)
    out = []
    for j, p in enumerate(profiles):
        pool = perm[j::k]
        m = min(len(pool), int(round(p.exclusive_item_fraction * n_items)))
        out.append(np.sort(pool[:m]))
    return out


def generate_interactions(catalog, profiles, n_users, n_days, seed, start_ts=START_TS):
    if not catalog:
        raise ValueError("empty catalog")
    if n_users < 1 or n_days < 1:
        raise ValueError("n_users and n_days must be >= 1")
    if not profiles:
        raise ValueError("need at least one scenario profile")
    n = len(catalog)
    n_topics = max(m.topic for m in catalog) + 1
    for p in profiles:
        if len(p.exposure_distribution) != n_topics:
            raise ValueError(f"profile {p.scenario_id!r} needs {n_topics} exposure weights")
    topics = np.array([m.topic for m in catalog])
    ids = [m.item_id for m in catalog]

    excl = exclusive_assignment(n, profiles, seed)
    pop = np.random.default_rng([seed, 11]).lognormal(0.0, 1.0, size=n)
    # each scenario's own feedback loop boosts a different set of hits
    scen_pop = [pop * np.random.default_rng([seed, 17, j]).lognormal(0.0, SCENARIO_POP_SIGMA, size=n)
                for j in range(len(profiles))]

    # per scenario, per topic: exposed items and cumulative popularity
    tables = []
    topic_w = []
    for j, p in enumerate(profiles):
        hidden = np.zeros(n, dtype=bool)
        for k, e in enumerate(excl):
            if k != j:
                hidden[e] = True
        per_topic = []
        w = np.asarray(p.exposure_distribution, dtype=np.float64).copy()
        for t in range(n_topics):
            items = np.flatnonzero((topics == t) & ~hidden)
            if len(items) == 0:
                w[t] = 0.0
            cum = np.cumsum(scen_pop[j][items])
            per_topic.append((items, cum))
        tables.append(per_topic)
        topic_w.append(w)

    rng = np.random.default_rng([seed, 13])
    prefs = rng.dirichlet(np.full(n_topics, DIRICHLET_ALPHA), size=n_users)
    active = rng.random((n_users, len(profiles))) < 0.8
    active[~active.any(axis=1), 0] = True
    uw = len(str(n_users - 1))

    records = []
    for day in range(n_days):
        day0 = start_ts + day * DAY_S
        day_end = day0 + DAY_S
        for j, p in enumerate(profiles):
            for u in range(n_users):
                if not active[u, j]:
                    continue
                tw = prefs[u] * topic_w[j]
                if tw.sum() <= 0:
                    tw = topic_w[j]
                if tw.sum() <= 0:
                    continue
                cum_t = np.cumsum(tw / tw.sum())
                starts = np.sort(rng.integers(day0, day_end - 3600, size=p.sessions_per_user_per_day))
                t_prev = day0 - 1
                for start in starts:
                    t = max(int(start), t_prev + 1)
                    length = 1 + min(int(rng.geometric(0.2)), 19)
                    topic = _draw(cum_t, rng)
                    for step in range(length):
                        if step:
                            if rng.random() < IN_SESSION_GAP_P:
                                gap = 1 + min(int(rng.exponential(240.0)), 3598)
                            else:
                                gap = 3600 + int(rng.exponential(1800.0))
                            t += gap
                            if rng.random() >= STAY_IN_TOPIC:
                                topic = _draw(cum_t, rng)
                        if t >= day_end:
                            break
                        items, cum = tables[j][topic]
                        item = items[int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))]
                        records.append(InteractionRecord(
                            f"u{u:0{uw}d}", ids[item], p.scenario_id, t, _completion(rng)))
                        t_prev = t
    records.sort(key=lambda r: (r.timestamp, r.user_id, r.scenario_id, r.item_id))
    return records


def _draw(cum, rng):
    return min(int(np.searchsorted(cum, rng.random(), side="right")), len(cum) - 1)


def _completion(rng):
    if rng.random() < BOUNCE_WEIGHT:
        x = rng.beta(1.0, 30.0)
    else:
        x = rng.beta(5.0, 2.0)
    return round(float(x), 4)


def split_train_validation(records, cutoff_ts):
    train = [r for r in records if r.timestamp < cutoff_ts]
    valid = [r for r in records if r.timestamp >= cutoff_ts]
    return train, valid


def day_cutoff(records, n_days):
    """Timestamp of the midnight ``n_days`` after the first record's day."""
    first = min(r.timestamp for r in records)
    return (first // DAY_S) * DAY_S + n_days * DAY_S


def split_exposure(n_topics, favored, low=0.02):
    """Topic weights of 1 on ``favored`` topics and ``low`` elsewhere."""
    w = np.full(n_topics, low)
    w[list(favored)] = 1.0
    return tuple(float(x) for x in w)


STANDARD = dict(n_items=2000, n_topics=20, n_users=500, n_days=8)
TARGET, SOURCE = "home", "feeds"


def standard_profiles(n_topics=STANDARD["n_topics"], exclusive_item_fraction=0.3):
    """Two scenarios favouring overlapping halves of the topics."""
    half = n_topics // 2
    overlap = max(1, n_topics // 20)
    target = split_exposure(n_topics, range(0, half + overlap))
    source = split_exposure(n_topics, range(half - overlap, n_topics))
    return [
        ScenarioProfile(SOURCE, source, exclusive_item_fraction, 3),
        ScenarioProfile(TARGET, target, exclusive_item_fraction, 3),
    ]


def standard_dataset(seed=1, exclusive_item_fraction=0.3, **overrides):
    """The reference synthetic setup: catalog, profiles and full log."""
    cfg = dict(STANDARD)
    cfg.update(overrides)
    catalog = generate_catalog(cfg["n_items"], cfg["n_topics"], seed)
    profiles = standard_profiles(cfg["n_topics"], exclusive_item_fraction)
    records = generate_interactions(catalog, profiles, cfg["n_users"], cfg["n_days"], seed)
    return catalog, profiles, records


def write_catalog(catalog, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for m in catalog:
            f.write(f"{m.item_id}\t{m.keyword}\t{m.tag}\t{m.duration_s}\t{m.topic}\n")


def read_catalog(path):
    out = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{line_no}: expected 5 fields, got {len(parts)}")
            out.append(ItemMeta(parts[0], parts[1], parts[2], int(parts[3]), int(parts[4])))
    return out
