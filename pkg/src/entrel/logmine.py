"""Pseudo-label mining from click logs, plus a synthetic log generator.

Query-item pseudo-labels: per query, the most clicked items are positives
and a random sample of well-exposed never-clicked items are negatives.
Query-entity pseudo-labels aggregate clicks over all exposed items that
contain an entity, which smooths out single-item quirks (an item can stay
unclicked for reasons unrelated to relevance); the top entities by summed
clicks become positives and the bottom ones negatives.

The synthetic generator builds a world where relevance is exactly "the item
carries an entity from the query's whitelist", which gives every experiment
a known ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core import (
    ClickLog,
    ClickRecord,
    Dataset,
    Entity,
    EntityType,
    Item,
    QEPair,
    QIPair,
    Query,
)
from .ner import Gazetteer
from .servecache import entity_click_counts


@dataclass(frozen=True)
class MinerConfig:
    top_n: int = 3
    neg_m: int = 10
    min_exposure_k: int = 10
    window_note: str = "ingestion window applied upstream of the miner"

    def __post_init__(self):
        if self.top_n <= 0 or self.neg_m <= 0 or self.min_exposure_k <= 0:
            raise ValueError("top_n, neg_m and min_exposure_k must be positive")


def mine_qi(log: ClickLog, cfg: MinerConfig = MinerConfig(), seed: int = 0) -> Dataset:
    """Per query: top clicked items as positives, sampled unclicked items as negatives.

    Positives are the top_n items by clicks (ties by item id) that were
    clicked at all.  Negatives are a seeded uniform sample of neg_m items
    with more than min_exposure_k exposures and zero clicks.
    """
    rng = np.random.default_rng(seed)
    pairs: list[QIPair] = []
    groups = log.by_query()
    for qid in sorted(groups):
        records = groups[qid]
        query = records[0].query

        clicked = sorted(
            (r for r in records if r.clicks > 0),
            key=lambda r: (-r.clicks, r.item.id),
        )
        for rec in clicked[:cfg.top_n]:
            pairs.append(QIPair(query, rec.item, 1))

        pool = sorted(
            (r for r in records if r.exposures > cfg.min_exposure_k and r.clicks == 0),
            key=lambda r: r.item.id,
        )
        take = min(cfg.neg_m, len(pool))
        if take:
            chosen = sorted(rng.choice(len(pool), size=take, replace=False))
            for i in chosen:
                pairs.append(QIPair(query, pool[i].item, 0))
    return Dataset(tuple(pairs))


def mine_qe(log: ClickLog, gazetteer: Gazetteer, cfg: MinerConfig = MinerConfig()) -> Dataset:
    """Per query: entities ranked by clicks summed over the exposed items containing them.

    The top_n entities with any clicks are positives; among the remaining
    exposed entities, the neg_m with the lowest summed clicks are negatives
    (ties by entity text).  An entity never appears with both labels.
    """
    counts = entity_click_counts(log, gazetteer)
    queries = {q.id: q for q in log.queries()}
    pairs: list[QEPair] = []
    for qid in sorted(counts):
        query = queries[qid]
        per_query = counts[qid]
        ranked = sorted(per_query.items(), key=lambda kv: (-kv[1], kv[0]))

        positives = [text for text, clicks in ranked[:cfg.top_n] if clicks > 0]
        for text in positives:
            pairs.append(QEPair(query, Entity(text, EntityType.PRODUCT_TYPE), 1))

        taken = set(positives)
        lowest = sorted(per_query.items(), key=lambda kv: (kv[1], kv[0]))
        negatives = [text for text, _ in lowest if text not in taken][:cfg.neg_m]
        for text in negatives:
            pairs.append(QEPair(query, Entity(text, EntityType.PRODUCT_TYPE), 0))
    return Dataset(tuple(pairs))


# ---------------------------------------------------------------------------
# synthetic whitelist worlds
# ---------------------------------------------------------------------------

_SYLLABLES = (
    "ba", "ce", "di", "fo", "gu", "ha", "ki", "lo", "mu", "ne",
    "pa", "qui", "ro", "su", "ta", "ve", "wi", "xo", "yu", "za",
    "bren", "clat", "dorf", "fint", "gost", "hulm", "jarn", "krel",
)


@dataclass(frozen=True)
class WhitelistWorld:
    """Queries plus the ground-truth set of entities relevant to each."""

    queries: tuple[Query, ...]
    whitelists: Mapping[str, frozenset[str]]  # query id -> relevant entity surfaces
    entity_pool: tuple[str, ...]
    gazetteer: Gazetteer


def make_whitelist_world(
    n_queries: int = 200,
    pool_size: int = 300,
    whitelist_range: tuple[int, int] = (2, 4),
    seed: int = 0,
) -> WhitelistWorld:
    """Generate pseudo-word queries and a per-query whitelist drawn from a shared pool.

    The same entity can be relevant to one query and irrelevant to another,
    so nothing about relevance can be read off the entity text alone.
    """
    rng = np.random.default_rng(seed)
    words = _unique_words(rng, pool_size + 2 * n_queries)
    pool = tuple(words[:pool_size])
    qwords = words[pool_size:]

    queries = []
    whitelists = {}
    lo, hi = whitelist_range
    for i in range(n_queries):
        query = Query(f"q{i:04d}", f"{qwords[2 * i]} {qwords[2 * i + 1]}")
        size = int(rng.integers(lo, hi + 1)) if pool else 0
        size = min(size, len(pool))
        chosen = rng.choice(len(pool), size=size, replace=False) if size else []
        queries.append(query)
        whitelists[query.id] = frozenset(pool[j] for j in chosen)

    gazetteer = Gazetteer.from_entries({w: EntityType.PRODUCT_TYPE for w in pool})
    return WhitelistWorld(tuple(queries), whitelists, pool, gazetteer)


def _unique_words(rng: np.random.Generator, count: int) -> list[str]:
    seen: set[str] = set()
    out: list[str] = []
    while len(out) < count:
        n = int(rng.integers(2, 4))
        word = "".join(_SYLLABLES[i] for i in rng.integers(0, len(_SYLLABLES), size=n))
        if word not in seen:
            seen.add(word)
            out.append(word)
    return out


@dataclass(frozen=True)
class SyntheticLog:
    """A generated click log together with its ground truth."""

    log: ClickLog
    truth: Dataset  # labeled QI pairs, one block per query
    world: WhitelistWorld


def gen_synthetic_log(
    world: WhitelistWorld,
    items_per_query: int = 50,
    entities_per_item: tuple[int, int] = (1, 3),
    exposure_range: tuple[int, int] = (15, 60),
    click_rate: float = 0.35,
    noise_rate: float = 0.0,
    cooccur_rate: float = 0.0,
    filler_range: tuple[int, int] = (2, 4),
    seed: int = 0,
) -> SyntheticLog:
    """Generate entity-bearing items and clicks that favor whitelisted items.

    Each item is relevant to its query with probability one half; relevant
    items carry at least one whitelisted entity (plus, with cooccur_rate per
    remaining slot, an unrelated one), irrelevant items carry none.  Clicks
    are binomial for relevant items and zero otherwise; with probability
    noise_rate a relevant item still gets zero clicks, modeling attractive
    items that users skip for reasons other than relevance.
    """
    if not 0.0 <= noise_rate < 0.5:
        raise ValueError("noise_rate must be in [0, 0.5)")
    rng = np.random.default_rng(seed)
    fillers = _unique_words(np.random.default_rng(seed + 1), 40)
    fillers = [w for w in fillers if w not in set(world.entity_pool)]

    records: list[ClickRecord] = []
    truth: list[QIPair] = []
    e_lo, e_hi = entities_per_item
    f_lo, f_hi = filler_range

    for query in world.queries:
        whitelist = sorted(world.whitelists[query.id])
        others = [w for w in world.entity_pool if w not in world.whitelists[query.id]]
        for j in range(items_per_query):
            relevant = bool(rng.random() < 0.5) and bool(whitelist)
            n_entities = int(rng.integers(e_lo, e_hi + 1))
            chosen: list[str] = []
            if relevant:
                k = min(max(1, n_entities), len(whitelist))
                k = int(rng.integers(1, k + 1))
                chosen.extend(whitelist[i] for i in rng.choice(len(whitelist), size=k, replace=False))
                for _ in range(n_entities - k):
                    if others and rng.random() < cooccur_rate:
                        chosen.append(others[int(rng.integers(0, len(others)))])
            else:
                n = min(max(1, n_entities), len(others))
                chosen.extend(others[i] for i in rng.choice(len(others), size=n, replace=False))

            n_fill = int(rng.integers(f_lo, f_hi + 1))
            tokens = list(dict.fromkeys(chosen)) + [
                fillers[int(i)] for i in rng.integers(0, len(fillers), size=n_fill)
            ]
            order = rng.permutation(len(tokens))
            title = " ".join(tokens[i] for i in order)
            item = Item(f"{query.id}-i{j:03d}", title)

            exposures = int(rng.integers(exposure_range[0], exposure_range[1] + 1))
            if relevant:
                clicks = 0 if rng.random() < noise_rate else int(rng.binomial(exposures, click_rate))
            else:
                clicks = 0
            records.append(ClickRecord(query, item, exposures, clicks))
            truth.append(QIPair(query, item, int(relevant)))

    return SyntheticLog(ClickLog(records), Dataset(tuple(truth)), world)
