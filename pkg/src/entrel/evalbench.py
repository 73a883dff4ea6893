"""Metrics, the throughput/cache-size benchmark, and the intervention simulation."""

from __future__ import annotations

import io
import json
import time
from dataclasses import asdict, dataclass
from statistics import median
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import Dataset, Item, Query
from .encoder import (
    EncoderConfig,
    FeatureExtractor,
    ScorerParams,
    encode_joint,
    encode_single,
    score_mlp,
)
from .servecache import RuleCache, intervene, save_cache, serve_predict


def _table(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    pos_acc: float
    neg_acc: float
    macro_f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_table(self) -> str:
        rows = [["metric", "value"]]
        for key, value in self.to_dict().items():
            rows.append([key, f"{value:.4f}" if isinstance(value, float) else str(value)])
        return _table(rows)


def evaluate(preds: Sequence[int], golds: Sequence[int]) -> MetricsReport:
    """Accuracy, per-class recall and macro F1 from binary predictions.

    pos_acc / neg_acc are the recalls of the positive and negative class;
    per-class F1 with an empty denominator is defined as 0.
    """
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(golds)} golds")
    if not preds:
        raise ValueError("cannot evaluate an empty prediction list")
    for value in (*preds, *golds):
        if value not in (0, 1):
            raise ValueError(f"labels must be 0 or 1, got {value!r}")

    tp = sum(1 for p, g in zip(preds, golds) if p == 1 and g == 1)
    fp = sum(1 for p, g in zip(preds, golds) if p == 1 and g == 0)
    tn = sum(1 for p, g in zip(preds, golds) if p == 0 and g == 0)
    fn = sum(1 for p, g in zip(preds, golds) if p == 0 and g == 1)

    def ratio(num, den):
        return num / den if den else 0.0

    f1_pos = ratio(2 * tp, 2 * tp + fp + fn)
    f1_neg = ratio(2 * tn, 2 * tn + fn + fp)
    return MetricsReport(
        accuracy=(tp + tn) / len(preds),
        pos_acc=ratio(tp, tp + fn),
        neg_acc=ratio(tn, tn + fp),
        macro_f1=(f1_pos + f1_neg) / 2.0,
        tp=tp, fp=fp, tn=tn, fn=fn,
    )


# ---------------------------------------------------------------------------
# speed / cache-size benchmark
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchSystem:
    """A named (query_text, item_id) -> label predictor plus its cache footprint."""

    name: str
    predict: Callable[[str, str], int]
    cache_bytes: int | None = None


@dataclass(frozen=True)
class SystemSpeed:
    name: str
    instances_per_second: float
    cache_bytes: int | None

    def __post_init__(self):
        if self.instances_per_second <= 0:
            raise ValueError("throughput must be positive")


@dataclass(frozen=True)
class SpeedReport:
    systems: tuple[SystemSpeed, ...]

    def to_dict(self) -> dict:
        return {
            s.name: {
                "instances_per_second": s.instances_per_second,
                "cache_bytes": s.cache_bytes,
            }
            for s in self.systems
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_table(self) -> str:
        rows = [["system", "instances/s", "cache bytes"]]
        for s in self.systems:
            rows.append([
                s.name,
                f"{s.instances_per_second:.1f}",
                "-" if s.cache_bytes is None else str(s.cache_bytes),
            ])
        return _table(rows)


def _pair_stream(pairs) -> list[tuple[str, str]]:
    if isinstance(pairs, Dataset):
        return [(p.query.text, p.item.id) for p in pairs]
    return [(q, i) for q, i in pairs]


def bench_speed(
    systems: Sequence[BenchSystem],
    pairs,
    warmup: int = 100,
    repeats: int = 3,
) -> SpeedReport:
    """Median throughput of each system over an identical pair stream.

    Cache sizes are whatever the system builders measured from serialized
    bytes; this function never estimates them.
    """
    stream = _pair_stream(pairs)
    if not stream:
        raise ValueError("empty pair stream")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")

    measured = []
    for system in systems:
        for query_text, item_id in stream[:warmup]:
            system.predict(query_text, item_id)
        throughputs = []
        for _ in range(repeats):
            start = time.perf_counter()
            for query_text, item_id in stream:
                system.predict(query_text, item_id)
            elapsed = time.perf_counter() - start
            throughputs.append(len(stream) / elapsed)
        measured.append(SystemSpeed(system.name, median(throughputs), system.cache_bytes))
    return SpeedReport(tuple(measured))


def rule_cache_bytes(cache: RuleCache, tmp_dir) -> dict[str, int]:
    """Serialized sizes of the rule store and its item index companion."""
    from .servecache import item_index_path

    path = str(tmp_dir) + "/bench_rules.jsonl"
    save_cache(cache, path)
    import os

    rules = os.path.getsize(path)
    items = os.path.getsize(item_index_path(path))
    return {"rules": rules, "item_index": items, "total": rules + items}


def cached_system(cache: RuleCache, tmp_dir, name: str = "entity_cached") -> BenchSystem:
    """Serving through the rule cache; misses count as irrelevant (no fallback).

    cache_bytes is the serialized rule store, the per-query artifact that
    plays the role of the bi-encoder's precomputed vectors.
    """
    sizes = rule_cache_bytes(cache, tmp_dir)

    def predict(query_text: str, item_id: str) -> int:
        result = serve_predict(cache, query_text, item_id)
        return result.label if result.hit else 0

    return BenchSystem(name, predict, sizes["rules"])


def bi_cached_system(
    params: ScorerParams,
    cfg: EncoderConfig,
    queries: Iterable[Query],
    items: Iterable[Item],
    name: str = "bi_cached",
) -> BenchSystem:
    """Bi-encoder serving from precomputed query and item vectors.

    cache_bytes is the uncompressed serialized size of both vector stores.
    """
    fx = FeatureExtractor(cfg)
    qvecs = {q.text: encode_single(q.text, 0, params, cfg, fx) for q in queries}
    ivecs = {i.id: encode_single(i.title, 0, params, cfg, fx) for i in items}

    buffer = io.BytesIO()
    np.savez(buffer, **{f"q{k}": v for k, v in enumerate(qvecs.values())},
             **{f"i{k}": v for k, v in enumerate(ivecs.values())})
    cache_bytes = buffer.getbuffer().nbytes

    bw, bb = params.bw, float(params.bb)

    def predict(query_text: str, item_id: str) -> int:
        return int(qvecs[query_text] @ bw @ ivecs[item_id] + bb >= 0)

    return BenchSystem(name, predict, cache_bytes)


def cross_direct_system(
    params: ScorerParams,
    cfg: EncoderConfig,
    items: Mapping[str, str],
    name: str = "cross_direct",
) -> BenchSystem:
    """Cross-encoder scoring each pair on the fly.

    Nothing is precomputed or memoized: a joint encoder cannot cache pair
    representations, so every request pays the full featurize-and-score cost.
    That asymmetry against the cached systems is exactly what the benchmark
    measures.
    """
    fx = FeatureExtractor(cfg, cache_cross=False, cache_singles=False)

    def predict(query_text: str, item_id: str) -> int:
        h = encode_joint(query_text, items[item_id], params, cfg, fx)
        return int(score_mlp(h, params) >= 0)

    return BenchSystem(name, predict, None)


# ---------------------------------------------------------------------------
# intervention simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InterventionReport:
    accuracy_before: float
    accuracy_after: float
    actions: int
    fixed_pairs: int
    actions_per_qi: float
    collateral_flips: tuple[tuple[str, str], ...]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["collateral_flips"] = [list(x) for x in self.collateral_flips]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_table(self) -> str:
        rows = [["field", "value"]]
        rows.append(["accuracy_before", f"{self.accuracy_before:.4f}"])
        rows.append(["accuracy_after", f"{self.accuracy_after:.4f}"])
        rows.append(["actions", str(self.actions)])
        rows.append(["fixed_pairs", str(self.fixed_pairs)])
        rows.append(["actions_per_qi", f"{self.actions_per_qi:.4f}"])
        rows.append(["collateral_flips", str(len(self.collateral_flips))])
        return _table(rows)


def simulate_intervention(
    cache: RuleCache,
    labeled: Dataset,
) -> tuple[InterventionReport, RuleCache]:
    """Fix every cached error with single-entity rule edits and re-evaluate.

    Pass 1 classifies each pair against the starting cache.  Then, in dataset
    order: a false negative gets the item's first (alphabetical) entity added
    to its query's rules; a false positive gets every currently matching rule
    entity deleted.  Each applied edit counts as one action.  Pass 2 recomputes
    accuracy; pairs that were correct before and wrong after are reported as
    collateral flips.
    """
    if not len(labeled):
        raise ValueError("empty dataset")
    pairs = list(labeled)
    for pair in pairs:
        if pair.label is None:
            raise ValueError("simulate_intervention requires labeled pairs")

    def predict_all(c: RuleCache) -> list[int]:
        out = []
        for pair in pairs:
            result = serve_predict(c, pair.query.text, pair.item.id)
            if not result.hit:
                raise ValueError(f"query {pair.query.text!r} is not cached")
            out.append(result.label)
        return out

    before = predict_all(cache)
    golds = [p.label for p in pairs]
    accuracy_before = sum(int(p == g) for p, g in zip(before, golds)) / len(pairs)

    current = cache
    actions = 0
    for pair, pred in zip(pairs, before):
        gold = pair.label
        if pred == gold:
            continue
        if gold == 1:  # false negative: supply one entity from the item
            item_entities = current.items.get(pair.item.id, ())
            if not item_entities:
                continue
            current, applied = intervene(current, pair.query.text, "add", item_entities[0])
            actions += int(applied)
        else:  # false positive: delete every matching rule entity
            rule = current.rules.get(pair.query.text)
            if rule is None:
                continue
            matching = sorted(rule.texts() & set(current.items.get(pair.item.id, ())))
            for entity_text in matching:
                current, applied = intervene(current, pair.query.text, "delete", entity_text)
                actions += int(applied)

    after = predict_all(current)
    accuracy_after = sum(int(p == g) for p, g in zip(after, golds)) / len(pairs)
    fixed = sum(
        1 for b, a, g in zip(before, after, golds) if b != g and a == g
    )
    collateral = tuple(
        (pair.query.text, pair.item.id)
        for pair, b, a, g in zip(pairs, before, after, golds)
        if b == g and a != g
    )
    report = InterventionReport(
        accuracy_before=accuracy_before,
        accuracy_after=accuracy_after,
        actions=actions,
        fixed_pairs=fixed,
        actions_per_qi=(actions / fixed) if fixed else 0.0,
        collateral_flips=collateral,
    )
    return report, current
