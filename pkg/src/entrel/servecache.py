"""Precomputed query-entity rule cache and the set-intersection serving path.

Offline, a trained model judges the top clicked entity candidates for every
query; the surviving entities become that query's rules.  Online, a
prediction is just "do the query's rule entities intersect the item's tagged
entities", which is both fast and directly explainable.  Human operators can
add or delete individual rule entities; human additions survive cache
rebuilds until explicitly cleared.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Union

from .core import ClickLog, Entity, EntityType, normalize_text
from .ner import Gazetteer, product_entities, tag

PROVENANCE_MODEL = "model"
PROVENANCE_HUMAN = "human_add"

CACHE_FORMAT_VERSION = 1


class CacheFormatError(ValueError):
    """A cache file is missing, corrupt or has an unsupported version."""


@dataclass(frozen=True)
class QueryRuleSet:
    """Entities judged relevant to one query, with per-entity provenance."""

    query: str
    entities: Mapping[str, str] = field(default_factory=dict)
    version: int = 1

    def __post_init__(self):
        object.__setattr__(self, "_texts", frozenset(self.entities))

    def texts(self) -> frozenset[str]:
        return self._texts

    def human_entities(self) -> dict[str, str]:
        return {e: p for e, p in self.entities.items() if p == PROVENANCE_HUMAN}


@dataclass(frozen=True)
class ServeResult:
    hit: bool
    label: int | None
    rationale: tuple[str, ...]


@dataclass(frozen=True)
class RuleCache:
    """Immutable snapshot: per-query rules plus per-item entity sets.

    Item entity sets are precomputed as frozensets so the serving path does
    no per-request allocation beyond the intersection itself.
    """

    rules: Mapping[str, QueryRuleSet]
    items: Mapping[str, tuple[str, ...]]
    model_checkpoint_ref: str = ""
    version: int = 1

    def __post_init__(self):
        object.__setattr__(
            self, "_item_sets", {iid: frozenset(ts) for iid, ts in self.items.items()}
        )

    def item_set(self, item_id: str) -> frozenset[str]:
        return self._item_sets[item_id]


def params_fingerprint(params) -> str:
    """Short stable digest of a ScorerParams, used as a checkpoint reference."""
    digest = hashlib.sha256()
    for name, arr in sorted(params.arrays().items()):
        digest.update(name.encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()[:16]


def entity_click_counts(log: ClickLog, gazetteer: Gazetteer) -> dict[str, dict[str, int]]:
    """Per query id: summed clicks of each product-type entity over exposed items."""
    counts: dict[str, dict[str, int]] = {}
    for rec in log.records:
        if rec.exposures <= 0:
            continue
        per_query = counts.setdefault(rec.query.id, {})
        for entity in product_entities(tag(rec.item.title, gazetteer)):
            per_query[entity.text] = per_query.get(entity.text, 0) + rec.clicks
    return counts


def build_cache(
    model,
    log: ClickLog,
    gazetteer: Gazetteer,
    candidate_k: int = 100,
    previous: RuleCache | None = None,
) -> RuleCache:
    """Score the top clicked entity candidates per query and keep the relevant ones.

    Candidates are the candidate_k entities with the highest summed clicks
    (ties broken by entity text); an entity enters the rule set when the
    model's query-entity score is non-negative.  Human-added entries from a
    previous cache are carried over.
    """
    counts = entity_click_counts(log, gazetteer)
    queries = {q.id: q for q in log.queries()}

    rules: dict[str, QueryRuleSet] = {}
    for qid in sorted(queries):
        query = queries[qid]
        per_query = counts.get(qid, {})
        ranked = sorted(per_query.items(), key=lambda kv: (-kv[1], kv[0]))
        candidates = [text for text, _ in ranked[:max(candidate_k, 0)]]
        kept = {
            text: PROVENANCE_MODEL
            for text in candidates
            if model.score_qe(query, Entity(text, EntityType.PRODUCT_TYPE)).score >= 0
        }
        prev_rule = previous.rules.get(query.text) if previous else None
        version = 1
        if prev_rule is not None:
            kept.update(prev_rule.human_entities())
            version = prev_rule.version + 1
        rules[query.text] = QueryRuleSet(query.text, kept, version)

    if previous is not None:
        # queries that exist only as human hotfixes survive a rebuild too
        for qtext, prev_rule in previous.rules.items():
            if qtext not in rules:
                human = prev_rule.human_entities()
                if human:
                    rules[qtext] = QueryRuleSet(qtext, human, prev_rule.version + 1)

    items = {
        item.id: tuple(sorted(product_entities(tag(item.title, gazetteer)).texts()))
        for item in log.items()
    }
    return RuleCache(
        rules=rules,
        items=items,
        model_checkpoint_ref=params_fingerprint(model.params),
        version=(previous.version + 1) if previous else 1,
    )


def serve_predict(cache: RuleCache, query_text: str, item_id: str) -> ServeResult:
    """Label by rule/item entity intersection; uncached queries yield a MISS."""
    item_set = cache._item_sets.get(item_id)
    if item_set is None:
        raise KeyError(f"unknown item id: {item_id!r}")
    # rule keys are normalized, so an exact hit skips the normalization pass
    rule = cache.rules.get(query_text)
    if rule is None:
        rule = cache.rules.get(normalize_text(query_text))
    if rule is None:
        return ServeResult(hit=False, label=None, rationale=())
    matched = rule.texts() & item_set
    if not matched:
        return ServeResult(hit=True, label=0, rationale=())
    return ServeResult(hit=True, label=1, rationale=tuple(sorted(matched)))


def intervene(
    cache: RuleCache,
    query_text: str,
    action: str,
    entity_text: str,
) -> tuple[RuleCache, bool]:
    """Add or delete one rule entity; returns (new cache, whether anything changed).

    Deleting an absent entity (or from an unknown query) is a no-op reported
    as applied=False.  Every applied mutation bumps both the rule set version
    and the cache snapshot version.
    """
    if action not in ("add", "delete"):
        raise ValueError(f"action must be 'add' or 'delete', got {action!r}")
    qtext = normalize_text(query_text)
    etext = normalize_text(entity_text)
    if not qtext or not etext:
        raise ValueError("query and entity must be non-empty")

    rule = cache.rules.get(qtext)
    if action == "add":
        entities = dict(rule.entities) if rule else {}
        if entities.get(etext) == PROVENANCE_HUMAN:
            return cache, False
        entities[etext] = PROVENANCE_HUMAN
        new_rule = QueryRuleSet(qtext, entities, (rule.version + 1) if rule else 1)
    else:
        if rule is None or etext not in rule.entities:
            return cache, False
        entities = {e: p for e, p in rule.entities.items() if e != etext}
        new_rule = QueryRuleSet(qtext, entities, rule.version + 1)

    rules = dict(cache.rules)
    rules[qtext] = new_rule
    return replace(cache, rules=rules, version=cache.version + 1), True


def save_cache(cache: RuleCache, path: Union[str, Path]) -> None:
    """Write the rule store as JSON lines; the item index goes to a companion file.

    The rule store carries only entity texts (no vectors), so its size is
    independent of any embedding dimension.
    """
    path = Path(path)
    header = {
        "format_version": CACHE_FORMAT_VERSION,
        "model_checkpoint_ref": cache.model_checkpoint_ref,
        "version": cache.version,
        "rule_count": len(cache.rules),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for qtext in sorted(cache.rules):
        rule = cache.rules[qtext]
        lines.append(json.dumps(
            {
                "query": rule.query,
                "version": rule.version,
                "entities": sorted(rule.entities.items()),
            },
            ensure_ascii=False, sort_keys=True,
        ))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    item_lines = [
        json.dumps({"item_id": iid, "entities": list(cache.items[iid])},
                   ensure_ascii=False, sort_keys=True)
        for iid in sorted(cache.items)
    ]
    item_index_path(path).write_text(
        "\n".join(item_lines) + ("\n" if item_lines else ""), encoding="utf-8"
    )


def item_index_path(path: Union[str, Path]) -> Path:
    return Path(str(path) + ".items")


def load_cache(path: Union[str, Path]) -> RuleCache:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CacheFormatError(f"{path}: cannot read cache ({exc})") from None
    if not lines:
        raise CacheFormatError(f"{path}: empty cache file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CacheFormatError(f"{path}:1: bad header ({exc})") from None
    if not isinstance(header, dict) or header.get("format_version") != CACHE_FORMAT_VERSION:
        raise CacheFormatError(
            f"{path}: format version {header.get('format_version') if isinstance(header, dict) else '?'!r}, "
            f"expected {CACHE_FORMAT_VERSION}"
        )

    rules: dict[str, QueryRuleSet] = {}
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            rule = QueryRuleSet(
                query=rec["query"],
                entities={e: p for e, p in rec["entities"]},
                version=int(rec["version"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CacheFormatError(f"{path}:{line_no}: bad rule record ({exc})") from None
        rules[rule.query] = rule

    items: dict[str, tuple[str, ...]] = {}
    items_path = item_index_path(path)
    if items_path.exists():
        for line_no, line in enumerate(items_path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                items[rec["item_id"]] = tuple(rec["entities"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CacheFormatError(f"{items_path}:{line_no}: bad item record ({exc})") from None

    return RuleCache(
        rules=rules,
        items=items,
        model_checkpoint_ref=str(header.get("model_checkpoint_ref", "")),
        version=int(header.get("version", 1)),
    )
