"""HTTP service exposing prediction, rules, interventions and evaluation.

Readers work against an immutable cache snapshot grabbed once per request;
mutations are serialized by a writer lock and install a new snapshot
atomically, so concurrent readers always observe either the old or the new
cache, never a mixture.  Optimistic concurrency is supported through an
optional expected_version: a stale writer gets 409 instead of clobbering.

Endpoints (all JSON):
  GET    /v1/predict?query=...&item_id=...
  POST   /v1/predict                {"query": ..., "title": ...}
  GET    /v1/rules/{query}
  POST   /v1/rules/{query}/entities {"entity": ..., "expected_version"?: int}
  DELETE /v1/rules/{query}/entities/{entity}[?expected_version=int]
  POST   /v1/eval                   {"dataset": name}
  GET    /v1/version
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, unquote, urlparse

from .core import Entity, EntityBag, EntityType, Query, load_qi_dataset, normalize_text
from .encoder import load_checkpoint
from .evalbench import evaluate
from .model import EntityRelevanceModel
from .ner import Gazetteer, product_entities, tag
from .servecache import RuleCache, intervene, load_cache, serve_predict


@dataclass
class ServiceConfig:
    listen: str = "127.0.0.1:8080"
    cache_path: str = ""
    model_path: str | None = None
    gazetteer_path: str | None = None
    fallback_on_miss: bool = True
    datasets: dict[str, str] = field(default_factory=dict)

    def validate_paths(self) -> None:
        required = [("cache_path", self.cache_path)]
        optional = [("model_path", self.model_path), ("gazetteer_path", self.gazetteer_path)]
        for name, value in required + [(n, v) for n, v in optional if v]:
            if not value or not Path(value).exists():
                raise FileNotFoundError(f"{name} does not exist: {value!r}")
        for name, value in self.datasets.items():
            if not Path(value).exists():
                raise FileNotFoundError(f"dataset {name!r} does not exist: {value!r}")


class ServiceState:
    """Shared state: an atomically swapped cache snapshot plus a writer lock."""

    def __init__(
        self,
        cache: RuleCache,
        model: EntityRelevanceModel | None = None,
        gazetteer: Gazetteer | None = None,
        fallback_on_miss: bool = True,
        datasets: dict[str, str] | None = None,
    ):
        self.cache = cache
        self.model = model
        self.gazetteer = gazetteer
        self.fallback_on_miss = fallback_on_miss
        self.datasets = dict(datasets or {})
        self.write_lock = threading.Lock()

    def mutate(self, query: str, action: str, entity: str, expected_version: int | None):
        """Apply one intervention; returns (status, payload)."""
        with self.write_lock:
            current = self.cache
            if expected_version is not None and expected_version != current.version:
                return 409, {
                    "error": "version conflict",
                    "expected_version": expected_version,
                    "version": current.version,
                }
            try:
                new_cache, applied = intervene(current, query, action, entity)
            except ValueError as exc:
                return 400, {"error": str(exc)}
            self.cache = new_cache  # atomic reference swap
            rule = new_cache.rules.get(normalize_text(query))
            return 200, {
                "applied": applied,
                "version": new_cache.version,
                "rule_version": rule.version if rule else None,
            }


def _entity_probability(state: ServiceState, query_text: str, entity_text: str):
    if state.model is None:
        return None
    qe = state.model.score_qe(
        Query("live", query_text), Entity(entity_text, EntityType.PRODUCT_TYPE)
    )
    return qe.probability


def _predict_cached(state: ServiceState, snap: RuleCache, query_text: str, item_id: str):
    try:
        result = serve_predict(snap, query_text, item_id)
    except KeyError:
        return 404, {"error": f"unknown item id: {item_id}"}
    if result.hit:
        rationale = [
            {"entity": e, "probability": _entity_probability(state, query_text, e), "matched": True}
            for e in result.rationale
        ]
        return 200, {
            "label": result.label,
            "cache_hit": True,
            "rationale": rationale,
            "version": snap.version,
        }
    if not state.fallback_on_miss or state.model is None:
        return 200, {
            "label": None,
            "cache_hit": False,
            "miss": True,
            "rationale": [],
            "version": snap.version,
        }
    bag = EntityBag(Entity(t, EntityType.PRODUCT_TYPE) for t in snap.items[item_id])
    return 200, _model_prediction(state, snap, query_text, bag)


def _model_prediction(state: ServiceState, snap: RuleCache, query_text: str, bag: EntityBag):
    pred = state.model.predict_qi(Query("live", query_text), bag)
    rationale = [
        {"entity": qe.entity.text, "probability": qe.probability, "matched": qe.score >= 0}
        for qe in pred.rationale
    ]
    return {
        "label": pred.label,
        "cache_hit": False,
        "rationale": rationale,
        "version": snap.version,
    }


def _predict_live(state: ServiceState, snap: RuleCache, query_text: str, title: str):
    if state.gazetteer is None:
        return 400, {"error": "no gazetteer configured for on-the-fly tagging"}
    bag = product_entities(tag(title, state.gazetteer))
    rule = snap.rules.get(normalize_text(query_text))
    if rule is not None:
        matched = sorted(rule.texts() & bag.texts())
        rationale = [
            {"entity": e, "probability": _entity_probability(state, query_text, e), "matched": True}
            for e in matched
        ]
        return 200, {
            "label": int(bool(matched)),
            "cache_hit": True,
            "rationale": rationale,
            "version": snap.version,
        }
    if not state.fallback_on_miss or state.model is None:
        return 200, {
            "label": None, "cache_hit": False, "miss": True,
            "rationale": [], "version": snap.version,
        }
    return 200, _model_prediction(state, snap, query_text, bag)


def _eval_dataset(state: ServiceState, snap: RuleCache, name: str):
    path = state.datasets.get(name)
    if path is None:
        return 404, {"error": f"dataset {name!r} is not registered"}
    fmt = "jsonl" if str(path).endswith(".jsonl") else "tsv"
    dataset = load_qi_dataset(path, fmt)
    preds, golds = [], []
    for pair in dataset:
        if pair.label is None:
            continue
        try:
            result = serve_predict(snap, pair.query.text, pair.item.id)
        except KeyError:
            return 404, {"error": f"unknown item id: {pair.item.id}"}
        if result.hit:
            label = result.label
        elif state.fallback_on_miss and state.model is not None:
            bag = EntityBag(
                Entity(t, EntityType.PRODUCT_TYPE) for t in snap.items.get(pair.item.id, ())
            )
            label = state.model.predict_qi(pair.query, bag).label
        else:
            label = 0
        preds.append(label)
        golds.append(pair.label)
    if not preds:
        return 400, {"error": "dataset has no labeled pairs"}
    report = evaluate(preds, golds)
    payload = report.to_dict()
    payload["pairs"] = len(preds)
    payload["version"] = snap.version
    return 200, payload


_RULES_RE = re.compile(r"^/v1/rules/([^/]+)$")
_ENTITIES_RE = re.compile(r"^/v1/rules/([^/]+)/entities$")
_ENTITY_RE = re.compile(r"^/v1/rules/([^/]+)/entities/([^/]+)$")


class _Handler(BaseHTTPRequestHandler):
    server_version = "entrel/0.1"

    # -- helpers ------------------------------------------------------------

    def _send(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.end_headers()
        self.wfile.write(body)

    def _body(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if not raw:
            return None
        try:
            payload = json.loads(raw.decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError):
            return ValueError("malformed JSON body")
        if not isinstance(payload, dict):
            return ValueError("body must be a JSON object")
        return payload

    @property
    def state(self) -> ServiceState:
        return self.server.state  # type: ignore[attr-defined]

    def log_message(self, *args):  # quiet by default
        pass

    # -- routing ------------------------------------------------------------

    def do_OPTIONS(self):
        self._send(200, {})

    def do_GET(self):
        url = urlparse(self.path)
        state = self.state
        snap = state.cache

        if url.path == "/v1/version":
            self._send(200, {
                "version": snap.version,
                "model_checkpoint_ref": snap.model_checkpoint_ref,
                "fallback_on_miss": state.fallback_on_miss,
            })
            return

        if url.path == "/v1/predict":
            params = parse_qs(url.query)
            query = params.get("query", [None])[0]
            item_id = params.get("item_id", [None])[0]
            if not query or not item_id:
                self._send(400, {"error": "query and item_id are required"})
                return
            status, payload = _predict_cached(state, snap, query, item_id)
            self._send(status, payload)
            return

        match = _RULES_RE.match(url.path)
        if match:
            qtext = normalize_text(unquote(match.group(1)))
            rule = snap.rules.get(qtext)
            if rule is None:
                self._send(404, {"error": f"query {qtext!r} is not cached"})
                return
            self._send(200, {
                "query": rule.query,
                "rule_version": rule.version,
                "version": snap.version,
                "entities": [
                    {"text": t, "provenance": p} for t, p in sorted(rule.entities.items())
                ],
            })
            return

        self._send(404, {"error": f"no route for GET {url.path}"})

    def do_POST(self):
        url = urlparse(self.path)
        state = self.state

        body = self._body()
        if isinstance(body, ValueError):
            self._send(400, {"error": str(body)})
            return

        if url.path == "/v1/predict":
            if not body or "query" not in body or "title" not in body:
                self._send(400, {"error": "body must contain query and title"})
                return
            status, payload = _predict_live(state, state.cache, str(body["query"]), str(body["title"]))
            self._send(status, payload)
            return

        if url.path == "/v1/eval":
            if not body or "dataset" not in body:
                self._send(400, {"error": "body must contain a dataset name"})
                return
            status, payload = _eval_dataset(state, state.cache, str(body["dataset"]))
            self._send(status, payload)
            return

        match = _ENTITIES_RE.match(url.path)
        if match:
            if not body or "entity" not in body:
                self._send(400, {"error": "body must contain an entity"})
                return
            expected = body.get("expected_version")
            if expected is not None and not isinstance(expected, int):
                self._send(400, {"error": "expected_version must be an integer"})
                return
            status, payload = state.mutate(
                unquote(match.group(1)), "add", str(body["entity"]), expected
            )
            self._send(status, payload)
            return

        self._send(404, {"error": f"no route for POST {url.path}"})

    def do_DELETE(self):
        url = urlparse(self.path)
        match = _ENTITY_RE.match(url.path)
        if not match:
            self._send(404, {"error": f"no route for DELETE {url.path}"})
            return
        params = parse_qs(url.query)
        expected_raw = params.get("expected_version", [None])[0]
        expected: int | None = None
        if expected_raw is not None:
            try:
                expected = int(expected_raw)
            except ValueError:
                self._send(400, {"error": "expected_version must be an integer"})
                return
        status, payload = self.state.mutate(
            unquote(match.group(1)), "delete", unquote(match.group(2)), expected
        )
        self._send(status, payload)


class RelevanceServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], state: ServiceState):
        super().__init__(address, _Handler)
        self.state = state


def build_state(config: ServiceConfig) -> ServiceState:
    config.validate_paths()
    cache = load_cache(config.cache_path)
    model = None
    if config.model_path:
        checkpoint = load_checkpoint(config.model_path)
        model = EntityRelevanceModel(checkpoint.params, checkpoint.config)
    gazetteer = Gazetteer.from_tsv(config.gazetteer_path) if config.gazetteer_path else None
    return ServiceState(
        cache,
        model=model,
        gazetteer=gazetteer,
        fallback_on_miss=config.fallback_on_miss,
        datasets=config.datasets,
    )


def make_server(config: ServiceConfig) -> RelevanceServer:
    host, _, port = config.listen.rpartition(":")
    return RelevanceServer((host or "127.0.0.1", int(port)), build_state(config))
