"""Rule cache building, set-intersection serving and interventions."""

import pytest

from entrel.core import ClickLog, ClickRecord, EntityType, Item, Query, split_dataset
from entrel.encoder import EncoderConfig, ScorerParams, sigmoid
from entrel.logmine import gen_synthetic_log, make_whitelist_world
from entrel.model import EntityRelevanceModel, QEScore, tag_product_bags
from entrel.ner import Gazetteer
from entrel.servecache import (
    PROVENANCE_HUMAN,
    PROVENANCE_MODEL,
    CacheFormatError,
    QueryRuleSet,
    RuleCache,
    build_cache,
    intervene,
    load_cache,
    save_cache,
    serve_predict,
)
from entrel.training import TrainOptions

PT = EntityType.PRODUCT_TYPE
TINY = EncoderConfig(embed_dim=4, hash_buckets=32, ngram_orders=(3,), mlp_hidden=3, seed=0)


class StubModel:
    """Scorer with a fixed (query text, entity text) -> score table."""

    def __init__(self, table, default=-1.0):
        self.table = table
        self.default = default
        self.params = ScorerParams.zeros(TINY)

    def score_qe(self, query, entity):
        score = self.table.get((query.text, entity.text), self.default)
        return QEScore(entity, score, float(sigmoid(score)))


def rec(qid, qtext, iid, title, exposures, clicks):
    return ClickRecord(Query(qid, qtext), Item(iid, title), exposures, clicks)


@pytest.fixture
def gazetteer():
    return Gazetteer.from_entries({"dumbbell": PT, "rack": PT, "yoga mat": PT})


@pytest.fixture
def small_log():
    return ClickLog([
        rec("q1", "gym weight", "i1", "dumbbell set", 30, 9),
        rec("q1", "gym weight", "i2", "dumbbell rack", 30, 3),
        rec("q1", "gym weight", "i3", "yoga mat", 30, 0),
        rec("q2", "stretch gear", "i3", "yoga mat", 25, 6),
    ])


class TestBuildCache:
    def test_threshold_keeps_non_negative_scores(self, small_log, gazetteer):
        model = StubModel({("gym weight", "dumbbell"): 0.4, ("gym weight", "rack"): -0.2})
        cache = build_cache(model, small_log, gazetteer, candidate_k=10)
        assert cache.rules["gym weight"].texts() == {"dumbbell"}
        assert cache.rules["gym weight"].entities["dumbbell"] == PROVENANCE_MODEL

    def test_candidate_k_zero_gives_empty_rule_sets(self, small_log, gazetteer):
        model = StubModel({}, default=1.0)
        cache = build_cache(model, small_log, gazetteer, candidate_k=0)
        assert all(not r.texts() for r in cache.rules.values())

    def test_membership_agrees_with_model_sign(self, small_log, gazetteer):
        rng_scores = {
            ("gym weight", "dumbbell"): 0.9,
            ("gym weight", "rack"): -0.1,
            ("gym weight", "yoga mat"): 0.3,
            ("stretch gear", "yoga mat"): -0.7,
        }
        model = StubModel(rng_scores)
        cache = build_cache(model, small_log, gazetteer, candidate_k=100)
        for (qtext, etext), score in rng_scores.items():
            assert (etext in cache.rules[qtext].texts()) == (score >= 0)

    def test_item_index_covers_all_log_items(self, small_log, gazetteer):
        cache = build_cache(StubModel({}), small_log, gazetteer)
        assert cache.items["i1"] == ("dumbbell",)
        assert cache.items["i2"] == ("dumbbell", "rack")
        assert cache.items["i3"] == ("yoga mat",)

    def test_candidates_ranked_by_clicks_then_text(self, gazetteer):
        log = ClickLog([
            rec("q1", "gym weight", "i1", "dumbbell", 30, 5),
            rec("q1", "gym weight", "i2", "rack", 30, 5),
            rec("q1", "gym weight", "i3", "yoga mat", 30, 1),
        ])
        model = StubModel({}, default=1.0)  # accepts everything offered
        cache = build_cache(model, log, gazetteer, candidate_k=2)
        assert cache.rules["gym weight"].texts() == {"dumbbell", "rack"}

    def test_human_entries_survive_rebuild(self, small_log, gazetteer):
        model = StubModel({("gym weight", "dumbbell"): 0.4})
        cache = build_cache(model, small_log, gazetteer)
        cache, applied = intervene(cache, "gym weight", "add", "kettlebell")
        assert applied
        rebuilt = build_cache(model, small_log, gazetteer, previous=cache)
        assert "kettlebell" in rebuilt.rules["gym weight"].texts()
        assert rebuilt.rules["gym weight"].entities["kettlebell"] == PROVENANCE_HUMAN
        assert rebuilt.version == cache.version + 1


class TestServePredict:
    @pytest.fixture
    def cache(self):
        return RuleCache(
            rules={"gym weight": QueryRuleSet("gym weight", {"dumbbell": PROVENANCE_MODEL})},
            items={"i1": ("dumbbell", "rack"), "i2": ("yoga mat",)},
        )

    def test_intersection_hit(self, cache):
        result = serve_predict(cache, "gym weight", "i1")
        assert result.hit and result.label == 1
        assert result.rationale == ("dumbbell",)

    def test_disjoint_sets_irrelevant(self, cache):
        result = serve_predict(cache, "gym weight", "i2")
        assert result.hit and result.label == 0 and result.rationale == ()

    def test_unknown_query_is_miss(self, cache):
        result = serve_predict(cache, "mystery", "i1")
        assert not result.hit and result.label is None

    def test_unknown_item_raises(self, cache):
        with pytest.raises(KeyError):
            serve_predict(cache, "gym weight", "i999")

    def test_query_text_normalized(self, cache):
        assert serve_predict(cache, "  Gym   WEIGHT ", "i1").label == 1

    def test_agrees_with_model_on_covered_pairs(self):
        """Exhaustive serve/model agreement on a small trained world."""
        world = make_whitelist_world(n_queries=8, pool_size=14, whitelist_range=(2, 3), seed=7)
        syn = gen_synthetic_log(world, items_per_query=10, noise_rate=0.0, seed=7)
        bags = tag_product_bags(syn.truth, world.gazetteer)
        train, dev, _ = split_dataset(syn.truth, (3, 1, 1), seed=7)
        cfg = EncoderConfig(embed_dim=16, hash_buckets=1024, ngram_orders=(3,), mlp_hidden=12, seed=7)
        model = EntityRelevanceModel.create(cfg).train(
            train, dev, TrainOptions(epochs=12, batch_size=16, seed=7), bags
        )
        cache = build_cache(model, syn.log, world.gazetteer, candidate_k=100)
        checked = 0
        for pair in syn.truth:
            bag = bags[pair.item.id]
            covered = bag.texts() <= _candidate_texts(cache, pair.query)
            if not covered:
                continue
            checked += 1
            served = serve_predict(cache, pair.query.text, pair.item.id)
            direct = model.predict_qi(pair.query, bag)
            assert served.label == direct.label
        assert checked > 0


def _candidate_texts(cache, query):
    """Entity texts the cache builder scored for this query (kept or not).

    With candidate_k above the per-query entity count, the candidates are all
    entities of the query's exposed items, which the synthetic world keys by
    the query id prefix.
    """
    out: set[str] = set()
    for iid, texts in cache.items.items():
        if iid.startswith(query.id + "-"):
            out.update(texts)
    return out


class TestIntervene:
    @pytest.fixture
    def cache(self):
        return RuleCache(
            rules={"gym weight": QueryRuleSet("gym weight", {"dumbbell": PROVENANCE_MODEL})},
            items={
                "i1": ("dumbbell",),
                "i2": ("kettlebell",),
                "i3": ("kettlebell", "rack"),
            },
        )

    def test_add_flips_prediction(self, cache):
        assert serve_predict(cache, "gym weight", "i2").label == 0
        cache2, applied = intervene(cache, "gym weight", "add", "kettlebell")
        assert applied
        assert serve_predict(cache2, "gym weight", "i2").label == 1
        assert cache2.rules["gym weight"].version == 2
        assert cache2.version == cache.version + 1

    def test_delete_sole_entity_flips_to_irrelevant(self, cache):
        cache2, applied = intervene(cache, "gym weight", "delete", "dumbbell")
        assert applied
        assert serve_predict(cache2, "gym weight", "i1").label == 0

    def test_one_add_affects_every_item_with_that_entity(self):
        items = {f"i{k}": ("kettlebell", f"filler{k}") for k in range(5)}
        items["other"] = ("rack",)
        cache = RuleCache(
            rules={"gym weight": QueryRuleSet("gym weight", {})},
            items=items,
        )
        before = {iid: serve_predict(cache, "gym weight", iid).label for iid in items}
        cache2, _ = intervene(cache, "gym weight", "add", "kettlebell")
        after = {iid: serve_predict(cache2, "gym weight", iid).label for iid in items}
        flipped = [iid for iid in items if before[iid] != after[iid]]
        assert len(flipped) == 5 and "other" not in flipped

    def test_delete_absent_is_reported_noop(self, cache):
        cache2, applied = intervene(cache, "gym weight", "delete", "missing")
        assert not applied
        assert cache2 is cache

    def test_add_creates_rule_set_for_new_query(self, cache):
        cache2, applied = intervene(cache, "new query", "add", "rack")
        assert applied
        assert cache2.rules["new query"].texts() == {"rack"}
        assert cache2.rules["new query"].version == 1

    def test_add_upgrades_model_provenance_to_human(self, cache):
        cache2, applied = intervene(cache, "gym weight", "add", "dumbbell")
        assert applied
        assert cache2.rules["gym weight"].entities["dumbbell"] == PROVENANCE_HUMAN
        cache3, applied2 = intervene(cache2, "gym weight", "add", "dumbbell")
        assert not applied2 and cache3 is cache2

    def test_unknown_action_rejected(self, cache):
        with pytest.raises(ValueError):
            intervene(cache, "gym weight", "toggle", "dumbbell")

    def test_sequences_are_serializable(self, cache):
        ops = [
            ("add", "kettlebell"), ("delete", "dumbbell"),
            ("add", "rack"), ("delete", "missing"), ("add", "kettlebell"),
        ]
        a, b = cache, cache
        for action, entity in ops:
            a, _ = intervene(a, "gym weight", action, entity)
        for action, entity in ops:
            b, _ = intervene(b, "gym weight", action, entity)
        assert a.rules == b.rules and a.version == b.version


class TestCacheFiles:
    def test_round_trip(self, tmp_path):
        cache = RuleCache(
            rules={
                "gym weight": QueryRuleSet(
                    "gym weight", {"dumbbell": PROVENANCE_MODEL, "kettlebell": PROVENANCE_HUMAN}, 3
                ),
                "stretch gear": QueryRuleSet("stretch gear", {}, 1),
            },
            items={"i1": ("dumbbell",), "i2": ()},
            model_checkpoint_ref="abc123",
            version=7,
        )
        path = tmp_path / "cache.jsonl"
        save_cache(cache, path)
        loaded = load_cache(path)
        assert loaded == cache

    def test_empty_cache_round_trip(self, tmp_path):
        cache = RuleCache(rules={}, items={})
        path = tmp_path / "cache.jsonl"
        save_cache(cache, path)
        assert load_cache(path) == cache

    def test_corrupted_file_reports_structured_error(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        path.write_text("this is not json\n")
        with pytest.raises(CacheFormatError):
            load_cache(path)

    def test_version_mismatch_rejected(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        path.write_text('{"format_version": 99}\n')
        with pytest.raises(CacheFormatError):
            load_cache(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CacheFormatError):
            load_cache(tmp_path / "nope.jsonl")

    def test_rule_bytes_independent_of_embedding_dim(self, tmp_path, gazetteer, small_log):
        small = StubModel({("gym weight", "dumbbell"): 1.0})
        cache = build_cache(small, small_log, gazetteer)
        p1 = tmp_path / "a.jsonl"
        save_cache(cache, p1)

        big_params = ScorerParams.zeros(EncoderConfig(embed_dim=128, hash_buckets=64,
                                                      ngram_orders=(3,), mlp_hidden=64, seed=0))
        big = StubModel({("gym weight", "dumbbell"): 1.0})
        big.params = big_params
        cache2 = build_cache(big, small_log, gazetteer)
        p2 = tmp_path / "b.jsonl"
        save_cache(cache2, p2)
        assert p1.stat().st_size == p2.stat().st_size
