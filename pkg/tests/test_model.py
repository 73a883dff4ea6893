"""Entity-decomposed scoring, soft-logic aggregation and training."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entrel.core import (
    Dataset,
    Entity,
    EntityBag,
    EntityType,
    Item,
    QEPair,
    QIPair,
    Query,
    split_dataset,
)
from entrel.encoder import EncoderConfig, ScorerParams, sigmoid
from entrel.evalbench import evaluate
from entrel.logmine import gen_synthetic_log, make_whitelist_world
from entrel.model import (
    EMPTY_BAG_LOSS_CAP,
    EntityRelevanceModel,
    tag_product_bags,
)
from entrel.baselines import BaselineModel, predict_cross
from entrel.training import TrainOptions

PT = EntityType.PRODUCT_TYPE
SMALL = EncoderConfig(embed_dim=8, hash_buckets=128, ngram_orders=(3,), mlp_hidden=6, seed=3)


def pt_bag(*texts):
    return EntityBag([Entity(t, PT) for t in texts])


@pytest.fixture
def zero_model():
    return EntityRelevanceModel(ScorerParams.zeros(SMALL), SMALL)


@pytest.fixture
def random_model():
    return EntityRelevanceModel.create(SMALL)


class TestScoreQE:
    def test_zero_params_give_neutral_score(self, zero_model):
        qe = zero_model.score_qe(Query("q", "gym weight"), Entity("dumbbell", PT))
        assert qe.score == 0.0
        assert qe.probability == 0.5

    def test_deterministic(self, random_model):
        q, e = Query("q", "gym weight"), Entity("dumbbell", PT)
        assert random_model.score_qe(q, e) == random_model.score_qe(q, e)

    def test_probability_is_sigmoid_of_score(self, random_model):
        qe = random_model.score_qe(Query("q", "gym weight"), Entity("dumbbell", PT))
        assert qe.probability == pytest.approx(float(sigmoid(qe.score)), abs=1e-12)

    def test_non_product_entity_rejected(self, random_model):
        with pytest.raises(ValueError):
            random_model.score_qe(Query("q", "gym weight"), Entity("acme", EntityType.BRAND))


class TestPredictQI:
    def test_single_negative_score(self, random_model):
        # find an entity the random model scores negatively, then check the label
        q = Query("q", "gym weight")
        for i in range(50):
            qe = random_model.score_qe(q, Entity(f"ent{i}", PT))
            if qe.score < 0:
                pred = random_model.predict_qi(q, pt_bag(f"ent{i}"))
                assert pred.label == 0 and pred.score == qe.score
                break
        else:
            pytest.skip("random model scored everything positive")

    def test_max_picks_highest_and_first_achiever(self, zero_model):
        # zero params score everything 0; ties break to the lowest index
        pred = zero_model.predict_qi(Query("q", "x"), pt_bag("b", "a"))
        assert pred.argmax_entity.text == "b"
        assert pred.label == 1  # score 0 meets the >= 0 threshold

    def test_score_is_max_and_rationale_sorted(self, random_model):
        q = Query("q", "gym weight")
        bag = pt_bag("alpha", "beta", "gamma")
        pred = random_model.predict_qi(q, bag)
        scores = [random_model.score_qe(q, e).score for e in bag]
        assert pred.score == max(scores)
        assert [r.score for r in pred.rationale] == sorted(scores, reverse=True)
        assert pred.label == int(max(scores) >= 0)

    def test_empty_bag_default_policy_irrelevant(self, random_model):
        pred = random_model.predict_qi(Query("q", "x"), EntityBag())
        assert pred.label == 0
        assert pred.score == -math.inf
        assert pred.probability == 0.0
        assert pred.rationale == ()

    def test_empty_bag_relevant_policy(self):
        model = EntityRelevanceModel(ScorerParams.zeros(SMALL), SMALL, empty_bag_policy="relevant")
        pred = model.predict_qi(Query("q", "x"), EntityBag())
        assert pred.label == 1 and pred.score == math.inf

    def test_duplicate_entities_do_not_change_prediction(self, random_model):
        q = Query("q", "gym weight")
        a = random_model.predict_qi(q, pt_bag("alpha", "beta"))
        b = random_model.predict_qi(
            q, EntityBag([Entity("alpha", PT), Entity("beta", PT), Entity("alpha", PT)])
        )
        assert (a.score, a.label, a.argmax_entity) == (b.score, b.label, b.argmax_entity)

    def test_permutation_invariance_of_score_and_label(self, random_model):
        q = Query("q", "gym weight")
        a = random_model.predict_qi(q, pt_bag("alpha", "beta", "gamma"))
        b = random_model.predict_qi(q, pt_bag("gamma", "alpha", "beta"))
        assert a.score == b.score and a.label == b.label
        assert a.argmax_entity == b.argmax_entity  # unique argmax here

    def test_rationale_soundness(self, random_model):
        q = Query("q", "gym weight")
        for texts in (("a", "b"), ("dumbbell", "rack", "mat"), ("solo",)):
            pred = random_model.predict_qi(q, pt_bag(*texts))
            if pred.label == 1:
                assert any(r.probability >= 0.5 for r in pred.rationale)

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=16))
    @settings(max_examples=300, deadline=None)
    def test_sigmoid_commutes_with_max(self, scores):
        arr = np.array(scores)
        assert abs(float(sigmoid(arr.max())) - float(np.max(sigmoid(arr)))) < 1e-12
        assert int(arr.max() >= 0) == int(np.max((arr >= 0).astype(int)))


class TestQILoss:
    def test_neutral_score_gives_ln2_for_either_label(self, zero_model):
        bag = pt_bag("dumbbell")
        for label in (0, 1):
            pair = QIPair(Query("q", "gym weight"), zero_item(), label)
            loss, grads = zero_model.qi_loss(pair, bag)
            assert loss == pytest.approx(math.log(2.0), abs=1e-12)
            assert set(grads) == set(zero_model.params.arrays())

    def test_gradient_step_reduces_score_for_negative_label(self, random_model):
        q = Query("q", "gym weight")
        bag = pt_bag("alpha", "beta")
        pair = QIPair(q, zero_item(), 0)
        before = random_model.predict_qi(q, bag).score
        _, grads = random_model.qi_loss(pair, bag)
        stepped = random_model.params.copy()
        for name, grad in grads.items():
            getattr(stepped, name)[...] -= 1e-2 * grad
        after = EntityRelevanceModel(stepped, SMALL).predict_qi(q, bag).score
        assert after < before

    def test_gradients_flow_only_through_argmax_entity(self, random_model):
        q = Query("q", "gym weight")
        bag = pt_bag("alpha", "beta")
        scores = [random_model.score_qe(q, e).score for e in bag]
        loser = bag[1 - int(np.argmax(scores))]
        _, grads = random_model.qi_loss(QIPair(q, zero_item(), 1), bag)
        # perturbing only the loser's cross-feature rows must leave the loss's
        # gradient untouched: rows unique to the loser carry zero gradient
        fx = random_model._fx
        winner = bag[int(np.argmax(scores))]
        loser_rows = set(fx.cross(q.text, loser.text)) - set(fx.cross(q.text, winner.text))
        for row in loser_rows:
            assert np.all(grads["cross_emb"][row] == 0.0)

    def test_empty_bag_positive_label_capped(self, random_model):
        pair = QIPair(Query("q", "x"), zero_item(), 1)
        loss, grads = random_model.qi_loss(pair, EntityBag())
        assert loss == EMPTY_BAG_LOSS_CAP
        assert all(np.all(g == 0) for g in grads.values())

    def test_empty_bag_negative_label_free(self, random_model):
        loss, _ = random_model.qi_loss(QIPair(Query("q", "x"), zero_item(), 0), EntityBag())
        assert loss == 0.0

    def test_unlabeled_pair_rejected(self, random_model):
        with pytest.raises(ValueError):
            random_model.qi_loss(QIPair(Query("q", "x"), zero_item()), pt_bag("a"))


def zero_item():
    return Item("i0", "placeholder title")


@pytest.fixture(scope="module")
def tiny_world():
    world = make_whitelist_world(n_queries=16, pool_size=24, whitelist_range=(2, 3), seed=5)
    syn = gen_synthetic_log(world, items_per_query=10, noise_rate=0.0, seed=5)
    bags = tag_product_bags(syn.truth, world.gazetteer)
    train, dev, test = split_dataset(syn.truth, (3, 1, 1), seed=5)
    return syn, bags, train, dev, test


class TestTrain:
    def test_learns_whitelist_rule(self, tiny_world):
        syn, bags, train, dev, _ = tiny_world
        cfg = EncoderConfig(embed_dim=24, hash_buckets=2048, ngram_orders=(3,), mlp_hidden=16, seed=0)
        model = EntityRelevanceModel.create(cfg)
        opts = TrainOptions(epochs=40, batch_size=16, lr=0.1, momentum=0.9, seed=0)
        trained = model.train(train, dev, opts, bags)
        preds = [trained.predict_qi(p.query, bags[p.item.id]).label for p in train]
        report = evaluate(preds, [p.label for p in train])
        assert report.accuracy >= 0.95

    def test_zero_epochs_returns_initial_model(self, tiny_world):
        _, bags, train, dev, _ = tiny_world
        model = EntityRelevanceModel.create(SMALL)
        trained = model.train(train, dev, TrainOptions(epochs=0, seed=0), bags)
        for name, arr in model.params.arrays().items():
            assert np.array_equal(getattr(trained.params, name), arr)

    def test_same_seed_identical_parameters(self, tiny_world):
        _, bags, train, dev, _ = tiny_world
        opts = TrainOptions(epochs=3, batch_size=16, lr=0.1, momentum=0.9, seed=9)
        a = EntityRelevanceModel.create(SMALL).train(train, dev, opts, bags)
        b = EntityRelevanceModel.create(SMALL).train(train, dev, opts, bags)
        for name in a.params.arrays():
            assert np.array_equal(getattr(a.params, name), getattr(b.params, name))

    def test_missing_bag_rejected(self, tiny_world):
        _, bags, train, dev, _ = tiny_world
        model = EntityRelevanceModel.create(SMALL)
        with pytest.raises(ValueError):
            model.train(train, dev, TrainOptions(epochs=1), {})

    def test_training_log_written(self, tiny_world, tmp_path):
        _, bags, train, dev, _ = tiny_world
        log_path = tmp_path / "train.jsonl"
        opts = TrainOptions(epochs=2, batch_size=16, seed=0, log_path=log_path)
        EntityRelevanceModel.create(SMALL).train(train, dev, opts, bags)
        import json

        lines = [json.loads(l) for l in log_path.read_text().splitlines()]
        assert len(lines) == 2
        assert {"epoch", "train_loss", "dev_macro_f1", "unsatisfiable_pairs"} <= set(lines[0])


class TestPretrainQE:
    def test_single_positive_pair_fits(self):
        model = EntityRelevanceModel.create(SMALL)
        pair = QEPair(Query("q", "gym weight"), Entity("dumbbell", PT), 1)
        opts = TrainOptions(epochs=25, batch_size=1, lr=0.1, momentum=0.9, seed=0)
        tuned = model.pretrain_qe(Dataset((pair,)), opts)
        assert tuned.score_qe(pair.query, pair.entity).probability > 0.5

    def test_empty_dataset_returns_model_unchanged(self):
        model = EntityRelevanceModel.create(SMALL)
        assert model.pretrain_qe(Dataset(()), TrainOptions(epochs=5)) is model

    def test_deterministic(self):
        pairs = tuple(
            QEPair(Query(f"q{i}", f"query {i}"), Entity(f"ent{i}", PT), i % 2)
            for i in range(6)
        )
        opts = TrainOptions(epochs=4, batch_size=2, seed=1)
        a = EntityRelevanceModel.create(SMALL).pretrain_qe(Dataset(pairs), opts)
        b = EntityRelevanceModel.create(SMALL).pretrain_qe(Dataset(pairs), opts)
        for name in a.params.arrays():
            assert np.array_equal(getattr(a.params, name), getattr(b.params, name))

    def test_unlabeled_rejected(self):
        model = EntityRelevanceModel.create(SMALL)
        with pytest.raises(ValueError):
            model.pretrain_qe(
                Dataset((QEPair(Query("q", "x"), Entity("e", PT)),)), TrainOptions(epochs=1)
            )


class TestInitFromCross:
    def test_scores_match_cross_baseline_exactly(self):
        cross = BaselineModel.create("cross_title", SMALL)
        model = EntityRelevanceModel(ScorerParams.zeros(SMALL), SMALL).init_from_cross(cross)
        q = Query("q", "gym weight")
        entity = Entity("dumbbell", PT)
        item = Item("i", "dumbbell")
        score, _ = predict_cross(cross, q, item)
        assert model.score_qe(q, entity).score == score

    def test_config_mismatch_rejected(self):
        other = EncoderConfig(embed_dim=16, hash_buckets=128, ngram_orders=(3,), mlp_hidden=6, seed=3)
        cross = BaselineModel.create("cross_title", other)
        with pytest.raises(ValueError):
            EntityRelevanceModel.create(SMALL).init_from_cross(cross)

    def test_idempotent(self):
        cross = BaselineModel.create("cross_title", SMALL)
        base = EntityRelevanceModel.create(SMALL)
        once = base.init_from_cross(cross)
        twice = once.init_from_cross(cross)
        for name in once.params.arrays():
            assert np.array_equal(getattr(once.params, name), getattr(twice.params, name))


class TestPredictGeneral:
    def test_single_product_type_reduces_to_predict_qi(self, random_model):
        q = Query("q", "gym weight")
        qbag = pt_bag("weights")
        ibag = pt_bag("dumbbell", "rack")
        general = random_model.predict_general(q, qbag, ibag)
        plain = random_model.predict_qi(q, ibag)
        assert (general.score, general.label, general.argmax_entity) == (
            plain.score, plain.label, plain.argmax_entity,
        )
        assert general.rationale == plain.rationale

    def test_missing_type_forces_irrelevant(self, random_model):
        q = Query("q", "red dumbbell")
        qbag = EntityBag([Entity("dumbbell", PT), Entity("red", EntityType.COLOR)])
        ibag = pt_bag("dumbbell")  # no color entity on the item
        pred = random_model.predict_general(q, qbag, ibag)
        assert pred.label == 0 and pred.score == -math.inf

    def test_empty_query_bag_falls_back_to_product_only(self, random_model):
        q = Query("q", "gym weight")
        ibag = EntityBag([Entity("dumbbell", PT), Entity("acme", EntityType.BRAND)])
        general = random_model.predict_general(q, EntityBag(), ibag)
        plain = random_model.predict_qi(q, ibag.of_type(PT))
        assert (general.score, general.label) == (plain.score, plain.label)

    def test_matches_brute_force_and_of_ors(self, random_model):
        q = Query("q", "red gym weight")
        qbag = EntityBag([
            Entity("weights", PT),
            Entity("red", EntityType.COLOR),
            Entity("acme", EntityType.BRAND),
        ])
        ibag = EntityBag([
            Entity("dumbbell", PT),
            Entity("rack", PT),
            Entity("crimson", EntityType.COLOR),
            Entity("acme", EntityType.BRAND),
        ])
        pred = random_model.predict_general(q, qbag, ibag)
        decision = True
        for ctype in qbag.types():
            members = ibag.of_type(ctype)
            clause = any(
                random_model._score_text(q.text, e.text) >= 0 for e in members
            )
            decision = decision and clause
        assert pred.label == int(decision)
