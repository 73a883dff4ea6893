"""Entity-decomposed relevance model.

A query-item judgment is decomposed into one cross-encoder score per
product-type entity of the item; the item score is the maximum entity score.
Because the sigmoid is monotone, sigmoid(max of scores) equals the max of
the per-entity probabilities, and thresholding the item score at zero equals
the disjunction of the per-entity threshold decisions -- so every positive
prediction is witnessed by at least one entity, which doubles as the
prediction's rationale.

Training minimizes the negative log-likelihood of the query-item labels,
with the max subgradient routed to the single argmax entity (lowest index on
ties).  The query-entity scorer can also be pretrained directly on mined
query-entity labels, or initialized from a trained cross-encoder baseline.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autograd as ag
from .core import Dataset, Entity, EntityBag, EntityType, QEPair, QIPair, Query
from .encoder import (
    EncoderConfig,
    FeatureExtractor,
    ScorerParams,
    encode_joint,
    encode_joint_t,
    gradients,
    score_mlp,
    score_mlp_t,
    sigmoid,
)
from .evalbench import evaluate
from .training import TrainOptions, sgd_fit

log = logging.getLogger(__name__)

EMPTY_BAG_LOSS_CAP = 20.0  # nats; stands in for -log(0) on unsatisfiable pairs


@dataclass(frozen=True)
class QEScore:
    entity: Entity
    score: float
    probability: float


def _qe_score(entity: Entity, score: float) -> QEScore:
    return QEScore(entity, score, float(sigmoid(score)))


@dataclass(frozen=True)
class QIPrediction:
    score: float
    probability: float
    label: int
    rationale: tuple[QEScore, ...]
    argmax_entity: Entity | None


class EntityRelevanceModel:
    """Query-entity cross-encoder with max aggregation over the entity bag."""

    def __init__(
        self,
        params: ScorerParams,
        config: EncoderConfig,
        empty_bag_policy: str = "irrelevant",
        smooth_tau: float | None = None,
    ):
        if empty_bag_policy not in ("irrelevant", "relevant"):
            raise ValueError(f"unknown empty_bag_policy: {empty_bag_policy!r}")
        if smooth_tau is not None and smooth_tau <= 0:
            raise ValueError("smooth_tau must be positive when set")
        params.validate(config)
        self.params = params
        self.config = config
        self.empty_bag_policy = empty_bag_policy
        self.smooth_tau = smooth_tau
        self._fx = FeatureExtractor(config)

    @classmethod
    def create(cls, config: EncoderConfig, **kwargs) -> "EntityRelevanceModel":
        return cls(ScorerParams.init(config), config, **kwargs)

    def _with_params(self, params: ScorerParams) -> "EntityRelevanceModel":
        return EntityRelevanceModel(
            params, self.config, self.empty_bag_policy, self.smooth_tau
        )

    # -- scoring ------------------------------------------------------------

    def _score_text(self, query_text: str, entity_text: str) -> float:
        h = encode_joint(query_text, entity_text, self.params, self.config, self._fx)
        return score_mlp(h, self.params)

    def score_qe(self, query: Query, entity: Entity) -> QEScore:
        """Joint-encode the query and one product-type entity, MLP-score it."""
        if entity.etype != EntityType.PRODUCT_TYPE:
            raise ValueError(
                f"score_qe expects a product-type entity, got {entity.etype.value}"
            )
        return _qe_score(entity, self._score_text(query.text, entity.text))

    def _empty_bag_prediction(self) -> QIPrediction:
        if self.empty_bag_policy == "relevant":
            return QIPrediction(math.inf, 1.0, 1, (), None)
        return QIPrediction(-math.inf, 0.0, 0, (), None)

    def predict_qi(self, query: Query, bag: EntityBag) -> QIPrediction:
        """Item score = max entity score; label = [score >= 0].

        The bag must already be filtered to product-type entities.  An empty
        bag falls back to the configured policy (an empty disjunction is
        false by default) with an infinite sentinel score.
        """
        if not bag:
            return self._empty_bag_prediction()
        scored = [self.score_qe(query, entity) for entity in bag]
        # argmax returns the first maximizer, so ties break to the lowest index
        best = int(np.argmax([qe.score for qe in scored]))
        rationale = tuple(sorted(scored, key=lambda qe: -qe.score))
        top = scored[best]
        return QIPrediction(
            score=top.score,
            probability=top.probability,
            label=int(top.score >= 0),
            rationale=rationale,
            argmax_entity=bag[best],
        )

    def predict_general(
        self,
        query: Query,
        query_bag: EntityBag,
        item_bag: EntityBag,
    ) -> QIPrediction:
        """Typed conjunction: min over the query's entity types of the per-type max.

        Every type present in the query must be matched by at least one
        relevant item entity of the same type; a type missing from the item
        forces that conjunct (and the prediction) to irrelevant.  A query
        without tagged entities falls back to product-type-only prediction.
        """
        ctypes = query_bag.types()
        if not ctypes:
            return self.predict_qi(query, item_bag.of_type(EntityType.PRODUCT_TYPE))

        scored_all: list[QEScore] = []
        conjuncts: list[tuple[float, Entity | None]] = []
        for ctype in ctypes:
            members = item_bag.of_type(ctype)
            if not members:
                conjuncts.append((-math.inf, None))
                continue
            scores = [self._score_text(query.text, e.text) for e in members]
            best = int(np.argmax(scores))
            scored_all.extend(_qe_score(e, s) for e, s in zip(members, scores))
            conjuncts.append((scores[best], members[best]))

        binding = min(range(len(conjuncts)), key=lambda i: conjuncts[i][0])
        score, witness = conjuncts[binding]
        return QIPrediction(
            score=score,
            probability=float(sigmoid(score)) if math.isfinite(score) else 0.0,
            label=int(score >= 0),
            rationale=tuple(sorted(scored_all, key=lambda qe: -qe.score)),
            argmax_entity=witness,
        )

    # -- learning -----------------------------------------------------------

    def _policy_label(self) -> int:
        return 1 if self.empty_bag_policy == "relevant" else 0

    def _taped_pair_loss(self, vp, query: Query, bag: EntityBag, label: int):
        """Loss node for one pair; returns a float for gradient-free cases."""
        if not bag:
            return 0.0 if label == self._policy_label() else EMPTY_BAG_LOSS_CAP
        if self.smooth_tau is None:
            scores = [self._score_text(query.text, e.text) for e in bag]
            best = int(np.argmax(scores))
            h = encode_joint_t(query.text, bag[best].text, vp, self.config, self._fx)
            return ag.logistic_nll(score_mlp_t(h, vp), label)
        score_vars = [
            score_mlp_t(encode_joint_t(query.text, e.text, vp, self.config, self._fx), vp)
            for e in bag
        ]
        return ag.logistic_nll(ag.smooth_max(score_vars, self.smooth_tau), label)

    def qi_loss(self, pair: QIPair, bag: EntityBag) -> tuple[float, dict[str, np.ndarray]]:
        """Negative log-likelihood of one labeled pair and its parameter gradients.

        Gradients flow only through the argmax entity (the subgradient of the
        max), unless smooth_tau is configured.  Unsatisfiable pairs (empty
        bag with a mismatching label) contribute a capped constant loss and
        zero gradients.
        """
        if pair.label is None:
            raise ValueError("qi_loss requires a labeled pair")
        if not bag:
            value = 0.0 if pair.label == self._policy_label() else EMPTY_BAG_LOSS_CAP
            return value, {k: np.zeros_like(v) for k, v in self.params.arrays().items()}

        captured = {}

        def loss_fn(vp):
            loss = self._taped_pair_loss(vp, pair.query, bag, pair.label)
            captured["value"] = float(loss.value)
            return loss

        grads = gradients(loss_fn, self.params)
        return captured["value"], grads

    def _dev_eval(self, examples: list[tuple[Query, EntityBag, int]]):
        def run(params: ScorerParams) -> dict:
            view = EntityRelevanceModel(
                params, self.config, self.empty_bag_policy, self.smooth_tau
            )
            view._fx = self._fx  # share the feature memo; params do not affect it
            preds = [view.predict_qi(q, bag).label for q, bag, _ in examples]
            golds = [label for _, _, label in examples]
            report = evaluate(preds, golds)
            return {"accuracy": report.accuracy, "macro_f1": report.macro_f1}
        return run

    @staticmethod
    def _as_examples(
        dataset: Dataset, item_bags: Mapping[str, EntityBag]
    ) -> list[tuple[Query, EntityBag, int]]:
        examples = []
        for pair in dataset:
            if pair.label is None:
                raise ValueError(f"unlabeled pair for query {pair.query.id!r}")
            if pair.item.id not in item_bags:
                raise ValueError(f"item {pair.item.id!r} has no tagged bag")
            examples.append((pair.query, item_bags[pair.item.id], pair.label))
        return examples

    def train(
        self,
        train: Dataset,
        dev: Dataset,
        opts: TrainOptions,
        item_bags: Mapping[str, EntityBag],
    ) -> "EntityRelevanceModel":
        """NLL training on labeled pairs; returns the best-dev-macro-F1 checkpoint.

        Every item must be tagged beforehand (item_bags maps item id to its
        product-type bag).  Pairs with an empty bag and a positive label are
        counted per epoch and reported in the training log.
        """
        train_examples = self._as_examples(train, item_bags)
        dev_examples = self._as_examples(dev, item_bags)

        capped = {"count": 0}

        def pair_loss(vp, example):
            query, bag, label = example
            loss = self._taped_pair_loss(vp, query, bag, label)
            if not isinstance(loss, ag.Var) and loss > 0:
                capped["count"] += 1
            return loss

        def extras():
            out = {"unsatisfiable_pairs": capped["count"]}
            capped["count"] = 0
            return out

        best, history = sgd_fit(
            self.params,
            train_examples,
            pair_loss,
            opts,
            dev_eval=self._dev_eval(dev_examples) if len(dev_examples) else None,
            epoch_extras=extras,
        )
        if history and history[-1].get("unsatisfiable_pairs"):
            log.warning(
                "training saw %d pairs with an empty entity bag and a positive label",
                history[-1]["unsatisfiable_pairs"],
            )
        return self._with_params(best)

    def pretrain_qe(self, qe: Dataset, opts: TrainOptions) -> "EntityRelevanceModel":
        """Binary cross-entropy on labeled query-entity pairs.

        The result is meant to initialize train(); no model selection is done.
        """
        if not len(qe):
            return self
        examples = []
        for pair in qe:
            if not isinstance(pair, QEPair) or pair.label is None:
                raise ValueError("pretrain_qe requires labeled query-entity pairs")
            if pair.entity.etype != EntityType.PRODUCT_TYPE:
                raise ValueError("pretrain_qe expects product-type entities")
            examples.append(pair)

        def pair_loss(vp, pair: QEPair):
            h = encode_joint_t(pair.query.text, pair.entity.text, vp, self.config, self._fx)
            return ag.logistic_nll(score_mlp_t(h, vp), pair.label)

        best, _ = sgd_fit(self.params, examples, pair_loss, opts)
        return self._with_params(best)

    def init_from_cross(self, cross) -> "EntityRelevanceModel":
        """Copy all parameters from a trained cross-encoder baseline.

        After the copy the query-entity score equals the baseline's score of
        (query, entity-text-as-title) exactly, because both paths compute the
        same joint-encoding + MLP function.
        """
        if cross.config != self.config:
            raise ValueError(
                f"encoder configs differ: {cross.config} vs {self.config}"
            )
        if cross.params is None:
            raise ValueError("the source baseline has no parameters")
        return self._with_params(cross.params.copy())


def tag_product_bags(dataset: Dataset, gazetteer) -> dict[str, EntityBag]:
    """Product-type entity bag per item id, for every item in a QI dataset."""
    from .ner import product_entities, tag as tag_text

    bags: dict[str, EntityBag] = {}
    for pair in dataset:
        if pair.item.id not in bags:
            bags[pair.item.id] = product_entities(tag_text(pair.item.title, gazetteer))
    return bags
