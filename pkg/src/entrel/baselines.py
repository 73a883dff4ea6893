"""Comparison systems: bi/cross encoders over titles or entity text, and
entity-overlap matchers with optional knowledge-base expansion.

Neural kinds score a pair either with a biaffine form over two independent
encodings (cacheable vectors) or with an MLP over a joint encoding.  The
overlap matchers predict relevant iff the query's product-type entities
(optionally one-hop expanded through the knowledge base) share a surface
with the item's.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from . import autograd as ag
from .core import Dataset, EntityBag, Item, Query
from .encoder import (
    EncoderConfig,
    FeatureExtractor,
    ScorerParams,
    encode_joint,
    encode_joint_t,
    encode_single,
    encode_single_t,
    score_biaffine,
    score_biaffine_t,
    score_mlp,
    score_mlp_t,
)
from .evalbench import evaluate
from .ner import Gazetteer, KnowledgeBase, Relation, expand, product_entities, tag
from .training import TrainOptions, sgd_fit

BI_KINDS = ("bi_title", "bi_entities")
CROSS_KINDS = ("cross_title", "cross_entities")
NEURAL_KINDS = BI_KINDS + CROSS_KINDS
OVERLAP_KINDS = ("ner_overlap", "ner_overlap_kb")
ALL_KINDS = NEURAL_KINDS + OVERLAP_KINDS


@dataclass
class BaselineModel:
    kind: str
    config: EncoderConfig
    params: ScorerParams | None = None
    kb: KnowledgeBase | None = None
    relations: frozenset[Relation] = frozenset()

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown baseline kind: {self.kind!r}")
        if (self.params is not None) != (self.kind in NEURAL_KINDS):
            raise ValueError("params must be present exactly for neural kinds")
        if self.params is not None:
            self.params.validate(self.config)
        self.relations = frozenset(self.relations)
        self._fx = FeatureExtractor(self.config)

    @classmethod
    def create(cls, kind: str, config: EncoderConfig, **kwargs) -> "BaselineModel":
        params = ScorerParams.init(config) if kind in NEURAL_KINDS else None
        return cls(kind, config, params, **kwargs)

    def _with_params(self, params: ScorerParams) -> "BaselineModel":
        return BaselineModel(self.kind, self.config, params, self.kb, self.relations)


def item_side_text(kind: str, item: Item, bag: EntityBag | None) -> str:
    """The text the item contributes: its title, or its entity texts joined."""
    if kind.endswith("_entities"):
        if bag is None:
            raise ValueError(f"{kind} needs the item's entity bag")
        return " ".join(e.text for e in product_entities(bag))
    return item.title


def encode_query_vector(m: BaselineModel, query_text: str):
    """Query-side vector for the biaffine score (single texts use segment 0)."""
    return encode_single(query_text, 0, m.params, m.config, m._fx)


def encode_item_vector(m: BaselineModel, item_text: str):
    """Item-side vector for the biaffine score; precomputable and cacheable."""
    return encode_single(item_text, 0, m.params, m.config, m._fx)


def predict_bi(
    m: BaselineModel, query: Query, item: Item, bag: EntityBag | None = None
) -> tuple[float, int]:
    """Biaffine score over independently encoded sides, thresholded at zero."""
    if m.kind not in BI_KINDS:
        raise ValueError(f"predict_bi called on kind {m.kind!r}")
    side = item_side_text(m.kind, item, bag)
    hq = encode_query_vector(m, query.text)
    hi = encode_item_vector(m, side)
    score = score_biaffine(hq, hi, m.params)
    return score, int(score >= 0)


def predict_cross(
    m: BaselineModel, query: Query, item: Item, bag: EntityBag | None = None
) -> tuple[float, int]:
    """MLP score over the jointly encoded pair, thresholded at zero."""
    if m.kind not in CROSS_KINDS:
        raise ValueError(f"predict_cross called on kind {m.kind!r}")
    side = item_side_text(m.kind, item, bag)
    h = encode_joint(query.text, side, m.params, m.config, m._fx)
    score = score_mlp(h, m.params)
    return score, int(score >= 0)


def predict_ner(m: BaselineModel, query: Query, item: Item, gazetteer: Gazetteer) -> int:
    """Surface overlap of product-type entities; KB expansion for the _kb kind.

    A query with no taggable product-type entity is treated as matching
    every item.  An empty relation set degenerates to the plain matcher.
    """
    if m.kind not in OVERLAP_KINDS:
        raise ValueError(f"predict_ner called on kind {m.kind!r}")
    query_bag = product_entities(tag(query.text, gazetteer))
    if not query_bag:
        return 1
    if m.kind == "ner_overlap_kb" and m.kb is not None and m.relations:
        query_bag = expand(query_bag, m.kb, m.relations)
    item_bag = product_entities(tag(item.title, gazetteer))
    return int(bool(query_bag.texts() & item_bag.texts()))


def _neural_examples(
    m: BaselineModel, dataset: Dataset, item_bags: Mapping[str, EntityBag] | None
) -> list[tuple[str, str, int]]:
    needs_bags = m.kind.endswith("_entities")
    if needs_bags and item_bags is None:
        raise ValueError(f"{m.kind} training needs item_bags")
    examples = []
    for pair in dataset:
        if pair.label is None:
            raise ValueError(f"unlabeled pair for query {pair.query.id!r}")
        bag = item_bags.get(pair.item.id) if needs_bags else None
        if needs_bags and bag is None:
            raise ValueError(f"item {pair.item.id!r} has no tagged bag")
        examples.append((pair.query.text, item_side_text(m.kind, pair.item, bag), pair.label))
    return examples


def train_baseline(
    m: BaselineModel,
    train: Dataset,
    dev: Dataset,
    opts: TrainOptions,
    item_bags: Mapping[str, EntityBag] | None = None,
    pretrain: Dataset | None = None,
    pretrain_opts: TrainOptions | None = None,
) -> BaselineModel:
    """NLL training of a neural baseline on its own scoring path.

    When a pretraining dataset (e.g. mined pseudo-labels) is given, it is
    fitted first without model selection, then fine-tuning proceeds with
    dev-based selection exactly as the entity model does.
    """
    if m.kind not in NEURAL_KINDS:
        raise ValueError(f"cannot train baseline kind {m.kind!r}")

    is_cross = m.kind in CROSS_KINDS
    fx = m._fx
    cfg = m.config

    def pair_loss(vp, example):
        query_text, side_text, label = example
        if is_cross:
            score = score_mlp_t(encode_joint_t(query_text, side_text, vp, cfg, fx), vp)
        else:
            hq = encode_single_t(query_text, 0, vp, cfg, fx)
            hi = encode_single_t(side_text, 0, vp, cfg, fx)
            score = score_biaffine_t(hq, hi, vp)
        return ag.logistic_nll(score, label)

    params = m.params
    if pretrain is not None and len(pretrain):
        pre_examples = _neural_examples(m, pretrain, item_bags)
        params, _ = sgd_fit(params, pre_examples, pair_loss, pretrain_opts or opts)

    train_examples = _neural_examples(m, train, item_bags)
    dev_examples = _neural_examples(m, dev, item_bags)

    def dev_eval(candidate: ScorerParams) -> dict:
        preds = []
        for query_text, side_text, _ in dev_examples:
            if is_cross:
                h = encode_joint(query_text, side_text, candidate, cfg, fx)
                score = score_mlp(h, candidate)
            else:
                hq = encode_single(query_text, 0, candidate, cfg, fx)
                hi = encode_single(side_text, 0, candidate, cfg, fx)
                score = score_biaffine(hq, hi, candidate)
            preds.append(int(score >= 0))
        golds = [label for _, _, label in dev_examples]
        report = evaluate(preds, golds)
        return {"accuracy": report.accuracy, "macro_f1": report.macro_f1}

    best, _ = sgd_fit(
        params,
        train_examples,
        pair_loss,
        opts,
        dev_eval=dev_eval if len(dev_examples) else None,
    )
    return m._with_params(best)
