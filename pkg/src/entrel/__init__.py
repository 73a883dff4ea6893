"""Entity-decomposed search relevance engine.

Relevance of a query-item pair is factored into per-entity judgments scored
by a small trainable cross-encoder and aggregated with max (disjunction) /
min (conjunction) soft logic, which makes predictions explainable at the
entity level, cacheable as per-query rule sets, and hotfixable by humans.
"""

from .core import (
    ClickLog,
    ClickRecord,
    Dataset,
    Entity,
    EntityBag,
    EntityType,
    Item,
    ParseError,
    QEPair,
    QIPair,
    Query,
    Split,
    load_click_log,
    load_qe_dataset,
    load_qi_dataset,
    normalize_text,
    save_click_log,
    save_dataset,
    split_dataset,
)
from .encoder import (
    EncoderConfig,
    FeatureExtractor,
    ScorerParams,
    encode_joint,
    encode_single,
    gradients,
    load_checkpoint,
    save_checkpoint,
    score_biaffine,
    score_mlp,
    sigmoid,
)
from .evalbench import (
    BenchSystem,
    InterventionReport,
    MetricsReport,
    SpeedReport,
    bench_speed,
    evaluate,
    simulate_intervention,
)
from .logmine import (
    MinerConfig,
    SyntheticLog,
    WhitelistWorld,
    gen_synthetic_log,
    make_whitelist_world,
    mine_qe,
    mine_qi,
)
from .model import EntityRelevanceModel, QEScore, QIPrediction, tag_product_bags
from .baselines import BaselineModel, predict_bi, predict_cross, predict_ner, train_baseline
from .ner import Gazetteer, KnowledgeBase, Relation, expand, product_entities, tag
from .servecache import (
    QueryRuleSet,
    RuleCache,
    ServeResult,
    build_cache,
    intervene,
    load_cache,
    save_cache,
    serve_predict,
)
from .training import TrainOptions, TrainingDiverged

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
