"""Tagging item titles and aggregating entity scores with soft logic.

Relevance of (query, item) is the disjunction of per-entity relevance, and
with max as the soft OR the item probability is literally the best entity
probability: sigmoid(max score) == max(sigmoid(score)).
"""

import numpy as np

from entrel import (
    EncoderConfig,
    Entity,
    EntityBag,
    EntityType,
    EntityRelevanceModel,
    Gazetteer,
    Query,
    product_entities,
    sigmoid,
    tag,
)

gazetteer = Gazetteer.from_entries({
    "dumbbell": EntityType.PRODUCT_TYPE,
    "phone case": EntityType.PRODUCT_TYPE,
    "case": EntityType.PRODUCT_TYPE,
    "cover": EntityType.PRODUCT_TYPE,
    "intel xeon": EntityType.BRAND,
    "processor": EntityType.PRODUCT_TYPE,
})

print("== greedy longest-match tagging ==")
for title in ("Intel Xeon Processor", "phone case cover", "adjustable dumbbell 20kg"):
    bag = tag(title, gazetteer)
    print(f"{title!r:35} -> {[(e.text, e.etype.value) for e in bag]}")

print("\nproduct-type view of 'Intel Xeon Processor':",
      [e.text for e in product_entities(tag("Intel Xeon Processor", gazetteer))])

print("\n== per-entity scoring and max aggregation ==")
config = EncoderConfig(embed_dim=16, hash_buckets=1024, ngram_orders=(3,), mlp_hidden=8, seed=7)
model = EntityRelevanceModel.create(config)
query = Query("demo", "gym weight")
bag = EntityBag([
    Entity("dumbbell", EntityType.PRODUCT_TYPE),
    Entity("processor", EntityType.PRODUCT_TYPE),
    Entity("cover", EntityType.PRODUCT_TYPE),
])

prediction = model.predict_qi(query, bag)
for qe in prediction.rationale:
    print(f"  S({query.text!r}, {qe.entity.text!r}) = {qe.score:+.4f}  p = {qe.probability:.4f}")
print(f"item score = max = {prediction.score:+.4f}, label = {prediction.label}, "
      f"witness = {prediction.argmax_entity.text!r}")

print("\n== the identity that makes the decomposition exact ==")
rng = np.random.default_rng(0)
scores = rng.uniform(-6, 6, size=8)
lhs = float(sigmoid(scores.max()))
rhs = float(np.max(sigmoid(scores)))
print(f"sigmoid(max s) = {lhs:.15f}")
print(f"max(sigmoid s) = {rhs:.15f}")
print(f"difference     = {abs(lhs - rhs):.2e}")
