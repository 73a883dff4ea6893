"""Throughput and cache-size comparison of the three serving strategies.

The cached entity rules answer in microseconds from plain set intersections,
the bi-encoder serves from precomputed vectors, and the cross-encoder has
nothing to precompute so it pays the full encoding cost per pair.
"""

import random
import tempfile

from entrel import (
    EncoderConfig,
    EntityRelevanceModel,
    build_cache,
    gen_synthetic_log,
    make_whitelist_world,
)
from entrel.evalbench import (
    bench_speed,
    bi_cached_system,
    cached_system,
    cross_direct_system,
    rule_cache_bytes,
)

world = make_whitelist_world(n_queries=60, pool_size=120, whitelist_range=(2, 4), seed=3)
synthetic = gen_synthetic_log(world, items_per_query=40, noise_rate=0.0, cooccur_rate=0.4, seed=3)
config = EncoderConfig(seed=3)  # embed_dim 64, the size the vector cache pays for
model = EntityRelevanceModel.create(config)
cache = build_cache(model, synthetic.log, world.gazetteer, candidate_k=100)

base_pairs = [(r.query.text, r.item.id) for r in synthetic.log.records]
rng = random.Random(3)
pairs = [base_pairs[rng.randrange(len(base_pairs))] for _ in range(20_000)]
titles = {i.id: i.title for i in synthetic.log.items()}

with tempfile.TemporaryDirectory() as tmp:
    systems = [
        cached_system(cache, tmp),
        bi_cached_system(model.params, config, synthetic.log.queries(), synthetic.log.items()),
        cross_direct_system(model.params, config, titles),
    ]
    report = bench_speed(systems, pairs, warmup=200, repeats=3)
    sizes = rule_cache_bytes(cache, tmp)

print(report.to_table())

by_name = {s.name: s for s in report.systems}
ratio = by_name["entity_cached"].instances_per_second / by_name["cross_direct"].instances_per_second
print(f"\ncached serving is {ratio:.0f}x the direct cross-encoder throughput")
print(f"rule store {sizes['rules']:,} B (+ item index {sizes['item_index']:,} B) vs "
      f"bi vector cache {by_name['bi_cached'].cache_bytes:,} B")
print("the rule store holds entity texts only, so its size does not depend on embed_dim")
