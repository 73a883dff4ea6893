"""The HTTP serving surface: predictions, explanations and live rule edits.

Starts the service in-process on an ephemeral port and walks the /v1 API
with plain urllib, ending with the add -> observe flip -> delete round trip
an operator console performs.
"""

import json
import threading
import urllib.request

from entrel import (
    EncoderConfig,
    EntityRelevanceModel,
    ScorerParams,
    build_cache,
    gen_synthetic_log,
    make_whitelist_world,
)
from entrel.service import RelevanceServer, ServiceState


def call(method, url, body=None):
    data = json.dumps(body).encode() if body is not None else None
    req = urllib.request.Request(url, data=data, method=method,
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as err:
        return err.code, json.loads(err.read())


world = make_whitelist_world(n_queries=10, pool_size=20, whitelist_range=(2, 3), seed=4)
synthetic = gen_synthetic_log(world, items_per_query=8, noise_rate=0.0, seed=4)
config = EncoderConfig(embed_dim=16, hash_buckets=1024, ngram_orders=(3,), mlp_hidden=8, seed=4)
model = EntityRelevanceModel(ScorerParams.init(config), config)
cache = build_cache(model, synthetic.log, world.gazetteer)

state = ServiceState(cache, model=model, gazetteer=world.gazetteer, fallback_on_miss=True)
server = RelevanceServer(("127.0.0.1", 0), state)
threading.Thread(target=server.serve_forever, daemon=True).start()
base = f"http://{server.server_address[0]}:{server.server_address[1]}"
print(f"service listening at {base}\n")

print("GET /v1/version        ->", call("GET", f"{base}/v1/version")[1])

query = world.queries[0]
item = next(p.item for p in synthetic.truth if p.query.id == query.id)
status, payload = call("GET", f"{base}/v1/predict?query={query.text.replace(' ', '%20')}&item_id={item.id}")
print(f"GET /v1/predict        -> {payload}")

status, rules = call("GET", f"{base}/v1/rules/{query.text.replace(' ', '%20')}")
print(f"GET /v1/rules/...      -> version {rules['version']}, "
      f"entities {[e['text'] for e in rules['entities']]}")

print("\n-- operator hotfix round trip --")
entity = item.title.split()[0]
status, added = call("POST", f"{base}/v1/rules/{query.text.replace(' ', '%20')}/entities",
                     {"entity": entity})
print(f"POST entities          -> applied {added['applied']}, version {added['version']}")

status, after = call("GET", f"{base}/v1/predict?query={query.text.replace(' ', '%20')}&item_id={item.id}")
print(f"GET /v1/predict        -> label {after['label']} "
      f"(rationale {[e['entity'] for e in after['rationale']]})")

status, deleted = call(
    "DELETE", f"{base}/v1/rules/{query.text.replace(' ', '%20')}/entities/{entity.replace(' ', '%20')}"
)
print(f"DELETE entities/...    -> applied {deleted['applied']}, version {deleted['version']}")

status, conflict = call("POST", f"{base}/v1/rules/{query.text.replace(' ', '%20')}/entities",
                        {"entity": "x", "expected_version": 1})
print(f"stale expected_version -> HTTP {status} ({conflict.get('error')})")

server.shutdown()
server.server_close()
print("\nserver stopped")
