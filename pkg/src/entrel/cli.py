"""Command-line entry points: one thin subcommand per library operation."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .baselines import BaselineModel, train_baseline
from .core import (
    load_click_log,
    load_qe_dataset,
    load_qi_dataset,
    save_click_log,
    save_dataset,
)
from .encoder import EncoderConfig, load_checkpoint, save_checkpoint
from .evalbench import (
    bench_speed,
    bi_cached_system,
    cached_system,
    cross_direct_system,
    evaluate,
    simulate_intervention,
)
from .logmine import MinerConfig, gen_synthetic_log, make_whitelist_world, mine_qe, mine_qi
from .model import EntityRelevanceModel, tag_product_bags
from .ner import Gazetteer, product_entities, tag
from .servecache import build_cache, intervene, load_cache, save_cache
from .service import ServiceConfig, make_server
from .training import TrainOptions


def _fmt_of(path: str) -> str:
    return "jsonl" if str(path).endswith(".jsonl") else "tsv"


def _emit(args, payload: dict | list, table: str | None = None) -> None:
    if args.format == "table" and table is not None:
        print(table)
    else:
        print(json.dumps(payload, sort_keys=True))


def _load_config(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    return json.loads(Path(args.config).read_text(encoding="utf-8"))


def _encoder_config(args) -> EncoderConfig:
    overrides = _load_config(args).get("encoder", {})
    if "ngram_orders" in overrides:
        overrides["ngram_orders"] = tuple(overrides["ngram_orders"])
    overrides.setdefault("seed", args.seed)
    return EncoderConfig(**overrides)


def _train_options(args) -> TrainOptions:
    overrides = _load_config(args).get("train", {})
    opts = TrainOptions(seed=args.seed, **overrides)
    for name in ("epochs", "batch_size", "lr", "momentum"):
        value = getattr(args, name.replace("-", "_"), None)
        if value is not None:
            setattr(opts, name, value)
    if getattr(args, "train_log", None):
        opts.log_path = args.train_log
    return opts


def _miner_config(args) -> MinerConfig:
    overrides = _load_config(args).get("miner", {})
    for name in ("top_n", "neg_m", "min_exposure_k"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return MinerConfig(**overrides)


def _entity_model(path: str) -> EntityRelevanceModel:
    checkpoint = load_checkpoint(path)
    return EntityRelevanceModel(checkpoint.params, checkpoint.config)


# -- handlers ---------------------------------------------------------------

def _cmd_tag(args) -> int:
    gazetteer = Gazetteer.from_tsv(args.gazetteer)
    bag = tag(args.text, gazetteer)
    if args.product_only:
        bag = product_entities(bag)
    entities = [{"text": e.text, "type": e.etype.value} for e in bag]
    rows = [["text", "type"]] + [[e["text"], e["type"]] for e in entities]
    _emit(args, entities, "\n".join("  ".join(r) for r in rows))
    return 0


def _cmd_train(args) -> int:
    train = load_qi_dataset(args.train, _fmt_of(args.train))
    dev = load_qi_dataset(args.dev, _fmt_of(args.dev))
    gazetteer = Gazetteer.from_tsv(args.gazetteer)
    bags = tag_product_bags(train, gazetteer)
    bags.update(tag_product_bags(dev, gazetteer))
    opts = _train_options(args)

    if args.init_from:
        model = _entity_model(args.init_from)
    else:
        model = EntityRelevanceModel.create(_encoder_config(args))
    trained = model.train(train, dev, opts, bags)
    save_checkpoint(args.out, trained.params, trained.config, kind="entity")

    preds = [trained.predict_qi(p.query, bags[p.item.id]).label for p in dev]
    report = evaluate(preds, [p.label for p in dev])
    _emit(args, {"checkpoint": args.out, **report.to_dict()}, report.to_table())
    return 0


def _cmd_train_baseline(args) -> int:
    train = load_qi_dataset(args.train, _fmt_of(args.train))
    dev = load_qi_dataset(args.dev, _fmt_of(args.dev))
    bags = None
    if args.gazetteer:
        gazetteer = Gazetteer.from_tsv(args.gazetteer)
        bags = tag_product_bags(train, gazetteer)
        bags.update(tag_product_bags(dev, gazetteer))
    pretrain = load_qi_dataset(args.pretrain, _fmt_of(args.pretrain)) if args.pretrain else None
    model = BaselineModel.create(args.kind, _encoder_config(args))
    trained = train_baseline(
        model, train, dev, _train_options(args), item_bags=bags, pretrain=pretrain
    )
    save_checkpoint(args.out, trained.params, trained.config, kind=args.kind)
    _emit(args, {"checkpoint": args.out, "kind": args.kind})
    return 0


def _cmd_pretrain_qe(args) -> int:
    qe = load_qe_dataset(args.qe, _fmt_of(args.qe))
    if args.init_from:
        model = _entity_model(args.init_from)
    else:
        model = EntityRelevanceModel.create(_encoder_config(args))
    tuned = model.pretrain_qe(qe, _train_options(args))
    save_checkpoint(args.out, tuned.params, tuned.config, kind="entity")
    _emit(args, {"checkpoint": args.out, "pairs": len(qe)})
    return 0


def _cmd_mine_qi(args) -> int:
    log = load_click_log(args.log)
    cfg = _miner_config(args)
    dataset = mine_qi(log, cfg, seed=args.seed)
    header = f"mined query-item pseudo-labels: top_n={cfg.top_n} neg_m={cfg.neg_m} min_exposure_k={cfg.min_exposure_k} seed={args.seed}"
    save_dataset(dataset, args.out, _fmt_of(args.out), header=header)
    _emit(args, {"out": args.out, "pairs": len(dataset)})
    return 0


def _cmd_mine_qe(args) -> int:
    log = load_click_log(args.log)
    gazetteer = Gazetteer.from_tsv(args.gazetteer)
    cfg = _miner_config(args)
    dataset = mine_qe(log, gazetteer, cfg)
    header = f"mined query-entity pseudo-labels: top_n={cfg.top_n} neg_m={cfg.neg_m} min_exposure_k={cfg.min_exposure_k}"
    save_dataset(dataset, args.out, _fmt_of(args.out), header=header)
    _emit(args, {"out": args.out, "pairs": len(dataset)})
    return 0


def _cmd_gen_log(args) -> int:
    world = make_whitelist_world(
        n_queries=args.queries,
        pool_size=args.pool_size,
        seed=args.seed,
    )
    syn = gen_synthetic_log(
        world,
        items_per_query=args.items_per_query,
        noise_rate=args.noise,
        cooccur_rate=args.cooccur,
        seed=args.seed,
    )
    save_click_log(syn.log, args.out_log)
    save_dataset(syn.truth, args.out_truth, _fmt_of(args.out_truth),
                 header="ground truth of the synthetic whitelist world")
    world.gazetteer.to_tsv(args.out_gazetteer)
    _emit(args, {
        "records": len(syn.log),
        "pairs": len(syn.truth),
        "entities": len(world.entity_pool),
    })
    return 0


def _cmd_build_cache(args) -> int:
    model = _entity_model(args.model)
    log = load_click_log(args.log)
    gazetteer = Gazetteer.from_tsv(args.gazetteer)
    previous = load_cache(args.previous) if args.previous else None
    cache = build_cache(model, log, gazetteer, candidate_k=args.candidate_k, previous=previous)
    save_cache(cache, args.out)
    _emit(args, {
        "out": args.out,
        "queries": len(cache.rules),
        "items": len(cache.items),
        "version": cache.version,
    })
    return 0


def _cmd_predict(args) -> int:
    if args.cache and args.item_id:
        from .servecache import serve_predict

        cache = load_cache(args.cache)
        result = serve_predict(cache, args.query, args.item_id)
        if result.hit:
            payload = {"label": result.label, "cache_hit": True,
                       "rationale": list(result.rationale)}
        elif args.model:
            model = _entity_model(args.model)
            from .core import Entity, EntityBag, EntityType, Query

            bag = EntityBag(Entity(t, EntityType.PRODUCT_TYPE) for t in cache.items[args.item_id])
            pred = model.predict_qi(Query("cli", args.query), bag)
            payload = {
                "label": pred.label, "cache_hit": False,
                "rationale": [q.entity.text for q in pred.rationale if q.score >= 0],
            }
        else:
            payload = {"label": None, "cache_hit": False, "miss": True, "rationale": []}
    elif args.model and args.title is not None:
        from .core import Query

        model = _entity_model(args.model)
        gazetteer = Gazetteer.from_tsv(args.gazetteer)
        bag = product_entities(tag(args.title, gazetteer))
        pred = model.predict_qi(Query("cli", args.query), bag)
        payload = {
            "label": pred.label,
            "score": pred.score,
            "rationale": [
                {"entity": q.entity.text, "probability": q.probability}
                for q in pred.rationale
            ],
        }
    else:
        print("predict needs either --cache/--item-id or --model/--gazetteer/--title",
              file=sys.stderr)
        return 2
    rows = "\n".join(f"{k}: {v}" for k, v in payload.items())
    _emit(args, payload, rows)
    return 0


def _cmd_eval(args) -> int:
    preds = [int(line) for line in Path(args.preds).read_text().split()]
    golds = [int(line) for line in Path(args.golds).read_text().split()]
    report = evaluate(preds, golds)
    _emit(args, report.to_dict(), report.to_table())
    return 0


def _cmd_bench(args) -> int:
    import tempfile

    model = _entity_model(args.model)
    log = load_click_log(args.log)
    gazetteer = Gazetteer.from_tsv(args.gazetteer)
    cache = build_cache(model, log, gazetteer, candidate_k=args.candidate_k)

    queries = log.queries()
    items = log.items()
    titles = {i.id: i.title for i in items}
    pairs = [(r.query.text, r.item.id) for r in log.records]
    if args.pairs and args.pairs > len(pairs):
        times = args.pairs // len(pairs) + 1
        pairs = (pairs * times)[:args.pairs]
    elif args.pairs:
        pairs = pairs[:args.pairs]

    with tempfile.TemporaryDirectory() as tmp:
        systems = [
            cached_system(cache, tmp),
            bi_cached_system(model.params, model.config, queries, items),
            cross_direct_system(model.params, model.config, titles),
        ]
        report = bench_speed(systems, pairs, warmup=args.warmup, repeats=args.repeats)
    _emit(args, report.to_dict(), report.to_table())
    return 0


def _cmd_intervene(args) -> int:
    cache = load_cache(args.cache)
    if args.simulate:
        dataset = load_qi_dataset(args.simulate, _fmt_of(args.simulate))
        report, mutated = simulate_intervention(cache, dataset)
        save_cache(mutated, args.out or args.cache)
        _emit(args, report.to_dict(), report.to_table())
        return 0
    new_cache, applied = intervene(cache, args.query, args.action, args.entity)
    save_cache(new_cache, args.out or args.cache)
    payload = {"applied": applied, "version": new_cache.version}
    _emit(args, payload, f"applied: {applied}\nversion: {new_cache.version}")
    return 0


def _cmd_init_from_cross(args) -> int:
    checkpoint = load_checkpoint(args.cross)
    cross = BaselineModel(checkpoint.kind, checkpoint.config, checkpoint.params)
    model = EntityRelevanceModel.create(checkpoint.config).init_from_cross(cross)
    save_checkpoint(args.out, model.params, model.config, kind="entity")
    _emit(args, {"out": args.out, "source_kind": checkpoint.kind})
    return 0


def _cmd_serve(args) -> int:
    datasets = dict(kv.split("=", 1) for kv in (args.dataset or []))
    config = ServiceConfig(
        listen=args.listen,
        cache_path=args.cache,
        model_path=args.model,
        gazetteer_path=args.gazetteer,
        fallback_on_miss=not args.no_fallback,
        datasets=datasets,
    )
    server = make_server(config)
    host, port = server.server_address[:2]
    print(f"serving on http://{host}:{port}", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="entrel",
        description="Entity-decomposed search relevance: train, mine, cache, serve.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="JSON config file with encoder/train/miner sections")
        p.add_argument("--format", choices=("json", "table"), default="json")

    p = sub.add_parser("tag", help="tag a text with gazetteer entities")
    p.add_argument("--gazetteer", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--product-only", action="store_true")
    common(p)
    p.set_defaults(handler=_cmd_tag)

    p = sub.add_parser("train", help="train the entity relevance model")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--gazetteer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init-from", help="checkpoint to start from (e.g. pretrained)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--train-log", dest="train_log", help="write per-epoch JSONL here")
    common(p)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("train-baseline", help="train a comparison system")
    p.add_argument("--kind", required=True,
                   choices=("bi_title", "cross_title", "bi_entities", "cross_entities"))
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--gazetteer")
    p.add_argument("--out", required=True)
    p.add_argument("--pretrain", help="mined pseudo-label dataset fitted before fine-tuning")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    common(p)
    p.set_defaults(handler=_cmd_train_baseline)

    p = sub.add_parser("pretrain-qe", help="pretrain the scorer on query-entity labels")
    p.add_argument("--qe", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init-from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    common(p)
    p.set_defaults(handler=_cmd_pretrain_qe)

    p = sub.add_parser("mine-qi", help="mine query-item pseudo-labels from a click log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top-n", type=int, dest="top_n")
    p.add_argument("--neg-m", type=int, dest="neg_m")
    p.add_argument("--min-exposure-k", type=int, dest="min_exposure_k")
    common(p)
    p.set_defaults(handler=_cmd_mine_qi)

    p = sub.add_parser("mine-qe", help="mine query-entity pseudo-labels from a click log")
    p.add_argument("--log", required=True)
    p.add_argument("--gazetteer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top-n", type=int, dest="top_n")
    p.add_argument("--neg-m", type=int, dest="neg_m")
    p.add_argument("--min-exposure-k", type=int, dest="min_exposure_k")
    common(p)
    p.set_defaults(handler=_cmd_mine_qe)

    p = sub.add_parser("gen-log", help="generate a synthetic click log with ground truth")
    p.add_argument("--queries", type=int, default=50)
    p.add_argument("--items-per-query", type=int, default=20, dest="items_per_query")
    p.add_argument("--pool-size", type=int, default=120, dest="pool_size")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--cooccur", type=float, default=0.0)
    p.add_argument("--out-log", required=True, dest="out_log")
    p.add_argument("--out-truth", required=True, dest="out_truth")
    p.add_argument("--out-gazetteer", required=True, dest="out_gazetteer")
    common(p)
    p.set_defaults(handler=_cmd_gen_log)

    p = sub.add_parser("build-cache", help="precompute the query-entity rule cache")
    p.add_argument("--model", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--gazetteer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--candidate-k", type=int, default=100, dest="candidate_k")
    p.add_argument("--previous", help="carry human-added rules over from this cache")
    common(p)
    p.set_defaults(handler=_cmd_build_cache)

    p = sub.add_parser("predict", help="predict one query-item pair")
    p.add_argument("--query", required=True)
    p.add_argument("--cache")
    p.add_argument("--item-id", dest="item_id")
    p.add_argument("--model")
    p.add_argument("--gazetteer")
    p.add_argument("--title")
    common(p)
    p.set_defaults(handler=_cmd_predict)

    p = sub.add_parser("eval", help="score a predictions file against a gold file")
    p.add_argument("--preds", required=True)
    p.add_argument("--golds", required=True)
    common(p)
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("bench", help="throughput and cache-size comparison")
    p.add_argument("--model", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--gazetteer", required=True)
    p.add_argument("--pairs", type=int, default=0, help="pair stream length (0 = full log)")
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--candidate-k", type=int, default=100, dest="candidate_k")
    common(p)
    p.set_defaults(handler=_cmd_bench)

    p = sub.add_parser("intervene", help="add/delete a rule entity, or replay a labeled dataset")
    p.add_argument("--cache", required=True)
    p.add_argument("--query")
    p.add_argument("--action", choices=("add", "delete"))
    p.add_argument("--entity")
    p.add_argument("--simulate", help="labeled dataset: fix every cached error and report")
    p.add_argument("--out", help="write the mutated cache here (default: in place)")
    common(p)
    p.set_defaults(handler=_cmd_intervene)

    p = sub.add_parser("init-from-cross", help="initialize the entity model from a cross baseline")
    p.add_argument("--cross", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(handler=_cmd_init_from_cross)

    p = sub.add_parser("serve", help="run the HTTP prediction/rules service")
    p.add_argument("--cache", required=True)
    p.add_argument("--listen", default="127.0.0.1:8080")
    p.add_argument("--model")
    p.add_argument("--gazetteer")
    p.add_argument("--no-fallback", action="store_true", dest="no_fallback")
    p.add_argument("--dataset", action="append", metavar="NAME=PATH",
                   help="register a dataset for /v1/eval (repeatable)")
    common(p)
    p.set_defaults(handler=_cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "intervene" and not args.simulate:
        missing = [n for n in ("query", "action", "entity") if not getattr(args, n)]
        if missing:
            print(f"intervene needs --{', --'.join(missing)} (or --simulate)", file=sys.stderr)
            return 2
    try:
        return args.handler(args)
    except BrokenPipeError:
        return 0
    except Exception as exc:  # surface a one-line error, non-zero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
