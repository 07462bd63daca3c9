"""Command-line entry points: synth, train, evaluate, generate, chat-serve.

Each subcommand parses arguments and hands off to the library; the HTTP
service is launched through uvicorn. Verbosity comes from the NTRD_LOG
environment variable (DEBUG/INFO/WARNING/...).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .corpus import (SEEKER_MARK, SynthSpec, ingest_redial, split_corpus,
                     synth_corpus, tokenize, write_kg_tsv, write_redial_jsonl)
from .errors import ConfigError, ContractError
from .evaluate import generate_records
from .kg import KnowledgeGraph
from .metrics import rer_at_k, report, write_records
from .model import NtrdModel
from .training import (CorpusBundle, TrainConfig, build_bundle,
                       rebuild_from_checkpoint, train)


def _setup_logging():
    level = os.environ.get("NTRD_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _load_config(path: str) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return TrainConfig.from_json(json.load(fh))


def _load_corpus(args, config: TrainConfig) -> CorpusBundle:
    if args.corpus == "synthetic" and not args.data:
        out = synth_corpus(SynthSpec(64, 8, 4, 200, seed=config.seed))
        conversations, catalog = out.conversations, out.catalog
        kg = KnowledgeGraph.from_triples(out.triples)
    else:
        if not args.data:
            raise ContractError("--data is required for the redial corpus")
        conversations, stats = ingest_redial(args.data)
        if stats.malformed_lines:
            print(f"skipped {stats.malformed_lines} malformed lines",
                  file=sys.stderr)
        catalog = {}
        for conv in conversations:
            catalog.update(conv.mentioned_items)
        item_keys = [str(i) for i in catalog]
        if args.kg:
            kg = KnowledgeGraph.load_tsv(args.kg, extra_entities=item_keys)
        else:
            kg = KnowledgeGraph(item_keys, [], [])
    split = split_corpus(conversations, seed=config.seed)
    return build_bundle(conversations, catalog, kg, split,
                        config.dims.max_context, config.min_frequency)


def cmd_synth(args) -> int:
    out = synth_corpus(SynthSpec(args.conversations, args.items, args.genres,
                                 args.vocab, seed=args.seed))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_redial_jsonl(out.conversations, out_dir / "corpus.jsonl")
    write_kg_tsv(out.triples, out_dir / "kg.tsv")
    print(f"wrote {len(out.conversations)} conversations and "
          f"{len(out.triples)} triples to {out_dir}")
    return 0


def cmd_train(args) -> int:
    try:
        config = _load_config(args.config)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"bad config: {exc}", file=sys.stderr)
        return 1
    if args.model:
        config.model = args.model
    if args.seed is not None:
        config.seed = args.seed
    try:
        bundle = _load_corpus(args, config)
        result = train(config, bundle, out_dir=args.out, resume=args.resume)
    except (ContractError, ConfigError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1
    print(f"trained {result.steps} steps; checkpoint: {result.checkpoint_path}")
    return 0


def cmd_evaluate(args) -> int:
    model, config, ckpt = rebuild_from_checkpoint(args.checkpoint)
    bundle = _rebuild_bundle(args, config, ckpt)
    records = generate_records(model, bundle, args.split)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_path = out_dir / f"records_{args.split}.jsonl"
    write_records(records, records_path)
    novel = set(ckpt.header["split"]["novel_item_ids"])
    rep = report(records, bundle.catalog, novel or None)
    if args.k is not None:
        for k in args.k:
            value = rer_at_k(records, k)
            print(f"ReR@{k} = {value:.4f}")
    (out_dir / f"report_{args.split}.json").write_text(
        json.dumps(rep.to_json(), indent=2, sort_keys=True))
    print(rep.table())
    print(f"records: {records_path} ({len(records)} turns)")
    return 0


def _rebuild_bundle(args, config: TrainConfig, ckpt) -> CorpusBundle:
    from .corpus import CorpusSplit, Vocabulary

    if args.corpus == "synthetic" and not args.data:
        out = synth_corpus(SynthSpec(64, 8, 4, 200, seed=config.seed))
        conversations = out.conversations
    else:
        conversations, _ = ingest_redial(args.data)
    catalog = {int(k): v for k, v in ckpt.header["catalog"]}
    kg_data = ckpt.header["kg"]
    kg = KnowledgeGraph(list(kg_data["entities"]), list(kg_data["relations"]),
                        [tuple(e) for e in kg_data["edges"]])
    split_data = ckpt.header["split"]
    split = CorpusSplit(train=split_data["train"],
                        validation=split_data["validation"],
                        test=split_data["test"],
                        novel_item_ids=set(split_data["novel_item_ids"]))
    bundle = build_bundle(conversations, catalog, kg, split,
                          config.dims.max_context, config.min_frequency)
    # the checkpoint's vocabulary wins over a freshly built one
    vocab = Vocabulary(dict(ckpt.header["vocab"]),
                       ckpt.header.get("min_frequency", 1))
    if vocab.token_to_id != bundle.vocab.token_to_id:
        raise ContractError(
            "checkpoint vocabulary does not match the supplied corpus")
    return bundle


def cmd_generate(args) -> int:
    model, config, ckpt = rebuild_from_checkpoint(args.checkpoint)
    if not isinstance(model, NtrdModel):
        print("generate requires a slot-template checkpoint", file=sys.stderr)
        return 1
    if args.context:
        text = Path(args.context).read_text()
    else:
        text = sys.stdin.read()
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if not lines:
        print("no context supplied", file=sys.stderr)
        return 1
    from .kg import EntityLinker

    linker = EntityLinker(model.recommender.kg, list(model.catalog))
    context_ids: list[int] = []
    tokens_all: list[str] = []
    for line in lines:
        toks = tokenize(line)
        context_ids.append(SEEKER_MARK)
        context_ids.extend(model.vocab.encode(toks))
        tokens_all.extend(toks)
    mention_idxs = linker.link_tokens(tokens_all, [])
    result = model.respond(context_ids, mention_idxs)
    if args.show_template:
        print("template:", " ".join(result.template_tokens))
    if result.distribution is not None:
        for row, item in enumerate(result.filled_items):
            probs = result.distribution.probabilities[row]
            order = np.argsort(-probs)[:5]
            cands = ", ".join(
                f"{result.distribution.candidate_ids[i]}:{probs[i]:.3f}"
                for i in order)
            print(f"slot {row}: {cands}")
    print(" ".join(result.response_tokens))
    return 0


def cmd_chat_serve(args) -> int:
    import uvicorn

    from .service.app import app_from_checkpoint

    app = app_from_checkpoint(args.checkpoint, static_dir=args.static,
                              snapshot_path=args.snapshot)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ntrd",
        description="slot-template conversational recommender toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="emit a synthetic corpus and its graph")
    p.add_argument("--out", required=True)
    p.add_argument("--conversations", type=int, default=64)
    p.add_argument("--items", type=int, default=8)
    p.add_argument("--genres", type=int, default=4)
    p.add_argument("--vocab", type=int, default=200)
    p.add_argument("--seed", type=int, default=13)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the two-stage training schedule")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", choices=["redial", "synthetic"], default="synthetic")
    p.add_argument("--model", choices=["ntrd", "switching"], default=None)
    p.add_argument("--data", help="corpus jsonl (required for redial)")
    p.add_argument("--kg", help="knowledge-graph triples tsv")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="generate records and report metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", choices=["redial", "synthetic"], default="synthetic")
    p.add_argument("--data")
    p.add_argument("--split", choices=["train", "validation", "test"],
                   default="test")
    p.add_argument("--k", type=int, nargs="*", default=None,
                   help="explicit ReR@k values to print")
    p.add_argument("--out", default="runs/eval")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("generate", help="fill a response for a pasted context")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--context", help="file of seeker lines; stdin otherwise")
    p.add_argument("--show-template", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("chat-serve", help="run the HTTP chat service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8100)
    p.add_argument("--static", default="frontend/dist")
    p.add_argument("--snapshot", default=None)
    p.set_defaults(func=cmd_chat_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
