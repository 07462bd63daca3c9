"""Shared fixtures: a small trained run reused by service/CLI tests."""

import json
from pathlib import Path
from types import SimpleNamespace

import pytest

from ntrd.corpus import SynthSpec, split_corpus, synth_corpus
from ntrd.kg import KnowledgeGraph
from ntrd.model import ModelDims
from ntrd.training import TrainConfig, build_bundle, train

FIXTURES = Path(__file__).parent / "fixtures"

MINI_DIMS = dict(d_model=32, d_item=16, heads=2, enc_layers=1, dec_layers=1,
                 prop_layers=1, max_context=96, max_target=24, candidates=100)


def mini_config(**overrides) -> TrainConfig:
    params = dict(seed=13, epochs=10_000, max_steps=60, patience=10**9,
                  dims=ModelDims(**MINI_DIMS))
    params.update(overrides)
    return TrainConfig(**params)


def mini_bundle(config: TrainConfig, n_conversations: int = 16):
    out = synth_corpus(SynthSpec(n_conversations, 8, 4, 200, seed=13))
    kg = KnowledgeGraph.from_triples(out.triples)
    split = split_corpus(out.conversations, seed=13)
    bundle = build_bundle(out.conversations, out.catalog, kg, split,
                          config.dims.max_context)
    return out, bundle


@pytest.fixture(scope="session")
def mini_run(tmp_path_factory):
    """One trained small model with its checkpoint on disk."""
    out_dir = tmp_path_factory.mktemp("mini_run")
    config = mini_config(max_steps=200)
    synth, bundle = mini_bundle(config, n_conversations=24)
    result = train(config, bundle, out_dir=out_dir)
    return SimpleNamespace(config=config, bundle=bundle, synth=synth,
                           result=result, out_dir=out_dir,
                           checkpoint=result.checkpoint_path)


@pytest.fixture(scope="session")
def mini_config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("configs") / "mini.json"
    cfg = mini_config(max_steps=12)
    path.write_text(json.dumps(cfg.to_json(), indent=2))
    return path
