"""Joint end-to-end training: losses, the staged schedule, and persistence.

Stage one trains the recommender until its ranking loss converges; stage two
jointly optimizes the template generator and item selector with the combined
loss (generation weight 5 by default), Adam at 1e-3, batch 32, and gradient
clipping at 0.1. Recommender weights stay frozen in stage two except for the
selector's candidate projection. Both losses are mean-reduced per batch; the
default weight is calibrated against that reduction.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpus import (Conversation, CorpusSplit, MaskedExample, Vocabulary,
                     make_examples)
from .errors import ConfigError, ContractError
from .kg import EntityLinker, KnowledgeGraph, PretrainResult, pretrain_recommender
from .model import DESK_DIMS, ModelDims, NtrdModel
from .optim import AdamState, adam_step, clip_gradients
from .switching import SwitchingModel
from .tensor import Tape, Tensor, backward

log = logging.getLogger("ntrd.training")


@dataclass
class PretrainSettings:
    max_epochs: int = 200
    batch_size: int = 32
    tol: float = 1e-4
    patience: int = 5
    weight_decay: float = 0.01


@dataclass
class TrainConfig:
    """Run configuration; the JSON form mirrors these field names exactly
    (the weight field serializes as "lambda")."""

    lambda_: float = 5.0
    learning_rate: float = 1e-3
    batch_size: int = 32
    clip_max_norm: float = 0.1
    epochs: int = 30
    seed: int = 0
    precision: str = "float64"
    model: str = "ntrd"
    max_steps: int | None = None
    patience: int = 3
    min_frequency: int = 1
    dims: ModelDims = field(default_factory=lambda: ModelDims(**asdict(DESK_DIMS)))
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ConfigError("lambda", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision", f"unknown precision '{self.precision}'")
        if self.model not in ("ntrd", "switching"):
            raise ConfigError("model", f"unknown model variant '{self.model}'")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_json(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lambda_")
        return out

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "lambda" in data:
            data["lambda_"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
        if "dims" in data:
            dim_known = {f.name for f in fields(ModelDims)}
            for key in data["dims"]:
                if key not in dim_known:
                    raise ConfigError(f"dims.{key}", "unknown configuration key")
            data["dims"] = ModelDims(**data["dims"])
        if "pretrain" in data:
            pre_known = {f.name for f in fields(PretrainSettings)}
            for key in data["pretrain"]:
                if key not in pre_known:
                    raise ConfigError(f"pretrain.{key}", "unknown configuration key")
            data["pretrain"] = PretrainSettings(**data["pretrain"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError("<config>", str(exc)) from exc

    def content_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


FULL_SCALE = TrainConfig(dims=ModelDims())  # reference-scale preset, untimed


# ---------------------------------------------------------------------------
# data bundle
# ---------------------------------------------------------------------------

@dataclass
class CorpusBundle:
    conversations: list[Conversation]
    catalog: dict[int, str]
    kg: KnowledgeGraph
    split: CorpusSplit
    vocab: Vocabulary
    examples: dict[str, list[MaskedExample]]
    mentions: dict[int, list[int]] = field(default_factory=dict)

    @property
    def by_id(self) -> dict[str, Conversation]:
        return {c.id: c for c in self.conversations}


def build_bundle(conversations: list[Conversation], catalog: dict[int, str],
                 kg: KnowledgeGraph, split: CorpusSplit,
                 max_context_tokens: int, min_frequency: int = 1) -> CorpusBundle:
    by_id = {c.id: c for c in conversations}
    train_convs = [by_id[cid] for cid in split.train]
    vocab = Vocabulary.build(train_convs, min_frequency=min_frequency)
    examples = {}
    for name, ids in (("train", split.train), ("validation", split.validation),
                      ("test", split.test)):
        exs = []
        for cid in ids:
            exs.extend(make_examples(by_id[cid], vocab, max_context_tokens))
        examples[name] = exs
    bundle = CorpusBundle(conversations, catalog, kg, split, vocab, examples)
    linker = EntityLinker(kg, list(catalog))
    for name in ("train", "validation", "test"):
        for ex in bundle.examples[name]:
            bundle.mentions[id(ex)] = linker.link_example(ex, by_id[ex.conversation_id])
    return bundle


def recommender_pairs(bundle: CorpusBundle,
                      include_novel_from_test: bool = True) -> list[tuple[list[int], int]]:
    """(mention, item) pairs for stage-one training.

    Pairs come from the train split; when novel items exist, the pairs whose
    target is a novel item are added from the test split so those items are
    represented in recommender pretraining while staying out of dialogue
    training.
    """
    pairs = []
    for ex in bundle.examples["train"]:
        for item in ex.slot_items:
            pairs.append((bundle.mentions[id(ex)], item))
    if include_novel_from_test and bundle.split.novel_item_ids:
        for ex in bundle.examples["test"]:
            for item in ex.slot_items:
                if item in bundle.split.novel_item_ids:
                    pairs.append((bundle.mentions[id(ex)], item))
    return pairs


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def gen_loss(term_list: list[dict]) -> Tensor:
    """Token-level cross-entropy over every target position in the batch."""
    if not term_list:
        raise ContractError("empty batch")
    logits = T.concat_rows([t["gen_logits"] for t in term_list])
    targets = [tok for t in term_list for tok in t["gen_targets"]]
    return T.cross_entropy(logits, targets)


def slot_loss(term_list: list[dict]) -> Tensor:
    """Selector cross-entropy, mean over slots; zero-slot batches give 0."""
    totals = []
    count = 0
    for t in term_list:
        if t["slot_logits"] is None:
            continue
        totals.append(T.cross_entropy(t["slot_logits"], t["slot_targets"],
                                      reduction="sum"))
        count += len(t["slot_targets"])
    if count == 0:
        return Tensor(np.asarray(0.0))
    acc = totals[0]
    for extra in totals[1:]:
        acc = T.add(acc, extra)
    return T.scale(acc, 1.0 / count)


def total_loss(l_gen: Tensor, l_slot: Tensor, weight: float) -> Tensor:
    """Weighted sum: weight * generation loss + slot loss."""
    return T.add(T.scale(l_gen, weight), l_slot)


# ---------------------------------------------------------------------------
# train log
# ---------------------------------------------------------------------------

class TrainLog:
    """Append-only JSONL, one record per step plus epoch summaries."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# checkpoint glue
# ---------------------------------------------------------------------------

def _model_tensors(model, adam: AdamState | None) -> dict[str, np.ndarray]:
    tensors = {f"param.{n}": p.data for n, p in model.named_parameters()}
    if adam is not None:
        for name, _ in adam.params:
            tensors[f"adam.m.{name}"] = adam.m[name]
            tensors[f"adam.v.{name}"] = adam.v[name]
    return tensors


def checkpoint_header(config: TrainConfig, bundle: CorpusBundle, step: int,
                      adam_step_count: int, pretrained: bool) -> dict:
    return {
        "config": config.to_json(),
        "config_hash": config.content_hash(),
        "step": step,
        "adam_step": adam_step_count,
        "pretrained": pretrained,
        "vocab": bundle.vocab.token_to_id,
        "min_frequency": bundle.vocab.min_frequency,
        "catalog": [[k, v] for k, v in sorted(bundle.catalog.items())],
        "kg": {
            "entities": bundle.kg.entities,
            "relations": bundle.kg.relations,
            "edges": [list(e) for e in bundle.kg.edges],
        },
        "split": {
            "train": bundle.split.train,
            "validation": bundle.split.validation,
            "test": bundle.split.test,
            "novel_item_ids": sorted(bundle.split.novel_item_ids),
        },
        "train_item_ids": _train_items(bundle),
    }


def save_model_checkpoint(path: str | Path, model, config: TrainConfig,
                          bundle: CorpusBundle, step: int,
                          adam: AdamState | None = None,
                          pretrained: bool = True) -> None:
    header = checkpoint_header(config, bundle, step,
                               adam.step if adam else 0, pretrained)
    save_checkpoint(path, header, _model_tensors(model, adam))


def restore_parameters(model, ckpt: Checkpoint,
                       adam: AdamState | None = None) -> None:
    for name, p in model.named_parameters():
        key = f"param.{name}"
        if key not in ckpt.tensors:
            raise ContractError(f"checkpoint is missing tensor '{name}'")
        if ckpt.tensors[key].shape != p.data.shape:
            raise ContractError(
                f"checkpoint tensor '{name}' has shape {ckpt.tensors[key].shape}, "
                f"model expects {p.data.shape}")
        p.data[...] = ckpt.tensors[key]
    if adam is not None:
        adam.step = ckpt.header.get("adam_step", 0)
        for name, _ in adam.params:
            if f"adam.m.{name}" in ckpt.tensors:
                adam.m[name][...] = ckpt.tensors[f"adam.m.{name}"]
                adam.v[name][...] = ckpt.tensors[f"adam.v.{name}"]


def rebuild_from_checkpoint(path: str | Path):
    """Reconstruct (model, config, bundle-less context) from a checkpoint."""
    ckpt = load_checkpoint(path)
    config = TrainConfig.from_json(ckpt.header["config"])
    vocab = Vocabulary(dict(ckpt.header["vocab"]),
                       ckpt.header.get("min_frequency", 1))
    catalog = {int(k): v for k, v in ckpt.header["catalog"]}
    kg_data = ckpt.header["kg"]
    kg = KnowledgeGraph(list(kg_data["entities"]), list(kg_data["relations"]),
                        [tuple(e) for e in kg_data["edges"]])
    model = build_model(config, vocab, catalog, kg,
                        train_item_ids=ckpt.header.get("train_item_ids"))
    restore_parameters(model, ckpt)
    return model, config, ckpt


def build_model(config: TrainConfig, vocab: Vocabulary, catalog: dict[int, str],
                kg: KnowledgeGraph, train_item_ids: list[int] | None = None):
    if config.model == "switching":
        rng = np.random.default_rng(config.seed)
        from .kg import Recommender
        recommender = Recommender(kg, list(catalog), dim=config.dims.d_item,
                                  prop_layers=config.dims.prop_layers, rng=rng,
                                  dtype=config.dtype)
        items = train_item_ids if train_item_ids is not None else list(catalog)
        model = SwitchingModel(config.dims.generator_config(len(vocab)),
                               items, recommender,
                               rng=np.random.default_rng(config.seed + 1),
                               dtype=config.dtype)
        model.vocab = vocab
        model.catalog = dict(catalog)
        return model
    return NtrdModel(vocab, catalog, kg, config.dims, seed=config.seed,
                     dtype=config.dtype)


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    config: TrainConfig
    bundle: CorpusBundle
    log: TrainLog
    steps: int
    checkpoint_path: Path | None
    pretrain: PretrainResult | None


def _epoch_order(seed: int, epoch: int, n: int) -> list[int]:
    rng = np.random.default_rng((seed * 1_000_003 + epoch) & 0x7FFFFFFF)
    return list(rng.permutation(n))


def _train_items(bundle: CorpusBundle) -> list[int]:
    items = set()
    for cid in bundle.split.train:
        items |= bundle.by_id[cid].items_mentioned()
    return sorted(items)


def train(config: TrainConfig, bundle: CorpusBundle,
          out_dir: str | Path | None = None,
          resume: str | Path | None = None) -> TrainResult:
    """Stage 1 recommender pretraining, stage 2 joint optimization.

    Deterministic under a fixed seed: initialization, batch order, and every
    op are seeded or order-stable. Resuming restores weights, optimizer
    moments, and the epoch/step cursor, so a resumed run continues exactly
    where the interrupted one stopped.
    """
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    trainlog = TrainLog(out_dir / "trainlog.jsonl" if out_dir else None)

    train_examples = bundle.examples["train"]
    if not train_examples:
        raise ContractError("train split has no examples")

    if config.model == "switching":
        model = build_model(config, bundle.vocab, bundle.catalog, bundle.kg,
                            train_item_ids=_train_items(bundle))
        recommender = model.recommender
    else:
        model = build_model(config, bundle.vocab, bundle.catalog, bundle.kg)
        recommender = model.recommender

    start_step = 0
    pre_result = None
    adam = None

    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.header["config_hash"] != config.content_hash():
            raise ContractError(
                f"checkpoint config hash {ckpt.header['config_hash']} does not "
                f"match run config {config.content_hash()}")
        params = _trainable(model, config)
        adam = AdamState(params, lr=config.learning_rate)
        restore_parameters(model, ckpt, adam)
        start_step = ckpt.header["step"]
    else:
        pairs = recommender_pairs(bundle)
        if pairs:
            pre_result = pretrain_recommender(
                recommender, pairs, lr=config.learning_rate,
                batch_size=config.pretrain.batch_size,
                max_epochs=config.pretrain.max_epochs,
                clip_max_norm=config.clip_max_norm,
                tol=config.pretrain.tol, patience=config.pretrain.patience,
                weight_decay=config.pretrain.weight_decay,
                seed=config.seed)
            trainlog.write({"event": "pretrain", "steps": pre_result.steps,
                            "loss": pre_result.final_loss,
                            "train_accuracy": pre_result.train_accuracy})
        params = _trainable(model, config)
        adam = AdamState(params, lr=config.learning_rate)

    # stage 2: joint optimization
    n = len(train_examples)
    batches_per_epoch = max(1, math.ceil(n / config.batch_size))
    max_steps = config.max_steps
    total_planned = config.epochs * batches_per_epoch
    if max_steps is not None:
        total_planned = min(total_planned, max_steps)

    best_val = math.inf
    stale_epochs = 0
    step = start_step
    ckpt_path = out_dir / "checkpoint.ntrd" if out_dir else None
    best_path = out_dir / "best.ntrd" if out_dir else None
    forced_total = 0
    slots_total = 0
    # candidate pools during training span only dialogue-training items: at
    # full scale an item absent from dialogue training is vanishingly rare in
    # a training pool, and letting it compete here teaches the selector to
    # suppress exactly the items the novel-item experiment needs alive
    allowed_items = set(_train_items(bundle))

    while step < total_planned:
        epoch = step // batches_per_epoch
        order = _epoch_order(config.seed, epoch, n)
        offset = (step % batches_per_epoch) * config.batch_size
        epoch_done = True
        for start in range(offset, n, config.batch_size):
            if step >= total_planned:
                epoch_done = False
                break
            batch = [train_examples[i] for i in order[start:start + config.batch_size]]
            t0 = time.perf_counter()
            with Tape():
                loss, record, stats = _batch_loss(model, config, bundle, batch,
                                                  allowed_items)
                if not np.isfinite(record["loss"]):
                    raise RuntimeError(
                        f"non-finite loss at step {step} "
                        f"(batch of {[e.conversation_id for e in batch]})")
                backward(loss)
            clip_factor = clip_gradients(params, config.clip_max_norm)
            adam_step(params, adam)
            step += 1
            forced_total += stats["forced"]
            slots_total += stats["slots"]
            record.update({"step": step, "clip_factor": clip_factor,
                           "wall_time": time.perf_counter() - t0})
            trainlog.write(record)
        if epoch_done and bundle.examples["validation"]:
            val = validate(model, config, bundle)
            trainlog.write({"event": "validation", "epoch": epoch, **val})
            if ckpt_path:
                save_model_checkpoint(ckpt_path, model, config, bundle, step, adam)
            if val["ppl"] < best_val - 1e-9:
                best_val = val["ppl"]
                stale_epochs = 0
                if best_path:
                    save_model_checkpoint(best_path, model, config, bundle, step, adam)
            else:
                stale_epochs += 1
                if stale_epochs > config.patience:
                    break

    if ckpt_path:
        save_model_checkpoint(ckpt_path, model, config, bundle, step, adam)
    if slots_total:
        trainlog.write({"event": "force_inclusion",
                        "rate": forced_total / slots_total})
    return TrainResult(model=model, config=config, bundle=bundle, log=trainlog,
                       steps=step, checkpoint_path=ckpt_path, pretrain=pre_result)


def _trainable(model, config: TrainConfig) -> list[tuple[str, Tensor]]:
    """Joint-phase parameters: everything except the frozen recommender."""
    if isinstance(model, NtrdModel):
        return model.dialogue_parameters()
    return [(n, p) for n, p in model.named_parameters()
            if not n.startswith("recommender.")]


def _batch_loss(model, config: TrainConfig, bundle: CorpusBundle,
                batch: list[MaskedExample],
                allowed_items: set[int] | None = None) -> tuple[Tensor, dict, dict]:
    """Tape loss plus log fields for one batch, for either model variant."""
    if isinstance(model, NtrdModel):
        table = model.recommender.propagate()
        terms = [model.example_terms(ex, bundle.mentions[id(ex)], table,
                                     allowed_items)
                 for ex in batch]
        l_gen = gen_loss(terms)
        l_slot = slot_loss(terms)
        loss = total_loss(l_gen, l_slot, config.lambda_)
        record = {"gen_loss": l_gen.item(), "slot_loss": l_slot.item(),
                  "loss": loss.item()}
        stats = {"forced": sum(t["forced"] for t in terms),
                 "slots": sum(len(t["slot_targets"] or []) for t in terms)}
        return loss, record, stats
    # switching baseline: one mixture cross-entropy over words and items
    parts = []
    const_total = 0.0
    count_total = 0
    for ex in batch:
        p_rec = model.item_block_distribution(bundle.mentions[id(ex)])
        part, const_nll, count = model.sequence_loss_terms(ex, p_rec)
        parts.append(part)
        const_total += const_nll
        count_total += count
    acc = parts[0]
    for extra in parts[1:]:
        acc = T.add(acc, extra)
    loss = T.scale(acc, 1.0 / count_total)
    full_value = loss.item() + const_total / count_total
    record = {"gen_loss": full_value, "slot_loss": 0.0, "loss": full_value}
    return loss, record, {"forced": 0, "slots": 0}


def validate(model, config: TrainConfig, bundle: CorpusBundle,
             split: str = "validation") -> dict:
    """Validation perplexity and slot accuracy without touching gradients."""
    examples = bundle.examples[split]
    nll_total = 0.0
    tokens = 0
    slot_hits = 0
    slot_count = 0
    if isinstance(model, NtrdModel):
        table = model.recommender.propagate()
        for ex in examples:
            terms = model.example_terms(ex, bundle.mentions[id(ex)], table)
            nlls = T.token_nlls(terms["gen_logits"].data, terms["gen_targets"])
            nll_total += sum(nlls)
            tokens += len(nlls)
            if terms["slot_logits"] is not None:
                pred = np.argmax(terms["slot_logits"].data, axis=1)
                slot_hits += int((pred == np.asarray(terms["slot_targets"])).sum())
                slot_count += len(terms["slot_targets"])
    else:
        for ex in examples:
            p_rec = model.item_block_distribution(bundle.mentions[id(ex)])
            nlls = model.sequence_nlls(ex, p_rec)
            nll_total += sum(nlls)
            tokens += len(nlls)
    ppl = math.exp(nll_total / tokens) if tokens else float("inf")
    return {"ppl": ppl, "slot_accuracy": slot_hits / slot_count if slot_count else None,
            "tokens": tokens}
