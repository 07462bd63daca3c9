"""Composite slot-template recommender model and its inference pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corpus import ITEM, MaskedExample, Vocabulary
from .errors import ContractError
from .generator import (GeneratorConfig, TemplateGenerator, TemplateResult,
                        slot_and_word_states)
from .kg import CandidateSet, EntityLinker, KnowledgeGraph, Recommender
from .selector import (ItemDistribution, ItemSelector, SelectorConfig,
                       fill_slots)
from .tensor import Module, Tensor


@dataclass
class ModelDims:
    """Width/depth knobs; the full-scale preset mirrors the reference
    configuration (300-wide dialogue states, 128-wide item embeddings)."""

    d_model: int = 300
    d_item: int = 128
    heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    d_ffn: int | None = None
    prop_layers: int = 1
    max_context: int = 256
    max_target: int = 40
    candidates: int = 100

    def generator_config(self, vocab_size: int) -> GeneratorConfig:
        return GeneratorConfig(vocab_size=vocab_size, d_model=self.d_model,
                               heads=self.heads, enc_layers=self.enc_layers,
                               dec_layers=self.dec_layers, d_ffn=self.d_ffn,
                               max_context=self.max_context,
                               max_target=self.max_target)

    def selector_config(self) -> SelectorConfig:
        return SelectorConfig(d_model=self.d_model, d_item=self.d_item,
                              heads=self.heads, d_ffn=self.d_ffn)


DESK_DIMS = ModelDims(d_model=64, d_item=32, heads=2, enc_layers=2,
                      dec_layers=2, prop_layers=1, max_context=96,
                      max_target=24, candidates=100)


@dataclass
class InferenceResult:
    template: TemplateResult
    template_tokens: list[str]
    candidates: CandidateSet | None
    distribution: ItemDistribution | None
    response_tokens: list[str]
    filled_items: list[int]
    filled_positions: list[int] = field(default_factory=list)


class NtrdModel(Module):
    """Template generator + item selector over a KG recommender."""

    def __init__(self, vocab: Vocabulary, catalog: dict[int, str],
                 kg: KnowledgeGraph, dims: ModelDims, seed: int = 0,
                 dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.catalog = dict(catalog)
        self.dims = dims
        self.dtype = dtype
        self.recommender = Recommender(kg, list(catalog), dim=dims.d_item,
                                       prop_layers=dims.prop_layers, rng=rng,
                                       dtype=dtype)
        self.generator = TemplateGenerator(dims.generator_config(len(vocab)),
                                           rng=rng, dtype=dtype)
        self.selector = ItemSelector(dims.selector_config(), rng=rng, dtype=dtype)
        self.linker = EntityLinker(kg, list(catalog))

    # parameters of everything except the recommender (frozen after its
    # pretraining stage)
    def dialogue_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters()
                if not n.startswith("recommender.")]

    @property
    def candidate_pool(self) -> int:
        return min(self.dims.candidates, len(self.recommender.item_ids))

    # -- candidates ----------------------------------------------------------

    def training_candidates(self, mention_idxs: list[int], gt_items: list[int],
                            table: Tensor,
                            allowed_items: set[int] | None = None
                            ) -> tuple[CandidateSet, int]:
        """Ranked candidates with the ground truth force-included.

        ``allowed_items`` restricts the pool (the trainer passes the items
        observed in dialogue training, so held-out items never compete during
        training the way they cannot at full scale). Returns the candidate
        set and how many items had to be forced in; the force-inclusion rate
        is logged by the trainer.
        """
        user = self.recommender.encode_user(mention_idxs, table)
        dist = self.recommender.rank_items(user, table)
        pos = {item: i for i, item in enumerate(self.recommender.item_ids)}
        eligible = list(self.recommender.item_ids)
        if allowed_items is not None:
            eligible = [i for i in eligible if i in allowed_items or i in gt_items]
        eligible.sort(key=lambda item: (-dist[pos[item]], item))
        ids = eligible[:min(self.candidate_pool, len(eligible))]
        forced = 0
        missing = [g for g in dict.fromkeys(gt_items) if g not in ids]
        if missing:
            replace_at = len(ids) - 1
            for item in missing:
                while replace_at >= 0 and ids[replace_at] in gt_items:
                    replace_at -= 1
                if replace_at < 0:
                    raise ContractError("candidate pool too small for ground truth")
                ids[replace_at] = item
                forced += 1
        idxs = [self.recommender.item_entity_idxs[pos[i]] for i in ids]
        cand = CandidateSet(item_ids=ids, entity_idxs=idxs,
                            scores=np.asarray([dist[pos[i]] for i in ids]),
                            embeddings=table.data[idxs].copy())
        return cand, forced

    # -- joint training terms --------------------------------------------------

    def example_terms(self, example: MaskedExample, mention_idxs: list[int],
                      table: Tensor,
                      allowed_items: set[int] | None = None) -> dict:
        """Teacher-forced generation logits plus selector slot logits."""
        enc = self.generator.encode(example.context_ids)
        logits, states = self.generator.teacher_forced_states(
            enc, example.target_ids)
        out = {
            "gen_logits": logits,
            "gen_targets": example.target_ids[1:],
            "slot_logits": None,
            "slot_targets": None,
            "forced": 0,
        }
        if example.slot_items:
            cand, forced = self.training_candidates(mention_idxs,
                                                    example.slot_items, table,
                                                    allowed_items)
            e_slot, e_word = slot_and_word_states(
                states, example.target_ids[1:], self.dims.d_model, self.dtype)
            h_cand = T.gather_rows(table, cand.entity_idxs)
            trace = self.selector.fuse(e_slot, e_word, enc.e_ctx, h_cand,
                                       ctx_mask_cols=enc.pad_mask_cols,
                                       candidate_ids=cand.item_ids)
            out["slot_logits"] = self.selector.score_logits(trace.fused, h_cand)
            out["slot_targets"] = [cand.item_ids.index(g) for g in example.slot_items]
            out["forced"] = forced
        return out

    # -- inference ---------------------------------------------------------------

    def respond(self, context_ids: list[int], mention_idxs: list[int],
                max_len: int | None = None, k: int | None = None,
                no_repeat: bool = False) -> InferenceResult:
        """Greedy template, candidate ranking, slot filling."""
        template = self.generator.generate_template(context_ids, max_len)
        template_tokens = self.vocab.decode(template.tokens)
        if not template.slot_positions:
            return InferenceResult(template, template_tokens, None, None,
                                   list(template_tokens), [])
        table = self.recommender.propagate()
        pool = min(k or self.candidate_pool, len(self.recommender.item_ids))
        cand = self.recommender.candidates_for(mention_idxs, pool, table)
        h_cand = T.gather_rows(table, cand.entity_idxs)
        trace = self.selector.fuse(template.e_slot, template.e_word,
                                   template.encoder_state.e_ctx, h_cand,
                                   ctx_mask_cols=template.encoder_state.pad_mask_cols,
                                   candidate_ids=cand.item_ids)
        dist = self.selector.score_candidates(trace.fused, cand)
        filled = fill_slots(template_tokens, template.slot_positions, dist,
                            self.catalog, no_repeat=no_repeat)
        return InferenceResult(template, template_tokens, cand, dist,
                               filled.tokens, filled.items, filled.positions)
