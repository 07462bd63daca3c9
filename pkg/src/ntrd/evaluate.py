"""Run a trained model over a split and produce evaluation records."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .metrics import GeneratedRecord, SlotRecord
from .model import NtrdModel
from .switching import SwitchingModel
from .training import CorpusBundle


def _ntrd_record(model: NtrdModel, example, mentions, table) -> GeneratedRecord:
    enc = model.generator.encode(example.context_ids)
    logits, _ = model.generator.teacher_forced_states(enc, example.target_ids)
    nlls = T.token_nlls(logits.data, example.target_ids[1:])
    result = model.respond(example.context_ids, mentions)
    slots = []
    if result.distribution is not None:
        for row, (pos, filled) in enumerate(
                zip(result.filled_positions, result.filled_items)):
            slots.append(SlotRecord(
                position=pos,
                candidate_ids=list(result.distribution.candidate_ids),
                distribution=[float(p) for p in result.distribution.probabilities[row]],
                filled_item_id=filled,
            ))
    return GeneratedRecord(
        conversation_id=example.conversation_id,
        turn_index=example.turn_index,
        response_tokens=result.response_tokens,
        slots=slots,
        ground_truth_items=list(example.slot_items),
        token_nlls=nlls,
    )


def _switching_record(model: SwitchingModel, example, mentions) -> GeneratedRecord:
    p_rec = model.item_block_distribution(mentions)
    nlls = model.sequence_nlls(example, p_rec)
    turn = model.generate(example.context_ids, mentions, model.vocab, model.catalog)
    slots = [SlotRecord(position=pos,
                        candidate_ids=list(turn.item_block_ids),
                        distribution=[float(p) for p in turn.item_distribution],
                        filled_item_id=item)
             for pos, item in turn.emitted_items]
    return GeneratedRecord(
        conversation_id=example.conversation_id,
        turn_index=example.turn_index,
        response_tokens=turn.tokens,
        slots=slots,
        ground_truth_items=list(example.slot_items),
        token_nlls=nlls,
    )


def generate_records(model, bundle: CorpusBundle,
                     split: str = "test") -> list[GeneratedRecord]:
    """One record per evaluated recommender turn in the split."""
    records = []
    if isinstance(model, NtrdModel):
        table = model.recommender.propagate()
        for ex in bundle.examples[split]:
            records.append(_ntrd_record(model, ex, bundle.mentions[id(ex)], table))
    else:
        for ex in bundle.examples[split]:
            records.append(_switching_record(model, ex, bundle.mentions[id(ex)]))
    return records
