"""Slot filling: progressive attention fusion and candidate scoring.

Slot states attend over template words, then the encoded dialogue context,
then the candidate item embeddings; each stage restores the residual, layer
norm, and feed-forward sublayers around the attention. Scoring is bilinear
against candidate embeddings, so an item the dialogue model never trained on
still receives a well-defined score through its embedding row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import FusionStage
from .errors import ContractError
from .kg import CandidateSet
from .tensor import Module, Tensor


@dataclass
class SelectorConfig:
    d_model: int            # template/context width
    d_item: int             # candidate embedding width
    heads: int = 2
    d_ffn: int | None = None

    @property
    def ffn_width(self) -> int:
        return self.d_ffn if self.d_ffn is not None else 4 * self.d_model


@dataclass
class SlotFusionTrace:
    after_words: Tensor     # slots fused with template words
    after_context: Tensor   # ... then with the dialogue context
    after_candidates: Tensor  # ... then with candidate embeddings

    @property
    def fused(self) -> Tensor:
        return self.after_candidates


@dataclass
class ItemDistribution:
    candidate_ids: list[int]
    probabilities: np.ndarray  # (slots, candidates), rows sum to 1

    def top_k(self, row: int, k: int) -> list[int]:
        order = np.argsort(-self.probabilities[row], kind="stable")[:k]
        return [self.candidate_ids[i] for i in order]


class ItemSelector(Module):
    def __init__(self, cfg: SelectorConfig, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.dtype = dtype
        self.word_stage = FusionStage(cfg.d_model, cfg.heads, cfg.ffn_width, rng, dtype)
        self.context_stage = FusionStage(cfg.d_model, cfg.heads, cfg.ffn_width, rng, dtype)
        self.candidate_stage = FusionStage(cfg.d_model, cfg.heads, cfg.ffn_width, rng, dtype)
        self.cand_proj = Tensor(T.xavier_uniform(rng, cfg.d_item, cfg.d_model, dtype),
                                requires_grad=True)
        self.score_w = Tensor(T.xavier_uniform(rng, cfg.d_model, cfg.d_item, dtype),
                              requires_grad=True)
        self.score_b = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)

    def fuse(self, e_slot: Tensor, e_word: Tensor, e_ctx: Tensor,
             h_cand: Tensor, ctx_mask_cols: np.ndarray | None = None,
             candidate_ids: list[int] | None = None) -> SlotFusionTrace:
        """Run the three attention stages in order.

        An empty word matrix (template made of slots only) degrades stage one
        to the identity. Candidates are attended in ascending-id order when
        ids are given, so the fused output does not depend on the caller's
        candidate ordering.
        """
        if e_slot.shape[0] < 1:
            raise ContractError("fuse needs at least one slot")
        if e_ctx.shape[0] < 1:
            raise ContractError("dialogue context is never empty by corpus contract")
        if e_word.shape[0] > 0:
            fused_words = self.word_stage(e_slot, e_word, e_word)
        else:
            fused_words = e_slot
        mask = None
        if ctx_mask_cols is not None:
            mask = np.broadcast_to(ctx_mask_cols,
                                   (fused_words.shape[0], e_ctx.shape[0])).copy()
        fused_ctx = self.context_stage(fused_words, e_ctx, e_ctx, mask)
        if candidate_ids is not None:
            order = sorted(range(len(candidate_ids)), key=lambda i: candidate_ids[i])
            h_cand = T.gather_rows(h_cand, order)
        projected = T.matmul(h_cand, self.cand_proj)
        fused_cand = self.candidate_stage(fused_ctx, projected, projected)
        return SlotFusionTrace(fused_words, fused_ctx, fused_cand)

    def score_logits(self, fused_slots: Tensor, h_cand: Tensor) -> Tensor:
        """Bilinear compatibility of each slot with each candidate."""
        query = T.matmul(fused_slots, self.score_w)        # (slots, d_item)
        return T.add(T.matmul(query, T.transpose(h_cand)), self.score_b)

    def score_candidates(self, fused_slots: Tensor,
                         candidates: CandidateSet) -> ItemDistribution:
        """Softmax over the candidate axis, one row per slot.

        Each candidate's logit is an independent dot product and the
        normalizer is an exactly rounded sum, so permuting the candidate set
        permutes each row bitwise.
        """
        if len(candidates.item_ids) < 1:
            raise ContractError("candidate set must hold at least one item")
        logits = self.score_logits(fused_slots, Tensor(candidates.embeddings)).data
        probs = np.empty_like(logits)
        for r in range(logits.shape[0]):
            row = logits[r] - logits[r].max()
            e = np.exp(row)
            probs[r] = e / math.fsum(e)
        return ItemDistribution(list(candidates.item_ids), probs)


@dataclass
class FilledResponse:
    tokens: list[str]
    items: list[int]            # filled item id per slot, in slot order
    positions: list[int]        # start offset of each title in tokens


def fill_slots(template_tokens: list[str], slot_positions: list[int],
               distribution: ItemDistribution | None, catalog: dict[int, str],
               no_repeat: bool = False) -> FilledResponse:
    """Replace each slot with its argmax candidate's title tokens.

    Argmax ties break toward the better-ranked candidate (first maximum).
    With ``no_repeat``, a slot takes its best not-yet-used candidate and
    falls back to the overall argmax once every candidate is used.
    """
    if slot_positions and (distribution is None
                           or distribution.probabilities.shape[0] != len(slot_positions)):
        raise ContractError("one distribution row per slot is required")
    filled: list[int] = []
    offsets: list[int] = []
    out: list[str] = []
    slot_set = set(slot_positions)
    used: set[int] = set()
    slot_no = 0
    for pos, tok in enumerate(template_tokens):
        if pos not in slot_set:
            out.append(tok)
            continue
        row = distribution.probabilities[slot_no]
        order = np.argsort(-row, kind="stable")
        pick = int(order[0])
        if no_repeat:
            for idx in order:
                if distribution.candidate_ids[int(idx)] not in used:
                    pick = int(idx)
                    break
        item = distribution.candidate_ids[pick]
        used.add(item)
        filled.append(item)
        offsets.append(len(out))
        title = catalog.get(item, f"@{item}")
        out.extend(title.split())
        slot_no += 1
    return FilledResponse(tokens=out, items=filled, positions=offsets)
