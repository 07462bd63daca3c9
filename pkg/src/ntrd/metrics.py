"""Evaluation metrics over generated responses.

All metrics are pure functions of the record list (plus the catalog and the
novel-item set), so repeated evaluation is identical and aggregation order
never matters (means use exactly rounded summation).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ContractError


@dataclass
class SlotRecord:
    position: int
    candidate_ids: list[int]
    distribution: list[float]
    filled_item_id: int


@dataclass
class GeneratedRecord:
    """Evaluation view of one generated recommender turn."""

    conversation_id: str
    turn_index: int
    response_tokens: list[str]
    slots: list[SlotRecord]
    ground_truth_items: list[int]
    token_nlls: list[float]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "GeneratedRecord":
        slots = [SlotRecord(**s) for s in data["slots"]]
        return cls(conversation_id=data["conversation_id"],
                   turn_index=data["turn_index"],
                   response_tokens=list(data["response_tokens"]),
                   slots=slots,
                   ground_truth_items=list(data["ground_truth_items"]),
                   token_nlls=list(data["token_nlls"]))


def write_records(records: list[GeneratedRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def read_records(path: str | Path) -> list[GeneratedRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(GeneratedRecord.from_json(json.loads(line)))
    return records


# ---------------------------------------------------------------------------
# individual metrics
# ---------------------------------------------------------------------------

def perplexity(records: list[GeneratedRecord]) -> float:
    """exp of the mean per-token negative log-likelihood."""
    nlls = [nll for rec in records for nll in rec.token_nlls]
    if not nlls:
        raise ContractError("no scored tokens; perplexity undefined")
    return math.exp(math.fsum(nlls) / len(nlls))


def dist_n(records: list[GeneratedRecord], n: int) -> float:
    """Distinct n-grams over words, per sentence, averaged over sentences.

    Sentences shorter than n contribute 0 (and still count in the average).
    """
    if not records:
        return 0.0
    scores = []
    for rec in records:
        words = rec.response_tokens
        if len(words) < n:
            scores.append(0.0)
            continue
        grams = {tuple(words[i:i + n]) for i in range(len(words) - n + 1)}
        scores.append(len(grams) / len(words))
    return math.fsum(scores) / len(scores)


def _item_turns(records: list[GeneratedRecord]) -> list[GeneratedRecord]:
    return [r for r in records if r.ground_truth_items]


def rer_at_k(records: list[GeneratedRecord], k: int) -> float:
    """Recall@k in Response, in percent.

    The denominator is the turns whose ground truth holds at least one item.
    k=1 asks whether the filled response contains a ground-truth item; k>1
    asks whether any slot's top-k candidates contain one.
    """
    turns = _item_turns(records)
    if not turns:
        raise ContractError("no turns with ground-truth items")
    hits = 0
    for rec in turns:
        truth = set(rec.ground_truth_items)
        if k == 1:
            if any(s.filled_item_id in truth for s in rec.slots):
                hits += 1
            continue
        hit = False
        for slot in rec.slots:
            if k > len(slot.candidate_ids):
                raise ContractError(
                    f"top-{k} requested but slot {slot.position} of turn "
                    f"{rec.conversation_id}/{rec.turn_index} has only "
                    f"{len(slot.candidate_ids)} candidates")
            order = sorted(range(len(slot.candidate_ids)),
                           key=lambda i: (-slot.distribution[i], i))[:k]
            if truth & {slot.candidate_ids[i] for i in order}:
                hit = True
        if hit:
            hits += 1
    return 100.0 * hits / len(turns)


def item_ratio(records: list[GeneratedRecord]) -> float:
    """Percent of generated responses containing at least one filled item."""
    if not records:
        return 0.0
    return 100.0 * sum(1 for r in records if r.slots) / len(records)


def item_ratio_per_token(records: list[GeneratedRecord]) -> float:
    """Companion reading: filled items per hundred response tokens."""
    tokens = sum(len(r.response_tokens) for r in records)
    if tokens == 0:
        return 0.0
    return 100.0 * sum(len(r.slots) for r in records) / tokens


def item_diversity(records: list[GeneratedRecord], catalog: dict[int, str]) -> float:
    """Percent of the catalog that ever appears as a filled item."""
    if not catalog:
        raise ContractError("empty catalog")
    distinct = {s.filled_item_id for r in records for s in r.slots}
    return 100.0 * len(distinct & set(catalog)) / len(catalog)


def novel_ratio(records: list[GeneratedRecord], novel_item_ids: set[int]) -> float:
    """Percent of novel items that appear as filled items anywhere."""
    if not novel_item_ids:
        raise ContractError("no novel items supplied")
    filled = {s.filled_item_id for r in records for s in r.slots}
    return 100.0 * len(filled & set(novel_item_ids)) / len(novel_item_ids)


# ---------------------------------------------------------------------------
# aggregate report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    ppl: float
    dist2: float
    dist3: float
    dist4: float
    rer1: float | None
    rer10: float | None
    rer50: float | None
    item_ratio: float
    item_ratio_per_token: float
    item_diversity: float
    novel_ratio: float | None
    denominators: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        rows = [
            ("PPL", self.ppl), ("Dist-2", self.dist2), ("Dist-3", self.dist3),
            ("Dist-4", self.dist4), ("ReR@1", self.rer1), ("ReR@10", self.rer10),
            ("ReR@50", self.rer50), ("Item Ratio", self.item_ratio),
            ("Item Diversity", self.item_diversity),
            ("Novel Ratio", self.novel_ratio),
        ]
        width = max(len(name) for name, _ in rows)
        lines = []
        for name, value in rows:
            if value is None:
                shown = f"skipped ({self.skipped.get(name, 'n/a')})"
            else:
                shown = f"{value:.4f}"
            lines.append(f"{name:<{width}}  {shown}")
        return "\n".join(lines)


def report(records: list[GeneratedRecord], catalog: dict[int, str],
           novel_item_ids: set[int] | None = None) -> MetricsReport:
    """Every metric with its denominators; ReR@k is skipped (with the reason
    recorded) when some slot has fewer than k candidates."""
    if not records:
        raise ContractError("cannot report on zero records")
    item_turns = _item_turns(records)
    min_candidates = min((len(s.candidate_ids) for r in records for s in r.slots),
                         default=0)
    skipped: dict[str, str] = {}

    def rer_or_skip(k: int) -> float | None:
        if not item_turns:
            skipped[f"ReR@{k}"] = "no turns with ground-truth items"
            return None
        if k > 1 and min_candidates < k:
            skipped[f"ReR@{k}"] = (
                f"smallest candidate list holds {min_candidates} items")
            return None
        return rer_at_k(records, k)

    nv = None
    if novel_item_ids:
        nv = novel_ratio(records, novel_item_ids)
    else:
        skipped["Novel Ratio"] = "no novel items defined for this split"
    return MetricsReport(
        ppl=perplexity(records),
        dist2=dist_n(records, 2),
        dist3=dist_n(records, 3),
        dist4=dist_n(records, 4),
        rer1=rer_or_skip(1),
        rer10=rer_or_skip(10),
        rer50=rer_or_skip(50),
        item_ratio=item_ratio(records),
        item_ratio_per_token=item_ratio_per_token(records),
        item_diversity=item_diversity(records, catalog),
        novel_ratio=nv,
        denominators={
            "responses": len(records),
            "item_turns": len(item_turns),
            "tokens_scored": sum(len(r.token_nlls) for r in records),
            "catalog": len(catalog),
            "novel_items": len(novel_item_ids or ()),
            "min_candidates": min_candidates,
        },
        skipped=skipped,
    )
