"""Dialogue corpus handling: ingestion, item masking, splits, synthesis.

The on-disk format is line-delimited JSON in the ReDial convention
(``messages``, ``text``, ``senderWorkerId``, ``movieMentions``,
``initiatorWorkerId``, ``respondentWorkerId``), with item mentions written
inline as ``@<id>``. Synthetic corpora are emitted in the same format so
both paths share one loader.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractError

log = logging.getLogger("ntrd.corpus")

SEEKER = "seeker"
RECOMMENDER = "recommender"

PAD, UNK, BOS, EOS, ITEM = 0, 1, 2, 3, 4
SEEKER_MARK, REC_MARK = 5, 6
RESERVED_TOKENS = ["[PAD]", "[UNK]", "[BOS]", "[EOS]", "[ITEM]", "[SEEKER]", "[REC]"]

_TOKEN_RE = re.compile(r"@\d+|[a-z0-9']+|[^\sa-z0-9']")
_MENTION_RE = re.compile(r"^@(\d+)$")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, keep punctuation as tokens."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


@dataclass
class Turn:
    role: str
    raw_text: str
    item_mentions: list[tuple[int, int]] = field(default_factory=list)
    _tokens: list[str] | None = None

    @property
    def tokens(self) -> list[str]:
        if self._tokens is None:
            self._tokens = tokenize(self.raw_text)
        return self._tokens


@dataclass
class Conversation:
    id: str
    turns: list[Turn]
    mentioned_items: dict[int, str] = field(default_factory=dict)

    def items_mentioned(self) -> set[int]:
        return {item for turn in self.turns for _, item in turn.item_mentions}


@dataclass
class IngestStats:
    conversations: int = 0
    utterances: int = 0
    malformed_lines: int = 0
    unknown_mentions: int = 0
    dropped_examples: int = 0
    skipped_first_turn_targets: int = 0


def _mentions_for_tokens(tokens: list[str], known: dict[int, str],
                         stats: IngestStats | None = None) -> list[tuple[int, int]]:
    mentions = []
    for pos, tok in enumerate(tokens):
        m = _MENTION_RE.match(tok)
        if not m:
            continue
        item = int(m.group(1))
        if item in known:
            mentions.append((pos, item))
        elif stats is not None:
            stats.unknown_mentions += 1
    return mentions


def ingest_redial(path: str | Path) -> tuple[list[Conversation], IngestStats]:
    """Parse a ReDial line-delimited JSON file into conversations.

    Malformed lines are skipped and counted; ``@id`` strings that are not in
    the line's movieMentions stay plain tokens and are counted.
    """
    stats = IngestStats()
    conversations: list[Conversation] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                messages = raw["messages"]
                initiator = raw["initiatorWorkerId"]
                mentions_raw = raw.get("movieMentions") or {}
                if isinstance(mentions_raw, list):
                    mentions_raw = {}
                mentioned = {int(k): (v or f"movie {k}") for k, v in mentions_raw.items()}
                turns = []
                for msg in messages:
                    role = SEEKER if msg["senderWorkerId"] == initiator else RECOMMENDER
                    turn = Turn(role=role, raw_text=msg["text"])
                    turn.item_mentions = _mentions_for_tokens(turn.tokens, mentioned, stats)
                    turns.append(turn)
                conv_id = str(raw.get("conversationId", lineno))
                conversations.append(Conversation(conv_id, turns, mentioned))
                stats.conversations += 1
                stats.utterances += len(turns)
            except (KeyError, TypeError, ValueError, json.JSONDecodeError):
                stats.malformed_lines += 1
                log.warning("skipping malformed line %d in %s", lineno, path)
    return conversations, stats


def write_redial_jsonl(conversations: list[Conversation], path: str | Path) -> None:
    """Emit conversations in the same line format the loader reads."""
    with open(path, "w", encoding="utf-8") as fh:
        for conv in conversations:
            record = {
                "conversationId": conv.id,
                "initiatorWorkerId": 0,
                "respondentWorkerId": 1,
                "messages": [
                    {"senderWorkerId": 0 if t.role == SEEKER else 1, "text": t.raw_text}
                    for t in conv.turns
                ],
                "movieMentions": {str(k): v for k, v in sorted(conv.mentioned_items.items())},
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


class Vocabulary:
    """Token-to-id map with fixed reserved ids and a frequency threshold."""

    def __init__(self, token_to_id: dict[str, int], min_frequency: int = 3):
        self.token_to_id = token_to_id
        self.id_to_token = {i: t for t, i in token_to_id.items()}
        self.min_frequency = min_frequency

    def __len__(self) -> int:
        return len(self.token_to_id)

    @classmethod
    def build(cls, conversations: list[Conversation], min_frequency: int = 3) -> "Vocabulary":
        counts: dict[str, int] = {}
        for conv in conversations:
            for turn in conv.turns:
                mention_pos = {pos for pos, _ in turn.item_mentions}
                for pos, tok in enumerate(turn.tokens):
                    if pos in mention_pos:
                        continue  # item surface forms are masked, not vocabulary
                    counts[tok] = counts.get(tok, 0) + 1
        token_to_id = {tok: i for i, tok in enumerate(RESERVED_TOKENS)}
        kept = sorted((t for t, c in counts.items() if c >= min_frequency),
                      key=lambda t: (-counts[t], t))
        for tok in kept:
            if tok not in token_to_id:
                token_to_id[tok] = len(token_to_id)
        return cls(token_to_id, min_frequency)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.id_to_token.get(i, "[UNK]") for i in ids]


def mask_items(turn: Turn, vocab: Vocabulary) -> tuple[list[int], list[int]]:
    """Replace each item mention with the [ITEM] id; slot items keep order."""
    mention_at = dict(turn.item_mentions)
    ids, slots = [], []
    for pos, tok in enumerate(turn.tokens):
        if pos in mention_at:
            ids.append(ITEM)
            slots.append(mention_at[pos])
        else:
            ids.append(vocab.token_to_id.get(tok, UNK))
    return ids, slots


@dataclass
class MaskedExample:
    """One training instance: prior turns as context, next recommender turn
    as a slotted target."""

    conversation_id: str
    turn_index: int
    context_ids: list[int]
    target_ids: list[int]           # [BOS] ... [EOS] with [ITEM] at slots
    slot_items: list[int]           # ground-truth item id per [ITEM]
    context_item_ids: list[int]     # items mentioned anywhere in the context


def make_examples(conversation: Conversation, vocab: Vocabulary,
                  max_context_tokens: int = 256,
                  stats: IngestStats | None = None) -> list[MaskedExample]:
    """One example per recommender turn with a nonempty context.

    The context is every prior turn prefixed with its role marker, truncated
    from the left; zero-slot recommender turns still produce examples so the
    generator learns when not to emit a slot.
    """
    examples = []
    context: list[int] = []
    context_items: list[int] = []
    for t, turn in enumerate(conversation.turns):
        masked, slots = mask_items(turn, vocab)
        if turn.role == RECOMMENDER:
            if t == 0:
                if stats is not None:
                    stats.skipped_first_turn_targets += 1
            elif not masked:
                if stats is not None:
                    stats.dropped_examples += 1
            else:
                ctx = context[-max_context_tokens:]
                examples.append(MaskedExample(
                    conversation_id=conversation.id,
                    turn_index=t,
                    context_ids=list(ctx),
                    target_ids=[BOS] + masked + [EOS],
                    slot_items=list(slots),
                    context_item_ids=list(context_items),
                ))
        marker = SEEKER_MARK if turn.role == SEEKER else REC_MARK
        context.extend([marker] + masked)
        context_items.extend(item for _, item in turn.item_mentions)
    return examples


def unmask(target_ids: list[int], slot_items: list[int], vocab: Vocabulary,
           catalog: dict[int, str]) -> list[str]:
    """Reinsert item surface forms; inverse of mask_items over a target."""
    out, k = [], 0
    for i in target_ids:
        if i == ITEM:
            out.append(f"@{slot_items[k]}")
            k += 1
        elif i not in (BOS, EOS):
            out.append(vocab.id_to_token.get(i, "[UNK]"))
    return out


@dataclass
class CorpusSplit:
    train: list[str]
    validation: list[str]
    test: list[str]
    novel_item_ids: set[int] = field(default_factory=set)


def _novel_items(conversations: list[Conversation], split_ids: dict[str, list[str]]) -> set[int]:
    by_id = {c.id: c for c in conversations}
    seen = {name: set() for name in split_ids}
    for name, ids in split_ids.items():
        for cid in ids:
            seen[name] |= by_id[cid].items_mentioned()
    return seen["test"] - seen["train"] - seen["validation"]


def split_corpus(conversations: list[Conversation], seed: int,
                 ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> CorpusSplit:
    """Deterministic shuffled split by conversation count.

    Validation and test sizes are floored; the remainder goes to train.
    Novel items are those mentioned only in test conversations.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"split ratios must sum to 1, got {ratios}")
    n = len(conversations)
    if n < 3:
        raise ContractError(f"need at least 3 conversations to split, got {n}")
    ids = [c.id for c in conversations]
    random.Random(seed).shuffle(ids)
    n_val = int(ratios[1] * n)
    n_test = int(ratios[2] * n)
    n_train = n - n_val - n_test
    split = CorpusSplit(
        train=ids[:n_train],
        validation=ids[n_train:n_train + n_val],
        test=ids[n_train + n_val:],
    )
    split.novel_item_ids = _novel_items(conversations, {
        "train": split.train, "validation": split.validation, "test": split.test,
    })
    return split


def holdout_split(conversations: list[Conversation], held_items: set[int],
                  seed: int, val_ratio: float = 0.1) -> CorpusSplit:
    """Route every conversation mentioning a held-out item to the test set.

    The remaining conversations are split train/validation. The held-out
    items therefore never occur in dialogue training and become the novel
    set for generalization runs.
    """
    test, rest = [], []
    for conv in conversations:
        (test if conv.items_mentioned() & held_items else rest).append(conv.id)
    random.Random(seed).shuffle(rest)
    n_val = int(val_ratio * len(rest))
    split = CorpusSplit(train=rest[n_val:], validation=rest[:n_val], test=test)
    mentioned_in_test = set()
    by_id = {c.id: c for c in conversations}
    for cid in test:
        mentioned_in_test |= by_id[cid].items_mentioned()
    split.novel_item_ids = held_items & mentioned_in_test
    return split


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

GENRE_WORDS = ["comedy", "horror", "action", "drama", "romance", "thriller",
               "fantasy", "western"]
STYLE_WORDS = ["classic", "modern", "indie", "foreign", "animated", "silent"]

_GREETINGS = ["hello", "hi there", "hey"]
_GREET_REPLIES = [
    "hello ! what kind of movies do you like ?",
    "hi ! what are you in the mood for ?",
    "hey ! tell me what movies you enjoy .",
]
_PREF_PHRASES = [
    "i am looking for a {sg} movie tonight",
    "can you recommend a {sg} film",
    "i love {sg} movies",
    "any suggestions for a good {sg} movie",
]
_REC_PHRASES = [
    "you should watch @{item} it is wonderful",
    "i recommend @{item} a very fine pick",
    "try @{item} i think you will like it",
    "@{item} is a good one trust me",
]
_THANKS = ["thank you goodbye", "thanks so much bye", "great thanks bye"]
_THANKS_REPLIES = [
    "you are welcome enjoy the movie !",
    "no problem have a great night !",
    "happy to help see you soon !",
]


@dataclass
class SynthSpec:
    n_conversations: int
    n_items: int
    n_genres: int
    vocab_size: int
    seed: int
    rounds: int = 2


@dataclass
class SynthOutput:
    conversations: list[Conversation]
    catalog: dict[int, str]
    triples: list[tuple[str, str, str]]
    genres: list[str]
    styles: list[str]
    item_attrs: dict[int, tuple[str, str]]

    def genre_of(self, item: int) -> str:
        return self.item_attrs[item][0]


def synth_corpus(spec: SynthSpec) -> SynthOutput:
    """Deterministic desk-scale corpus generator.

    Each item carries one (genre, style) pair. A conversation commits to one
    genre: the first request states the genre alone and is answered with the
    genre's base item; later requests add an explicit style word and are
    answered with the item that (genre, style) determines. The set of
    entities mentioned so far therefore fixes the next recommendation, and
    recommender phrasing is keyed to the seeker's phrasing so the next turn
    is predictable from the context. Each item links to its genre and style
    nodes in the emitted knowledge graph.
    """
    if spec.n_items % spec.n_genres != 0:
        raise ContractError(
            f"n_items {spec.n_items} must be divisible by n_genres {spec.n_genres}")
    n_styles = spec.n_items // spec.n_genres
    if spec.n_genres > len(GENRE_WORDS) or n_styles > len(STYLE_WORDS):
        raise ContractError("requested more genres/styles than the phrase bank holds")
    genres = GENRE_WORDS[:spec.n_genres]
    styles = STYLE_WORDS[:n_styles]

    catalog: dict[int, str] = {}
    item_attrs: dict[int, tuple[str, str]] = {}
    triples: list[tuple[str, str, str]] = []
    base = 101
    for gi, genre in enumerate(genres):
        for si, style in enumerate(styles):
            item = base + gi * n_styles + si
            catalog[item] = f"The {style.title()} {genre.title()} Story"
            item_attrs[item] = (genre, style)
            triples.append((str(item), "has_genre", genre))
            triples.append((str(item), "has_style", style))

    def item_for(genre: str, style: str | None) -> int:
        gi = genres.index(genre)
        si = styles.index(style) if style is not None else 0
        return base + gi * n_styles + si

    rng = random.Random(spec.seed)
    conversations = []
    for ci in range(spec.n_conversations):
        turns = []
        mentioned: dict[int, str] = {}
        gv = rng.randrange(len(_GREETINGS))
        turns.append(Turn(SEEKER, _GREETINGS[gv]))
        turns.append(Turn(RECOMMENDER, _GREET_REPLIES[gv]))
        genre = rng.choice(genres)
        for round_no in range(spec.rounds):
            style = None if round_no == 0 else rng.choice(styles)
            p = rng.randrange(len(_PREF_PHRASES))
            sg = genre if style is None else f"{style} {genre}"
            turns.append(Turn(SEEKER, _PREF_PHRASES[p].format(sg=sg)))
            item = item_for(genre, style)
            mentioned[item] = catalog[item]
            turns.append(Turn(RECOMMENDER, _REC_PHRASES[p].format(item=item)))
        tv = rng.randrange(len(_THANKS))
        turns.append(Turn(SEEKER, _THANKS[tv]))
        turns.append(Turn(RECOMMENDER, _THANKS_REPLIES[tv]))
        for turn in turns:
            turn.item_mentions = _mentions_for_tokens(turn.tokens, mentioned)
        conversations.append(Conversation(f"synth-{ci}", turns, mentioned))
    return SynthOutput(conversations, catalog, triples, genres, styles, item_attrs)


def write_kg_tsv(triples: list[tuple[str, str, str]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for head, rel, tail in triples:
            fh.write(f"{head}\t{rel}\t{tail}\n")
