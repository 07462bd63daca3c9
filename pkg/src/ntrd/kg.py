"""Knowledge-graph item recommender.

Entities (items plus attribute nodes) carry learned embeddings that a
relational mean-aggregation layer refines over the graph. A self-attentive
pooling of the entities mentioned in the dialogue yields the user vector,
and items are ranked by softmax over dot products with it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .corpus import Conversation, MaskedExample, tokenize
from .errors import ContractError
from .optim import AdamState, adam_step, clip_gradients
from .tensor import Module, Tape, Tensor, backward


@dataclass
class KnowledgeGraph:
    """Item-oriented graph: entity keys are strings, items use str(item_id)."""

    entities: list[str]
    relations: list[str]
    edges: list[tuple[str, str, str]]
    entity_index: dict[str, int] = field(init=False)
    # per relation: neighbor index lists, both directions, deduplicated
    adjacency: dict[str, list[list[int]]] = field(init=False)

    def __post_init__(self):
        self.entity_index = {e: i for i, e in enumerate(self.entities)}
        self.adjacency = {r: [[] for _ in self.entities] for r in self.relations}
        for head, rel, tail in self.edges:
            if head not in self.entity_index or tail not in self.entity_index:
                raise ContractError(f"edge ({head},{rel},{tail}) references unknown entity")
            h, t = self.entity_index[head], self.entity_index[tail]
            adj = self.adjacency[rel]
            if t not in adj[h]:
                adj[h].append(t)
            if h not in adj[t]:
                adj[t].append(h)

    @classmethod
    def from_triples(cls, triples: list[tuple[str, str, str]],
                     extra_entities: list[str] = ()) -> "KnowledgeGraph":
        entities: list[str] = []
        seen = set()

        def add(e: str):
            if e not in seen:
                seen.add(e)
                entities.append(e)

        for head, _, tail in triples:
            add(head)
            add(tail)
        for e in extra_entities:
            add(e)
        relations = sorted({r for _, r, _ in triples})
        return cls(entities, relations, list(triples))

    @classmethod
    def load_tsv(cls, path: str | Path, extra_entities: list[str] = ()) -> "KnowledgeGraph":
        triples = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ContractError(f"bad triple line: {line!r}")
                triples.append((parts[0], parts[1], parts[2]))
        return cls.from_triples(triples, extra_entities)


@dataclass
class UserRepresentation:
    vector: Tensor                 # (1, d)
    mentioned_entities: list[int]  # entity indices, occurrence order


@dataclass
class CandidateSet:
    """Top-K items for one turn, ranked high to low."""

    item_ids: list[int]
    entity_idxs: list[int]
    scores: np.ndarray
    embeddings: np.ndarray  # (K, d_item) snapshot for inspection/records


def _relation_aggregation(table: Tensor, neighbor_lists: list[list[int]]) -> Tensor:
    """Mean of neighbor embeddings per entity (zero where no neighbors)."""
    data = table.data
    out = np.zeros_like(data)
    src, dst, inv = [], [], []
    for e, neigh in enumerate(neighbor_lists):
        for n in neigh:
            src.append(n)
            dst.append(e)
        if neigh:
            inv.append(1.0 / len(neigh))
        else:
            inv.append(0.0)
    src_idx = np.asarray(src, dtype=np.int64)
    dst_idx = np.asarray(dst, dtype=np.int64)
    inv_arr = np.asarray(inv, dtype=data.dtype)[:, None]
    np.add.at(out, dst_idx, data[src_idx])
    out *= inv_arr

    def bwd(g):
        scaled = g * inv_arr
        grad = np.zeros_like(data)
        np.add.at(grad, src_idx, scaled[dst_idx])
        return (grad,)

    return T.record_op((table,), out, bwd)


class Recommender(Module):
    """Entity embeddings + relational propagation + user pooling + ranking."""

    def __init__(self, kg: KnowledgeGraph, item_ids: list[int], dim: int = 128,
                 prop_layers: int = 1, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.kg = kg
        self.dim = dim
        self.prop_layers = prop_layers
        self.item_ids = sorted(item_ids)
        missing = [str(i) for i in self.item_ids if str(i) not in kg.entity_index]
        if missing:
            raise ContractError(f"items missing from the knowledge graph: {missing[:5]}")
        self.item_entity_idxs = [kg.entity_index[str(i)] for i in self.item_ids]
        self.table = Tensor(T.normal_embedding(rng, len(kg.entities), dim, dtype),
                            requires_grad=True)
        self.self_weights = [
            Tensor(T.xavier_uniform(rng, dim, dim, dtype), requires_grad=True)
            for _ in range(prop_layers)
        ]
        self.rel_weights = [
            {r: Tensor(T.xavier_uniform(rng, dim, dim, dtype), requires_grad=True)
             for r in kg.relations}
            for _ in range(prop_layers)
        ]
        self.pool_w = Tensor(T.xavier_uniform(rng, dim, dim, dtype), requires_grad=True)
        self.pool_v = Tensor(T.xavier_uniform(rng, dim, 1, dtype), requires_grad=True)
        self.default_user = Tensor(T.normal_embedding(rng, 1, dim, dtype),
                                   requires_grad=True)

    # -- graph propagation -------------------------------------------------

    def propagate(self, layers: int | None = None) -> Tensor:
        """Relational mean aggregation; 0 layers returns the raw table."""
        layers = self.prop_layers if layers is None else layers
        if layers < 0:
            raise ContractError(f"propagation layers must be >= 0, got {layers}")
        h = self.table
        for li in range(layers):
            acc = T.matmul(h, self.self_weights[li])
            for rel in self.kg.relations:
                agg = _relation_aggregation(h, self.kg.adjacency[rel])
                acc = T.add(acc, T.matmul(agg, self.rel_weights[li][rel]))
            h = T.relu(acc)
        return h

    # -- user encoding and ranking ------------------------------------------

    def encode_user(self, mention_idxs: list[int],
                    table: Tensor | None = None) -> UserRepresentation:
        """Self-attentive pooling over mentioned entities; learned default
        vector when nothing was mentioned."""
        table = self.propagate() if table is None else table
        if not mention_idxs:
            return UserRepresentation(self.default_user, [])
        rows = T.gather_rows(table, mention_idxs)
        scores = T.matmul(T.tanh(T.matmul(rows, self.pool_w)), self.pool_v)
        weights = T.softmax(scores, axis=0)
        pooled = T.matmul(T.transpose(weights), rows)
        return UserRepresentation(pooled, list(mention_idxs))

    def item_logits(self, user: UserRepresentation, table: Tensor) -> Tensor:
        """Dot product of the user vector against every item embedding."""
        items = T.gather_rows(table, self.item_entity_idxs)
        return T.matmul(user.vector, T.transpose(items))  # (1, n_items)

    def rank_items(self, user: UserRepresentation,
                   table: Tensor | None = None) -> np.ndarray:
        """Softmax scores over the full item set (ids in self.item_ids order).

        Per-item terms are independent dot products and the normalizer is an
        exactly rounded sum, so reordering items permutes the output bitwise.
        """
        table = self.propagate() if table is None else table
        logits = self.item_logits(user, table).data[0]
        shifted = logits - logits.max()
        e = np.exp(shifted)
        return e / math.fsum(e)

    def top_k_candidates(self, distribution: np.ndarray, k: int,
                         table: Tensor | None = None) -> CandidateSet:
        """Top-k by score; ties broken by ascending item id."""
        n = len(self.item_ids)
        if k > n:
            raise ContractError(f"requested top-{k} of {n} items")
        order = sorted(range(n), key=lambda i: (-distribution[i], self.item_ids[i]))[:k]
        ids = [self.item_ids[i] for i in order]
        idxs = [self.item_entity_idxs[i] for i in order]
        table = self.propagate() if table is None else table
        return CandidateSet(
            item_ids=ids,
            entity_idxs=idxs,
            scores=np.asarray([distribution[i] for i in order]),
            embeddings=table.data[idxs].copy(),
        )

    def candidates_for(self, mention_idxs: list[int], k: int,
                       table: Tensor | None = None) -> CandidateSet:
        table = self.propagate() if table is None else table
        user = self.encode_user(mention_idxs, table)
        return self.top_k_candidates(self.rank_items(user, table), k, table)


# ---------------------------------------------------------------------------
# entity linking
# ---------------------------------------------------------------------------

def _contains_subsequence(haystack: list[str], needle: list[str]) -> bool:
    if not needle or len(needle) > len(haystack):
        return False
    first = needle[0]
    for i in range(len(haystack) - len(needle) + 1):
        if haystack[i] == first and haystack[i:i + len(needle)] == needle:
            return True
    return False


class EntityLinker:
    """Maps dialogue context to KG entity indices.

    Item mentions come from the corpus annotations; attribute nodes are
    linked by exact string match of their tokenized names against the
    context tokens.
    """

    def __init__(self, kg: KnowledgeGraph, item_ids: list[int]):
        self.kg = kg
        item_keys = {str(i) for i in item_ids}
        self.attr_tokens = [
            (kg.entity_index[e], tokenize(e))
            for e in kg.entities if e not in item_keys
        ]

    def link_example(self, example: MaskedExample,
                     conversation: Conversation) -> list[int]:
        idxs: list[int] = []
        for item in example.context_item_ids:
            idx = self.kg.entity_index.get(str(item))
            if idx is not None and idx not in idxs:
                idxs.append(idx)
        context_tokens: list[str] = []
        for turn in conversation.turns[:example.turn_index]:
            context_tokens.extend(turn.tokens)
        for idx, toks in self.attr_tokens:
            if idx not in idxs and _contains_subsequence(context_tokens, toks):
                idxs.append(idx)
        return idxs

    def link_tokens(self, tokens: list[str], item_ids: list[int]) -> list[int]:
        idxs: list[int] = []
        for item in item_ids:
            idx = self.kg.entity_index.get(str(item))
            if idx is not None and idx not in idxs:
                idxs.append(idx)
        for idx, toks in self.attr_tokens:
            if idx not in idxs and _contains_subsequence(tokens, toks):
                idxs.append(idx)
        return idxs


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    steps: int
    final_loss: float
    train_accuracy: float


def pretrain_recommender(model: Recommender,
                         pairs: list[tuple[list[int], int]],
                         lr: float = 1e-3,
                         batch_size: int = 32,
                         max_epochs: int = 200,
                         clip_max_norm: float = 0.1,
                         tol: float = 1e-4,
                         patience: int = 5,
                         weight_decay: float = 0.01,
                         seed: int = 0) -> PretrainResult:
    """Cross-entropy training of the ranking distribution on
    (context mentions, ground-truth item) pairs, run until the loss stops
    improving.

    Decoupled weight decay keeps per-entity rows small, so item embeddings
    lean on the shared relation weights and attribute rows; that keeps items
    with the same attributes in the same region, which is what lets an item
    unseen in dialogue training behave like its trained neighbors downstream.
    """
    if not pairs:
        raise ContractError("no supervised (mentions, item) pairs to pretrain on")
    item_pos = {item: i for i, item in enumerate(model.item_ids)}
    for _, item in pairs:
        if item not in item_pos:
            raise ContractError(f"pair references unknown item {item}")
    params = list(model.named_parameters())
    state = AdamState(params, lr=lr)
    rng = np.random.default_rng(seed)
    steps = 0
    best = math.inf
    stale = 0
    epoch_loss = math.inf
    for _ in range(max_epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = [pairs[i] for i in order[start:start + batch_size]]
            with Tape():
                table = model.propagate()
                logits = T.concat_rows([
                    model.item_logits(model.encode_user(m, table), table)
                    for m, _ in batch
                ])
                loss = T.cross_entropy(logits, [item_pos[it] for _, it in batch])
                backward(loss)
            clip_gradients(params, clip_max_norm)
            if weight_decay:
                model.table.data *= 1.0 - lr * weight_decay
            adam_step(params, state)
            total += loss.item() * len(batch)
            steps += 1
        epoch_loss = total / len(pairs)
        if epoch_loss < best - tol:
            best = epoch_loss
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    table = model.propagate()
    hits = 0
    for mentions, item in pairs:
        dist = model.rank_items(model.encode_user(mentions, table), table)
        if model.item_ids[int(np.argmax(dist))] == item:
            hits += 1
    return PretrainResult(steps=steps, final_loss=epoch_loss,
                          train_accuracy=hits / len(pairs))
