"""Switching-network baseline: one decoder distribution over words and items.

At every step a sigmoid gate mixes the vocabulary distribution with the
recommender's item distribution; items are decoded inline rather than
through template slots. The item block spans only the items observed in the
training corpus, which is the closed-world limitation the slot-filling
architecture removes: an item outside that block can never be emitted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import BOS, EOS, ITEM, MaskedExample, Vocabulary
from .errors import ContractError
from .generator import GeneratorConfig, TemplateGenerator
from .kg import Recommender
from .tensor import Module, Tensor


def mix(p_dial: np.ndarray, p_rec: np.ndarray, p_s: float) -> np.ndarray:
    """Convex mixture over the concatenated word-then-item axis."""
    p_dial = np.asarray(p_dial, dtype=np.float64)
    p_rec = np.asarray(p_rec, dtype=np.float64)
    for name, dist in (("word distribution", p_dial), ("item distribution", p_rec)):
        if abs(dist.sum() - 1.0) > 1e-4:
            raise ContractError(f"{name} sums to {dist.sum():.6f}, not 1")
    if not (0.0 <= p_s <= 1.0):
        raise ContractError(f"gate probability {p_s} outside [0, 1]")
    return np.concatenate([p_s * p_dial, (1.0 - p_s) * p_rec])


@dataclass
class SwitchingTurn:
    tokens: list[str]                     # final response, item titles inline
    emitted_items: list[tuple[int, int]]  # (token position, item id)
    item_distribution: np.ndarray         # P_rec over the item block
    item_block_ids: list[int]
    gate_values: list[float]
    token_nlls: list[float] | None = None


class SwitchingModel(Module):
    """Encoder-decoder with a gated word/item output head.

    Shares the corpus and the (frozen, pretrained) recommender with the
    slot-filling model; only the output side differs. The decoder embeds
    emitted items through an item embedding table appended to the
    vocabulary block.
    """

    def __init__(self, cfg: GeneratorConfig, train_item_ids: list[int],
                 recommender: Recommender, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.core = TemplateGenerator(cfg, rng=rng, dtype=dtype)
        self.recommender = recommender
        self.item_ids = sorted(train_item_ids)
        self.item_pos = {item: i for i, item in enumerate(self.item_ids)}
        self.item_embedding = Tensor(
            T.normal_embedding(rng, len(self.item_ids), cfg.d_model, dtype),
            requires_grad=True)
        self.gate_w = Tensor(T.xavier_uniform(rng, cfg.d_model, 1, dtype),
                             requires_grad=True)
        self.gate_b = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
        self._rec_rows = [self.recommender.item_ids.index(i) for i in self.item_ids]

    @property
    def vocab_size(self) -> int:
        return self.core.cfg.vocab_size

    # -- sequence plumbing ---------------------------------------------------

    def joint_ids(self, example: MaskedExample, strict: bool = True) -> list[int]:
        """Target ids with each slot replaced by its item-block id.

        Out-of-block items are a contract error during training; when
        ``strict`` is off (evaluation on splits holding novel items) the
        position is marked with -1 and scored at the probability floor.
        """
        ids, k = [], 0
        for t in example.target_ids:
            if t == ITEM:
                item = example.slot_items[k]
                k += 1
                if item not in self.item_pos:
                    if strict:
                        raise ContractError(
                            f"item {item} is outside the training item block")
                    ids.append(-1)
                else:
                    ids.append(self.vocab_size + self.item_pos[item])
            else:
                ids.append(t)
        return ids

    def embed_joint(self, ids: list[int]) -> Tensor:
        table = T.concat_rows([self.core.embedding, self.item_embedding])
        tok = T.gather_rows(table, ids)
        return T.add(tok, Tensor(self.core.positions[:len(ids)]))

    def item_block_distribution(self, mention_idxs: list[int]) -> np.ndarray:
        """Recommender scores restricted to the training item block.

        The restriction (with exact renormalization) is what closes the
        world: items never observed in dialogue training have no coordinate
        here.
        """
        table = self.recommender.propagate()
        user = self.recommender.encode_user(mention_idxs, table)
        full = self.recommender.rank_items(user, table)
        block = np.asarray([full[r] for r in self._rec_rows], dtype=np.float64)
        total = math.fsum(block)
        if total <= 0.0:
            return np.full(len(block), 1.0 / len(block))
        return block / total

    # -- training loss -------------------------------------------------------

    def sequence_loss_terms(self, example: MaskedExample,
                            p_rec: np.ndarray) -> tuple[Tensor, float, int]:
        """Summed mixture NLL over one target sequence.

        Returns (differentiable word/gate part, constant item-side NLL,
        position count). At a word position the mixture NLL is
        -log(gate) - log P_dial(w); at an item position -log(1 - gate)
        - log P_rec(i), where the P_rec term is constant because the
        recommender stays frozen.
        """
        ids = self.joint_ids(example)
        enc = self.core.encode(example.context_ids)
        states = self.core.decode_states(self.embed_joint(ids[:-1]), enc)
        gate_logits = T.add(T.matmul(states, self.gate_w), self.gate_b)  # (n, 1)
        word_logits = self.core.output_logits(states)
        predicted = ids[1:]
        is_word = [t < self.vocab_size for t in predicted]
        word_targets = [t if w else 0 for t, w in zip(predicted, is_word)]
        ce_words = T.cross_entropy(word_logits, word_targets, mask=is_word,
                                   reduction="sum")
        word_col = np.asarray([[1.0 if w else 0.0] for w in is_word])
        gate_word = T.reduce_sum(T.mul(T.softplus(T.neg(gate_logits)), Tensor(word_col)))
        gate_item = T.reduce_sum(T.mul(T.softplus(gate_logits), Tensor(1.0 - word_col)))
        loss = T.add(T.add(ce_words, gate_word), gate_item)
        const_nll = 0.0
        for t, w in zip(predicted, is_word):
            if not w:
                const_nll += -math.log(max(p_rec[t - self.vocab_size], 1e-300))
        return loss, const_nll, len(predicted)

    def sequence_nlls(self, example: MaskedExample, p_rec: np.ndarray) -> list[float]:
        """Per-position mixture NLLs for perplexity (no gradients).

        An item outside the block has probability zero under this model; it
        is scored at the floor, honestly reflecting the closed world. The
        decoder input at such a position falls back to the [UNK] embedding.
        """
        from .corpus import UNK

        ids = self.joint_ids(example, strict=False)
        inputs = [UNK if t == -1 else t for t in ids[:-1]]
        enc = self.core.encode(example.context_ids)
        states = self.core.decode_states(self.embed_joint(inputs), enc)
        z = T.add(T.matmul(states, self.gate_w), self.gate_b).data[:, 0]
        logp_words = T.log_softmax(self.core.output_logits(states), axis=-1).data
        floor = -math.log(1e-300)
        nlls = []
        for i, t in enumerate(ids[1:]):
            log_gate = -np.logaddexp(0.0, -z[i])       # log sigmoid
            log_one_minus = -np.logaddexp(0.0, z[i])   # log (1 - sigmoid)
            if t == -1:
                nlls.append(float(-log_one_minus + floor))
            elif t < self.vocab_size:
                nlls.append(float(-(log_gate + logp_words[i, t])))
            else:
                p_item = max(p_rec[t - self.vocab_size], 1e-300)
                nlls.append(float(-(log_one_minus + math.log(p_item))))
        return nlls

    # -- inference -------------------------------------------------------------

    def generate(self, context_ids: list[int], mention_idxs: list[int],
                 vocab: Vocabulary, catalog: dict[int, str],
                 max_len: int | None = None) -> SwitchingTurn:
        """Greedy decoding over the joint word/item distribution."""
        max_len = self.core.cfg.max_target if max_len is None else max_len
        enc = self.core.encode(context_ids)
        p_rec = self.item_block_distribution(mention_idxs)
        prefix = [BOS]
        tokens: list[str] = []
        emitted: list[tuple[int, int]] = []
        gates: list[float] = []
        while len(prefix) - 1 < max_len:
            states = self.core.decode_states(self.embed_joint(prefix), enc)
            last = T.gather_rows(states, [len(prefix) - 1])
            z = T.add(T.matmul(last, self.gate_w), self.gate_b).data[0, 0]
            p_s = 0.5 * (1.0 + math.tanh(0.5 * z))
            p_dial = T.softmax(self.core.output_logits(last), axis=-1).data[0]
            joint = mix(p_dial, p_rec, p_s)
            choice = int(np.argmax(joint))
            gates.append(p_s)
            if choice == EOS:
                break
            if choice >= self.vocab_size:
                item = self.item_ids[choice - self.vocab_size]
                emitted.append((len(tokens), item))
                tokens.extend(catalog.get(item, f"@{item}").split())
            else:
                tokens.append(vocab.id_to_token.get(choice, "[UNK]"))
            prefix.append(choice)
        return SwitchingTurn(tokens=tokens, emitted_items=emitted,
                             item_distribution=p_rec,
                             item_block_ids=list(self.item_ids),
                             gate_values=gates)
