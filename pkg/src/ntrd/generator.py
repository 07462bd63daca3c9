"""Transformer encoder-decoder that writes slotted response templates.

The decoder's output head chooses between ordinary vocabulary words and the
[ITEM] placeholder; the final-layer hidden states at placeholder positions
(and at word positions) are kept so the item selector can fill the slots.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (AttentionBlock, FeedForwardBlock, causal_mask,
                        key_padding_mask, sinusoidal_positions)
from .corpus import BOS, EOS, ITEM, PAD
from .errors import ContractError, ShapeError
from .tensor import Module, Tensor

log = logging.getLogger("ntrd.generator")


@dataclass
class GeneratorConfig:
    vocab_size: int
    d_model: int = 300
    heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    d_ffn: int | None = None     # defaults to 4 * d_model
    max_context: int = 256
    max_target: int = 40

    @property
    def ffn_width(self) -> int:
        return self.d_ffn if self.d_ffn is not None else 4 * self.d_model


@dataclass
class EncoderState:
    e_ctx: Tensor                       # (context length, d_model)
    token_ids: list[int]
    pad_mask_cols: np.ndarray | None    # additive row of key biases, or None


@dataclass
class TemplateResult:
    tokens: list[int]                   # emitted template, no BOS/EOS
    slot_positions: list[int]
    e_slot: Tensor                      # (#slots, d_model)
    e_word: Tensor                      # (#tokens - #slots, d_model)
    encoder_state: EncoderState
    hidden_states: Tensor               # (#tokens, d_model), generation order

    @property
    def token_count(self) -> int:
        return len(self.tokens)


class _EncoderLayer(Module):
    def __init__(self, cfg: GeneratorConfig, rng, dtype):
        self.self_attn = AttentionBlock(cfg.d_model, cfg.heads, rng, dtype)
        self.ffn = FeedForwardBlock(cfg.d_model, cfg.ffn_width, rng, dtype)

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        return self.ffn(self.self_attn(x, x, x, mask))


class _DecoderLayer(Module):
    def __init__(self, cfg: GeneratorConfig, rng, dtype):
        self.self_attn = AttentionBlock(cfg.d_model, cfg.heads, rng, dtype)
        self.cross_attn = AttentionBlock(cfg.d_model, cfg.heads, rng, dtype)
        self.ffn = FeedForwardBlock(cfg.d_model, cfg.ffn_width, rng, dtype)

    def __call__(self, x: Tensor, enc: EncoderState, self_mask: np.ndarray,
                 cross_mask: np.ndarray | None) -> Tensor:
        x = self.self_attn(x, x, x, self_mask)
        x = self.cross_attn(x, enc.e_ctx, enc.e_ctx, cross_mask)
        return self.ffn(x)


class TemplateGenerator(Module):
    """Greedy template writer exposing slot/word hidden states."""

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.dtype = dtype
        self.embedding = Tensor(
            T.normal_embedding(rng, cfg.vocab_size, cfg.d_model, dtype),
            requires_grad=True)
        max_pos = max(cfg.max_context, cfg.max_target + 1)
        self.positions = sinusoidal_positions(max_pos, cfg.d_model, dtype)
        self.enc_layers = [_EncoderLayer(cfg, rng, dtype) for _ in range(cfg.enc_layers)]
        self.dec_layers = [_DecoderLayer(cfg, rng, dtype) for _ in range(cfg.dec_layers)]
        self.w_out = Tensor(T.xavier_uniform(rng, cfg.d_model, cfg.vocab_size, dtype),
                            requires_grad=True)
        self.b_out = Tensor(np.zeros(cfg.vocab_size, dtype=dtype), requires_grad=True)

    # -- embedding ----------------------------------------------------------

    def embed(self, ids: list[int]) -> Tensor:
        tok = T.gather_rows(self.embedding, ids)
        return T.add(tok, Tensor(self.positions[:len(ids)]))

    # -- encoder --------------------------------------------------------------

    def encode(self, context_ids: list[int]) -> EncoderState:
        """Standard self-attention encoding of the context tokens."""
        if not context_ids:
            raise ContractError("cannot encode an empty context")
        if len(context_ids) > self.cfg.max_context:
            log.warning("context of %d tokens truncated to %d",
                        len(context_ids), self.cfg.max_context)
            context_ids = context_ids[-self.cfg.max_context:]
        mask = key_padding_mask(context_ids, PAD, len(context_ids), self.dtype)
        x = self.embed(context_ids)
        for layer in self.enc_layers:
            x = layer(x, mask)
        cols = mask[0] if mask is not None else None
        return EncoderState(e_ctx=x, token_ids=list(context_ids), pad_mask_cols=cols)

    # -- decoder ----------------------------------------------------------------

    def decode_states(self, input_embeddings: Tensor, enc: EncoderState) -> Tensor:
        """Final-layer decoder states for a (causally masked) input prefix."""
        n = input_embeddings.shape[0]
        self_mask = causal_mask(n, self.dtype)
        cross = None
        if enc.pad_mask_cols is not None:
            cross = np.broadcast_to(enc.pad_mask_cols, (n, len(enc.token_ids))).copy()
        x = input_embeddings
        for layer in self.dec_layers:
            x = layer(x, enc, self_mask, cross)
        return x

    def output_logits(self, states: Tensor) -> Tensor:
        return T.add(T.matmul(states, self.w_out), self.b_out)

    def next_token_distribution(self, prefix_ids: list[int],
                                enc: EncoderState) -> tuple[np.ndarray, Tensor]:
        """Full-vocabulary distribution for the next token, plus the hidden
        state it was computed from."""
        if not prefix_ids or prefix_ids[0] != BOS:
            raise ContractError("decoder prefix must begin with [BOS]")
        states = self.decode_states(self.embed(prefix_ids), enc)
        last = T.gather_rows(states, [len(prefix_ids) - 1])
        logits = self.output_logits(last)
        return T.softmax(logits, axis=-1).data[0], last

    def teacher_forced_states(self, enc: EncoderState,
                              target_ids: list[int]) -> tuple[Tensor, Tensor]:
        """Teacher forcing against an already-encoded context."""
        if target_ids[0] != BOS or target_ids[-1] != EOS:
            raise ContractError("target must be wrapped in [BOS] ... [EOS]")
        if len(target_ids) - 1 > self.positions.shape[0]:
            raise ContractError(
                f"target of {len(target_ids)} tokens exceeds max positions")
        states = self.decode_states(self.embed(target_ids[:-1]), enc)
        return self.output_logits(states), states

    def teacher_forced_pass(self, context_ids: list[int],
                            target_ids: list[int]) -> tuple[Tensor, Tensor]:
        """Logits and hidden states for every target position in one pass.

        Position i predicts target_ids[i + 1]; returns (|target|-1) rows.
        """
        return self.teacher_forced_states(self.encode(context_ids), target_ids)

    # -- inference -----------------------------------------------------------------

    def generate_template(self, context_ids: list[int],
                          max_len: int | None = None) -> TemplateResult:
        """Greedy decoding until [EOS] or the length bound.

        [BOS]/[EOS] are excluded from the emitted token list; hidden states
        are collected at each emitted position and split into slot rows and
        word rows.
        """
        max_len = self.cfg.max_target if max_len is None else max_len
        if max_len < 1:
            raise ContractError(f"max_len must be >= 1, got {max_len}")
        enc = self.encode(context_ids)
        prefix = [BOS]
        tokens: list[int] = []
        slot_positions: list[int] = []
        states: list[Tensor] = []
        while len(tokens) < max_len:
            dist, hidden = self.next_token_distribution(prefix, enc)
            token = int(np.argmax(dist))
            if token == EOS:
                break
            if token == ITEM:
                slot_positions.append(len(tokens))
            tokens.append(token)
            states.append(hidden)
            prefix.append(token)
        d = self.cfg.d_model
        empty = Tensor(np.zeros((0, d), dtype=self.dtype))
        hidden_all = T.concat_rows(states) if states else empty
        slot_set = set(slot_positions)
        word_rows = [i for i in range(len(tokens)) if i not in slot_set]
        e_slot = T.gather_rows(hidden_all, slot_positions) if slot_positions else empty
        e_word = T.gather_rows(hidden_all, word_rows) if word_rows else empty
        return TemplateResult(tokens=tokens, slot_positions=slot_positions,
                              e_slot=e_slot, e_word=e_word, encoder_state=enc,
                              hidden_states=hidden_all)


def slot_and_word_states(states: Tensor, predicted_targets: list[int],
                         d_model: int, dtype=np.float64) -> tuple[Tensor, Tensor]:
    """Split teacher-forced states by whether the position predicts [ITEM]."""
    slot_rows = [i for i, t in enumerate(predicted_targets) if t == ITEM]
    word_rows = [i for i, t in enumerate(predicted_targets)
                 if t != ITEM and t != EOS]
    empty = Tensor(np.zeros((0, d_model), dtype=dtype))
    e_slot = T.gather_rows(states, slot_rows) if slot_rows else empty
    e_word = T.gather_rows(states, word_rows) if word_rows else empty
    return e_slot, e_word
