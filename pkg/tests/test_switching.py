"""Switching baseline: gate, mixture, closed-world decoding."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ntrd import tensor as T
from ntrd.corpus import BOS, EOS, ITEM, MaskedExample, Vocabulary, RESERVED_TOKENS
from ntrd.errors import ContractError
from ntrd.generator import GeneratorConfig
from ntrd.kg import KnowledgeGraph, Recommender, pretrain_recommender
from ntrd.optim import AdamState, adam_step, clip_gradients
from ntrd.switching import SwitchingModel, mix
from ntrd.tensor import Tape, Tensor, backward


def random_distribution(rng, n):
    x = rng.random(n) + 1e-6
    return x / x.sum()


class TestMix:
    def test_gate_one_keeps_word_block(self):
        p_dial = np.array([0.25, 0.75])
        p_rec = np.array([0.5, 0.5])
        joint = mix(p_dial, p_rec, 1.0)
        np.testing.assert_array_equal(joint, [0.25, 0.75, 0.0, 0.0])

    def test_gate_zero_keeps_item_block(self):
        joint = mix(np.array([1.0]), np.array([0.3, 0.7]), 0.0)
        np.testing.assert_array_equal(joint, [0.0, 0.3, 0.7])

    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
    @settings(max_examples=60, deadline=None)
    def test_convex_combination_sums_to_one(self, seed, p_s):
        rng = np.random.default_rng(seed)
        joint = mix(random_distribution(rng, 5), random_distribution(rng, 3), p_s)
        assert abs(joint.sum() - 1.0) < 1e-6
        assert (joint >= 0).all()

    def test_unnormalized_input_rejected(self):
        with pytest.raises(ContractError):
            mix(np.array([0.5, 0.6]), np.array([1.0]), 0.5)
        with pytest.raises(ContractError):
            mix(np.array([1.0]), np.array([0.2, 0.2]), 0.5)

    def test_extreme_gate_argmax_matches_block(self):
        rng = np.random.default_rng(3)
        p_dial = random_distribution(rng, 6)
        p_rec = random_distribution(rng, 4)
        assert np.argmax(mix(p_dial, p_rec, 1.0)) == np.argmax(p_dial)
        assert np.argmax(mix(p_dial, p_rec, 0.0)) == 6 + np.argmax(p_rec)


def micro_setup(seed=0):
    tokens = RESERVED_TOKENS + ["hi", "watch", "tonight", "comedy"]
    vocab = Vocabulary({t: i for i, t in enumerate(tokens)})
    kg = KnowledgeGraph.from_triples([("7", "has_genre", "comedy"),
                                      ("9", "has_genre", "comedy")])
    recommender = Recommender(kg, [7, 9], dim=8, prop_layers=1,
                              rng=np.random.default_rng(seed))
    cfg = GeneratorConfig(vocab_size=len(vocab), d_model=16, heads=2,
                          enc_layers=1, dec_layers=1, max_context=32,
                          max_target=10)
    model = SwitchingModel(cfg, [7, 9], recommender,
                           rng=np.random.default_rng(seed + 1))
    model.vocab = vocab
    model.catalog = {7: "Seven", 9: "Nine"}
    return vocab, kg, recommender, model


class TestGate:
    def test_zero_weights_give_half(self):
        _, _, _, model = micro_setup()
        model.gate_w.data[:] = 0.0
        model.gate_b.data[:] = 0.0
        e = Tensor(np.random.default_rng(0).normal(size=(1, 16)))
        z = T.add(T.matmul(e, model.gate_w), model.gate_b)
        assert T.sigmoid(z).data[0, 0] == 0.5

    def test_large_bias_saturates(self):
        _, _, _, model = micro_setup()
        model.gate_b.data[:] = 100.0
        e = Tensor(np.zeros((1, 16)))
        z = T.add(T.matmul(e, model.gate_w), model.gate_b)
        assert T.sigmoid(z).data[0, 0] > 1 - 1e-12

    def test_matches_direct_sigmoid_evaluation(self):
        rng = np.random.default_rng(5)
        _, _, _, model = micro_setup()
        model.gate_w.data[:] = rng.normal(size=(16, 1))
        model.gate_b.data[:] = 0.37
        e = rng.normal(size=(1, 16))
        z = float((e @ model.gate_w.data + model.gate_b.data)[0, 0])
        direct = 1.0 / (1.0 + math.exp(-z))
        got = T.sigmoid(T.add(T.matmul(Tensor(e), model.gate_w),
                              model.gate_b)).data[0, 0]
        assert abs(got - direct) < 1e-12


class TestGenerate:
    def test_gate_forced_open_emits_no_items(self):
        vocab, _, _, model = micro_setup()
        model.gate_b.data[:] = 100.0  # joint mass stays on the word block
        turn = model.generate([vocab.token_to_id["hi"]], [], vocab, model.catalog,
                              max_len=6)
        assert turn.emitted_items == []

    def test_closed_world_output(self):
        vocab, _, _, model = micro_setup()
        turn = model.generate([vocab.token_to_id["hi"]], [], vocab,
                              model.catalog, max_len=8)
        titles = {"Seven", "Nine"}
        for tok in turn.tokens:
            assert tok in vocab.token_to_id or tok in {w for t in titles
                                                       for w in t.split()}

    def test_overfit_reproduces_training_response(self):
        vocab, kg, recommender, model = micro_setup(seed=2)
        hi = vocab.token_to_id["hi"]
        watch = vocab.token_to_id["watch"]
        tonight = vocab.token_to_id["tonight"]
        example = MaskedExample(
            conversation_id="c", turn_index=1, context_ids=[hi],
            target_ids=[BOS, watch, ITEM, tonight, EOS], slot_items=[7],
            context_item_ids=[])
        comedy = kg.entity_index["comedy"]
        pretrain_recommender(recommender, [([comedy], 7)], seed=0)
        params = [(n, p) for n, p in model.named_parameters()
                  if not n.startswith("recommender.")]
        state = AdamState(params, lr=5e-3)
        p_rec = model.item_block_distribution([comedy])
        for _ in range(150):
            with Tape():
                part, _, count = model.sequence_loss_terms(example, p_rec)
                backward(T.scale(part, 1.0 / count))
            adam_step(params, state)
        turn = model.generate([hi], [comedy], vocab, model.catalog, max_len=8)
        assert turn.tokens == ["watch", "Seven", "tonight"]
        assert turn.emitted_items == [(1, 7)]

    def test_out_of_block_item_scored_at_floor(self):
        vocab, kg, recommender, model = micro_setup()
        example = MaskedExample(
            conversation_id="c", turn_index=1,
            context_ids=[vocab.token_to_id["hi"]],
            target_ids=[BOS, ITEM, EOS], slot_items=[999],
            context_item_ids=[])
        with pytest.raises(ContractError):
            model.joint_ids(example)
        nlls = model.sequence_nlls(example, model.item_block_distribution([]))
        assert nlls[0] > 600  # probability floor, the closed world made visible
