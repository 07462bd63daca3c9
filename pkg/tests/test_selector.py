"""Item selector: attention fusion stages, scoring, and slot filling."""

import math

import numpy as np
import pytest

from ntrd.attention import MultiHeadAttention
from ntrd.errors import ContractError
from ntrd.kg import CandidateSet
from ntrd.selector import (ItemDistribution, ItemSelector, SelectorConfig,
                           fill_slots)
from ntrd.tensor import Tensor

from .oracles import grad_check


# -- independent numpy re-evaluation of the fusion math (the hand oracle) ----

def np_softmax_rows(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def np_layer_norm(x, gain, bias, eps=1e-5):
    m = x.mean(axis=-1, keepdims=True)
    c = x - m
    v = (c * c).mean(axis=-1, keepdims=True)
    return gain * (c / np.sqrt(v + eps)) + bias


def np_mha(q, k, v, block):
    attn = block.attn
    outs = []
    for h in range(attn.heads):
        qq = q @ attn.w_q[h].data
        kk = k @ attn.w_k[h].data
        vv = v @ attn.w_v[h].data
        scores = (qq @ kk.T) / math.sqrt(attn.d_head)
        outs.append(np_softmax_rows(scores) @ vv)
    return np.concatenate(outs, axis=1) @ attn.w_out.data


def np_stage(q, kv, stage):
    a = np_mha(q, kv, kv, stage.attend)
    x = np_layer_norm(q + a, stage.attend.ln_gain.data, stage.attend.ln_bias.data)
    ffn = stage.ffn
    hidden = np.maximum(x @ ffn.w1.data + ffn.b1.data, 0.0)
    out = hidden @ ffn.w2.data + ffn.b2.data
    return np_layer_norm(x + out, ffn.ln_gain.data, ffn.ln_bias.data)


def selector(d_model=6, d_item=4, heads=1, seed=0):
    return ItemSelector(SelectorConfig(d_model=d_model, d_item=d_item, heads=heads),
                        rng=np.random.default_rng(seed))


def cand_set(embeddings, ids=None):
    embeddings = np.asarray(embeddings, dtype=np.float64)
    k = embeddings.shape[0]
    ids = ids if ids is not None else list(range(k))
    return CandidateSet(item_ids=list(ids), entity_idxs=list(range(k)),
                        scores=np.linspace(1.0, 0.5, k), embeddings=embeddings)


class TestMultiHeadAttention:
    def test_single_key_attends_fully(self):
        r = np.random.default_rng(3)
        mha = MultiHeadAttention(4, 2, r)
        q = Tensor(r.normal(size=(3, 4)))
        kv = Tensor(r.normal(size=(1, 4)))
        out = mha(q, kv, kv)
        # softmax over one key is exactly 1, so output = value projection, any query
        expected = np.concatenate(
            [kv.data @ mha.w_v[h].data for h in range(2)], axis=1) @ mha.w_out.data
        np.testing.assert_allclose(out.data, np.repeat(expected, 3, axis=0), atol=1e-12)

    def test_hand_computed_single_head(self):
        r = np.random.default_rng(1)
        mha = MultiHeadAttention(2, 1, r)
        wq, wk, wv, wo = (np.array([[0.5, 0.0], [0.0, 1.0]]),
                          np.array([[1.0, 0.5], [0.0, 0.5]]),
                          np.array([[1.0, 0.0], [0.0, -1.0]]),
                          np.array([[1.0, 0.0], [0.0, 1.0]]))
        mha.w_q[0].data[:] = wq
        mha.w_k[0].data[:] = wk
        mha.w_v[0].data[:] = wv
        mha.w_out.data[:] = wo
        q = np.array([[1.0, 2.0]])
        kv = np.array([[1.0, 0.0], [0.0, 1.0]])
        scores = ((q @ wq) @ (kv @ wk).T) / math.sqrt(2)
        weights = np_softmax_rows(scores)
        expected = (weights @ (kv @ wv)) @ wo
        out = mha(Tensor(q), Tensor(kv), Tensor(kv))
        np.testing.assert_allclose(out.data, expected, atol=1e-9)

    def test_joint_key_value_permutation_invariance(self):
        r = np.random.default_rng(7)
        mha = MultiHeadAttention(6, 2, r)
        q = Tensor(r.normal(size=(2, 6)))
        k = r.normal(size=(5, 6))
        perm = [3, 0, 4, 1, 2]
        out = mha(q, Tensor(k), Tensor(k))
        out_p = mha(q, Tensor(k[perm]), Tensor(k[perm]))
        np.testing.assert_allclose(out_p.data, out.data, atol=1e-12)

    def test_mismatched_key_value_rows(self):
        r = np.random.default_rng(0)
        mha = MultiHeadAttention(4, 1, r)
        with pytest.raises(Exception):
            mha(Tensor(np.zeros((1, 4))), Tensor(np.zeros((2, 4))),
                Tensor(np.zeros((3, 4))))


class TestFuse:
    def test_zero_weights_reduce_to_layer_norm_chain(self):
        sel = selector(d_model=4, d_item=3, heads=1, seed=2)
        for _, p in sel.named_parameters():
            if p.data.ndim == 2:
                p.data[:] = 0.0  # weight matrices only; norm gains stay 1
        r = np.random.default_rng(5)
        e_slot = r.normal(size=(2, 4))
        trace = sel.fuse(Tensor(e_slot), Tensor(r.normal(size=(3, 4))),
                         Tensor(r.normal(size=(2, 4))),
                         Tensor(r.normal(size=(2, 3))))
        expected = e_slot
        for _ in range(3):  # each stage applies two residual layer norms
            expected = np_layer_norm(expected, 1.0, 0.0)
            expected = np_layer_norm(expected, 1.0, 0.0)
        np.testing.assert_allclose(trace.fused.data, expected, atol=1e-12)

    def test_stage_shapes_preserved(self):
        sel = selector(d_model=6, d_item=4, heads=2, seed=1)
        r = np.random.default_rng(2)
        trace = sel.fuse(Tensor(r.normal(size=(3, 6))), Tensor(r.normal(size=(4, 6))),
                         Tensor(r.normal(size=(5, 6))), Tensor(r.normal(size=(2, 4))))
        for stage_out in (trace.after_words, trace.after_context, trace.after_candidates):
            assert stage_out.shape == (3, 6)

    def test_empty_word_matrix_degrades_stage_one_to_identity(self):
        sel = selector(seed=3)
        r = np.random.default_rng(4)
        e_slot = Tensor(r.normal(size=(2, 6)))
        trace = sel.fuse(e_slot, Tensor(np.zeros((0, 6))),
                         Tensor(r.normal(size=(3, 6))), Tensor(r.normal(size=(2, 4))))
        np.testing.assert_array_equal(trace.after_words.data, e_slot.data)

    def test_zero_slots_rejected(self):
        sel = selector()
        with pytest.raises(ContractError):
            sel.fuse(Tensor(np.zeros((0, 6))), Tensor(np.zeros((1, 6))),
                     Tensor(np.zeros((1, 6))), Tensor(np.zeros((1, 4))))

    def test_micro_instance_matches_independent_evaluation(self):
        sel = selector(d_model=4, d_item=3, heads=1, seed=8)
        r = np.random.default_rng(9)
        e_slot = r.normal(size=(1, 4))
        e_word = r.normal(size=(2, 4))
        e_ctx = r.normal(size=(2, 4))
        h_cand = r.normal(size=(2, 3))
        trace = sel.fuse(Tensor(e_slot), Tensor(e_word), Tensor(e_ctx), Tensor(h_cand))
        x = np_stage(e_slot, e_word, sel.word_stage)
        x = np_stage(x, e_ctx, sel.context_stage)
        x = np_stage(x, h_cand @ sel.cand_proj.data, sel.candidate_stage)
        np.testing.assert_allclose(trace.fused.data, x, atol=1e-8)


class TestScore:
    def test_single_candidate_probability_one(self):
        sel = selector(seed=5)
        fused = Tensor(np.random.default_rng(1).normal(size=(2, 6)))
        dist = sel.score_candidates(fused, cand_set(np.ones((1, 4))))
        np.testing.assert_array_equal(dist.probabilities, np.ones((2, 1)))

    def test_equal_embeddings_split_evenly(self):
        sel = selector(seed=5)
        fused = Tensor(np.random.default_rng(2).normal(size=(1, 6)))
        emb = np.tile(np.random.default_rng(3).normal(size=4), (2, 1))
        dist = sel.score_candidates(fused, cand_set(emb))
        np.testing.assert_allclose(dist.probabilities, [[0.5, 0.5]], atol=1e-12)

    def test_rows_sum_to_one(self):
        sel = selector(seed=6)
        r = np.random.default_rng(4)
        dist = sel.score_candidates(Tensor(r.normal(size=(3, 6))),
                                    cand_set(r.normal(size=(5, 4))))
        np.testing.assert_allclose(dist.probabilities.sum(axis=1), np.ones(3),
                                   atol=1e-6)

    def test_candidate_permutation_is_exactly_equivariant(self):
        sel = selector(seed=7)
        r = np.random.default_rng(5)
        e_slot = Tensor(r.normal(size=(2, 6)))
        e_word = Tensor(r.normal(size=(2, 6)))
        e_ctx = Tensor(r.normal(size=(3, 6)))
        emb = r.normal(size=(4, 4))
        ids = [11, 5, 8, 2]
        perm = [2, 0, 3, 1]

        def run(order):
            cands = cand_set(emb[order], [ids[i] for i in order])
            trace = sel.fuse(e_slot, e_word, e_ctx, Tensor(cands.embeddings),
                             candidate_ids=cands.item_ids)
            return cands, sel.score_candidates(trace.fused, cands)

        _, base = run([0, 1, 2, 3])
        _, permuted = run(perm)
        np.testing.assert_array_equal(permuted.probabilities,
                                      base.probabilities[:, perm])
        assert permuted.candidate_ids == [ids[i] for i in perm]

    def test_top_k_helper_orders_by_probability(self):
        dist = ItemDistribution([4, 9, 1], np.array([[0.2, 0.5, 0.3]]))
        assert dist.top_k(0, 2) == [9, 1]


class TestFillSlots:
    def test_zero_slots_pass_through(self):
        out = fill_slots(["hello", "there"], [], None, {})
        assert out.tokens == ["hello", "there"] and out.items == []

    def test_substitution_with_title(self):
        dist = ItemDistribution([7], np.array([[1.0]]))
        out = fill_slots(["how", "about", "[ITEM]", "?"], [2], dist, {7: "Borat"})
        assert out.tokens == ["how", "about", "Borat", "?"]
        assert out.items == [7]
        assert out.positions == [2]

    def test_two_slots_filled_independently_in_order(self):
        dist = ItemDistribution([1, 2], np.array([[0.9, 0.1], [0.2, 0.8]]))
        out = fill_slots(["[ITEM]", "and", "[ITEM]"], [0, 2], dist,
                         {1: "One Long Title", 2: "Two"})
        assert out.tokens == ["One", "Long", "Title", "and", "Two"]
        assert out.items == [1, 2]
        assert out.positions == [0, 4]

    def test_argmax_tie_breaks_toward_better_rank(self):
        dist = ItemDistribution([5, 3], np.array([[0.5, 0.5]]))
        assert fill_slots(["[ITEM]"], [0], dist, {}).items == [5]

    def test_no_repeat_filling(self):
        dist = ItemDistribution([1, 2], np.array([[0.9, 0.1], [0.9, 0.1]]))
        out = fill_slots(["[ITEM]", "[ITEM]"], [0, 1], dist,
                         {1: "One", 2: "Two"}, no_repeat=True)
        assert out.items == [1, 2]
        repeated = fill_slots(["[ITEM]", "[ITEM]"], [0, 1], dist,
                              {1: "One", 2: "Two"})
        assert repeated.items == [1, 1]

    def test_row_count_mismatch_rejected(self):
        dist = ItemDistribution([1], np.array([[1.0]]))
        with pytest.raises(ContractError):
            fill_slots(["[ITEM]", "[ITEM]"], [0, 1], dist, {})


class TestSelectorGradients:
    def test_fusion_and_scoring_gradients(self):
        sel = selector(d_model=4, d_item=3, heads=1, seed=11)
        r = np.random.default_rng(12)
        e_slot = Tensor(r.normal(size=(2, 4)))
        e_word = Tensor(r.normal(size=(2, 4)))
        e_ctx = Tensor(r.normal(size=(2, 4)))
        h_cand = Tensor(r.normal(size=(3, 3)))
        checked = [sel.cand_proj, sel.score_w, sel.score_b,
                   sel.word_stage.attend.attn.w_q[0],
                   sel.context_stage.ffn.w1,
                   sel.candidate_stage.attend.ln_gain]

        def loss(record):
            from ntrd import tensor as T
            trace = sel.fuse(e_slot, e_word, e_ctx, h_cand)
            logits = sel.score_logits(trace.fused, h_cand)
            out = T.cross_entropy(logits, [0, 2])
            return out if record else out.item()

        grad_check(loss, checked)
