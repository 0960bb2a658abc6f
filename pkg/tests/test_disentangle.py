import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fundmatch import numerics as nx
from fundmatch.disentangle import (
    ASPECTS,
    BehaviorSequence,
    DisentangleParams,
    disentangle,
    gather_behavior,
    pad_sequences,
)
from fundmatch.errors import DomainError
from fundmatch.numerics import Tensor


def params_from(w, wi, wr, wc):
    return DisentangleParams(Tensor(w, requires_grad=True),
                             {a: Tensor(v, requires_grad=True) for a, v in zip(ASPECTS, (wi, wr, wc))})


def scalar_attention_pool(x, w, vec):
    """Loop-only recomputation of tanh scores, softmax and weighted sum."""
    n, d = len(x), len(x[0])
    scores = []
    for i in range(n):
        hidden = [math.tanh(sum(x[i][k] * w[k][j] for k in range(d))) for j in range(d)]
        scores.append(sum(h * v for h, v in zip(hidden, vec)))
    m = max(scores)
    ex = [math.exp(s - m) for s in scores]
    z = sum(ex)
    att = [e / z for e in ex]
    return [sum(att[i] * x[i][j] for i in range(n)) for j in range(d)], att


TABLE = Tensor(np.arange(20.0).reshape(5, 4))


class TestGather:
    def test_single(self):
        x = gather_behavior(BehaviorSequence(0, [3], [0]), TABLE)
        np.testing.assert_array_equal(x.data, TABLE.data[[3]])

    def test_repeated(self):
        x = gather_behavior(BehaviorSequence(0, [1, 1], [0, 0]), TABLE)
        np.testing.assert_array_equal(x.data[0], x.data[1])

    def test_three_rows(self):
        x = gather_behavior(BehaviorSequence(0, [4, 0, 2], [0, 0, 0]), TABLE)
        np.testing.assert_array_equal(x.data, TABLE.data[[4, 0, 2]])

    def test_unknown_fund(self):
        with pytest.raises(IndexError):
            gather_behavior(BehaviorSequence(0, [9], [0]), TABLE)

    def test_empty_sequence_rejected(self):
        with pytest.raises(DomainError):
            BehaviorSequence(0, [], [])


class TestDisentangle:
    def test_singleton_sequence(self):
        rng = np.random.default_rng(0)
        p = DisentangleParams.init(3, rng)
        x = Tensor([[0.2, -0.4, 1.0]])
        out = disentangle(x, p)
        for a in ASPECTS:
            np.testing.assert_allclose(out.vectors[a].data, x.data[0], atol=1e-15)

    def test_tied_heads_give_equal_vectors(self):
        rng = np.random.default_rng(1)
        w, v = rng.normal(size=(3, 3)), rng.normal(size=3)
        out = disentangle(Tensor(rng.normal(size=(4, 3))), params_from(w, v, v, rng.normal(size=3)))
        np.testing.assert_array_equal(out.x_I.data, out.x_R.data)

    def test_hand_example(self):
        x = [[1.0, 0.0], [0.0, 1.0]]
        out = disentangle(Tensor(x), params_from(np.eye(2), [1.0, 0.0], [0.0, 1.0], [0.5, 0.5]))
        np.testing.assert_allclose(out.attention["I"], [0.68169974, 0.31830026], atol=1e-8)
        np.testing.assert_allclose(out.x_I.data, [0.68169974, 0.31830026], atol=1e-8)
        ref, att = scalar_attention_pool(x, [[1, 0], [0, 1]], [1.0, 0.0])
        np.testing.assert_allclose(out.x_I.data, ref, atol=1e-14)

    def test_matches_scalar_oracle_random(self):
        rng = np.random.default_rng(2)
        x, w = rng.normal(size=(6, 4)), rng.normal(size=(4, 4))
        vecs = [rng.normal(size=4) for _ in ASPECTS]
        out = disentangle(Tensor(x), params_from(w, *vecs))
        for a, v in zip(ASPECTS, vecs):
            ref, att = scalar_attention_pool(x.tolist(), w.tolist(), v.tolist())
            np.testing.assert_allclose(out.vectors[a].data, ref, atol=1e-13)
            np.testing.assert_allclose(out.attention[a], att, atol=1e-13)

    def test_batched_matches_unbatched(self):
        rng = np.random.default_rng(3)
        p = DisentangleParams.init(4, rng)
        table = Tensor(rng.normal(size=(10, 4)))
        seqs = [BehaviorSequence(0, [1, 2, 3], [0] * 3), BehaviorSequence(1, [5], [0]),
                BehaviorSequence(2, [7, 7, 0, 9], [0] * 4)]
        funds, _, mask = pad_sequences(seqs)
        batch = disentangle(nx.embedding(table, funds), p, mask)
        for i, s in enumerate(seqs):
            single = disentangle(gather_behavior(s, table), p)
            for a in ASPECTS:
                np.testing.assert_allclose(batch.vectors[a].data[i], single.vectors[a].data, atol=1e-14)
            assert batch.attention["I"][i, len(s):].sum() == 0.0

    def test_pad_exclude_masks_target(self):
        seqs = [BehaviorSequence(0, [1, 2, 1], [0, 0, 0]), BehaviorSequence(1, [4], [0])]
        _, _, mask = pad_sequences(seqs, exclude=[1, 4])
        assert mask.tolist() == [[False, True, False], [False, False, False]]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 10_000))
    def test_convex_hull_and_distribution(self, n, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, 3))
        out = disentangle(Tensor(x), DisentangleParams.init(3, rng, std=1.0))
        for a in ASPECTS:
            att = out.attention[a]
            assert (att >= 0).all() and abs(att.sum() - 1) <= 1e-9
            v = out.vectors[a].data
            assert (v >= x.min(axis=0) - 1e-12).all() and (v <= x.max(axis=0) + 1e-12).all()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 7), st.integers(0, 10_000))
    def test_row_permutation(self, n, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, 3))
        p = DisentangleParams.init(3, rng, std=1.0)
        perm = rng.permutation(n)
        a, b = disentangle(Tensor(x), p), disentangle(Tensor(x[perm]), p)
        for k in ASPECTS:
            np.testing.assert_allclose(a.vectors[k].data, b.vectors[k].data, atol=1e-12)
            np.testing.assert_allclose(a.attention[k][perm], b.attention[k], atol=1e-12)

    def test_score_shift_invariance(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(5, 3))
        p = DisentangleParams.init(3, rng, std=1.0)
        out = disentangle(Tensor(x), p)
        scores = np.tanh(x @ p.base_weight.data) @ p.aspect_vectors["R"].data
        for c in (-30.0, 0.0, 4.2):
            shifted = nx.softmax(Tensor(scores + c)).data
            np.testing.assert_allclose(x.T @ shifted, out.x_R.data, atol=1e-13)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        for trial in range(10):
            x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
            p = DisentangleParams.init(3, rng, std=0.5)
            proj = rng.normal(size=3)
            for a in ASPECTS:
                f = lambda _: (disentangle(x, p).vectors[a] * proj).sum()  # noqa: E731
                for t in (x, p.base_weight, p.aspect_vectors[a]):
                    assert nx.grad_check(f, t) < 1e-4
