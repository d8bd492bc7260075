"""Task heads: hand-computed oracles for scores, losses, and decoding."""

import math
import random

import numpy as np
import pytest
import torch

from plmkit.heads import (
    ClsHead,
    GlobalPointerHead,
    MultiChoiceHead,
    SpanPrediction,
    TokenLabelHead,
    Verbalizer,
    decode_spans,
    global_pointer_loss,
    multichoice_logits,
    prototype_classify,
    spans_to_grid,
    token_label_loss_sum,
    verbalizer_predict,
)
from plmkit.tokenizer import Tokenizer

NEG_INF = float("-inf")


def random_masked_scores(rng, batch, num_types, seq_len, lengths=None):
    """Random span scores with the head's invalid-cell convention applied."""
    g = torch.Generator().manual_seed(rng.randrange(2 ** 31))
    scores = torch.rand(batch, num_types, seq_len, seq_len, generator=g) * 6 - 3
    scores = scores.double()
    if lengths is None:
        lengths = [rng.randint(1, seq_len) for _ in range(batch)]
    for b, n in enumerate(lengths):
        scores[b, :, n:, :] = NEG_INF
        scores[b, :, :, n:] = NEG_INF
    for i in range(seq_len):
        scores[:, :, i, :i] = NEG_INF
    return scores, lengths


class TestGlobalPointerHead:
    def test_score_shape_and_invalid_cells(self):
        head = GlobalPointerHead(hidden_size=8, num_types=3, seed=1)
        hidden = torch.randn(2, 5, 8, generator=torch.Generator().manual_seed(0))
        mask = torch.tensor([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]])
        s = head(hidden, mask)
        assert s.shape == (2, 3, 5, 5)
        for i in range(5):
            for j in range(i):
                assert (s[:, :, i, j] == NEG_INF).all()
        assert (s[1, :, :, 3:] == NEG_INF).all()
        assert (s[1, :, 3:, :] == NEG_INF).all()
        assert torch.isfinite(s[0, :, 0, 4]).all()

    def test_bilinear_score_hand_value(self):
        """With identity projections, score[i,j] = h_i . h_j / sqrt(d)."""
        head = GlobalPointerHead(hidden_size=2, num_types=1, seed=0)
        with torch.no_grad():
            head.q_proj.weight.copy_(torch.eye(2))
            head.q_proj.bias.zero_()
            head.k_proj.weight.copy_(torch.eye(2))
            head.k_proj.bias.zero_()
        hidden = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
        mask = torch.ones(1, 2, dtype=torch.long)
        with torch.no_grad():
            s = head(hidden, mask)
        rt2 = math.sqrt(2.0)
        np.testing.assert_allclose(float(s[0, 0, 0, 0]), 5.0 / rt2, rtol=1e-6)
        np.testing.assert_allclose(float(s[0, 0, 0, 1]), 11.0 / rt2, rtol=1e-6)
        np.testing.assert_allclose(float(s[0, 0, 1, 1]), 25.0 / rt2, rtol=1e-6)
        assert float(s[0, 0, 1, 0]) == NEG_INF

    def test_needs_a_type(self):
        with pytest.raises(ValueError):
            GlobalPointerHead(hidden_size=4, num_types=0)


class TestGlobalPointerLoss:
    def brute_force(self, scores, gold):
        """Independent scalar recomputation in plain Python floats."""
        total = 0.0
        b_, t_, l_, _ = scores.shape
        for b in range(b_):
            for t in range(t_):
                pos_sum = 0.0
                neg_sum = 0.0
                for i in range(l_):
                    for j in range(l_):
                        s = float(scores[b, t, i, j])
                        if gold[b, t, i, j] > 0:
                            pos_sum += math.exp(-s)
                        elif s != NEG_INF:
                            neg_sum += math.exp(s)
                total += math.log1p(pos_sum) + math.log1p(neg_sum)
        return total

    def test_matches_brute_force(self):
        rng = random.Random(42)
        for _ in range(60):
            B, T, L = rng.randint(1, 2), rng.randint(1, 3), rng.randint(2, 6)
            scores, lengths = random_masked_scores(rng, B, T, L)
            gold = torch.zeros(B, T, L, L)
            for b in range(B):
                for t in range(T):
                    for _ in range(rng.randint(0, 3)):
                        i = rng.randrange(lengths[b])
                        j = rng.randrange(i, lengths[b])
                        gold[b, t, i, j] = 1.0
            got = float(global_pointer_loss(scores, gold))
            want = self.brute_force(scores, gold)
            np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)

    def test_raising_gold_score_lowers_loss(self):
        rng = random.Random(7)
        for _ in range(25):
            scores, lengths = random_masked_scores(rng, 1, 1, 5)
            n = lengths[0]
            i = rng.randrange(n)
            j = rng.randrange(i, n)
            gold = torch.zeros(1, 1, 5, 5)
            gold[0, 0, i, j] = 1.0
            base = float(global_pointer_loss(scores, gold))
            scores[0, 0, i, j] += 0.5
            assert float(global_pointer_loss(scores, gold)) < base

    def test_empty_gold_loss_is_negative_term_only(self):
        scores = torch.full((1, 1, 2, 2), NEG_INF, dtype=torch.float64)
        scores[0, 0, 0, 0] = 1.0
        gold = torch.zeros(1, 1, 2, 2)
        want = math.log1p(math.exp(1.0))
        np.testing.assert_allclose(float(global_pointer_loss(scores, gold)), want,
                                   rtol=1e-12)


class TestDecodeSpans:
    def test_matches_brute_force_enumeration(self):
        rng = random.Random(9)
        for _ in range(50):
            B, T, L = rng.randint(1, 2), rng.randint(1, 3), rng.randint(2, 8)
            scores, lengths = random_masked_scores(rng, B, T, L)
            thr = rng.uniform(-1, 1)
            mask = torch.zeros(B, L, dtype=torch.long)
            for b, n in enumerate(lengths):
                mask[b, :n] = 1
            got = decode_spans(scores, mask, thr)
            for b in range(B):
                want = sorted(
                    (t, i, j)
                    for t in range(T)
                    for i in range(L)
                    for j in range(L)
                    if float(scores[b, t, i, j]) > thr
                )
                assert [(s.type_id, s.start, s.end) for s in got[b]] == want

    def test_scores_attached(self):
        scores = torch.full((1, 1, 2, 2), NEG_INF)
        scores[0, 0, 0, 1] = 2.5
        mask = torch.ones(1, 2, dtype=torch.long)
        spans = decode_spans(scores, mask, 0.0)
        assert spans == [[SpanPrediction(0, 0, 1)]]
        assert spans[0][0].score == 2.5


class TestSpanGrid:
    def test_grid_round_trip(self):
        grid = spans_to_grid([[(0, 1, 2)], [(1, 0, 0), (0, 2, 3)]], num_types=2, seq_len=4)
        assert grid.shape == (2, 2, 4, 4)
        assert grid[0, 0, 1, 2] == 1.0
        assert grid[1, 1, 0, 0] == 1.0
        assert float(grid.sum()) == 3.0

    def test_rejects_bad_spans(self):
        with pytest.raises(ValueError):
            spans_to_grid([[(0, 2, 1)]], num_types=1, seq_len=4)  # end < start
        with pytest.raises(ValueError):
            spans_to_grid([[(1, 0, 1)]], num_types=1, seq_len=4)  # type out of range
        with pytest.raises(ValueError):
            spans_to_grid([[(0, 0, 4)]], num_types=1, seq_len=4)  # end out of range


class TestSpanPrediction:
    def test_identity_ignores_score(self):
        assert SpanPrediction(0, 1, 2, 0.5) == SpanPrediction(0, 1, 2, 9.9)
        assert len({SpanPrediction(0, 1, 2, 0.5), SpanPrediction(0, 1, 2, 1.5)}) == 1
        assert SpanPrediction(0, 1, 2) != SpanPrediction(0, 1, 3)


class TestClsHead:
    def test_uses_first_position_only(self):
        head = ClsHead(hidden_size=8, num_labels=3, seed=2)
        g = torch.Generator().manual_seed(1)
        hidden = torch.randn(2, 5, 8, generator=g)
        base = head(hidden)
        assert base.shape == (2, 3)
        hidden2 = hidden.clone()
        hidden2[:, 1:] = torch.randn(2, 4, 8, generator=g)
        assert torch.equal(head(hidden2), base)

    def test_needs_two_labels(self):
        with pytest.raises(ValueError):
            ClsHead(hidden_size=8, num_labels=1)


class TestVerbalizer:
    def make_tokenizer(self):
        return Tokenizer(["good", "bad", "fine", "awful"])

    def test_build_and_predict_hand_value(self):
        tok = self.make_tokenizer()
        v = Verbalizer.build({0: ["bad", "awful"], 1: ["good"]}, tok)
        V = tok.vocab_size
        logits = torch.zeros(1, 3, V)
        logits[0, 1, tok.lookup("bad")] = 2.0
        logits[0, 1, tok.lookup("awful")] = 4.0
        logits[0, 1, tok.lookup("good")] = 5.0
        out = verbalizer_predict(logits, torch.tensor([1]), v)
        np.testing.assert_allclose(out.detach().numpy(), [[3.0, 5.0]], rtol=1e-6)

    def test_rejects_multiword(self):
        with pytest.raises(ValueError, match="single token"):
            Verbalizer.build({0: ["very bad"], 1: ["good"]}, self.make_tokenizer())

    def test_rejects_oov(self):
        with pytest.raises(ValueError, match="not in vocabulary"):
            Verbalizer.build({0: ["bad"], 1: ["stupendous"]}, self.make_tokenizer())

    def test_rejects_gaps_in_label_ids(self):
        with pytest.raises(ValueError, match="contiguous"):
            Verbalizer.build({0: ["bad"], 2: ["good"]}, self.make_tokenizer())

    def test_rejects_empty_word_list(self):
        with pytest.raises(ValueError, match="no label words"):
            Verbalizer.build({0: [], 1: ["good"]}, self.make_tokenizer())


class TestTokenLabelHead:
    def test_shapes(self):
        head = TokenLabelHead(hidden_size=8, num_labels=4, seed=3)
        hidden = torch.randn(2, 6, 8, generator=torch.Generator().manual_seed(0))
        assert head(hidden).shape == (2, 6, 4)

    def test_loss_sum_hand_value(self):
        logits = torch.tensor([[[0.0, 1.0], [2.0, 0.0], [0.0, 0.0]]])
        labels = torch.tensor([[1, -100, 0]])
        loss, n = token_label_loss_sum(logits, labels)
        want = -math.log(math.exp(1.0) / (1 + math.exp(1.0))) - math.log(0.5)
        assert n == 2
        np.testing.assert_allclose(float(loss), want, rtol=1e-6)

    def test_all_ignored(self):
        logits = torch.randn(1, 2, 3, generator=torch.Generator().manual_seed(0))
        loss, n = token_label_loss_sum(logits, torch.full((1, 2), -100))
        assert n == 0 and float(loss) == 0.0


class TestMultiChoice:
    def test_logit_grouping(self):
        scores = torch.tensor([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        out = multichoice_logits(scores, num_choices=3)
        assert out.tolist() == [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]

    def test_divisibility_enforced(self):
        with pytest.raises(ValueError):
            multichoice_logits(torch.zeros(5), num_choices=3)

    def test_head_scalar_per_encoding(self):
        head = MultiChoiceHead(hidden_size=8, seed=4)
        hidden = torch.randn(6, 4, 8, generator=torch.Generator().manual_seed(0))
        assert head(hidden).shape == (6,)


class TestPrototypes:
    def test_nearest_prototype(self):
        support = torch.tensor([[0.0, 0.0], [0.2, 0.0], [5.0, 5.0], [4.8, 5.0]])
        labels = torch.tensor([0, 0, 1, 1])
        queries = torch.tensor([[0.3, 0.1], [4.6, 4.9]])
        out = prototype_classify(support, labels, queries)
        assert out.tolist() == [0, 1]

    def test_tie_goes_to_smallest_class(self):
        support = torch.tensor([[0.0, 0.0], [2.0, 2.0]])
        labels = torch.tensor([0, 1])
        queries = torch.tensor([[1.0, 1.0]])  # exactly between both prototypes
        assert prototype_classify(support, labels, queries).tolist() == [0]

    def test_noncontiguous_class_ids(self):
        support = torch.tensor([[0.0], [10.0]])
        labels = torch.tensor([3, 7])
        queries = torch.tensor([[1.0], [9.0]])
        assert prototype_classify(support, labels, queries).tolist() == [3, 7]
