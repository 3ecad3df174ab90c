import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from desklst import bleu as B
from desklst.errors import UsageError


def test_identity_is_100():
    h = ["a b c d e", "f g h i"]
    assert B.corpus_bleu(h, h).bleu == 100.0


def test_brevity_penalty_case():
    r = B.corpus_bleu(["a b c d"], ["a b c d e"])
    assert r.precisions == [100.0] * 4
    assert r.bp == pytest.approx(math.exp(-0.25))
    assert r.bleu == pytest.approx(77.88, abs=0.01)


def test_disjoint_is_zero_with_precisions():
    r = B.corpus_bleu(["a b c d"], ["w x y z"])
    assert r.bleu == 0.0 and r.precisions == [0.0] * 4


def test_empty_hypothesis_and_errors():
    r = B.corpus_bleu([""], ["a b"])
    assert r.bleu == 0.0 and r.hyp_len == 0
    with pytest.raises(UsageError):
        B.corpus_bleu(["a"], ["a", "b"])
    with pytest.raises(UsageError):
        B.corpus_bleu([], [])


def test_clipping_and_hand_example():
    # p1 = 2/4 (clipped "the" counts), p2..p4 = 0 -> BLEU 0 but p1 reported
    r = B.corpus_bleu(["the the the the"], ["the cat the mat"])
    assert r.precisions[0] == 50.0 and r.bleu == 0.0
    # geometric mean of (4/5, 3/4, 2/3, 1/2), no brevity penalty
    r = B.corpus_bleu(["a b c d x"], ["a b c d y"])
    assert r.bleu == pytest.approx(100 * (0.8 * 0.75 * (2 / 3) * 0.5) ** 0.25, rel=1e-12)


def test_short_corpus_self_bleu_and_opt_in_smoothing():
    assert B.corpus_bleu(["a b c"], ["a b c"]).bleu == 100.0
    assert B.corpus_bleu(["a b c d"], ["a b x d"]).bleu == 0.0
    assert B.corpus_bleu(["a b c d"], ["a b x d"], smooth_floor=0.1).bleu > 0.0


sentences = st.lists(st.lists(st.sampled_from("abcdef"), min_size=1, max_size=8).map(" ".join),
                     min_size=1, max_size=8)


@settings(max_examples=60, deadline=None)
@given(sentences, st.randoms(use_true_random=False))
def test_self_bleu_and_permutation_invariance(hyps, rnd):
    refs = [" ".join(reversed(h.split())) for h in hyps]
    assert B.corpus_bleu(hyps, hyps).bleu == 100.0
    order = list(range(len(hyps)))
    rnd.shuffle(order)
    a = B.corpus_bleu(hyps, refs)
    b = B.corpus_bleu([hyps[i] for i in order], [refs[i] for i in order])
    assert a.bleu == b.bleu


@settings(max_examples=60, deadline=None)
@given(sentences, st.integers(1, 4))
def test_bucket_stats_recombine_exactly(hyps, k):
    refs = [h[::-1] for h in hyps]
    parts = [list(range(i, len(hyps), k)) for i in range(k)]
    pooled = B.BleuStats()
    for p in parts:
        if p:
            pooled = pooled + B.corpus_stats([hyps[i] for i in p], [refs[i] for i in p])
    assert B.score_stats(pooled).bleu == B.corpus_bleu(hyps, refs).bleu
