import math

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spiopt import nn
from spiopt.nn import ParameterSet, Tensor
from spiopt.weighting import ExcitationHead, WeightingError, apply_weights, excite, extract_static_scores, rank, squeeze


def zero_head(m=8, r=4):
    params = ParameterSet()
    head = ExcitationHead(params, m, r)
    for _, t in params.items():
        t.data[...] = 0.0
    return head


def test_hidden_width():
    assert ExcitationHead(ParameterSet(), 784, 16).hidden == 49
    assert ExcitationHead(ParameterSet(), 100, 16).hidden == math.ceil(100 / 16)


def test_squeeze_is_identity():
    y = np.array([1.0, 2.0, 3.0])
    assert squeeze(y) is y
    assert squeeze(squeeze(y)) is y
    with pytest.raises(WeightingError):
        squeeze(np.array([]))


def test_zero_input_zero_bias_gives_half():
    params = ParameterSet()
    head = ExcitationHead(params, 784, 16, np.random.default_rng(0))
    w = excite(head, np.zeros(784)).data
    assert np.all(w == 0.5)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 10), elements=st.floats(-1e3, 1e3)), st.integers(0, 1000))
def test_excitation_strictly_inside_unit_interval(y, seed):
    head = ExcitationHead(ParameterSet(), 10, 3, np.random.default_rng(seed))
    w = excite(head, y).data
    assert w.shape == (3, 10)
    assert np.all((w > 0) & (w < 1))


def test_excite_length_mismatch():
    with pytest.raises(WeightingError):
        excite(ExcitationHead(ParameterSet(), 5, 2), np.zeros(6))


def test_apply_weights():
    rng = np.random.default_rng(0)
    y, w = rng.normal(size=50), rng.uniform(size=50)
    np.testing.assert_array_equal(apply_weights(y, np.ones(50)), y)
    np.testing.assert_array_equal(apply_weights(y, np.zeros(50)), 0.0)
    loop = np.array([w[i] * y[i] for i in range(50)])
    np.testing.assert_allclose(apply_weights(y, w), loop, atol=1e-15)
    assert isinstance(apply_weights(Tensor(y), Tensor(w)), Tensor)


def test_static_scores_single_and_pair():
    rng = np.random.default_rng(1)
    head = ExcitationHead(ParameterSet(), 6, 2, rng)
    a, b = rng.normal(size=6), rng.normal(size=6)
    np.testing.assert_array_equal(extract_static_scores(head, a[None]), excite(head, a).data)
    by_hand = (excite(head, a).data + excite(head, b).data) / 2
    np.testing.assert_allclose(extract_static_scores(head, np.stack([a, b])), by_hand, rtol=1e-15)
    np.testing.assert_array_equal(extract_static_scores(zero_head(), rng.normal(size=(4, 8))), 0.5)


def test_static_scores_batching_independent():
    rng = np.random.default_rng(2)
    head = ExcitationHead(ParameterSet(), 6, 2, rng)
    d = rng.normal(size=(37, 6))
    np.testing.assert_allclose(extract_static_scores(head, d, batch_size=5), extract_static_scores(head, d), rtol=1e-13)


def test_static_scores_empty():
    with pytest.raises(WeightingError):
        extract_static_scores(zero_head(), np.zeros((0, 8)))


def test_rank_examples():
    np.testing.assert_array_equal(rank([0.2, 0.9, 0.5]).permutation, [1, 2, 0])
    np.testing.assert_array_equal(rank([0.3] * 5).permutation, np.arange(5))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0.001, 0.999)), st.floats(0.01, 100))
@example(np.array([0.001, np.nextafter(0.001, 1.0)]), 1.0)
def test_rank_invariances(scores, c):
    r = rank(scores)
    perm = r.permutation
    assert sorted(perm.tolist()) == list(range(len(scores)))
    assert np.all(scores[perm][:-1] >= scores[perm][1:])
    # order-preserving maps; floats may merge neighbours into new ties, which reorder by index
    for mapped in (scores * c, np.log(scores)):
        if len(np.unique(mapped)) == len(np.unique(scores)):
            np.testing.assert_array_equal(rank(mapped).permutation, perm)


def test_ranking_csv():
    text = rank([0.2, 0.9, 0.5]).to_csv().splitlines()
    assert text[0] == "pattern_index,score,rank"
    assert text[1:] == ["0,0.2,2", "1,0.9,0", "2,0.5,1"]


def test_weight_gradient_reaches_excitation():
    rng = np.random.default_rng(4)
    params = ParameterSet()
    head = ExcitationHead(params, 6, 2, rng)
    y = Tensor(rng.normal(size=(5, 6)))
    loss = nn.sum_all(apply_weights(y, excite(head, squeeze(y))))
    nn.backward(loss, params.tensors())
    assert all(np.any(t.grad != 0) for _, t in params.items())
