import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from normlab import attention as att
from normlab.tensor import DegenerateInputError, Tensor


def random_head(rng, n=6, d=4, strategy="no-norm", norm="layer"):
    return att.HeadWeights(
        rng.normal(size=(d, n)), rng.normal(size=(d, n)), rng.normal(size=(d, n)), rng.normal(size=(n, d)),
        att.NormStrategy(strategy, norm),
    )


def test_strategy_validation():
    with pytest.raises(ValueError):
        att.NormStrategy("post-norm")
    with pytest.raises(ValueError):
        att.NormStrategy("pre-norm", gains={"q": np.ones(3)})
    with pytest.raises(ValueError):
        att.HeadWeights(np.ones((3, 4)), np.ones((2, 4)), np.ones((3, 4)), np.ones((4, 3)))


@pytest.mark.parametrize("strategy", att.STRATEGIES)
def test_attention_update_matches_explicit_formula(strategy):
    rng = np.random.default_rng(0)
    h = random_head(rng, strategy=strategy, norm="rms")
    x, Y = rng.normal(size=6), rng.normal(size=(5, 6))
    n = lambda v: math.sqrt(v.shape[-1]) * v / np.linalg.norm(v, axis=-1, keepdims=True)
    W_Q, W_K, W_V, W_O = (w.data for w in (h.W_Q, h.W_K, h.W_V, h.W_O))
    xi, Yk, Yv = (n(x), n(Y), n(Y)) if strategy == "pre-norm" else (x, Y, Y)
    q, K, V = W_Q @ xi, Yk @ W_K.T, Yv @ W_V.T
    if strategy == "qkv-norm":
        q, K, V = n(q), n(K), n(V)
    w = K @ q
    a = np.exp(w - w.max()) / np.exp(w - w.max()).sum()
    expected = x + a @ (V @ W_O.T)
    got = att.attention_update(x, Y, [h]).data
    assert np.allclose(got, expected, atol=1e-12)


def test_causal_mask_respected_and_all_masked_rejected():
    rng = np.random.default_rng(1)
    h = random_head(rng)
    x, Y = rng.normal(size=6), rng.normal(size=(4, 6))
    mask = np.array([True, True, False, False])
    a = att.attention_weights(x, Y, h, mask).data
    assert a[2] == 0.0 and a[3] == 0.0
    with pytest.raises(ValueError):
        att.attention_update(x, Y, [h], np.zeros(4, dtype=bool))


def test_norm_of_zero_vector_is_degenerate():
    h = random_head(np.random.default_rng(2), strategy="pre-norm")
    with pytest.raises(DegenerateInputError):
        att.scores(np.zeros(6), np.ones((2, 6)) + np.arange(6), h)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(-1e3, 1e3))
def test_shift_invariance_of_softmax(seed, shift):
    w = np.random.default_rng(seed).normal(size=7) * 4
    from normlab import tensor as tn

    assert np.abs(tn.softmax(Tensor(w + shift)).data - tn.softmax(Tensor(w)).data).max() <= 1e-12


def test_propagators_match_finite_differences():
    rng = np.random.default_rng(3)
    q, k, m = rng.normal(size=3), rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
    a = att.head_output  # reference
    w = k @ q
    probs = np.exp(w - w.max()) / np.exp(w - w.max()).sum()
    eq, ek, em = rng.normal(size=3), rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
    dq, dk, dm = att.propagate_components(probs, q, k, m, eq, ek, em)
    h = 1e-6
    assert np.allclose(dq, (a(q + h * eq, k, m) - a(q - h * eq, k, m)) / (2 * h), atol=1e-8)
    assert np.allclose(dk, (a(q, k + h * ek, m) - a(q, k - h * ek, m)) / (2 * h), atol=1e-8)
    assert np.allclose(dm, (a(q, k, m + h * em) - a(q, k, m - h * em)) / (2 * h), atol=1e-8)
    total = att.propagate_perturbation(probs, q, k, m, eq, ek, em).data
    assert np.allclose(total, dq + dk + dm, atol=0)


def test_sparse_message_perturbation_is_copied():
    a = np.array([0.0, 1.0, 0.0])
    q, k, m = np.ones(2), np.eye(3)[:, :2], np.arange(6.0).reshape(3, 2)
    em = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    dq, dk, dm = att.propagate_components(a, q, k, m, np.ones(2), np.ones((3, 2)), em)
    assert np.array_equal(dm, em[1]) and not dq.any() and not dk.any()


def test_collapse_threshold_examples():
    w = np.array([10.0, 9.0, -2.0])
    # Query-only perturbations never collapse: lambda_w = 1.
    p = att.collapse_threshold(w, 0, 0.15, np.zeros(3))
    assert not p.collapsing and np.allclose(p.lambda_w[1:], 1.0)
    # Key growth of 20% on token 1 overtakes a 10% gap.
    p = att.collapse_threshold(w, 0, 0.0, np.array([0.0, 0.2, 0.0]))
    assert p.collapsing == {1}
    p = att.collapse_threshold(np.array([1.0, 0.0]), 0, 0.0, np.array([0.0, 0.1]))
    assert p.indeterminate == {1}


def test_detect_collapse_examples():
    v = att.detect_collapse([0.96, 0.04], [0.2, 0.8])
    assert v.collapsed and not v.strict_sparse
    assert not att.detect_collapse([0.96, 0.04], [0.97, 0.03]).collapsed
    assert att.detect_collapse([0.6, 0.4], [0.1, 0.9]) is None


def test_interference_factor_flags():
    parts = [np.array([3.0, 0, 0]), np.array([0, 4.0, 0])]
    r = att.interference_factor(parts, reference_norms=[3.0, 4.0])
    assert r.factor == pytest.approx(0.2) and r.orthogonal and r.norm_constant
    r = att.interference_factor([np.array([1.0, 1.0]), np.array([1.0, 0.0])])
    assert not r.orthogonal
    with pytest.raises(DegenerateInputError):
        att.interference_factor([np.ones(2), -np.ones(2)])


def test_key_bias_is_invisible_but_query_bias_is_not():
    rng = np.random.default_rng(4)
    h = random_head(rng)
    inst = [(rng.normal(size=6), rng.normal(size=(5, 6))) for _ in range(10)]
    assert att.bias_invariance_check(h, rng.normal(size=4), inst)
    assert not att.bias_invariance_check(h, None, inst, b_Q=rng.normal(size=4))
    with pytest.raises(ValueError):
        att.bias_invariance_check(random_head(rng, strategy="qkv-norm"), np.ones(4), inst)


def test_entropy_falls_with_inverse_temperature():
    w = np.array([0.3, -1.2, 2.0, 0.1])
    ents = [att.entropy(att.temperature_probe(w, k).data) for k in (0.01, 0.1, 1.0, 10.0, 100.0)]
    assert all(b < a for a, b in zip(ents, ents[1:]))
    assert ents[0] == pytest.approx(math.log(4), rel=1e-3)
    with pytest.raises(ValueError):
        att.temperature_probe(w, 0.0)


def test_qkv_norm_scores_ignore_input_scale_and_pre_norm_ignores_receiver_scale():
    rng = np.random.default_rng(5)
    x, Y = rng.normal(size=6), rng.normal(size=(4, 6))
    hq = random_head(rng, strategy="qkv-norm")
    assert np.allclose(att.scores(7.0 * x, 0.3 * Y, hq).data, att.scores(x, Y, hq).data, atol=1e-12)
    hp = random_head(rng, strategy="pre-norm")
    assert np.allclose(att.scores(5.0 * x, Y, hp).data, att.scores(x, Y, hp).data, atol=1e-12)
    hn = random_head(rng)
    assert np.allclose(att.scores(2.0 * x, Y, hn).data, 2.0 * att.scores(x, Y, hn).data, atol=1e-12)
