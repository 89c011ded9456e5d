import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lookupnet.gradcheck import relative_error
from lookupnet.table import (
    CellCounts,
    LookupTable,
    build_feature_subtable,
    build_weight_subtable,
    feature_subtable_grad,
    lookup,
    rescale_factors,
    rescale_gradients,
    weight_subtable_grad,
)

GRANULARITIES = [5, 9, 17, 33, 65]
finite = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


def test_feature_uniform_ramp():
    np.testing.assert_allclose(build_feature_subtable(np.zeros(4)), [0, 0.25, 0.5, 0.75, 1.0], atol=1e-15)


def test_feature_hand_evaluation():
    np.testing.assert_allclose(build_feature_subtable([math.log(1), math.log(3)]), [0, 0.25, 1.0], atol=1e-15)


def test_weight_uniform_ramp():
    np.testing.assert_allclose(build_weight_subtable(np.zeros(2), np.zeros(2)), [-1, -0.5, 0, 0.5, 1], atol=1e-15)


def test_weight_outward_accumulation():
    tw = build_weight_subtable([math.log(3), math.log(1)], [math.log(1), math.log(3)])
    np.testing.assert_allclose(tw, [-1, -0.75, 0, 0.25, 1], atol=1e-15)


def test_subtable_errors():
    with pytest.raises(ValueError):
        build_feature_subtable([])
    with pytest.raises(ValueError, match="odd"):
        build_weight_subtable([0.0, 0.0], [0.0])
    with pytest.raises(ValueError):
        LookupTable(5, 4)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(GRANULARITIES), st.data())
def test_subtable_invariants_property(n, data):
    g = data.draw(arrays(np.float64, n - 1, elements=finite))
    m = (n - 1) // 2
    neg = data.draw(arrays(np.float64, m, elements=finite))
    pos = data.draw(arrays(np.float64, m, elements=finite))
    tf = build_feature_subtable(g)
    tw = build_weight_subtable(neg, pos)
    assert tf[0] == 0.0 and tf[-1] == 1.0
    assert tw[0] == -1.0 and tw[m] == 0.0 and tw[-1] == 1.0
    assert np.all(np.diff(tf) >= 0) and np.all(np.diff(tw) >= 0)
    assert np.abs(np.outer(tf, tw)).max() <= 1.0


def test_lookup_examples():
    t = LookupTable(5, 5)
    assert lookup(t, 3, 4) == 0.75
    for i in range(5):
        assert t.lookup(i, t.center) == 0.0
    assert t.lookup(4, 4) == 1.0
    with pytest.raises(IndexError):
        t.lookup(5, 0)


def test_lookup_records_hits():
    t = LookupTable(5, 5)
    t.lookup(3, 4)
    t.lookup(3, 1)
    assert t.counts.feature.tolist() == [0, 0, 0, 2, 0]
    assert t.counts.weight.tolist() == [0, 1, 0, 0, 1]


@pytest.mark.parametrize("n", [5, 17, 65])
def test_lookup_equals_materialised_table(rng, n):
    t = LookupTable(n, n)
    t.feature_logits.data = rng.normal(size=n - 1).astype(np.float32)
    t.weight_logits_pos.data = rng.normal(size=(n - 1) // 2).astype(np.float32)
    table = t.table()
    for i in range(n):
        for j in range(n):
            assert t.lookup(i, j) == pytest.approx(float(table[i, j]), rel=1e-6, abs=1e-7)


def test_subtable_backward_pattern():
    # r = T_f[2] * T_w[4]: masses p1, p2 feed T_f[2]; the gradient on a mass before softmax is T_w[4] = 1
    from lookupnet.table import cumulative_mass_grad
    tw = build_weight_subtable(np.zeros(2), np.zeros(2))
    grad_entries = np.zeros(5)
    grad_entries[2] = tw[4]
    np.testing.assert_array_equal(cumulative_mass_grad(grad_entries[1:]), [1.0, 1.0, 0.0, 0.0])


def test_zero_upstream_gives_zero_logit_grads(rng):
    t = LookupTable(9, 9)
    grads = t.subtable_backward(np.zeros(9), np.zeros(9))
    for g in grads.values():
        assert not g.any()


@pytest.mark.parametrize("seed", range(5))
def test_logit_grads_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n = 9
    g, neg, pos = rng.normal(size=n - 1), rng.normal(size=4), rng.normal(size=4)
    hits_f, hits_w = rng.integers(0, n, 30), rng.integers(0, n, 30)
    up = rng.normal(size=30)

    def loss(g, neg, pos):
        return float(np.sum(up * build_feature_subtable(g)[hits_f] * build_weight_subtable(neg, pos)[hits_w]))

    tf, tw = build_feature_subtable(g), build_weight_subtable(neg, pos)
    grad_tf = np.bincount(hits_f, weights=up * tw[hits_w], minlength=n)
    grad_tw = np.bincount(hits_w, weights=up * tf[hits_f], minlength=n)
    analytic = [feature_subtable_grad(g, grad_tf), *weight_subtable_grad(neg, pos, grad_tw)]
    args = [g, neg, pos]
    for k, a in enumerate(analytic):
        num = np.zeros_like(args[k])
        for i in range(len(num)):
            plus = [v.copy() for v in args]
            minus = [v.copy() for v in args]
            plus[k][i] += 1e-6
            minus[k][i] -= 1e-6
            num[i] = (loss(*plus) - loss(*minus)) / 2e-6
        assert relative_error(a, num) <= 1e-4


def test_rescale_uniform_counts_is_identity(rng):
    grads = rng.normal(size=6)
    np.testing.assert_array_equal(rescale_gradients(grads, np.full(6, 7)), grads)


def test_rescale_factor_example():
    np.testing.assert_allclose(rescale_factors([1, 4]), [math.sqrt(2.5), math.sqrt(0.625)])


def test_rescale_preserves_sign_and_skips_unhit(rng):
    grads = rng.normal(size=5)
    out = rescale_gradients(grads, [0, 3, 1, 9, 2])
    assert np.all(np.sign(out) == np.sign(grads))
    assert out[0] == grads[0]


def test_cell_counts_merge_matches_serial():
    a, b, serial = CellCounts.zeros(5, 5), CellCounts.zeros(5, 5), CellCounts.zeros(5, 5)
    hits = [(1, 2), (3, 3), (1, 0), (4, 4)]
    for k, (i, j) in enumerate(hits):
        (a if k % 2 else b).record(i, j)
        serial.record(i, j)
    merged = a.merge(b)
    np.testing.assert_array_equal(merged.feature, serial.feature)
    np.testing.assert_array_equal(merged.weight, serial.weight)
    assert CellCounts.average(serial.feature) == 4 / 5


def test_rescale_only_in_training_mode():
    t = LookupTable(5, 5)
    t.counts.record([1, 1, 1, 2], [0, 0, 0, 1])
    raw = np.ones(5)
    t.eval()
    assert np.array_equal(t._maybe_rescale(raw, raw)[0], raw)
    t.train()
    assert not np.array_equal(t._maybe_rescale(raw, raw)[0], raw)


def test_independent_modes_initialisation():
    r = LookupTable(9, 9, mode="independent-random", rng=np.random.default_rng(0))
    assert r.feature_entries().min() >= 0 and r.weight_entries().min() >= -1
    s = LookupTable(9, 9, mode="independent-step")
    np.testing.assert_allclose(s.weight_entries(), np.linspace(-1, 1, 9), atol=1e-7)
    f = LookupTable(9, 9, mode="fixed")
    assert f.parameters() == []
