import math

import numpy as np
import pytest

from lookupnet.gradcheck import check_param_grads
from lookupnet.layer import (
    LookupConv2d,
    compute_indices,
    feature_index_grad,
    init_scales,
    rescale_grad,
    response_index_grad,
    round_half_away,
    weight_index_grad,
)
from lookupnet.table import LookupTable
from lookupnet.tensor import Tensor, default_dtype

from oracles import lookup_layer_oracle, quantize_then_convolve


def make_layer(cin=2, cout=3, k=3, stride=1, padding=1, dilation=1, n=9, s_w=0.5, s_f=1.5, seed=0, **kw):
    layer = LookupConv2d(cin, cout, k, stride, padding, dilation, n_f=n, n_w=n, rng=np.random.default_rng(seed), **kw)
    layer.scales.set_from_stats(math.log(s_w), math.log(s_f))
    layer._buffers["scales_initialized"][...] = 1
    return layer


def test_round_half_away():
    np.testing.assert_array_equal(round_half_away(np.array([0.5, 1.5, 2.5, -0.5, -1.5, 0.49])), [1, 2, 3, -1, -2, 0])


def test_compute_indices_examples():
    assert compute_indices(0.0, 2.0, "feature", 5) == 0
    assert compute_indices(2.0, 2.0, "feature", 5) == 4
    assert compute_indices(9.0, 2.0, "feature", 5) == 4
    assert compute_indices(1.0, 2.0, "feature", 5) == 2
    assert compute_indices(0.0, 1.0, "weight", 33) == 16
    assert compute_indices(-0.3, 1.0, "feature", 5) == 0
    with pytest.raises(ValueError, match="non-finite"):
        compute_indices(np.nan, 1.0, "feature", 5)


def test_forward_zero_input_gives_bias():
    layer = make_layer()
    layer.bias.data = np.array([1.0, -2.0, 0.5], dtype=np.float32)
    layer.eval()
    out = layer(Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32)))
    np.testing.assert_array_equal(out.data, np.broadcast_to(layer.bias.data.reshape(1, 3, 1, 1), out.shape))


def test_forward_single_element_example():
    layer = LookupConv2d(1, 1, 1, padding=0, n_f=5, n_w=5, bias=True)
    layer.scales.set_from_stats(0.0, 0.0)
    layer._buffers["scales_initialized"][...] = 1
    layer.weight.data = np.ones((1, 1, 1, 1), dtype=np.float32)
    layer.bias.data = np.zeros(1, dtype=np.float32)
    layer.eval()
    x = np.full((1, 1, 1, 1), 0.5, dtype=np.float32)
    assert layer.feature_indices(x).item() == 2 and layer.weight_indices().item() == 4
    assert layer(Tensor(x)).data.item() == 0.5


def test_geometry_mismatch():
    layer = make_layer()
    with pytest.raises(ValueError):
        layer(Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32)))


def random_config(rng):
    n = int(rng.choice([5, 9, 17, 33]))
    cin, cout, k = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.choice([1, 3]))
    stride, dil = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    h = int(rng.integers(k * dil, 7))
    layer = make_layer(cin, cout, k, stride, pad, dil, n, s_w=float(rng.uniform(0.2, 1.5)),
                       s_f=float(rng.uniform(0.5, 2.0)), seed=int(rng.integers(1 << 30)))
    layer.table.feature_logits.data = rng.normal(size=n - 1).astype(np.float32)
    layer.table.weight_logits_neg.data = rng.normal(size=(n - 1) // 2).astype(np.float32)
    layer.table.weight_logits_pos.data = rng.normal(size=(n - 1) // 2).astype(np.float32)
    layer.bias.data = rng.normal(size=cout).astype(np.float32)
    x = np.abs(rng.normal(0, 1.2, size=(2, cin, h, h))).astype(np.float32)
    layer.eval()
    return layer, x


@pytest.mark.parametrize("seed", range(25))
def test_forward_matches_per_element_oracle(seed):
    layer, x = random_config(np.random.default_rng(seed))
    out = layer(Tensor(x)).data
    ref = lookup_layer_oracle(x, layer.weight.data, layer.bias.data, float(layer.s_w), float(layer.s_f),
                              layer.table.feature_entries(), layer.table.weight_entries(),
                              layer.stride, layer.padding, layer.dilation)
    np.testing.assert_array_equal(out, ref)


@pytest.mark.parametrize("seed", range(10))
def test_exact_product_table_is_quantised_convolution(seed):
    rng = np.random.default_rng(100 + seed)
    layer, x = random_config(rng)
    n = layer.n_f
    layer.table = LookupTable.exact_product(n, n)
    out = layer(Tensor(x)).data
    ref = quantize_then_convolve(x.astype(np.float64), layer.weight.data.astype(np.float64), layer.bias.data,
                                 float(layer.s_w), float(layer.s_f), n, n, layer.stride, layer.padding,
                                 layer.dilation)
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_index_grad_closed_forms():
    d_w, d_s = weight_index_grad(1.0, 2.0)
    assert d_w == 0.5 and d_s == -0.25
    d_w, d_s = weight_index_grad(3.0, 2.0)
    assert d_w == 0.0 and d_s == 0.0
    d_w, _ = weight_index_grad(-3.0, 2.0)  # lower saturation is gated too
    assert d_w == 0.0
    d_f, d_sf = feature_index_grad(1.0, 4.0)
    assert d_f == 0.25 and d_sf == -1.0 / 16
    assert feature_index_grad(5.0, 4.0)[0] == 0.0


def test_response_and_rescale_closed_forms():
    assert response_index_grad(0.3, "literal") == 1.0
    assert response_index_grad(0.3, "product") == 0.3
    d_r, d_sw, d_sf = rescale_grad(0.5, 2.0, 3.0)
    assert (d_r, d_sw, d_sf) == (6.0, 1.5, 1.0)


def test_saturated_weight_gets_no_gradient():
    layer = make_layer(1, 1, 1, padding=0, s_w=0.5)
    layer.weight.data = np.array([[[[2.0]]]], dtype=np.float32)
    layer.train()
    layer(Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))).sum().backward()
    assert layer.weight.grad.item() == 0.0


def test_literal_ste_weight_gradient():
    # one element, inside range: d out/d w = s_w s_f * 1 * (1/s_w) = s_f
    layer = make_layer(1, 1, 1, padding=0, s_w=1.0, s_f=2.0, ste="literal")
    layer.weight.data = np.array([[[[0.25]]]], dtype=np.float32)
    layer.eval()
    layer(Tensor(np.full((1, 1, 1, 1), 0.5, dtype=np.float32))).sum().backward()
    assert layer.weight.grad.item() == pytest.approx(2.0)


def test_rescale_path_matches_finite_differences():
    # indices and table frozen: the output depends on s_w, s_f only through the s_w s_f factor
    with default_dtype(np.float64):
        layer = make_layer(2, 2, 3, padding=1, s_w=4.0, s_f=8.0, seed=3).astype(np.float64)
        layer.eval()
        x = Tensor(np.random.default_rng(0).uniform(9.0, 12.0, size=(1, 2, 4, 4)))
        layer.weight.data = np.full(layer.weight.shape, 5.0)  # saturated: index fixed at N_w - 1
        target = np.random.default_rng(1).normal(size=(1, 2, 4, 4))
        errors = check_param_grads(lambda: (layer(x) * Tensor(target)).sum(),
                                   {"e_w": layer.scales.w_param, "e_f": layer.scales.f_param}, eps=1e-6)
    assert max(errors.values()) <= 1e-4


def test_init_scales_examples(rng):
    e_w, e_f = init_scales(np.array([-1 / 3 * math.sqrt(1), 1 / 3]) * 1.0, np.array([-1.0, 1.0]))
    assert e_w == pytest.approx(0.0, abs=1e-12) and e_f == pytest.approx(math.log(3))
    e_w, _ = init_scales(rng.normal(0, 0.1, 10000), np.ones(4) + np.arange(4))
    assert math.exp(e_w) == pytest.approx(0.3, rel=0.05)
    e_w, e_f = init_scales(np.zeros(4), np.ones(4))
    assert e_w == 0.0 and e_f == 0.0


def test_first_training_forward_initialises_scales(rng):
    layer = LookupConv2d(2, 2, 3, padding=1, n_f=9, n_w=9, rng=rng)
    x = np.abs(rng.normal(size=(4, 2, 5, 5))).astype(np.float32)
    layer(Tensor(x))
    assert float(layer.s_f) == pytest.approx(3 * x.std(), rel=1e-5)
    assert float(layer.s_w) == pytest.approx(3 * layer.weight.data.std(), rel=1e-5)


def test_saturation_invariance():
    layer = make_layer(s_f=1.0)
    layer.eval()
    x = np.random.default_rng(0).uniform(1.5, 3.0, size=(1, 2, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(layer(Tensor(x)).data, layer(Tensor(10 * x)).data)


def test_determinism():
    def run():
        layer = make_layer(seed=7)
        layer.train()
        x = Tensor(np.random.default_rng(2).uniform(0, 2, size=(2, 2, 5, 5)).astype(np.float32), requires_grad=True)
        out = layer(x)
        (out * out).sum().backward()
        return out.data, layer.weight.grad, layer.table.feature_logits.grad, x.grad

    for a, b in zip(run(), run()):
        np.testing.assert_array_equal(a, b)


def test_hit_counts_cover_every_lookup(rng):
    layer = make_layer(2, 3, 3, padding=1)
    layer.train()
    layer(Tensor(np.abs(rng.normal(size=(2, 2, 4, 4))).astype(np.float32)))
    lookups = 2 * 4 * 4 * 3 * 2 * 9
    assert layer.table.counts.feature.sum() == lookups
    assert layer.table.counts.weight.sum() == lookups
