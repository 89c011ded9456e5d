import numpy as np
import pytest

from lookupnet import functional as F
from lookupnet.gradcheck import check_param_grads, relative_error
from lookupnet.nn import BatchNorm2d, Conv2d, Parameter
from lookupnet.tensor import Tensor, default_dtype, make_node, no_grad

from oracles import bn_oracle, naive_conv2d


def test_conv_scalar_product():
    out = F.conv2d(Tensor([[[[2.0]]]]), Tensor([[[[3.0]]]]), Tensor([0.0]))
    assert out.data.item() == 6.0


def test_conv_identity_kernel(rng):
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    out = F.conv2d(x, Tensor(w), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x.data)


@pytest.mark.parametrize("stride,padding,dilation", [(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 2, 2)])
def test_conv_matches_naive_loops(rng, stride, padding, dilation):
    x = rng.normal(size=(1, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding, dilation)
    np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, stride, padding, dilation), atol=1e-5)


def test_conv_shape_errors():
    with pytest.raises(ValueError, match="input channels"):
        F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="empty output"):
        F.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_batchnorm_identity_eval(rng):
    x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    out = F.batch_norm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3),
                         eps=0.0, training=False)
    np.testing.assert_array_equal(out.data, x)


def test_batchnorm_constant_channel_gives_beta():
    x = np.ones((4, 2, 3, 3), dtype=np.float32) * 7.0
    beta = np.array([0.5, -2.0])
    out = F.batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(beta), np.zeros(2), np.ones(2), training=True)
    np.testing.assert_allclose(out.data, np.broadcast_to(beta.reshape(1, 2, 1, 1), x.shape), atol=1e-6)


def test_batchnorm_matches_statistics_oracle(rng):
    x = rng.normal(2.0, 3.0, size=(8, 3, 5, 5))
    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    rm, rv = np.zeros(3), np.ones(3)
    with default_dtype(np.float64):
        out = F.batch_norm2d(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, training=True)
    np.testing.assert_allclose(out.data, bn_oracle(x, gamma, beta), atol=1e-5)
    m = x.size // 3
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_batchnorm_rejects_nonpositive_variance():
    with pytest.raises(ValueError, match="positive"):
        F.batch_norm2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor([1.0]), Tensor([0.0]), np.zeros(1),
                       np.array([-1.0]), eps=1e-5, training=False)


def test_backward_sum_and_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])
    x.grad = None
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_cycle_detected():
    a = Tensor([1.0], requires_grad=True)
    b = a * 2.0
    c = b * 3.0
    b._parents = (c,)  # corrupt the graph on purpose
    with pytest.raises(RuntimeError, match="cycle"):
        c.sum().backward()


def test_log_of_nonpositive_is_hard_error():
    with pytest.raises(ValueError, match="non-positive"):
        Tensor([-1.0], requires_grad=True).log()


def test_composite_net_matches_finite_differences(rng):
    with default_dtype(np.float64):
        conv = Conv2d(2, 3, 3, padding=1, rng=rng)
        bn = BatchNorm2d(3)
        x = Tensor(rng.normal(size=(3, 2, 5, 5)), requires_grad=True)
        target = rng.normal(size=(3, 3, 5, 5))

        def loss():
            rm, rv = bn.running_mean.copy(), bn.running_var.copy()
            out = bn(conv(x)).relu()
            bn._buffers["running_mean"], bn._buffers["running_var"] = rm, rv  # keep forward pure
            return (out * Tensor(target)).sum()

        params = {"w": conv.weight, "gamma": bn.gamma, "beta": bn.beta, "x": x}
        errors = check_param_grads(loss, params, eps=1e-4)
    assert max(errors.values()) <= 1e-4, errors
    # a bias followed by batch statistics cancels exactly
    np.testing.assert_allclose(conv.bias.grad, 0.0, atol=1e-10)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "exp", "log", "matmul", "mean", "getitem",
                                "transpose", "maxpool", "avgpool", "linear", "xent"])
def test_elementary_grads(rng, op):
    with default_dtype(np.float64):
        a = Parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
        b = Parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
        img = Parameter(rng.normal(size=(2, 2, 4, 4)))
        w = Parameter(rng.normal(size=(5, 4)))
        labels = np.array([0, 2, 1])
        fns = {
            "add": lambda: (a + b).sum(), "sub": lambda: (a - b * 2.0).sum(), "mul": lambda: (a * b).sum(),
            "div": lambda: (a / b).sum(), "exp": lambda: a.exp().sum(), "log": lambda: a.log().sum(),
            "matmul": lambda: (a @ b.transpose()).sum(), "mean": lambda: (a * a).mean(),
            "getitem": lambda: (a[1:, ::2] * 3.0).sum(), "transpose": lambda: (a.transpose() @ b).sum(),
            "maxpool": lambda: (F.max_pool2d(img, 2) * F.max_pool2d(img, 2)).sum(),
            "avgpool": lambda: (F.global_avg_pool(img) * F.global_avg_pool(img)).sum(),
            "linear": lambda: (F.linear(a, w, None) * F.linear(a, w, None)).sum(),
            "xent": lambda: F.cross_entropy(a, labels),
        }
        params = {"a": a, "b": b, "img": img, "w": w}
        errors = check_param_grads(fns[op], params, eps=1e-6)
    assert max(errors.values()) <= 1e-4, errors


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
    outs = []
    for _ in range(2):
        conv = Conv2d(3, 4, 3, padding=1, rng=np.random.default_rng(5))
        outs.append(conv(Tensor(x)).data)
    np.testing.assert_array_equal(outs[0], outs[1])


def test_no_grad_records_nothing():
    a = Tensor([1.0], requires_grad=True)
    with no_grad():
        b = a * 2.0
    assert b._parents == () or not b.requires_grad


def test_make_node_rejects_inf():
    a = Tensor([1.0], requires_grad=True)
    with pytest.raises(FloatingPointError):
        make_node(np.array([np.inf]), (a,), lambda g: (g,), "bad")


def test_relative_error_helper():
    assert relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
