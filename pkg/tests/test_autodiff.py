import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srdfrecon import autodiff as ad
from srdfrecon.autodiff import Tensor
from srdfrecon.gradcheck import check_gradients, relative_error

RNG = np.random.default_rng(20240811)


def rand_tensor(*shape, lo=-1.0, hi=1.0, requires_grad=True):
    return Tensor(RNG.uniform(lo, hi, size=shape), requires_grad=requires_grad)


# ---------------------------------------------------------------- forward basics


def test_matmul_identity():
    a = RNG.normal(size=(3, 3))
    out = ad.matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_softmax_uniform():
    out = ad.softmax(Tensor([0.0, 0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.25, 0.25, 0.25, 0.25], atol=0)


def test_elu_kernel_feature_at_zero():
    out = ad.elu(Tensor([0.0])) + Tensor([1.0])
    assert out.data[0] == 1.0


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_to_one(vals):
    out = ad.softmax(Tensor([vals]))
    assert abs(out.data.sum() - 1.0) < 1e-12


def test_forward_is_pure():
    x = rand_tensor(4, 5)
    w = rand_tensor(5, 3)

    def run():
        return ad.softmax(ad.matmul(ad.elu(x), w)).data

    a, b = run(), run()
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- error contracts


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ad.ShapeError) as err:
        ad.add(rand_tensor(2, 3), rand_tensor(3, 2))
    msg = str(err.value)
    assert "add" in msg and "(2, 3)" in msg and "(3, 2)" in msg


def test_matmul_inner_dim_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.matmul(rand_tensor(2, 3), rand_tensor(4, 2))


def test_non_finite_output_is_numeric_fault():
    with pytest.raises(ad.NumericFault):
        ad.div(Tensor([1.0]), Tensor([0.0]))


def test_non_finite_uv_is_numeric_fault():
    grid = rand_tensor(4, 4, 2, requires_grad=False)
    with pytest.raises(ad.NumericFault):
        ad.grid_sample_2d(grid, Tensor([[np.nan, 1.0]]))


def test_backward_without_graph_is_usage_error():
    with pytest.raises(ad.GraphError):
        Tensor([1.0, 2.0]).backward()
    with pytest.raises(ad.GraphError):
        Tensor([1.0], requires_grad=True).backward()


def test_backward_seed_shape_checked():
    x = rand_tensor(3)
    y = ad.exp(x)
    with pytest.raises(ad.ShapeError):
        y.backward(np.ones(4))


# ---------------------------------------------------------------- analytic gradients


def test_grad_square():
    x = Tensor([3.0], requires_grad=True)
    y = ad.mul(x, x)
    y.backward(np.ones(1))
    assert x.grad[0] == pytest.approx(6.0, abs=1e-12)


def test_grad_of_softmax_sum_is_zero():
    x = rand_tensor(6)
    ad.tsum(ad.softmax(x)).backward(np.ones(()))
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)


def test_fanout_accumulates_by_addition():
    x = Tensor([2.0], requires_grad=True)
    y = ad.add(ad.mul(x, x), x)  # x^2 + x
    y.backward(np.ones(1))
    assert x.grad[0] == pytest.approx(5.0, abs=1e-12)


def test_adam_unused_branch_gets_no_grad():
    x = rand_tensor(3)
    w = rand_tensor(3)
    ad.tsum(ad.mul(x, x)).backward(np.ones(()))
    assert w.grad is None


# ---------------------------------------------------------------- finite-difference suite

UNARY_OPS = [
    ("exp", ad.exp, (-1.0, 1.0)),
    ("sigmoid", ad.sigmoid, (-3.0, 3.0)),
    ("elu", ad.elu, (-2.0, 2.0)),
    ("relu", ad.relu, (0.1, 2.0)),
    ("log", ad.log, (0.5, 3.0)),
    ("sqrt", ad.sqrt, (0.5, 3.0)),
    ("abs", ad.absolute, (0.2, 2.0)),
    ("softmax", ad.softmax, (-2.0, 2.0)),
    ("layer_norm", ad.layer_norm, (-2.0, 2.0)),
]


@pytest.mark.parametrize("name,op,rng", UNARY_OPS, ids=[u[0] for u in UNARY_OPS])
def test_unary_gradients(name, op, rng):
    x = rand_tensor(3, 7, lo=rng[0], hi=rng[1])
    check_gradients(lambda t: ad.tsum(ad.mul(op(t), rand_weights_37)), [x])


rand_weights_37 = Tensor(RNG.normal(size=(3, 7)))


BINARY_OPS = [
    ("add", ad.add),
    ("sub", ad.sub),
    ("mul", ad.mul),
    ("div", ad.div),
]


@pytest.mark.parametrize("name,op", BINARY_OPS, ids=[b[0] for b in BINARY_OPS])
def test_binary_gradients(name, op):
    a = rand_tensor(4, 3, lo=0.5, hi=2.0)
    b = rand_tensor(4, 3, lo=0.5, hi=2.0)
    check_gradients(lambda x, y: ad.tsum(op(x, y)), [a, b])


def test_binary_scalar_operand_gradient():
    a = rand_tensor(4, 3, lo=0.5, hi=2.0)
    s = rand_tensor(1, lo=0.5, hi=2.0)
    check_gradients(lambda x, y: ad.tsum(ad.div(x, ad.reshape(y, ()))), [a, s])


def test_matmul_gradients():
    a = rand_tensor(4, 3)
    b = rand_tensor(3, 5)
    check_gradients(lambda x, y: ad.tsum(ad.mul(ad.matmul(x, y), rand_weights_45)), [a, b])


rand_weights_45 = Tensor(RNG.normal(size=(4, 5)))


def test_matmul_batched_gradients():
    a = rand_tensor(2, 4, 3)
    b = rand_tensor(3, 5)
    w = Tensor(RNG.normal(size=(2, 4, 5)))
    check_gradients(lambda x, y: ad.tsum(ad.mul(ad.matmul(x, y), w)), [a, b])
    b3 = rand_tensor(2, 3, 5)
    check_gradients(lambda x, y: ad.tsum(ad.mul(ad.matmul(x, y), w)), [a, b3])


@pytest.mark.parametrize(
    "name",
    ["sum_all", "sum_axis", "mean_axis", "var_axis", "sorted_sum", "cumprod"],
)
def test_reduction_gradients(name):
    x = rand_tensor(3, 5, lo=0.1, hi=2.0)
    w = Tensor(RNG.normal(size=(3, 5)))
    w3 = Tensor(RNG.normal(size=(3,)))
    w5 = Tensor(RNG.normal(size=(5,)))
    fns = {
        "sum_all": lambda t: ad.tsum(t),
        "sum_axis": lambda t: ad.tsum(ad.mul(ad.tsum(t, axis=1), w3)),
        "mean_axis": lambda t: ad.tsum(ad.mul(ad.tmean(t, axis=0), w5)),
        "var_axis": lambda t: ad.tsum(ad.mul(ad.tvar(t, axis=1), w3)),
        "sorted_sum": lambda t: ad.tsum(ad.mul(ad.sorted_sum(t, axis=0), w5)),
        "cumprod": lambda t: ad.tsum(ad.mul(ad.cumprod_exclusive(t), w)),
    }
    check_gradients(fns[name], [x])


def test_cumprod_exclusive_values_and_zero_handling():
    x = Tensor([[2.0, 0.0, 3.0, 4.0]], requires_grad=True)
    y = ad.cumprod_exclusive(x)
    np.testing.assert_allclose(y.data, [[1.0, 2.0, 0.0, 0.0]])
    w = Tensor(RNG.normal(size=(1, 4)))
    check_gradients(lambda t: ad.tsum(ad.mul(ad.cumprod_exclusive(t), w)), [x])


def test_shape_op_gradients():
    x = rand_tensor(2, 3, 4)
    w = Tensor(RNG.normal(size=(4, 6)))
    check_gradients(lambda t: ad.tsum(ad.mul(ad.reshape(t, (4, 6)), w)), [x])
    w2 = Tensor(RNG.normal(size=(3, 4, 2)))
    check_gradients(lambda t: ad.tsum(ad.mul(ad.moveaxis(t, 0, 2), w2)), [x])
    wexp = Tensor(RNG.normal(size=(5, 3)))
    y = rand_tensor(1, 3)
    check_gradients(lambda t: ad.tsum(ad.mul(ad.expand(t, (5, 3)), wexp)), [y])
    wsl = Tensor(RNG.normal(size=(2, 2, 4)))
    check_gradients(lambda t: ad.tsum(ad.mul(t[:, 1:3, :], wsl)), [x])


def test_concat_gradients():
    a = rand_tensor(3, 2)
    b = rand_tensor(3, 4)
    w = Tensor(RNG.normal(size=(3, 6)))
    check_gradients(lambda x, y: ad.tsum(ad.mul(ad.concat([x, y], axis=1), w)), [a, b])


def test_clamp_gradient_interior():
    x = rand_tensor(4, 4, lo=-0.8, hi=0.8)
    check_gradients(lambda t: ad.tsum(ad.clamp(t, -0.9, 0.9)), [x])
    # clipped region passes no gradient
    y = Tensor([2.0], requires_grad=True)
    ad.tsum(ad.clamp(y, -1.0, 1.0)).backward(np.ones(()))
    assert y.grad[0] == 0.0


def test_two_layer_perceptron_matches_finite_differences():
    w1 = rand_tensor(5, 8)
    b1 = rand_tensor(1, 8)
    w2 = rand_tensor(8, 1)
    x = Tensor(RNG.normal(size=(6, 5)))

    def mlp(w1t, b1t, w2t):
        h = ad.elu(ad.add(ad.matmul(x, w1t), ad.expand(b1t, (6, 8))))
        return ad.tsum(ad.matmul(h, w2t))

    err = check_gradients(mlp, [w1, b1, w2])
    assert err < 1e-4


# ---------------------------------------------------------------- grid sampling


def test_grid_sample_2d_lattice_point():
    grid = rand_tensor(8, 8, 3, requires_grad=False)
    out, valid = ad.grid_sample_2d(grid, Tensor([[3.0, 5.0]]))
    np.testing.assert_array_equal(out.data[0], grid.data[5, 3])
    assert valid[0]


def test_grid_sample_2d_midpoint_linearity():
    grid = rand_tensor(4, 4, 2, requires_grad=False)
    out, _ = ad.grid_sample_2d(grid, Tensor([[1.5, 2.0]]))
    np.testing.assert_allclose(out.data[0], 0.5 * (grid.data[2, 1] + grid.data[2, 2]), atol=1e-15)


def test_grid_sample_2d_border_clamp_and_flag():
    grid = rand_tensor(4, 4, 1, requires_grad=False)
    out, valid = ad.grid_sample_2d(grid, Tensor([[-2.0, 1.0], [1.0, 9.0]]))
    assert not valid.any()
    np.testing.assert_allclose(out.data[0], grid.data[1, 0], atol=1e-15)
    np.testing.assert_allclose(out.data[1], grid.data[3, 1], atol=1e-15)


def test_grid_sample_2d_gradients():
    grid = rand_tensor(5, 6, 3)
    uv = Tensor(np.column_stack([RNG.uniform(0.4, 4.4, 7), RNG.uniform(0.4, 3.4, 7)]), requires_grad=True)
    w = Tensor(RNG.normal(size=(7, 3)))
    check_gradients(lambda g, c: ad.tsum(ad.mul(ad.grid_sample_2d(g, c)[0], w)), [grid, uv])


def test_grid_sample_3d_lattice_and_center():
    vol = rand_tensor(4, 4, 4, 2, requires_grad=False)
    out, valid = ad.grid_sample_3d(vol, Tensor([[1 / 3, 2 / 3, 0.0]]))
    np.testing.assert_allclose(out.data[0], vol.data[1, 2, 0], atol=1e-12)
    assert valid[0]
    # cell center = mean of the 8 surrounding voxel features
    center = Tensor([[0.5 / 3, 0.5 / 3, 0.5 / 3]])
    out, _ = ad.grid_sample_3d(vol, center)
    np.testing.assert_allclose(out.data[0], vol.data[:2, :2, :2].mean(axis=(0, 1, 2)), atol=1e-12)


def test_grid_sample_3d_gradients():
    vol = rand_tensor(3, 4, 5, 2)
    xyz = Tensor(RNG.uniform(0.1, 0.9, size=(6, 3)), requires_grad=True)
    w = Tensor(RNG.normal(size=(6, 2)))
    check_gradients(lambda v, c: ad.tsum(ad.mul(ad.grid_sample_3d(v, c)[0], w)), [vol, xyz])


# ---------------------------------------------------------------- convolutions


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_gradients(stride):
    x = rand_tensor(6, 5, 2)
    w = rand_tensor(3, 3, 2, 4)
    b = rand_tensor(4)
    oh, ow = -(-6 // stride), -(-5 // stride)
    target = Tensor(RNG.normal(size=(oh, ow, 4)))
    check_gradients(
        lambda xx, ww, bb: ad.tsum(ad.mul(ad.conv2d(xx, ww, bb, stride=stride), target)),
        [x, w, b],
    )


@pytest.mark.parametrize("stride", [1, 2])
def test_conv3d_gradients(stride):
    x = rand_tensor(4, 4, 3, 2)
    w = rand_tensor(3, 3, 3, 2, 3)
    b = rand_tensor(3)
    od, oh, ow = -(-4 // stride), -(-4 // stride), -(-3 // stride)
    target = Tensor(RNG.normal(size=(od, oh, ow, 3)))
    check_gradients(
        lambda xx, ww, bb: ad.tsum(ad.mul(ad.conv3d(xx, ww, bb, stride=stride), target)),
        [x, w, b],
    )


def test_conv2d_matches_direct_convolution():
    x = rand_tensor(5, 5, 1, requires_grad=False)
    w = rand_tensor(3, 3, 1, 1, requires_grad=False)
    out = ad.conv2d(x, w).data[:, :, 0]
    xp = np.pad(x.data[:, :, 0], 1)
    ref = np.zeros((5, 5))
    for i in range(5):
        for j in range(5):
            ref[i, j] = np.sum(xp[i : i + 3, j : j + 3] * w.data[:, :, 0, 0])
    np.testing.assert_allclose(out, ref, atol=1e-12)


# ---------------------------------------------------------------- misc behaviour


def test_no_grad_builds_no_graph():
    x = rand_tensor(3)
    with ad.no_grad():
        y = ad.exp(x)
    assert not y.requires_grad and y._parents == ()


def test_sorted_sum_matches_plain_sum():
    x = rand_tensor(4, 6, requires_grad=False)
    np.testing.assert_allclose(ad.sorted_sum(x, 0).data, x.data.sum(axis=0), rtol=1e-15)


def test_sorted_sum_bitwise_permutation_invariant():
    x = RNG.normal(size=(5, 3))
    base = ad.sorted_sum(Tensor(x), 0).data
    for _ in range(10):
        perm = RNG.permutation(5)
        np.testing.assert_array_equal(ad.sorted_sum(Tensor(x[perm]), 0).data, base)


def test_relative_error_metric():
    assert relative_error(np.array(1.0), np.array(1.0)) == 0.0
    assert relative_error(np.array(0.0), np.array(1e-6)) == pytest.approx(1e-6)
