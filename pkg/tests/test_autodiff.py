"""Engine-level checks: forward semantics, gradients, higher-order support."""

import numpy as np
import pytest

import cbre.autodiff as ad
from cbre.gradcheck import (
    check_random_graph,
    check_random_graph_second_order,
    finite_diff_grad,
    rel_err,
)


def test_relu_values():
    tape = ad.Tape()
    out = ad.relu(tape.input([1.0, -2.0, 0.0]))
    assert np.array_equal(out.value, [1.0, 0.0, 0.0])


def test_matmul_identity():
    tape = ad.Tape()
    eye = tape.input(np.eye(2))
    m = tape.input([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(ad.matmul(eye, m).value, [[3.0, 4.0], [5.0, 6.0]])


def test_row_l2_norm_three_four_five():
    tape = ad.Tape()
    out = ad.row_l2_norm(tape.input([[3.0, 4.0]]))
    assert out.shape == (1, 1)
    assert abs(out.value[0, 0] - 5.0) < 1e-9


def test_sigmoid_at_zero_and_extremes():
    tape = ad.Tape()
    out = ad.sigmoid(tape.input([0.0, 800.0, -800.0]))
    assert np.allclose(out.value, [0.5, 1.0, 0.0])
    assert np.all(np.isfinite(out.value))


def test_grad_of_sum_is_ones():
    tape = ad.Tape()
    x = tape.param(np.array([1.0, 5.0, -3.0]))
    (g,) = ad.grad(ad.sum(x), [x])
    assert np.array_equal(g.value, [1.0, 1.0, 1.0])


def test_second_order_of_square():
    tape = ad.Tape()
    x = tape.param(np.array([2.0]))
    out = ad.sum(ad.square(x))
    (g,) = ad.grad(out, [x], create_graph=True)
    assert np.allclose(g.value, [4.0])
    (gg,) = ad.grad(ad.sum(g), [x])
    assert np.allclose(gg.value, [2.0])


def test_mlp_layer_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    w = rng.standard_normal((4, 4))
    x = rng.standard_normal((4, 1))

    def build():
        tape = ad.Tape()
        wt = tape.param(w)
        return ad.mean(ad.relu(ad.matmul(wt, tape.input(x)))), wt

    out, wt = build()
    (analytic,) = ad.grad(out, [wt])
    (fd,) = finite_diff_grad(lambda: build()[0].item(), [w])
    assert rel_err(analytic.value, fd) <= 1e-6


# ---------------------------------------------------------------------------
# Every primitive against the finite-difference oracle.  A fixed random
# weighting is applied before the reduction so direction errors (transposes,
# index maps) cannot cancel out in a plain sum.

def _case_inputs(name, rng):
    if name in ("recip",):
        return [rng.uniform(0.5, 1.5, (2, 3))]
    if name in ("sqrt_eps",):
        return [rng.uniform(0.1, 2.0, (2, 3))]
    if name in ("relu",):
        return [np.sign(rng.standard_normal((2, 3))) * rng.uniform(0.1, 1.0, (2, 3))]
    if name == "row_l2_norm":
        return [np.sign(rng.standard_normal((3, 4))) * rng.uniform(0.3, 1.0, (3, 4))]
    if name == "matmul":
        return [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]
    if name == "add_row_broadcast":
        return [rng.standard_normal((3, 4)), rng.standard_normal((1, 4))]
    if name == "mul_scalar_operand":
        return [rng.standard_normal(()), rng.standard_normal((2, 3))]
    if name in ("add", "sub", "mul_elem"):
        return [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))]
    if name == "concat_cols":
        return [rng.standard_normal((2, 2)), rng.standard_normal((2, 3))]
    if name == "slice_cols":
        return [rng.standard_normal((2, 5))]
    if name == "pad_cols":
        return [rng.standard_normal((2, 2))]
    if name == "gather_rows":
        return [rng.standard_normal((4, 3))]
    if name == "scatter_rows":
        return [rng.standard_normal((3, 2))]
    return [rng.standard_normal((2, 3))]


_EXPRS = {
    "matmul": lambda t, p: ad.matmul(p[0], p[1]),
    "add": lambda t, p: ad.add(p[0], p[1]),
    "add_row_broadcast": lambda t, p: ad.add(p[0], p[1]),
    "sub": lambda t, p: ad.sub(p[0], p[1]),
    "mul_elem": lambda t, p: ad.mul_elem(p[0], p[1]),
    "mul_scalar_operand": lambda t, p: ad.mul_elem(p[0], p[1]),
    "scalar_mul": lambda t, p: ad.scalar_mul(-1.7, p[0]),
    "concat_cols": lambda t, p: ad.concat_cols(p[0], p[1]),
    "slice_cols": lambda t, p: ad.slice_cols(p[0], 1, 4),
    "pad_cols": lambda t, p: ad.pad_cols(p[0], 2, 6),
    "transpose": lambda t, p: ad.transpose(p[0]),
    "gather_rows": lambda t, p: ad.gather_rows(p[0], np.array([2, 0, 2, 3])),
    "scatter_rows": lambda t, p: ad.scatter_rows(p[0], np.array([4, 1, 4]), 6),
    "relu": lambda t, p: ad.relu(p[0]),
    "sigmoid": lambda t, p: ad.sigmoid(p[0]),
    "sum": lambda t, p: ad.sum(p[0]),
    "mean": lambda t, p: ad.mean(p[0]),
    "square": lambda t, p: ad.square(p[0]),
    "recip": lambda t, p: ad.recip(p[0]),
    "sqrt_eps": lambda t, p: ad.sqrt_eps(p[0]),
    "row_l2_norm": lambda t, p: ad.row_l2_norm(p[0]),
}


@pytest.mark.parametrize("name", sorted(_EXPRS))
def test_primitive_gradient_matches_finite_differences(name):
    rng = np.random.default_rng(hash(name) % (2**32))
    arrays = _case_inputs(name, rng)
    expr = _EXPRS[name]

    probe_tape = ad.Tape()
    probe = expr(probe_tape, [probe_tape.param(a) for a in arrays])
    weights = rng.standard_normal(probe.value.shape)

    def build():
        tape = ad.Tape()
        lifted = [tape.param(a) for a in arrays]
        out = ad.sum(ad.mul_elem(expr(tape, lifted), tape.const(weights)))
        return out, lifted

    out, lifted = build()
    analytic = [g.value.copy() for g in ad.grad(out, lifted)]
    fd = finite_diff_grad(lambda: build()[0].item(), arrays)
    worst = max(rel_err(a, f) for a, f in zip(analytic, fd))
    assert worst <= 1e-6, f"{name}: worst relative error {worst}"


def test_random_composed_graphs_first_order():
    rng = np.random.default_rng(42)
    for _ in range(25):
        assert check_random_graph(rng, depth=6, dim_max=8) <= 1e-6


def test_random_composed_graphs_second_order():
    rng = np.random.default_rng(43)
    for _ in range(10):
        assert check_random_graph_second_order(rng, depth=4, dim_max=6) <= 1e-5


def test_gradient_linearity():
    rng = np.random.default_rng(3)
    x_arr = rng.standard_normal((3, 3))
    a_mat = rng.standard_normal((3, 3))
    tape = ad.Tape()
    x = tape.param(x_arr)
    f = ad.mean(ad.sigmoid(ad.matmul(x, tape.const(a_mat))))
    g = ad.sum(ad.square(x))
    combined = ad.add(ad.scalar_mul(2.5, f), ad.scalar_mul(-1.25, g))
    (gf,) = ad.grad(f, [x])
    (gg,) = ad.grad(g, [x])
    (gc,) = ad.grad(combined, [x])
    assert np.max(np.abs(gc.value - (2.5 * gf.value - 1.25 * gg.value))) <= 1e-12


def test_identical_tape_is_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        tape = ad.Tape()
        x = tape.param(rng.standard_normal((4, 4)))
        w = tape.param(rng.standard_normal((4, 2)))
        out = ad.mean(ad.relu(ad.matmul(x, w)))
        gx, gw = ad.grad(out, [x, w])
        return out.value.tobytes(), gx.value.tobytes(), gw.value.tobytes()

    assert run() == run()


def test_grad_wrt_intermediate_concat_node():
    # The gradient penalty differentiates the critic output with respect to
    # the concatenated [noise, representation] input, not a leaf.
    tape = ad.Tape()
    v = tape.input(np.array([[0.5, -1.0]]))
    z = tape.input(np.array([[2.0, 3.0, -1.0]]))
    cat = ad.concat_cols(v, z)
    w = tape.const(np.array([[1.0], [2.0], [3.0], [4.0], [5.0]]))
    out = ad.sum(ad.matmul(cat, w))
    (g,) = ad.grad(out, [cat])
    assert np.allclose(g.value, [[1.0, 2.0, 3.0, 4.0, 5.0]])


def test_grad_of_disconnected_target_is_zero():
    tape = ad.Tape()
    x = tape.param(np.array([1.0, 2.0]))
    y = tape.param(np.array([[3.0]]))
    out = ad.sum(ad.square(x))
    (gy,) = ad.grad(out, [y])
    assert np.array_equal(gy.value, [[0.0]])


def test_create_graph_records_backward_onto_tape():
    tape = ad.Tape()
    x = tape.param(np.array([[1.0, 2.0]]))
    out = ad.sum(ad.square(x))
    before = len(tape)
    (g,) = ad.grad(out, [x], create_graph=True)
    assert len(tape) > before
    (gg,) = ad.grad(ad.sum(g), [x])
    assert np.allclose(gg.value, [[2.0, 2.0]])


def test_param_lift_is_cached_by_identity():
    tape = ad.Tape()
    arr = np.zeros((2, 2))
    assert tape.param(arr).nid == tape.param(arr).nid
    assert tape.param(arr.copy()).nid != tape.param(arr).nid


def test_forward_op_dispatch():
    tape = ad.Tape()
    x = tape.input([[1.0, -1.0]])
    assert np.array_equal(ad.forward_op("relu", x).value, [[1.0, 0.0]])
    with pytest.raises(ValueError, match="unknown op kind"):
        ad.forward_op("conv2d", x)


def test_shape_mismatch_errors_name_op_and_shapes():
    tape = ad.Tape()
    a = tape.input(np.zeros((2, 3)))
    b = tape.input(np.zeros((4, 2)))
    with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(4, 2\)"):
        ad.matmul(a, b)
    with pytest.raises(ValueError, match="add"):
        ad.add(a, b)


def test_grad_rejects_non_scalar_output():
    tape = ad.Tape()
    x = tape.param(np.zeros((2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        ad.grad(ad.square(x), [x])


def test_grad_rejects_foreign_tape():
    t1, t2 = ad.Tape(), ad.Tape()
    x = t1.param(np.array([1.0]))
    y = t2.param(np.array([1.0]))
    with pytest.raises(ValueError, match="tape"):
        ad.grad(ad.sum(x), [y])


def test_sqrt_eps_rejects_negative_input():
    tape = ad.Tape()
    with pytest.raises(ValueError, match="non-negative"):
        ad.sqrt_eps(tape.input([-1.0]))


def test_grad_request_object_form():
    tape = ad.Tape()
    x = tape.param(np.array([3.0]))
    req = ad.GradRequest(output=ad.sum(ad.square(x)), wrt=[x])
    (g,) = ad.grad(req)
    assert np.allclose(g.value, [6.0])


def test_operator_sugar_matches_named_ops():
    tape = ad.Tape()
    a = tape.input([[1.0, 2.0]])
    b = tape.input([[3.0, 4.0]])
    assert np.array_equal((a + b).value, [[4.0, 6.0]])
    assert np.array_equal((a - b).value, [[-2.0, -2.0]])
    assert np.array_equal((a * b).value, [[3.0, 8.0]])
    assert np.array_equal((2.0 * a).value, [[2.0, 4.0]])
    assert np.array_equal((-a).value, [[-1.0, -2.0]])
