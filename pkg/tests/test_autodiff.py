import numpy as np
import pytest

from dppeft import autodiff as ad
from dppeft.autodiff import Graph, ShapeError, Tensor

from cases import fd_check, op_cases
from oracles import numerical_grad, rel_err


@pytest.mark.parametrize("kind", sorted(op_cases(np.random.default_rng(0))))
def test_op_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    fn, arrays = op_cases(rng)[kind]
    assert fd_check(fn, arrays, rng) < 1e-6


def test_cases_cover_every_registered_op():
    assert set(op_cases(np.random.default_rng(0))) == set(ad.op_kinds())


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    g = ad.backward(x * x)
    assert g[x] == pytest.approx(6.0)


def test_constant_function_has_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.full(3, 2.0))
    out = ad.grad(ad.sum(c), {"x": x})
    assert np.all(out["x"] == 0)


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(x * 2.0)


def test_frozen_leaves_get_no_gradient():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    f = Tensor(np.ones((2, 2)), requires_grad=False)
    g = ad.backward(ad.sum(w @ f))
    assert w in g and f not in g


def test_graph_forward_replays_on_new_inputs():
    graph = Graph.trace(lambda x, y: x + y, x=np.array([0.0, 0.0]), y=np.array([0.0, 0.0]))
    graph.check()
    out = ad.forward(graph, {"x": np.array([1.0, 2.0]), "y": np.array([3.0, 4.0])})
    np.testing.assert_array_equal(out["out"], [4.0, 6.0])
    zero = Graph.trace(lambda x: x * 0.0, x=np.ones(3))
    np.testing.assert_array_equal(ad.forward(zero, {"x": np.arange(3.0)})["out"], np.zeros(3))


def test_forward_errors_name_the_node():
    graph = Graph.trace(lambda x, y: x + y, x=np.zeros(2), y=np.zeros(2))
    with pytest.raises(KeyError, match="unbound"):
        ad.forward(graph, {"x": np.zeros(2)})
    with pytest.raises(ShapeError, match="node"):
        ad.forward(graph, {"x": np.zeros(2), "y": np.zeros(3)})


def test_no_implicit_broadcasting():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(3))


def _mlp_arrays(rng):
    return {
        "x": rng.normal(size=(5, 4)),
        "w1": rng.normal(size=(4, 6)) * 0.5,
        "b1": rng.normal(size=6) * 0.1,
        "w2": rng.normal(size=(6, 3)) * 0.5,
        "b2": rng.normal(size=3) * 0.1,
    }


def _mlp(x, w1, b1, w2, b2):
    return ad.bias_add(ad.swish(ad.bias_add(x @ w1, b1)) @ w2, b2)


def test_mlp_forward_matches_straight_line_numpy():
    rng = np.random.default_rng(1)
    a = _mlp_arrays(rng)
    with ad.precision(np.float64):
        out = _mlp(**{k: Tensor(v) for k, v in a.items()}).data
    h = a["x"] @ a["w1"] + a["b1"]
    h = h / (1 + np.exp(-h))
    ref = h @ a["w2"] + a["b2"]
    np.testing.assert_allclose(out, ref, rtol=1e-6, atol=1e-9)


def test_mlp_gradient_h_1e3():
    rng = np.random.default_rng(2)
    a = _mlp_arrays(rng)
    with ad.precision(np.float64):
        leaves = {k: Tensor(v, requires_grad=k != "x") for k, v in a.items()}
        loss = ad.sum(ad.log_softmax(_mlp(**leaves), axis=-1))
        grads = ad.grad(loss, leaves)
        for k in ("w1", "b1", "w2", "b2"):
            num = numerical_grad(
                lambda: float(ad.sum(ad.log_softmax(_mlp(**{n: Tensor(v) for n, v in a.items()}), axis=-1)).data),
                a[k],
                h=1e-3,
            )
            assert rel_err(grads[k], num) < 1e-6, k


def test_backward_is_linear():
    rng = np.random.default_rng(3)
    a = _mlp_arrays(rng)
    with ad.precision(np.float64):
        leaves = {k: Tensor(v, requires_grad=True) for k, v in a.items()}
        f = ad.sum(_mlp(**leaves))
        g = ad.sum(ad.softmax(_mlp(**leaves), axis=-1) * ad.constant(rng.normal(size=(5, 3))))
        combo = ad.grad(ad.scale(f, 2.5) + ad.scale(g, -0.5), leaves)
        gf = ad.grad(f, leaves)
        gg = ad.grad(g, leaves)
    for k in leaves:
        np.testing.assert_allclose(combo[k], 2.5 * gf[k] - 0.5 * gg[k], atol=1e-6)


def test_backward_is_deterministic():
    rng = np.random.default_rng(4)
    a = _mlp_arrays(rng)
    runs = []
    for _ in range(2):
        leaves = {k: Tensor(v, requires_grad=True) for k, v in a.items()}
        runs.append(ad.grad(ad.sum(_mlp(**leaves)), leaves))
    for k in a:
        assert np.array_equal(runs[0][k], runs[1][k])


def test_default_dtype_and_precision_switch():
    assert Tensor(1.0).dtype == np.float32
    with ad.precision(np.float64):
        assert Tensor(1.0).dtype == np.float64
    assert Tensor(1.0).dtype == np.float32


def test_outputs_finite_for_extreme_inputs():
    x = Tensor(np.array([[-1e4, 0.0, 1e4]]))
    for fn in (ad.softmax, ad.log_softmax, ad.sigmoid, ad.swish):
        assert np.isfinite(fn(x).data).all()
