import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from knlab import autodiff as ad
from knlab.autodiff import Graph, Tensor, evaluate, gradient
from knlab.exceptions import NumericError, ShapeError

from conftest import random_model, random_prompt
from oracles import central_fd


def square_graph():
    return Graph(lambda inp, tr: {"y": ad.sum_(tr.tap("sq", inp["x"] * inp["x"]))}, {"x": ()})


def test_square_value_and_gradient():
    g = square_graph()
    assert evaluate(g, {"x": np.array(3.0)})["y"] == 9.0
    assert gradient(g, {"x": np.array(3.0)}, "y", ["x"])["x"] == 6.0


def test_softmax_of_equal_logits():
    out = ad.softmax(Tensor(np.zeros(2))).data
    assert out.tolist() == [0.5, 0.5]


def test_forward_is_bitwise_deterministic(model):
    ids, pos = random_prompt(np.random.default_rng(0), model.config)
    a, acts_a = model.forward(ids, pos)
    b, acts_b = model.forward(ids, pos)
    assert a.tobytes() == b.tobytes() and acts_a.tobytes() == acts_b.tobytes()


def test_log_softmax_gradient_matches_central_differences():
    x0 = np.array([0.3, -1.2, 2.0, 0.7])
    g = Graph(lambda inp, tr: {"y": ad.log_softmax(inp["x"])[2]}, {"x": (4,)})
    analytic = gradient(g, {"x": x0}, "y", ["x"])["x"]

    def f(x):
        return float(evaluate(g, {"x": x})["y"])

    for i in range(4):
        fd = central_fd(f, x0, i)
        assert abs(analytic[i] - fd) <= 1e-6 * max(abs(fd), 1e-8)


def test_gradient_of_unused_tap_is_zero():
    def build(inp, tr):
        unused = tr.tap("unused", inp["x"] * 2.0)
        used = tr.tap("used", inp["x"] * 3.0)
        return {"y": ad.sum_(used), "z": ad.sum_(unused)}

    g = Graph(build, {"x": (3,)})
    grads = gradient(g, {"x": np.ones(3)}, "y", ["unused", "used", "x"])
    assert np.array_equal(grads["unused"], np.zeros(3))
    assert np.array_equal(grads["used"], np.ones(3))
    assert np.array_equal(grads["x"], 3 * np.ones(3))


def test_override_replaces_tap_value():
    g = square_graph()
    out = evaluate(g, {"x": np.array(3.0)}, overrides={"sq": lambda v: v * 0.0 + 1.0})
    assert out["y"] == 1.0 and out["sq"] == 1.0


def test_graph_input_validation():
    g = square_graph()
    with pytest.raises(ShapeError):
        evaluate(g, {"x": np.ones(2)})
    with pytest.raises(ShapeError):
        evaluate(g, {})
    with pytest.raises(ShapeError):
        evaluate(g, {"x": np.array(1.0), "extra": np.array(1.0)})


def test_gradient_name_and_shape_errors():
    g = Graph(lambda inp, tr: {"v": tr.tap("t", inp["x"] * 1.0), "s": ad.sum_(inp["x"])}, {"x": (2,)})
    with pytest.raises(ShapeError):
        gradient(g, {"x": np.ones(2)}, "v", ["x"])
    with pytest.raises(KeyError):
        gradient(g, {"x": np.ones(2)}, "missing", ["x"])
    with pytest.raises(KeyError):
        gradient(g, {"x": np.ones(2)}, "s", ["nowhere"])


def test_duplicate_tap_is_rejected():
    def build(inp, tr):
        tr.tap("a", inp["x"] * 1.0)
        return {"y": ad.sum_(tr.tap("a", inp["x"] * 2.0))}

    with pytest.raises(ValueError):
        evaluate(Graph(build, {"x": (1,)}), {"x": np.ones(1)})


def test_non_finite_intermediate_raises():
    g = Graph(lambda inp, tr: {"y": ad.sum_(ad.log(inp["x"]))}, {"x": (2,)})
    with pytest.raises(NumericError):
        evaluate(g, {"x": np.array([1.0, 0.0])})


def test_repeated_index_gradient_accumulates():
    x = Tensor(np.arange(4.0), requires_grad=True)
    y = ad.sum_(ad.getitem(x, np.array([1, 1, 3])))
    (gx,) = ad.backward(y, [x])
    assert gx.tolist() == [0.0, 2.0, 0.0, 1.0]


def test_backward_zero_for_independent_tensor():
    x = Tensor(np.ones(3), requires_grad=True)
    other = Tensor(np.ones(2), requires_grad=True)
    gx, go = ad.backward(ad.sum_(x * x), [x, other])
    assert gx.tolist() == [2.0, 2.0, 2.0] and go.tolist() == [0.0, 0.0]


# every primitive against central differences, many seeds

UNARY = {
    "exp": ad.exp, "tanh": ad.tanh, "gelu": ad.gelu, "relu": ad.relu,
    "log": lambda x: ad.log(ad.exp(x) + 1.0),
    "softmax": lambda x: ad.softmax(x, axis=-1),
    "log_softmax": lambda x: ad.log_softmax(x, axis=-1),
    "mean": lambda x: ad.mean(x, axis=0, keepdims=True) * x,
    "reshape_transpose": lambda x: ad.transpose(ad.reshape(x, (4, 3)), (1, 0)) * 2.0,
    "getitem": lambda x: ad.getitem(x, (slice(None), np.array([0, 2, 2]))),
}
BINARY = {
    "add": ad.add, "sub": ad.sub, "mul": ad.mul,
    "div": lambda a, b: ad.div(a, ad.exp(b)),
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b, (1, 0))),
    "broadcast_add": lambda a, b: ad.add(a, ad.sum_(b, axis=0)),
}


def _check_primitive(fn, arrays, weights):
    def objective(*xs):
        return float((fn(*[Tensor(x) for x in xs]).data * weights).sum())

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    grads = ad.backward(ad.sum_(ad.mul(out, Tensor(weights))), tensors)
    for k, (a, g) in enumerate(zip(arrays, grads)):
        for idx in np.ndindex(a.shape):
            def f(x, k=k):
                xs = list(arrays)
                xs[k] = x
                return objective(*xs)

            fd = central_fd(f, a, idx)
            assert abs(g[idx] - fd) <= 1e-4 * max(abs(g[idx]), abs(fd), 1e-6), (idx, g[idx], fd)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    if name == "relu":
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
    out_shape = UNARY[name](Tensor(x)).shape
    _check_primitive(UNARY[name], [x], rng.normal(size=out_shape))


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitive_gradients(name, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    out_shape = BINARY[name](Tensor(a), Tensor(b)).shape
    _check_primitive(BINARY[name], [a, b], rng.normal(size=out_shape))


@pytest.mark.parametrize("seed", range(20))
def test_layer_norm_and_embedding_gradients(seed):
    rng = np.random.default_rng(seed)
    x, g, b = rng.normal(size=(2, 5)), rng.normal(size=5), rng.normal(size=5)
    _check_primitive(lambda x, g, b: ad.layer_norm(x, g, b), [x, g, b], rng.normal(size=(2, 5)))
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    _check_primitive(lambda w: ad.embedding(w, ids), [rng.normal(size=(4, 3))], rng.normal(size=(2, 3, 3)))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_softmax_is_a_distribution(values):
    p = ad.softmax(Tensor(np.array(values))).data
    assert np.all(p >= 0) and abs(p.sum() - 1.0) <= 1e-12


def test_model_gradient_wrt_tap_matches_perturbed_forward():
    model = random_model(4)
    rng = np.random.default_rng(0)
    ids, pos = random_prompt(rng, model.config)
    y = 5
    g = model.graph(ids, pos, y)
    grads = gradient(g, model.weights, "logprob", ["mlp_act.0"])["mlp_act.0"]
    idx = (0, int(rng.integers(len(ids))), 3)

    def f(delta):
        bump = np.zeros(grads.shape)
        bump[idx] = delta
        return float(evaluate(g, model.weights, {"mlp_act.0": lambda v: v + bump})["logprob"])

    fd = (f(1e-5) - f(-1e-5)) / 2e-5
    assert abs(grads[idx] - fd) <= 1e-6 * max(abs(fd), 1e-8)
