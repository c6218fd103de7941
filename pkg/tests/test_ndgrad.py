import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flatsurr import ndgrad as nd
from _oracles import fd_input_grad, fd_param_grad, random_small_model, rel_err


def _check_op(fn, *shapes, seed=0, eps=1e-6):
    """Compare the tape gradient of sum(w * fn(...)) against central differences."""
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=s) for s in shapes]
    out0 = fn(*[nd.Node(x) for x in xs]).value
    w = rng.normal(size=out0.shape)

    def f(*vals):
        return float((fn(*[nd.Node(v) for v in vals]).value * w).sum())

    nodes = [nd.Node(x) for x in xs]
    grads = nd.backward(fn(*nodes), nodes, seed=w)
    for i, x in enumerate(xs):
        fd = np.zeros_like(x)
        for j in range(x.size):
            d = np.zeros(x.size)
            d[j] = eps
            d = d.reshape(x.shape)
            lo = [v for v in xs]
            hi = [v for v in xs]
            lo[i], hi[i] = x - d, x + d
            fd.flat[j] = (f(*hi) - f(*lo)) / (2 * eps)
        assert rel_err(grads[i], fd) < 1e-7, (fn, i)


@pytest.mark.parametrize("fn,shapes", [
    (lambda a, b: nd.add(a, b), [(3, 4), (4,)]),
    (lambda a, b: nd.add(a, b), [(2, 3, 1, 1), (1, 3, 1, 1)]),
    (lambda a: nd.scale(a, -0.7), [(5,)]),
    (lambda a, b: nd.matmul(a, b), [(3, 4), (4, 2)]),
    (lambda a, b, c: nd.linear(a, b, c), [(3, 4), (4, 2), (2,)]),
    (lambda a: nd.relu(a), [(4, 5)]),
    (lambda a: nd.flatten(a), [(2, 3, 2, 2)]),
    (lambda a: nd.global_avg_pool(a), [(2, 3, 4, 4)]),
    (lambda a, b: nd.conv2d(a, b), [(2, 2, 5, 5), (3, 2, 3, 3)]),
    (lambda a, b: nd.conv2d(a, b, stride=2, pad=0), [(1, 2, 7, 7), (2, 2, 3, 3)]),
    (lambda a: nd.maxpool2x2(a), [(2, 2, 4, 4)]),
    (lambda a: nd.resize_nearest(a, 7), [(2, 1, 4, 4)]),
    (lambda a: nd.pad_to(a, 1, 2, 7), [(2, 1, 4, 4)]),
])
def test_primitive_gradients(fn, shapes):
    _check_op(fn, *shapes)


def test_batchnorm_gradients_both_modes():
    rm, rv = np.array([0.1, -0.2]), np.array([1.5, 0.7])
    for train in (True, False):
        def fn(x, g, b):
            return nd.batchnorm(x, g, b, rm, rv, train, 1e-5)[0]
        _check_op(fn, (4, 2, 3, 3), (2,), (2,), seed=3)


def test_cross_entropy_gradient_and_value():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(4, 3))
    y = np.array([0, 2, 1, 2])
    node = nd.Node(logits)
    loss = nd.softmax_cross_entropy(node, y)
    (g,) = nd.backward(loss, [node])
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    assert loss.value == pytest.approx(-np.log(p[np.arange(4), y]).mean(), rel=1e-12)
    onehot = np.eye(3)[y]
    np.testing.assert_allclose(g, (p - onehot) / 4, rtol=1e-10)


@pytest.mark.parametrize("seed", range(6))
def test_model_gradients_match_finite_differences(seed):
    graph, params, x, y = random_small_model(seed)
    for mode in ("train", "eval"):
        r = nd.forward_backward(graph, params, x, y, mode=mode)
        fd = fd_param_grad(graph, params, x, y, mode)
        assert rel_err(nd.flat(r.grads), nd.flat(fd)) < 1e-6
        gx = nd.grad_wrt_input(graph, params, x, y, mode=mode)
        assert rel_err(gx, fd_input_grad(graph, params, x, y, mode)) < 1e-6


def test_shared_node_accumulates():
    x = nd.Node(np.array([1.5, -2.0]))
    y = nd.add(x, x)
    (g,) = nd.backward(y, [x])
    np.testing.assert_array_equal(g, [2.0, 2.0])


def test_grad_scale_multiplies_signal():
    x = nd.Node(np.array([3.0]))
    r = nd.scale(x, 2.0)
    r.grad_scale = 0.25
    (g,) = nd.backward(r, [x])
    assert g[0] == 0.5


def test_unreachable_leaf_gets_zero():
    a, b = nd.Node(np.ones(2)), nd.Node(np.ones(3))
    (ga, gb) = nd.backward(nd.scale(a, 2.0), [a, b])
    np.testing.assert_array_equal(gb, 0.0)


def test_non_finite_raises_with_node_name():
    with np.errstate(over="ignore"), pytest.raises(nd.NonFiniteError) as e:
        nd.scale(nd.Node(np.array([1e308])), 1e10, name="blowup")
    assert e.value.node == "blowup"


def test_hvp_on_quadratic():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])

    def loss_at(p):
        w = p["w"]
        return 0.5 * w @ A @ w, {"w": A @ w}

    v = {"w": np.array([1.0, -2.0])}
    out = nd.hvp(loss_at, {"w": np.array([0.3, 0.1])}, v)
    np.testing.assert_allclose(out["w"], A @ v["w"], rtol=1e-10)
    with pytest.raises(nd.ZeroVectorError):
        nd.hvp(loss_at, {"w": np.zeros(2)}, {"w": np.zeros(2)})


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 3), st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_pad_is_adjoint_of_crop(n, top, left, seed):
    # <pad(x), y> == <x, pad^T(y)> for the linear padding map
    rng = np.random.default_rng(seed)
    size = n + 3
    x = rng.normal(size=(1, 1, n, n))
    node = nd.Node(x)
    out = nd.pad_to(node, top, left, size)
    yv = rng.normal(size=out.value.shape)
    (gx,) = nd.backward(out, [node], seed=yv)
    assert np.isclose((out.value * yv).sum(), (x * gx).sum())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_flat_unflat_roundtrip(seed, k):
    rng = np.random.default_rng(seed)
    like = {f"t{i}": rng.normal(size=tuple(rng.integers(1, 4, size=rng.integers(1, 3))))
            for i in range(k)}
    back = nd.unflat(nd.flat(like), like)
    for key in like:
        np.testing.assert_array_equal(back[key], like[key])
    assert nd.norm(like) == pytest.approx(np.linalg.norm(nd.flat(like)))


def _tiny_mlp_objective(seed):
    from flatsurr import models, sharpness
    rng = np.random.default_rng(seed)
    g, p = models.build_model(models.ArchSpec("mlp", (2,), 2, widths=(4,)), seed, np.float64)
    p = p.replace({"fc0.bias": rng.normal(0, 0.2, 4), "out.bias": rng.normal(0, 0.2, 2)})
    y = rng.integers(0, 2, 32)
    x = np.array([[0.3, 0.3], [0.7, 0.7]])[y] + rng.normal(0, 0.08, (32, 2))
    return sharpness.model_objective(g, p, (x, y))


def test_hvp_matches_dense_second_differences():
    from _oracles import dense_hessian
    obj = _tiny_mlp_objective(5)
    H = dense_hessian(obj)
    rng = np.random.default_rng(0)
    for _ in range(3):
        v = rng.normal(size=obj.dim)
        assert rel_err(obj.hvp_flat(v), H @ v) <= 1e-3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_hvp_is_linear_in_v(seed, a):
    obj = _tiny_mlp_objective(seed % 7)
    v = np.random.default_rng(seed).normal(size=obj.dim)
    assert rel_err(obj.hvp_flat(a * v), a * obj.hvp_flat(v)) <= 1e-4


def test_eight_parameter_mlp_gradient():
    from flatsurr import models
    g, p = models.build_model(models.ArchSpec("mlp", (3,), 2, widths=(1,)), 3, np.float64)
    p = p.replace({"fc0.bias": np.array([0.1]), "out.bias": np.array([0.05, 0.0])})
    assert p.count() == 8
    x, y = np.array([[0.4, 0.2, 0.7], [0.9, 0.5, 0.3], [0.1, 0.8, 0.6]]), np.array([0, 1, 1])
    from _oracles import fd_param_grad
    r = nd.forward_backward(g, p, x, y, mode="eval")
    fd = fd_param_grad(g, p, x, y, "eval", eps=1e-5)
    assert rel_err(nd.flat(r.grads), nd.flat(fd)) < 1e-6
