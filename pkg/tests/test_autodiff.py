import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from idsds import autodiff as ad
from idsds import weights as atb
from idsds.autodiff import Tensor
from idsds.errors import FormatError, NumericFault, ShapeError

from .oracles import central_difference, conv2d_direct, relative_error


def test_relu_example():
    assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_softmax_example():
    np.testing.assert_array_equal(ad.softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_conv_ones_example():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def test_linear_backward_example():
    x = Tensor([1.0, 2.0], requires_grad=True)
    w = Tensor([3.0, 4.0])
    (x * w).sum().backward()
    np.testing.assert_array_equal(x.grad, [3.0, 4.0])


def test_relu_subgradient_at_zero():
    x = Tensor([0.0, -0.0, 1.0], requires_grad=True)
    ad.relu(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_shape_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 2, 2))))


def test_nonfinite_output_is_a_fault():
    with pytest.raises(NumericFault):
        ad.log(Tensor([0.0]))
    with pytest.raises(NumericFault):
        ad.exp(Tensor([1e4]))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv_matches_direct_loops(stride, padding):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 2))
    b = rng.normal(size=4)
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
    np.testing.assert_allclose(got, conv2d_direct(x, w, b, stride, padding), rtol=0, atol=1e-12)


def _fd_check(build, params, coords=40, seed=0, tol=1e-4):
    """Compare backward gradients with central differences on random coordinates."""
    rng = np.random.default_rng(seed)
    loss = build()
    for p in params:
        p.grad = None
    loss.backward()
    worst = 0.0
    for _ in range(coords):
        p = params[rng.integers(len(params))]
        idx = tuple(rng.integers(s) for s in p.shape)
        numeric = central_difference(lambda: build().item(), p.data, idx)
        worst = max(worst, relative_error(p.grad[idx], numeric))
    assert worst <= tol


def test_gradients_of_each_op_match_finite_differences():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3, requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, size=4), requires_grad=True)
    beta = Tensor(rng.normal(size=4), requires_grad=True)
    lw = Tensor(rng.normal(size=(5, 4)), requires_grad=True)

    def build():
        rm, rv = np.zeros(4), np.ones(4)
        h = ad.conv2d(x, w, b, 1, 1)
        h = ad.batch_norm2d(h, gamma, beta, rm, rv, mode="train")
        h = ad.relu(h)
        h = ad.max_pool2d(h, 2)
        h = ad.avg_pool2d(h, 3) * 0.5 + ad.global_avg_pool(h).reshape(2, 4, 1, 1)
        logits = ad.linear(ad.flatten(h), lw)
        return ad.cross_entropy(logits, [1, 3]) + ad.log_softmax(logits)[:, 0].mean()

    _fd_check(build, [x, w, b, gamma, beta, lw], coords=100)


def test_gradients_of_elementwise_ops():
    rng = np.random.default_rng(2)
    a = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    c = Tensor(rng.uniform(0.5, 2.0, size=(4,)), requires_grad=True)

    def build():
        h = ad.div(a * c - c, a + 1.0) + ad.exp(-a) + ad.log(a * c)
        return (ad.softmax(h) * Tensor(np.arange(12.0).reshape(3, 4))).sum() + (a @ c.reshape(4, 1)).mean()

    _fd_check(build, [a, c], coords=50)


def test_eval_batch_norm_uses_running_statistics_only():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 2, 3, 3))
    rm, rv = np.array([0.3, -1.0]), np.array([2.0, 0.5])
    out = ad.batch_norm2d(Tensor(x), Tensor([1.5, 0.5]), Tensor([0.1, 0.2]), rm.copy(), rv.copy(), mode="eval").data
    expected = (x - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + 1e-5) * np.array([1.5, 0.5]).reshape(
        1, 2, 1, 1
    ) + np.array([0.1, 0.2]).reshape(1, 2, 1, 1)
    np.testing.assert_allclose(out, expected, atol=1e-12)
    # a single image gives the same answer as the batch it came from
    single = ad.batch_norm2d(Tensor(x[:1]), Tensor([1.5, 0.5]), Tensor([0.1, 0.2]), rm, rv, mode="eval").data
    np.testing.assert_array_equal(single, out[:1])


def test_eval_batch_norm_identity_stats_is_idempotent_affine():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    ones, zeros = Tensor(np.ones(3)), Tensor(np.zeros(3))
    once = ad.batch_norm2d(x, ones, zeros, np.zeros(3), np.ones(3) - 1e-5, mode="eval")
    twice = ad.batch_norm2d(once, ones, zeros, np.zeros(3), np.ones(3) - 1e-5, mode="eval")
    np.testing.assert_allclose(twice.data, once.data, atol=1e-12)


def test_train_batch_norm_updates_running_buffers():
    x = Tensor(np.arange(16.0).reshape(2, 1, 2, 4))
    rm, rv = np.zeros(1), np.ones(1)
    ad.batch_norm2d(x, Tensor([1.0]), Tensor([0.0]), rm, rv, mode="train", momentum=0.1)
    assert rm[0] == pytest.approx(0.1 * 7.5)
    assert rv[0] == pytest.approx(0.9 + 0.1 * np.var(np.arange(16.0), ddof=1))


def test_max_pool_ties_route_gradient_to_one_element():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    ad.max_pool2d(x, 2).sum().backward()
    assert x.grad.sum() == 1.0


def test_graph_gradient_independent_of_construction_order():
    rng = np.random.default_rng(5)
    xv, wv = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

    def grads(order):
        x = Tensor(xv, requires_grad=True)
        w = Tensor(wv, requires_grad=True)
        h1 = ad.relu(x @ w)
        h2 = ad.exp(x * 0.1).sum(axis=1)
        terms = [h1.sum(), h2.mean(), (h1 * h1).mean()]
        total = terms[order[0]]
        for i in order[1:]:
            total = total + terms[i]
        total.backward()
        return x.grad, w.grad

    gx0, gw0 = grads([0, 1, 2])
    for order in ([2, 1, 0], [1, 2, 0]):
        gx, gw = grads(order)
        np.testing.assert_allclose(gx, gx0, rtol=0, atol=1e-12)
        np.testing.assert_allclose(gw, gw0, rtol=0, atol=1e-12)


def test_intermediate_gradients_are_exposed():
    x = Tensor(np.array([[1.0, -2.0, 3.0]]), requires_grad=True)
    h = ad.relu(x * 2.0)
    (h * Tensor([[1.0, 2.0, 3.0]])).sum().backward()
    np.testing.assert_array_equal(h.grad, [[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(x.grad, [[2.0, 0.0, 6.0]])


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite))
def test_softmax_is_a_distribution(logits):
    p = ad.softmax(Tensor(logits)).data
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, (1, 2, 5, 5), elements=finite),
    arrays(np.float64, (1, 2, 5, 5), elements=finite),
    finite,
    finite,
)
def test_conv_is_linear_in_input(x, y, a, b):
    w = Tensor(np.random.default_rng(0).normal(size=(3, 2, 3, 3)))
    lhs = ad.conv2d(Tensor(a * x + b * y), w, padding=1).data
    rhs = a * ad.conv2d(Tensor(x), w, padding=1).data + b * ad.conv2d(Tensor(y), w, padding=1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10 * max(1.0, np.abs(lhs).max()))


# ATB1 weight container


def test_weights_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(6)
    tensors = {
        "conv1.weight": rng.normal(size=(4, 3, 3, 3)),
        "scalar": np.array(np.pi),
        "empty": np.zeros((0, 3)),
        "ünicode": np.array([1e-300, -0.0, np.finfo(float).max]),
    }
    atb.save(tmp_path / "w.atb", tensors)
    back = atb.load(tmp_path / "w.atb")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].astype("<f8").tobytes()
    assert atb.dumps(back) == atb.dumps(tensors)


def test_weights_layout_matches_container_format():
    buf = atb.dumps({"ab": np.array([[1.0, 2.0]])})
    assert buf[:4] == b"ATB1"
    assert int.from_bytes(buf[4:8], "little") == 1
    assert int.from_bytes(buf[8:12], "little") == 2
    assert buf[12:14] == b"ab"
    assert int.from_bytes(buf[14:18], "little") == 2
    assert int.from_bytes(buf[18:26], "little") == 1
    assert int.from_bytes(buf[26:34], "little") == 2
    assert np.frombuffer(buf[34:], "<f8").tolist() == [1.0, 2.0]


@pytest.mark.parametrize("cut", [3, 7, 10, 20, 40])
def test_truncated_weights_are_rejected(cut):
    buf = atb.dumps({"w": np.arange(4.0)})
    with pytest.raises(FormatError, match="offset"):
        atb.loads(buf[:cut] if cut < len(buf) else buf[:-1])


def test_bad_magic_is_rejected():
    with pytest.raises(FormatError, match="magic"):
        atb.loads(b"ATB2" + atb.dumps({})[4:])
