"""Reverse-mode engine: gradients, shapes, dropout and parameters."""
import numpy as np
import pytest

from gecbox import autodiff as ad
from gecbox.autodiff import ParamStore, ShapeError, Tensor

from oracles import gradcheck, op_cases, random_graph, tiny_model_case

CASES = op_cases()


@pytest.mark.parametrize("name", sorted(CASES))
@pytest.mark.parametrize("seed", [0, 1])
def test_op_gradients(name, seed):
    rng = np.random.default_rng(seed)
    inputs, forward = CASES[name](rng)
    assert gradcheck(inputs, forward, rng) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_random_graph_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    inputs, forward, plan = random_graph(rng)
    assert gradcheck(inputs, forward, rng) < 1e-4, plan


def test_full_model_gradients():
    rng = np.random.default_rng(7)
    _, inputs, forward = tiny_model_case(rng)
    assert ad.check_gradients(forward, inputs) < 1e-4


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(0).standard_normal((5, 7)) * 30)
    np.testing.assert_allclose(ad.softmax(x).data.sum(axis=-1), 1.0, atol=1e-6)


def test_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    ad.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_guarded_ops_stay_finite():
    big = Tensor(np.array([[1e4, -1e4, 0.0]]))
    assert np.all(np.isfinite(ad.log_softmax(big).data))
    assert np.all(np.isfinite(ad.softmax(big).data))
    assert np.all(np.isfinite(ad.log(Tensor(np.array([0.0, 1.0]))).data))
    assert np.all(np.isfinite(ad.sigmoid(Tensor(np.array([-1e4, 1e4]))).data))


def test_shape_errors_name_op_and_shapes():
    a, b = Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5)))
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
        ad.matmul(a, b)
    with pytest.raises(ShapeError, match="add"):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    with pytest.raises(ShapeError, match="gather"):
        ad.gather(Tensor(np.zeros((3, 2))), np.array([5]))


def test_reused_parameter_accumulates_path_sum():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    W = Tensor(rng.standard_normal((3, 3)))
    paths = [lambda: ad.sum_(ad.tanh(x)), lambda: ad.sum_(ad.mul(x, x)),
             lambda: ad.sum_(ad.matmul(x, W)), lambda: ad.sum_(ad.sigmoid(x))]
    expected = np.zeros_like(x.data)
    for p in paths:
        x.zero_grad()
        p().backward()
        expected += x.grad
    x.zero_grad()
    total = paths[0]()
    for p in paths[1:]:
        total = ad.add(total, p())
    total.backward()
    np.testing.assert_allclose(x.grad, expected, rtol=1e-12)


def test_backward_does_not_mutate_shared_gradients():
    # y = a + b routes the same upstream array to both parents; accumulating
    # into one of them must not change the other
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    out = ad.add(ad.add(a, b), a)
    out.backward(np.ones(3))
    np.testing.assert_array_equal(a.grad, 2 * np.ones(3))
    np.testing.assert_array_equal(b.grad, np.ones(3))


def test_gru_cell_matches_reference():
    rng = np.random.default_rng(4)
    H = 4
    xw = Tensor(rng.standard_normal((3, 3 * H)))
    h = Tensor(rng.standard_normal((3, H)))
    U = Tensor(rng.standard_normal((H, 3 * H)))
    sm = np.array([[1.0], [0.0], [1.0]])
    np.testing.assert_allclose(ad.gru_cell(xw, h, U, sm).data, ad.gru_cell_reference(xw, h, U, sm).data,
                               rtol=1e-12)
    # masked rows carry the previous state through unchanged
    np.testing.assert_array_equal(ad.gru_cell(xw, h, U, sm).data[1], h.data[1])


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        assert not ad.grad_enabled()
        y = ad.tanh(x)
    assert ad.grad_enabled()
    assert not y.requires_grad


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(9)
        model, inputs, forward = tiny_model_case(rng)
        loss = forward()
        loss.backward()
        return loss.data.copy(), [t.grad.copy() for t in inputs]

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes()
    assert all(a.tobytes() == b.tobytes() for a, b in zip(g1, g2))


def test_dropout_identity_and_errors():
    x = [Tensor(np.ones((2, 3)))]
    assert ad.variational_dropout(x, 0.0, np.random.default_rng(0)) is x
    assert ad.variational_dropout(x, 0.5, None, training=False) is x
    with pytest.raises(ValueError):
        ad.variational_dropout(x, 1.0, np.random.default_rng(0))


def test_variational_mask_is_shared_across_steps():
    xs = [Tensor(np.ones((4, 50))) for _ in range(5)]
    out = ad.variational_dropout(xs, 0.3, np.random.default_rng(1))
    for o in out[1:]:
        np.testing.assert_array_equal(o.data, out[0].data)
    seq = ad.variational_dropout(Tensor(np.ones((4, 5, 50))), 0.3, np.random.default_rng(1))
    assert np.all(seq.data == seq.data[:, :1])


def test_dropout_preserves_expectation():
    p, n = 0.2, 10_000
    value = np.array([0.5, -1.5, 2.0])
    rng = np.random.default_rng(2)
    samples = ad.dropout_mask((n, 3), p, rng, np.float64) * value
    mean = samples.mean(axis=0)
    sigma = np.abs(value) * np.sqrt(p / (1 - p)) / np.sqrt(n)
    assert np.all(np.abs(mean - value) < 3 * sigma)


def test_rng_is_keyed_by_purpose_and_step():
    a = ad.rng_for(1, "x", 0).random(4)
    assert np.array_equal(a, ad.rng_for(1, "x", 0).random(4))
    assert not np.array_equal(a, ad.rng_for(1, "y", 0).random(4))
    assert not np.array_equal(a, ad.rng_for(1, "x", 1).random(4))
    assert not np.array_equal(a, ad.rng_for(2, "x", 0).random(4))


def test_param_store():
    ps = ParamStore(seed=0, dtype=np.float64)
    ps.add("b", (2, 3))
    ps.add("a", (3,), "zeros")
    assert ps.names() == ["a", "b"]
    assert [n for n, _ in ps.items()] == ["a", "b"]
    with pytest.raises(KeyError):
        ps.add("a", (3,))
    assert ps.num_parameters() == 9
    limit = np.sqrt(6.0 / 5)
    assert np.all(np.abs(ps["b"].data) <= limit)
    state = ps.state_dict()
    state["a"] = np.ones(3)
    ps.load_state_dict(state)
    np.testing.assert_array_equal(ps["a"].data, np.ones(3))
    with pytest.raises(ShapeError):
        ps.load_state_dict({"a": np.ones(4), "b": state["b"]})
    with pytest.raises(KeyError):
        ps.load_state_dict({"a": np.ones(3)})
    assert ParamStore(seed=0).add("w", (3, 3)).data.tobytes() == ParamStore(seed=0).add("w", (3, 3)).data.tobytes()
