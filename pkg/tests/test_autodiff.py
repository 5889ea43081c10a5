import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st

from transfield import autodiff as ad
from transfield.synth import schwefel_grad


def central_diff(fn, x, h=1e-6):
    """Independent oracle: plain-numpy central differences of a scalar function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x).ravel()
        e[i] = h
        e = e.reshape(x.shape)
        g.ravel()[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def test_record_sin_zero():
    tape = ad.Tape()
    y = ad.record(tape, "sin", [tape.leaf([0.0])])
    assert y.value.tolist() == [0.0]


def test_record_matmul_identity():
    tape = ad.Tape()
    y = ad.record(tape, "matmul", [tape.leaf(np.eye(2)), tape.leaf([[1.0], [2.0]])])
    np.testing.assert_array_equal(y.value, [[1.0], [2.0]])


def test_record_add_broadcast_scalar():
    tape = ad.Tape()
    y = ad.record(tape, "add", [tape.leaf([1.0, 2.0]), tape.leaf(3.0)])
    np.testing.assert_array_equal(y.value, [4.0, 5.0])


def test_shape_mismatch_names_op_and_shapes():
    tape = ad.Tape()
    with pytest.raises(ad.ShapeError) as exc:
        ad.matmul(tape.leaf(np.ones((2, 3))), tape.leaf(np.ones((2, 3))))
    assert exc.value.op == "matmul"
    assert exc.value.shapes == ((2, 3), (2, 3))
    with pytest.raises(ad.ShapeError, match="add"):
        tape.leaf(np.ones(3)) + tape.leaf(np.ones(4))


def test_unknown_primitive():
    tape = ad.Tape()
    with pytest.raises(ad.UnknownPrimitiveError):
        ad.record(tape, "tanh", [tape.leaf([1.0])])


def test_backward_sin_omega():
    tape = ad.Tape()
    x = tape.leaf(np.array(0.0))
    y = ad.sin(x * 10.0)
    tape.backward(y)
    assert tape.grad(x) == pytest.approx(10.0)


def test_backward_sum_matmul():
    tape = ad.Tape()
    W = tape.leaf(np.ones((2, 2)))
    x = tape.leaf(np.ones((2, 1)))
    tape.backward(ad.sum(W @ x))
    np.testing.assert_array_equal(tape.grad(W), [[1, 1], [1, 1]])


def test_backward_requires_scalar():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ad.ShapeError):
        tape.backward(x * 2.0)


def test_gradients_accumulate_over_consumers():
    tape = ad.Tape()
    x = tape.leaf(np.array([3.0]))
    tape.backward(ad.sum(x * x + x))
    assert tape.grad(x)[0] == pytest.approx(7.0)


def test_node_ids_topological():
    tape = ad.Tape()
    x = tape.leaf(np.ones((4, 2)))
    w = tape.leaf(np.ones((2, 3)))
    ad.mean(ad.sin(x @ w))
    for node in tape.nodes:
        assert all(i < node.output for i in node.inputs)


def _two_layer_sine(params, x):
    w1, b1, w2, b2 = params
    return np.sum(np.sin(10.0 * (x @ w1 + b1)) @ w2 + b2)


def test_two_layer_sine_mlp_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, size=(5, 2))
    shapes = [(2, 8), (8,), (8, 1), (1,)]
    params = [rng.uniform(-0.5, 0.5, size=s) for s in shapes]

    tape = ad.Tape()
    leaves = [tape.leaf(p) for p in params]
    w1, b1, w2, b2 = leaves
    out = ad.sum(ad.sin((tape.const(x) @ w1 + b1) * 10.0) @ w2 + b2)
    tape.backward(out)

    for k, p in enumerate(params):
        def f(v, k=k):
            ps = list(params)
            ps[k] = v
            return _two_layer_sine(ps, x)

        numeric = central_diff(f, p)
        auto = tape.grad(leaves[k])
        rel = np.abs(auto - numeric) / (np.abs(numeric) + 1e-12)
        assert rel.max() < 1e-6, (k, rel.max())


def test_grad_check_square():
    assert ad.grad_check(lambda x: ad.sum(x * x), np.array([1.0]), h=1e-6) < 1e-9


def test_grad_check_flags_abs_kink():
    with pytest.raises(ad.NonDifferentiableError) as exc:
        ad.grad_check(lambda x: ad.sum(ad.absolute(x)), np.array([0.0]))
    assert exc.value.index == 0


def test_grad_check_non_finite_reports_index():
    # exp overflows only when the second coordinate is perturbed upward
    def f(x):
        return ad.sum(ad.exp(x * np.array([1.0, 1.0])))

    with pytest.raises(ad.NonFiniteError) as exc:
        ad.grad_check(f, np.array([0.0, 709.782712893384]), h=1e-3)
    assert exc.value.index == 1


def test_schwefel_term_chain_rule_vs_analytic():
    # f(x) = 418.9829 - x sin(s) with s = sqrt|x| fed as its own leaf; the tape gives
    # df/dx|_s and df/ds, and the chain rule df/dx + df/ds * ds/dx must match schwefel_grad
    for d in (100.0, -37.5, 412.0):
        s_val = np.sqrt(abs(d))
        tape = ad.Tape()
        x = tape.leaf(np.array([d]))
        s = tape.leaf(np.array([s_val]))
        f = ad.sum(0.0 - x * ad.sin(s) + 418.9829)
        tape.backward(f)
        ds_dx = np.sign(d) / (2 * s_val)
        total = tape.grad(x)[0] + tape.grad(s)[0] * ds_dx
        analytic, _ = schwefel_grad(d, 0.0)
        assert total == pytest.approx(float(analytic), rel=1e-12)


PRIMITIVE_CASES = {
    "sin": lambda t, x: ad.sum(ad.sin(x) * 1.3),
    "exp": lambda t, x: ad.sum(ad.exp(x * 0.5)),
    "mul": lambda t, x: ad.sum(x * x * 0.7),
    "add_bcast": lambda t, x: ad.sum(ad.sin(x + t.const(np.array([0.3, -0.2, 0.1])))),
    "sub": lambda t, x: ad.sum(ad.sin(1.0 - x)),
    "matmul": lambda t, x: ad.sum(ad.sin(x @ t.const(np.arange(6.0).reshape(3, 2) / 6))),
    "mean_axis": lambda t, x: ad.sum(ad.sin(ad.mean(x, axis=0))),
    "sum_axis": lambda t, x: ad.sum(ad.sin(ad.sum(x, axis=1, keepdims=True))),
    "concat": lambda t, x: ad.sum(ad.sin(ad.concat([x, x * 2.0], axis=-1))),
    "select": lambda t, x: ad.sum(ad.sin(ad.select(x, [0, 2]))),
    "reshape": lambda t, x: ad.sum(ad.sin(ad.reshape(x, (-1,))) * np.arange(6.0)),
    "abs_smooth": lambda t, x: ad.sum(ad.absolute(x + 5.0)),
    "gather": lambda t, x: ad.sum(ad.sin(ad.gather(ad.reshape(x, (3, 2)), np.array([[0, 1], [1, 1], [2, 0]])))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_primitive_finite_difference_agreement(name, seed):
    point = np.random.default_rng(seed).uniform(-1, 1, size=(2, 3))
    fn = PRIMITIVE_CASES[name]
    r = ad.grad_check_full(lambda x: fn(x.tape, x), point, h=1e-6)
    np.testing.assert_allclose(r.autograd, r.numeric, rtol=1e-6, atol=1e-8)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
@example(seed=521)
def test_blend_gradients(seed):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(4, 8, 3))
    frac = rng.uniform(0.05, 0.95, size=(4, 3))

    def f(x):
        v = ad.reshape(ad.select(x, list(range(96)), axis=0), (4, 8, 3))
        fr = ad.reshape(ad.select(x, list(range(96, 108)), axis=0), (4, 3))
        return ad.sum(ad.sin(ad.blend(v, fr)))

    r = ad.grad_check_full(f, np.concatenate([values.ravel(), frac.ravel()]))
    # absolute floor: central-difference roundoff is about eps * |f| / h ~ 3e-9 here
    np.testing.assert_allclose(r.autograd, r.numeric, rtol=1e-6, atol=1e-8)


def test_gather_collisions_accumulate():
    tape = ad.Tape()
    table = tape.leaf(np.zeros((2, 1)))
    out = ad.gather(table, np.array([0, 0, 0, 1]))
    tape.backward(ad.sum(out))
    np.testing.assert_array_equal(tape.grad(table).ravel(), [3.0, 1.0])


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_linearity(a, b, seed):
    x0 = np.random.default_rng(seed).normal(size=(3,))

    def grad_of(build):
        tape = ad.Tape()
        x = tape.leaf(x0)
        tape.backward(build(x))
        return tape.grad(x)

    f = lambda x: ad.sum(ad.sin(x))  # noqa: E731
    g = lambda x: ad.sum(x * x)  # noqa: E731
    combined = grad_of(lambda x: f(x) * a + g(x) * b)
    np.testing.assert_allclose(combined, a * grad_of(f) + b * grad_of(g), rtol=1e-12, atol=1e-12)


def test_gradient_shapes_match_variables():
    tape = ad.Tape()
    leaves = [tape.leaf(np.ones(s)) for s in [(4, 3), (3, 2), (2,)]]
    x, w, b = leaves
    tape.backward(ad.mean(ad.relu(x @ w + b)))
    for v in leaves:
        assert tape.grad(v).shape == v.shape


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(0)
        tape = ad.Tape()
        x = tape.leaf(rng.normal(size=(64, 8)).astype(np.float32))
        w = tape.leaf(rng.normal(size=(8, 8)).astype(np.float32))
        tape.backward(ad.mean(ad.sin(x @ w)))
        return tape.grad(w)

    assert run().tobytes() == run().tobytes()


def test_disabled_tape_records_nothing():
    tape = ad.Tape(enabled=False)
    x = tape.leaf(np.ones(3))
    ad.sum(ad.sin(x))
    assert tape.nodes == []


def test_variable_on_foreign_tape_rejected():
    a, b = ad.Tape(), ad.Tape()
    with pytest.raises(ad.AutodiffError):
        a.leaf(np.ones(2)) + b.leaf(np.ones(2))
