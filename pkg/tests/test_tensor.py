import math
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import analytic_grads, max_rel_err
from vitprune.tensor import Tape, Tensor, backend
from vitprune.tensor import ops as T


# -- forward values -------------------------------------------------------------

def test_matmul_small(each_backend):
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_batched_matmul_matches_numpy(each_backend, rng):
    a, b = rng.standard_normal((3, 5, 7)), rng.standard_normal((3, 7, 4))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b, rtol=0, atol=1e-12)


def test_layer_norm_two_values(each_backend):
    y = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=1e-5)
    expected = 1.0 / math.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(y.data, [[expected, -expected]], rtol=0, atol=1e-15)
    assert abs(y.data[0, 0] - 0.999995) < 1e-6


def test_softmax_of_logs(each_backend):
    y = T.softmax(Tensor([[math.log(1), math.log(2), math.log(3)]]))
    np.testing.assert_allclose(y.data, [[1 / 6, 2 / 6, 3 / 6]], rtol=0, atol=1e-15)


def test_gelu_at_one(each_backend):
    # x * Phi(x) with Phi the standard normal CDF
    phi1 = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
    assert abs(T.gelu(Tensor([1.0])).data[0] - phi1) < 1e-15
    assert abs(phi1 - 0.8413447460685429) < 1e-15


def test_log_softmax_is_stable_for_large_logits():
    y = T.log_softmax(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(y).all()
    assert y[0, 0] == 0.0 and abs(y[0, 1] + 1000.0) < 1e-12


def test_linear_uses_out_by_in_weights(rng):
    x, w, b = rng.standard_normal((4, 3)), rng.standard_normal((5, 3)), rng.standard_normal(5)
    np.testing.assert_allclose(T.linear(Tensor(x), Tensor(w), Tensor(b)).data, x @ w.T + b, atol=1e-13)


def test_conv2d_matches_direct_sum(rng):
    x, w, b = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x[0], ((0, 0), (1, 1), (1, 1)))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref = np.sum(xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]) + b[o]
                assert abs(out[0, o, i, j] - ref) < 1e-12


def test_depthwise_conv_matches_direct_sum(rng):
    x, w, b = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((2, 1, 3, 3)), rng.standard_normal(2)
    out = T.depthwise_conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    xp = np.pad(x[0], ((0, 0), (1, 1), (1, 1)))
    for c in range(2):
        for i in range(4):
            for j in range(4):
                assert abs(out[0, c, i, j] - (np.sum(xp[c, i:i + 3, j:j + 3] * w[c, 0]) + b[c])) < 1e-12


def test_shape_errors():
    with pytest.raises(ValueError):
        T.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ValueError):
        T.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))
    with pytest.raises(ValueError):
        backend.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_backends_agree(rng):
    if len(backend.available()) < 2:
        pytest.skip("compiled kernels not built")
    x = rng.standard_normal((37, 19))
    w = rng.standard_normal((19, 45))
    g, b = rng.standard_normal(19), rng.standard_normal(19)
    prev = backend.name()
    out = {}
    try:
        for name in ("python", "compiled"):
            backend.use(name)
            out[name] = (backend.matmul(x, w), backend.layer_norm_forward(x, g, b, 1e-6)[0],
                         backend.softmax(x), backend.gelu(x)[0])
    finally:
        backend.use(prev)
    for a, c in zip(out["python"], out["compiled"]):
        np.testing.assert_allclose(a, c, rtol=0, atol=1e-12)


def test_thread_count_does_not_change_bits(rng):
    if "compiled" not in backend.available():
        pytest.skip("compiled kernels not built")
    a, b = rng.standard_normal((130, 70)), rng.standard_normal((70, 90))
    prev_name, prev_threads = backend.name(), backend.get_num_threads()
    try:
        backend.use("compiled")
        backend.set_num_threads(1)
        one = backend.matmul(a, b)
        backend.set_num_threads(4)
        four = backend.matmul(a, b)
    finally:
        backend.use(prev_name)
        backend.set_num_threads(prev_threads)
    assert np.array_equal(one, four)


def test_repeated_calls_are_bit_identical(each_backend, rng):
    x = rng.standard_normal((50, 33))
    assert np.array_equal(backend.softmax(x), backend.softmax(x))
    assert np.array_equal(backend.matmul(x, x.T), backend.matmul(x, x.T))


@pytest.mark.parametrize("choice", ["python", "bogus"])
def test_backend_environment_variable(choice):
    code = "from vitprune.tensor import backend; print(backend.name())"
    r = subprocess.run([sys.executable, "-c", code], env={"VITPRUNE_BACKEND": choice, "PATH": ""},
                       capture_output=True, text=True)
    if choice == "python":
        assert r.stdout.strip() == "python"
    else:
        assert r.returncode != 0 and "VITPRUNE_BACKEND" in r.stderr


# -- tape semantics ---------------------------------------------------------------

def test_sum_gradient_is_ones(rng):
    (g,) = analytic_grads(lambda x: T.sum(x), [rng.standard_normal((3, 4))])
    np.testing.assert_array_equal(g, np.ones((3, 4)))


def test_quadratic_form_gradient(rng):
    W, x = rng.standard_normal((4, 3)), rng.standard_normal((3, 1))
    gw, _ = analytic_grads(lambda w, v: T.mul(T.sum(T.mul(T.matmul(w, v), T.matmul(w, v))), 0.5), [W, x])
    np.testing.assert_allclose(gw, (W @ x) @ x.T, atol=1e-13)


def test_detached_leaf_gets_zero_gradient(rng):
    a = Tensor(rng.standard_normal(3), requires_grad=True)
    unused = Tensor(rng.standard_normal(3), requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.mul(a, a))
    grads = tape.backward(loss)
    assert unused not in grads
    np.testing.assert_array_equal(grads[unused], np.zeros(3))


def test_non_scalar_loss_rejected():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = T.mul(a, 2.0)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_tape_is_single_use():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = T.sum(a)
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        with tape:
            T.sum(a)


def test_no_tape_records_nothing():
    a = Tensor(np.ones(2), requires_grad=True)
    assert not T.add(a, a).requires_grad


def test_shared_input_accumulates(rng):
    x = rng.standard_normal(4)
    (g,) = analytic_grads(lambda a: T.sum(T.add(T.mul(a, a), a)), [x])
    np.testing.assert_allclose(g, 2 * x + 1, atol=1e-14)


# -- finite-difference checks on every primitive -------------------------------------

def _w(rng, *shape):
    return rng.standard_normal(shape)


PRIMITIVES = {
    "add_broadcast": (lambda a, b: T.sum(T.mul(T.add(a, b), T.add(a, b))), [(3, 4), (4,)]),
    "sub": (lambda a, b: T.sum(T.mul(T.sub(a, b), a)), [(3, 2), (3, 2)]),
    "mul": (lambda a, b: T.sum(T.mul(T.mul(a, b), b)), [(2, 5), (2, 5)]),
    "matmul": (lambda a, b: T.sum(T.mul(T.matmul(a, b), T.matmul(a, b))), [(2, 3, 4), (2, 4, 5)]),
    "linear": (lambda x, w, b: T.sum(T.gelu(T.linear(x, w, b))), [(2, 3, 4), (5, 4), (5,)]),
    "reshape_permute": (lambda x: T.sum(T.mul(T.permute(T.reshape(x, (2, 3, 2)), (2, 0, 1)),
                                               Tensor(np.arange(12.0).reshape(2, 2, 3)))), [(3, 4)]),
    "getitem": (lambda x: T.sum(T.mul(T.getitem(x, (slice(None), 0)), T.getitem(x, (slice(None), 2)))), [(3, 4)]),
    "concat": (lambda a, b: T.sum(T.mul(T.concat([a, b], axis=1), T.concat([b, a], axis=1))), [(2, 3), (2, 3)]),
    "mean": (lambda x: T.sum(T.mul(T.mean(x, axis=1), T.mean(x, axis=1))), [(3, 5)]),
    "layer_norm": (lambda x, g, b: T.sum(T.mul(T.layer_norm(x, g, b), Tensor(np.linspace(-1, 1, 6)))),
                   [(4, 6), (6,), (6,)]),
    "softmax": (lambda x: T.sum(T.mul(T.softmax(x), Tensor(np.arange(5.0)))), [(3, 5)]),
    "log_softmax": (lambda x: T.sum(T.mul(T.log_softmax(x), Tensor(np.linspace(0, 1, 5)))), [(3, 5)]),
    "gelu": (lambda x: T.sum(T.mul(T.gelu(x), x)), [(4, 3)]),
    "conv2d": (lambda x, w, b: T.sum(T.gelu(T.conv2d(x, w, b, stride=2, padding=1))), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "depthwise_conv2d": (lambda x, w, b: T.sum(T.gelu(T.depthwise_conv2d(x, w, b))), [(1, 3, 4, 4), (3, 1, 3, 3), (3,)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradient(name, rng, each_backend):
    f, shapes = PRIMITIVES[name]
    arrays = [_w(rng, *s) for s in shapes]
    assert max_rel_err(f, arrays) < 1e-6


def test_attention_gradient(rng):
    from vitprune.model import mhsa

    def f(q, k, v):
        return T.sum(T.gelu(mhsa(q, k, v, 2)))

    assert max_rel_err(f, [_w(rng, 2, 3, 4), _w(rng, 2, 5, 4), _w(rng, 2, 5, 4)]) < 1e-6


# -- properties ---------------------------------------------------------------------

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    y = T.softmax(Tensor(x)).data
    assert np.all(np.abs(y.sum(axis=-1) - 1.0) < 1e-12)
    assert np.all(y >= 0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 6)), elements=finite))
def test_layer_norm_rows_are_centred(x):
    d = x.shape[1]
    y = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_matmul_matches_numpy(m, k, n, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((m, k)), r.standard_normal((k, n))
    np.testing.assert_allclose(backend.matmul(a, b), a @ b, rtol=0, atol=1e-12)


def test_float32_default_dtype():
    from vitprune.tensor import default_dtype, set_default_dtype

    try:
        set_default_dtype("float32")
        assert Tensor([1, 2]).dtype == np.float32
    finally:
        set_default_dtype("float64")
    assert default_dtype() == np.float64
    with pytest.raises(ValueError):
        set_default_dtype("float16")
