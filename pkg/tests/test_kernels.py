import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyss.kernels import (LayerNorm, Linear, Param, Tensor, backend, backward, dft_direct, fft,
                          grad_check, ifft, inverse_spectrum, no_grad, ops, spectrum)
from dyss.kernels.checkpoint import ManifestError, load_arrays, save_arrays
from dyss.kernels.tensor import ShapeError


# ---------------------------------------------------------------- matmul

def test_identity_times_matrix(rng):
    M = rng.standard_normal((3, 3))
    assert np.array_equal(ops.matmul(np.eye(3), M).data, M)


def test_matmul_hand_case():
    out = ops.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_grad_is_broadcast_column_sums(rng):
    A = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    B = rng.standard_normal((4, 5))
    backward(ops.matmul(A, B).sum())
    expected = np.broadcast_to(B.sum(axis=1), (3, 4))
    assert np.allclose(A.grad, expected, rtol=0, atol=1e-12)
    rep = grad_check(lambda a: ops.matmul(a, B).sum(), [A.data])
    assert rep.passed(1e-6)


def test_matmul_shape_mismatch_raises():
    with pytest.raises((ShapeError, ValueError)):
        ops.matmul(np.ones((2, 3)), np.ones((2, 3)))


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_matmul_associativity(seed):
    r = np.random.default_rng(seed)
    A, B, C = (r.standard_normal((4, 4)) for _ in range(3))
    left = ops.matmul(ops.matmul(A, B), C).data
    right = ops.matmul(A, ops.matmul(B, C)).data
    assert np.max(np.abs(left - right)) < 1e-10


# ---------------------------------------------------------------- layer norm and pointwise

def test_layer_norm_constant_row_is_zero():
    out = ops.layer_norm(np.full((2, 5), 3.0), np.ones(5), np.zeros(5))
    assert np.array_equal(out.data, np.zeros((2, 5)))


def test_layer_norm_hand_case():
    out = ops.layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2)).data
    # variance 1, epsilon 1e-6 under the square root
    assert np.allclose(out, [[-1.0, 1.0]], atol=1e-6)
    assert np.allclose(out, np.array([[-1.0, 1.0]]) / np.sqrt(1.0 + 1e-6), rtol=0, atol=1e-15)


def test_layer_norm_grad(rng):
    ln = LayerNorm(6)
    ln.gain.data = rng.standard_normal(6)
    ln.bias.data = rng.standard_normal(6)
    rep = grad_check(lambda x, g, b: ops.layer_norm(x, g, b), [rng.standard_normal((3, 6)), ln.gain, ln.bias])
    assert rep.passed(1e-4), rep.describe()


def test_pointwise_values():
    assert np.array_equal(ops.relu(np.array([-1.0, 2.0])).data, [0.0, 2.0])
    assert ops.sigmoid(np.array(0.0)).data == 0.5
    sm = ops.softmax(np.full((2, 7), 1.3), axis=-1).data
    assert np.allclose(sm, 1.0 / 7.0, rtol=0, atol=1e-15)


def test_softmax_rows_sum_to_one(rng):
    sm = ops.softmax(rng.standard_normal((5, 9)) * 30, axis=-1).data
    assert np.allclose(sm.sum(axis=-1), 1.0, atol=1e-12)


def test_linear_grad_under_1e6(rng):
    lin = Linear(rng, 5, 7)
    rep = grad_check(lambda x, w, b: lin(x), [rng.standard_normal((4, 5)), lin.weight, lin.bias])
    assert rep.passed(1e-6), rep.describe()


UNARY = {
    "exp": ops.exp, "tanh": ops.tanh, "sigmoid": ops.sigmoid, "softplus": ops.softplus, "sin": ops.sin,
    "cos": ops.cos, "square": ops.square, "relu": ops.relu, "abs": ops.abs,
    "log": lambda x: ops.log(ops.exp(x) + 1.0), "sqrt": lambda x: ops.sqrt(ops.exp(x)),
    "wrap_angle": lambda x: ops.wrap_angle(x * 0.5), "softmax": lambda x: ops.softmax(x, axis=-1),
    "amax": lambda x: ops.amax(x, axis=-1), "mean": lambda x: ops.mean(x, axis=0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(seed=st.integers(0, 100_000))
@settings(max_examples=20, deadline=None)
def test_unary_ops_grad(name, seed):
    x = np.random.default_rng(seed).standard_normal((3, 4))
    if name in ("relu", "abs"):
        x = np.where(np.abs(x) < 1e-3, 0.5, x)  # keep away from the kink
    rep = grad_check(UNARY[name], [x])
    assert rep.passed(1e-4), rep.describe()


BINARY = {
    "add": ops.add, "sub": ops.sub, "mul": ops.mul,
    "div": lambda a, b: ops.div(a, ops.exp(b)),
    "atan2": ops.atan2,
    "concat": lambda a, b: ops.concat([a, b], axis=1),
    "stack": lambda a, b: ops.stack([a, b], axis=0),
    "where": lambda a, b: ops.where(np.array([[True, False, True, False]] * 3), a, b),
    "broadcast_mul": lambda a, b: a * b[0:1],
}


@pytest.mark.parametrize("name", sorted(BINARY))
@given(seed=st.integers(0, 100_000))
@settings(max_examples=20, deadline=None)
def test_binary_ops_grad(name, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((3, 4)), r.standard_normal((3, 4))
    rep = grad_check(BINARY[name], [a, b])
    assert rep.passed(1e-4), rep.describe()


def test_indexing_grads(rng):
    x = rng.standard_normal((5, 4))
    idx = np.array([3, 0, 3, 1])
    assert grad_check(lambda t: ops.take_rows(t, idx), [x]).passed(1e-6)
    assert grad_check(lambda t: t[1:4, ::2], [x]).passed(1e-6)
    assert grad_check(lambda t: t[np.array([0, 2]), np.array([1, 3])], [x]).passed(1e-6)
    assert grad_check(lambda t: t.reshape(2, 10).transpose(1, 0), [x]).passed(1e-6)


def test_gradient_accumulates_over_reuse(rng):
    """One tensor used twice gets the sum of the gradients of two separate copies."""
    data = rng.standard_normal((3, 3))
    W = rng.standard_normal((3, 3))
    x = Tensor(data, requires_grad=True)
    backward((ops.tanh(ops.matmul(x, W)) * x).sum())
    x1, x2 = Tensor(data, requires_grad=True), Tensor(data, requires_grad=True)
    backward((ops.tanh(ops.matmul(x1, W)) * x2).sum())
    assert np.allclose(x.grad, x1.grad + x2.grad, rtol=0, atol=1e-13)


def test_param_grad_accumulates_until_cleared():
    p = Param(np.array([1.0, 2.0]))
    backward((p * 3.0).sum())
    backward((p * 3.0).sum())
    assert np.array_equal(p.grad, [6.0, 6.0])
    p.zero_grad()
    assert np.array_equal(p.grad, [0.0, 0.0])


def test_graph_freed_after_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * 2.0).sum()
    backward(y)
    with pytest.raises(RuntimeError):
        backward(y)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


# ---------------------------------------------------------------- fft

def test_fft_zero_and_dc(each_backend):
    re, im = fft(np.zeros((2, 8)))
    assert not re.any() and not im.any()
    re, im = fft(np.full((1, 6), 2.5))
    assert np.isclose(re[0, 0], 15.0, atol=1e-12)
    assert np.max(np.abs(re[0, 1:])) < 1e-12 and np.max(np.abs(im)) < 1e-12


def test_fft_length7_roundtrip_against_direct_dft(each_backend, rng):
    x = rng.standard_normal((3, 7))
    re, im = fft(x)
    ref = dft_direct(x)
    assert np.max(np.abs(re + 1j * im - ref)) < 1e-9
    back_re, back_im = ifft(re, im)
    assert np.max(np.abs(back_re - x)) < 1e-9 and np.max(np.abs(back_im)) < 1e-9


@pytest.mark.parametrize("n", range(1, 65))
def test_fft_roundtrip_all_lengths(each_backend, n):
    x = np.random.default_rng(n).standard_normal((2, n))
    re, im = fft(x)
    assert np.max(np.abs(re + 1j * im - dft_direct(x))) < 1e-9
    back_re, back_im = ifft(re, im)
    assert np.max(np.abs(back_re - x)) < 1e-9


def test_spectrum_pair_roundtrip_and_grad(each_backend, rng):
    x = rng.standard_normal((2, 3, 5))
    z = spectrum(x)
    assert z.shape == (2, 3, 10)
    assert np.max(np.abs(inverse_spectrum(z).data - x)) < 1e-12
    assert grad_check(spectrum, [x]).passed(1e-4)
    assert grad_check(inverse_spectrum, [rng.standard_normal((2, 3, 10))]).passed(1e-4)


# ---------------------------------------------------------------- backends

def test_backend_env_selection(monkeypatch):
    import importlib
    monkeypatch.setenv(backend.ENV_VAR, "numpy")
    mod = importlib.reload(backend)
    try:
        assert mod.get_backend() == "numpy"
        monkeypatch.setenv(backend.ENV_VAR, "bogus")
        with pytest.raises(ValueError):
            importlib.reload(backend)
    finally:
        monkeypatch.delenv(backend.ENV_VAR, raising=False)
        importlib.reload(backend)


@pytest.mark.skipif(not backend.numba_available(), reason="numba not installed")
def test_backends_agree_on_every_kernel(rng):
    a = np.tanh(rng.standard_normal(6)) * 0.999
    B, C, P = rng.standard_normal((6, 8)), rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    X = rng.standard_normal((5, 7, 4))
    outs = [backend.impl("ssm_scan", b)(a, B, C, P, X) for b in ("numba", "numpy")]
    for u, v in zip(*outs):
        assert np.allclose(u, v, rtol=0, atol=1e-12)
    H, Y, YP = outs[1]
    gY, gYP = rng.standard_normal(Y.shape), rng.standard_normal(YP.shape)
    gb = [backend.impl("ssm_scan_backward", b)(a, B, C, P, X, H, YP, gY, gYP) for b in ("numba", "numpy")]
    for u, v in zip(*gb):
        assert np.allclose(u, v, rtol=0, atol=1e-10)
    maps = rng.standard_normal((2, 5, 6, 3))
    pix = rng.uniform(-1, 7, (2, 20, 2))
    valid = rng.random((2, 20)) < 0.8
    g = [backend.impl("bilinear_gather", b)(maps, pix, valid) for b in ("numba", "numpy")]
    assert np.allclose(g[0], g[1], rtol=0, atol=1e-13)
    gout = rng.standard_normal((2, 20, 3))
    bb = [backend.impl("bilinear_backward", b)(maps, pix, valid, gout, True) for b in ("numba", "numpy")]
    for u, v in zip(*bb):
        assert np.allclose(u, v, rtol=0, atol=1e-12)
    cost = rng.random((5, 9))
    assert np.array_equal(backend.impl("hungarian_rows", "numba")(cost),
                          backend.impl("hungarian_rows", "numpy")(cost))


# ---------------------------------------------------------------- grad_check itself

def test_grad_check_flags_a_wrong_backward():
    from dyss.kernels.tensor import make_node

    def bad_square(x):
        return make_node(x.data ** 2, (x,), lambda g: (g * 2.1 * x.data,))

    rep = grad_check(bad_square, [np.array([0.3, -1.2, 2.0])])
    assert not rep.passed(1e-3)
    assert rep.max_rel_err == pytest.approx(0.1 / 2.1, rel=1e-6)


def test_grad_check_restores_param_state(rng):
    p = Param(rng.standard_normal(4))
    before = p.data.copy()
    p.grad = np.full(4, 7.0)
    grad_check(lambda q: ops.exp(q).sum(), [p])
    assert np.array_equal(p.data, before)
    assert np.array_equal(p.grad, np.full(4, 7.0))


# ---------------------------------------------------------------- modules and array files

def test_state_dict_roundtrip_and_errors(rng):
    lin = Linear(rng, 3, 2)
    other = Linear(np.random.default_rng(5), 3, 2)
    other.load_state_dict(lin.state_dict())
    assert np.array_equal(other.weight.data, lin.weight.data)
    with pytest.raises(KeyError):
        other.load_state_dict({"weight": lin.weight.data})
    with pytest.raises(ValueError, match="weight"):
        other.load_state_dict({"weight": np.zeros((2, 2)), "bias": lin.bias.data})


def test_array_files_roundtrip_and_corruption(tmp_path, rng):
    arrays = {"a": rng.standard_normal((2, 3)), "b": np.arange(4.0)}
    path = save_arrays(tmp_path, "ck", arrays, {"step": 3})
    loaded, meta = load_arrays(path)
    assert meta["step"] == 3
    assert all(np.array_equal(loaded[k], arrays[k]) for k in arrays)
    blob = tmp_path / "ck.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(ManifestError, match="size"):
        load_arrays(path)
