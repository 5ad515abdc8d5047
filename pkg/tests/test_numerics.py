import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iwdqueen import numerics as nx
from iwdqueen.errors import NumericalError, ShapeError
from iwdqueen.numerics import AdamState, Tensor, adam_step

import oracles as O


def check_grad(build, *arrays, tol=1e-6):
    """Compare backward() of sum(w * build(...)) with central differences."""
    rng = np.random.default_rng(0)
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*ts)
    w = rng.normal(size=out.shape)
    nx.tsum(nx.mul(out, w)).backward()
    for i, a in enumerate(arrays):
        def f(v, i=i):
            args = [Tensor(v) if j == i else Tensor(arrays[j]) for j in range(len(arrays))]
            return float(np.sum(w * build(*args).data))
        fd = O.central_fd(f, a)
        assert np.allclose(ts[i].grad, fd, rtol=tol, atol=tol), f"input {i}"


rng = np.random.default_rng(42)
A = rng.normal(size=(3, 4))
B = rng.normal(size=(4,))
P = rng.uniform(0.1, 0.9, size=(3, 4))


@pytest.mark.parametrize("build,args", [
    (nx.add, (A, B)),
    (nx.sub, (A, B)),
    (nx.mul, (A, B)),
    (nx.log, (P,)),
    (nx.sigmoid, (A,)),
    (nx.gelu, (A,)),
    (lambda x: nx.softmax(x, -1), (A,)),
    (lambda x: nx.reshape(x, (2, 6)), (A,)),
    (lambda x: nx.transpose(x), (A,)),
    (lambda x: nx.index(x, (slice(None), [0, 0, 2])), (A,)),
    (lambda x, y: nx.concat([x, nx.reshape(y, (1, 4))], axis=0), (A, B)),
    (lambda x: nx.pad(x, [(1, 0), (0, 2)]), (A,)),
    (lambda x: nx.tsum(x, axis=0), (A,)),
    (lambda x: nx.mean(x, axis=-1), (A,)),
    (lambda x, y: nx.matmul(x, y), (A, rng.normal(size=(4, 2)))),
    (lambda x, g, b: nx.layer_norm(x, g, b), (A, rng.normal(size=4), rng.normal(size=4))),
    (lambda x, w, b: nx.linear(x, w, b), (A, rng.normal(size=(4, 5)), rng.normal(size=5))),
    (lambda x: nx.clip(x, -0.5, 0.5), (A,)),
])
def test_op_gradients(build, args):
    check_grad(build, *args)


def test_batched_matmul_gradient():
    check_grad(nx.matmul, rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)))


def test_gelu_is_exact_erf_form():
    x = np.linspace(-3, 3, 13)
    from math import erf, sqrt
    ref = [v * 0.5 * (1 + erf(v / sqrt(2))) for v in x]
    assert np.allclose(nx.gelu(x).data, ref, atol=1e-15)


def test_softmax_rows_sum_to_one_and_survive_large_inputs():
    s = nx.softmax(np.array([[1000.0, 0.0, -1000.0], [1.0, 2.0, 3.0]])).data
    assert np.allclose(s.sum(-1), 1.0)
    assert s[0, 0] == pytest.approx(1.0)


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = nx.add(nx.mul(x, x), x)
    nx.tsum(y).backward()
    assert x.grad[0] == pytest.approx(5.0)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        nx.mul(x, 2.0).backward()


def test_shape_errors_name_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\)"):
        nx.matmul(np.ones((3, 4)), np.ones((3, 4)))
    with pytest.raises(ShapeError):
        nx.add(np.ones((3, 4)), np.ones((2, 4)))
    with pytest.raises(ShapeError):
        nx.matmul(np.ones(4), np.ones((4, 2)))


def test_non_finite_results_raise():
    with pytest.raises(NumericalError):
        nx.log(np.array([-1.0]))


def test_no_grad_is_thread_local():
    seen = {}

    def worker():
        seen["inner"] = nx.grad_enabled()

    with nx.no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
        assert not nx.grad_enabled()
        y = nx.mul(Tensor(np.ones(2), requires_grad=True), 3.0)
        assert not y.requires_grad
    assert seen["inner"] and nx.grad_enabled()


def test_dropout_modes():
    x = np.ones((1000,))
    g = np.random.default_rng(0)
    assert np.array_equal(nx.dropout(x, 0.1, False, g).data, x)
    assert np.array_equal(nx.dropout(x, 0.0, True, g).data, x)
    y = nx.dropout(x, 0.1, True, np.random.default_rng(0)).data
    kept = y != 0
    assert np.allclose(y[kept], 1 / 0.9)
    assert 0.85 < kept.mean() < 0.95
    assert np.array_equal(y, nx.dropout(x, 0.1, True, np.random.default_rng(0)).data)


def test_apply_gate_matches_kron():
    psi = np.random.default_rng(1).normal(size=16) + 0j
    m = O.rot(O.X, 0.7)
    got = nx.apply_gate(nx.ComplexTensor.from_complex(psi), m, [2], 4).to_complex()
    assert np.allclose(got, O.on({2: m}) @ psi)


def test_adam_matches_hand_computation():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, -0.1])}
    state = AdamState(lr=1e-3)
    new, state = adam_step(p, g, state)
    # First step of bias-corrected Adam moves each coordinate by ~lr*sign(g).
    m = 0.1 * g["w"] / (1 - 0.9)
    v = 0.001 * g["w"] ** 2 / (1 - 0.999)
    assert np.allclose(new["w"], p["w"] - 1e-3 * m / (np.sqrt(v) + 1e-8))
    new2, state = adam_step(new, g, state)
    assert state.step == 2
    m2 = (0.9 * 0.1 * g["w"] + 0.1 * g["w"]) / (1 - 0.9**2)
    v2 = (0.999 * 0.001 * g["w"] ** 2 + 0.001 * g["w"] ** 2) / (1 - 0.999**2)
    assert np.allclose(new2["w"], new["w"] - 1e-3 * m2 / (np.sqrt(v2) + 1e-8))


def test_adam_reports_nan_group():
    with pytest.raises(NumericalError, match="mlp.w1"):
        adam_step({"mlp.w1": np.zeros(2)}, {"mlp.w1": np.array([np.nan, 0.0])}, AdamState())


def test_adam_zero_lr_is_identity():
    p = {"a": np.arange(3.0)}
    new, _ = adam_step(p, {"a": np.ones(3)}, AdamState(lr=0.0))
    assert np.array_equal(new["a"], p["a"])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8))
def test_layer_norm_output_is_standardised(values):
    x = np.array(values)
    if np.ptp(x) < 1e-3:
        return
    y = nx.layer_norm(x, np.ones(len(x)), np.zeros(len(x))).data
    assert abs(y.mean()) < 1e-9
    assert abs(y.var() - x.var() / (x.var() + 1e-5)) < 1e-9
