"""Finite-difference checks for every tape op, each through a scalar head."""

import numpy as np
import pytest

from hetero_fdl import tape


def fd_grad(fn, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def check_op(build, x0, atol=1e-7):
    """build(t) must map a Tensor to a scalar Tensor."""
    t = tape.parameter(x0)
    out = build(t)
    out.backward()
    analytic = t.grad
    numeric = fd_grad(lambda x: build(tape.parameter(x)).item(), x0)
    np.testing.assert_allclose(analytic, numeric, atol=atol, rtol=1e-5)


RNG = np.random.default_rng(42)


def test_add_mul_broadcast():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(4,))
    check_op(lambda t: ((t + tape.Tensor(b)) * 2.5).sum(), a)
    check_op(lambda t: (tape.Tensor(a) * (t + 1.0)).sum(), b)


def test_matmul_2d_and_vector():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(4, 2))
    v = RNG.normal(size=(4,))
    check_op(lambda t: (t @ tape.Tensor(b)).sum(), a)
    check_op(lambda t: (tape.Tensor(a) @ t).sum(), b)
    check_op(lambda t: (tape.Tensor(a) @ t).sum(), v)
    check_op(lambda t: (t @ tape.Tensor(v)).sum(), a)


def test_sum_axis_and_mean():
    a = RNG.normal(size=(3, 4, 2))
    check_op(lambda t: t.sum(axis=1).sum(), a)
    check_op(lambda t: (t.sum(axis=2) * t.sum(axis=2)).sum(), a)
    check_op(lambda t: t.mean(axis=0).sum(), a)


def test_reshape_slice_concat():
    a = RNG.normal(size=(6, 2))
    check_op(lambda t: t.reshape(3, 4).sum(axis=0).sum(), a)
    check_op(lambda t: t.slice1d(1, 4).sum(), a)
    check_op(lambda t: tape.concat([t, t * 2.0], axis=0).sum(), a)
    check_op(lambda t: tape.concat([t, t * 2.0], axis=1).sum(), a)


def test_gather_and_select():
    a = RNG.normal(size=(5, 3))
    idx = np.array([[0, 2, 2], [4, 1, 0]])
    check_op(lambda t: tape.gather_rows(t, idx).sum(), a)
    rows = np.array([0, 1, 3])
    cols = np.array([2, 0, 1])
    check_op(lambda t: tape.select_positions(t, rows, cols).sum(), a)


def test_nonlinearities():
    a = RNG.normal(size=(4, 3)) * 2
    check_op(lambda t: tape.leaky_relu(t, 0.2).sum(), a)
    check_op(lambda t: tape.elu(t).sum(), a)
    check_op(lambda t: tape.softplus(t).sum(), a)


def test_softmax_rows_and_gradient():
    a = RNG.normal(size=(4, 5))
    s = tape.softmax(tape.Tensor(a), axis=1)
    np.testing.assert_allclose(s.value.sum(axis=1), 1.0, atol=1e-12)
    w = RNG.normal(size=(4, 5))
    check_op(lambda t: (tape.softmax(t, axis=1) * tape.Tensor(w)).sum(), a)
    check_op(lambda t: (tape.log_softmax(t, axis=1) * tape.Tensor(w)).sum(), a)


def test_add_constant_masks_do_not_leak_gradient():
    a = RNG.normal(size=(3, 4))
    penalty = np.where(np.array([[1, 1, 0, 0]] * 3, dtype=bool), 0.0, -1e30)
    t = tape.parameter(a)
    out = (tape.softmax(tape.add_constant(t, penalty), axis=1)).sum()
    out.backward()
    assert np.all(np.isfinite(t.grad))
    s = tape.softmax(tape.add_constant(tape.Tensor(a), penalty), axis=1)
    assert np.all(s.value[:, 2:] == 0.0)


def test_reused_node_accumulates():
    a = RNG.normal(size=(3,))
    check_op(lambda t: (t * t).sum() + t.sum() * 2.0, a)


def test_backward_requires_scalar():
    t = tape.parameter(RNG.normal(size=(2, 2)))
    with pytest.raises(ValueError):
        t.backward()
