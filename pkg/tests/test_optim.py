"""Optimizer tests against a textbook reference loop."""
import numpy as np

from dhge.tensor import Param
from dhge.optim import AdamW
from oracles import adamw_reference


def _param(values):
    return Param(np.asarray(values, dtype=np.float64).copy(), name="p")


def test_matches_reference_over_many_steps(rng):
    x0 = rng.normal(size=(4, 3))
    grads = [rng.normal(size=(4, 3)) for _ in range(25)]
    p = _param(x0)
    opt = AdamW(lr=0.01, weight_decay=0.1)
    for g in grads:
        p.grad[:] = g
        opt.step([p])
    want = adamw_reference(x0, grads, lr=0.01, weight_decay=0.1)
    assert np.allclose(p.value, want, atol=1e-12)


def test_zero_grad_zero_decay_is_bit_exact_noop(rng):
    x0 = rng.normal(size=(3, 3))
    p = _param(x0)
    opt = AdamW(lr=0.05, weight_decay=0.0)
    opt.step([p])
    assert np.array_equal(p.value, x0)


def test_decay_applies_even_without_gradient(rng):
    # decoupled decay shrinks every parameter in the group; the moment term
    # contributes exactly zero when gradients and moments are zero
    x0 = rng.normal(size=(3, 3))
    p = _param(x0)
    opt = AdamW(lr=0.05, weight_decay=0.5)
    opt.step([p])
    assert np.allclose(p.value, x0 * (1.0 - 0.05 * 0.5), atol=1e-15)
    want = adamw_reference(x0, [np.zeros((3, 3))], lr=0.05, weight_decay=0.5)
    assert np.allclose(p.value, want, atol=1e-15)


def test_nonzero_grad_applies_decay_before_update(rng):
    x0 = np.full((2, 2), 2.0)
    p = _param(x0)
    opt = AdamW(lr=0.1, weight_decay=0.25)
    p.grad[:] = 1e-30  # negligible gradient isolates the decay term
    opt.step([p])
    want = adamw_reference(x0, [np.full((2, 2), 1e-30)], lr=0.1, weight_decay=0.25)
    assert np.allclose(p.value, want, atol=1e-12)
    assert not np.array_equal(p.value, x0)


def test_moments_survive_parameter_growth(rng):
    # id tables grow between epochs; existing rows must keep their history
    x0 = rng.normal(size=(2, 3))
    grads = [rng.normal(size=(2, 3)) for _ in range(3)]
    p = _param(x0)
    opt = AdamW(lr=0.01, weight_decay=0.0)
    for g in grads[:2]:
        p.grad[:] = g
        opt.step([p])
        p.zero_grad()
    p.value = np.concatenate([p.value, np.zeros((1, 3))], axis=0)
    p.grad = np.zeros_like(p.value)
    p.grad[:2] = grads[2]
    opt.step([p])
    want = adamw_reference(x0, grads, lr=0.01, weight_decay=0.0)
    assert np.allclose(p.value[:2], want, atol=1e-12)


def test_zero_grad_helper(rng):
    p = _param(rng.normal(size=(2, 2)))
    q = _param(rng.normal(size=(2, 2)))
    p.grad[:] = 1.0
    q.grad[:] = 2.0
    AdamW().zero_grad([p, q])
    assert np.all(p.grad == 0.0) and np.all(q.grad == 0.0)
