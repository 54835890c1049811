import numpy as np
import pytest

from oracles import composite_grad_error
from stgcl.autodiff import (Tape, Tensor, concatenate, grad_check, index_select,
                            matmul, strict_finite, take_flat)
from stgcl.errors import ContractViolation, NumericError
from stgcl.rng import SplitMix64


def test_backward_of_sum_is_ones():
    p = Tensor(SplitMix64(1).normal((4, 5)), requires_grad=True)
    with Tape() as tape:
        grads = tape.backward(p.sum())
    assert np.array_equal(grads[p].data, np.ones((4, 5)))


def test_backward_of_half_norm_squared_is_identity():
    p = Tensor(SplitMix64(2).normal((7,)), requires_grad=True)
    with Tape() as tape:
        grads = tape.backward(((p * p).sum()) * 0.5)
    np.testing.assert_allclose(grads[p].data, p.data, rtol=0, atol=1e-15)


def test_backward_requires_scalar_loss():
    p = Tensor(np.ones((3,)), requires_grad=True)
    with Tape() as tape:
        loss = p * 2.0
        with pytest.raises(ContractViolation):
            tape.backward(loss)


def test_tape_consumed_after_backward():
    p = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = p.sum()
        tape.backward(loss)
        with pytest.raises(ContractViolation):
            tape.backward(loss)


def test_nan_forward_raises_named_numeric_error():
    x = Tensor(np.array([-1.0]))
    with pytest.raises(NumericError) as err:
        x.log()
    assert "log" in str(err.value)


def test_random_mlp_matches_finite_differences():
    rng = SplitMix64(33)
    w1 = Tensor(rng.normal((5, 4)) * 0.5, requires_grad=True)
    w2 = Tensor(rng.normal((6, 5)) * 0.5, requires_grad=True)
    w3 = Tensor(rng.normal((1, 6)) * 0.5, requires_grad=True)
    x = np.ascontiguousarray(rng.normal((4, 1)))

    def loss_fn():
        h1 = matmul(w1, Tensor(x)).relu()
        h2 = matmul(w2, h1).relu()
        return matmul(w3, h2).sum()

    err = composite_grad_error(loss_fn, {"w1": w1, "w2": w2, "w3": w3})
    assert err < 1e-4


def test_grad_check_exact_for_quadratics():
    x = Tensor(SplitMix64(4).normal((6,)))
    assert grad_check(lambda t: (t * t).sum(), x) < 1e-8


def test_linearity_of_backward():
    rng = SplitMix64(5)
    p = Tensor(rng.normal((4, 4)), requires_grad=True)
    c = Tensor(rng.normal((4, 4)))

    def l1(t):
        return (t * c).sum()

    def l2(t):
        return ((t @ t) * 0.5).sum()

    with Tape() as tape:
        g_joint = tape.backward(l1(p) + l2(p))[p].data
    with Tape() as tape:
        g1 = tape.backward(l1(p))[p].data
    with Tape() as tape:
        g2 = tape.backward(l2(p))[p].data
    np.testing.assert_allclose(g_joint, g1 + g2, rtol=0, atol=1e-12)


def test_forward_backward_bit_identical_across_runs():
    def run():
        rng = SplitMix64(77)
        a = Tensor(rng.normal((5, 5)), requires_grad=True)
        b = Tensor(rng.normal((5, 5)), requires_grad=True)
        with Tape() as tape:
            loss = ((a @ b).relu() * (a + b)).sum()
            grads = tape.backward(loss)
        return loss.item(), grads[a].data.tobytes(), grads[b].data.tobytes()

    assert run() == run()


def _rand(rng, shape):
    return np.ascontiguousarray(rng.normal(shape))


def _op_cases():
    """(name, input builder, scalar function) for every differentiable primitive."""
    def mk(seed, shape, positive=False, away_from_zero=False):
        rng = SplitMix64(seed)
        x = _rand(rng, shape)
        if positive:
            x = np.abs(x) + 0.5
        if away_from_zero:
            x = np.where(np.abs(x) < 0.2, x + 0.5, x)
        return Tensor(x)

    w64 = SplitMix64(991)
    weight = {}

    def w(shape):
        key = shape
        if key not in weight:
            weight[key] = Tensor(_rand(w64, shape))
        return weight[key]

    cases = [
        ("add", lambda s: mk(s, (4, 5)), lambda x: ((x + w((4, 5))) * w((4, 5))).sum()),
        ("sub", lambda s: mk(s, (4, 5)), lambda x: ((w((4, 5)) - x) * w((4, 5))).sum()),
        ("mul", lambda s: mk(s, (4, 5)), lambda x: (x * w((4, 5))).sum()),
        ("div", lambda s: mk(s, (4, 5), positive=True),
         lambda x: (w((4, 5)) / x).sum()),
        ("neg", lambda s: mk(s, (8,)), lambda x: ((-x) * w((8,))).sum()),
        ("exp", lambda s: mk(s, (3, 3)), lambda x: x.exp().sum()),
        ("log", lambda s: mk(s, (3, 3), positive=True), lambda x: x.log().sum()),
        ("sqrt", lambda s: mk(s, (3, 3), positive=True), lambda x: x.sqrt().sum()),
        ("pow", lambda s: mk(s, (3, 3), positive=True), lambda x: (x ** 1.5).sum()),
        ("relu", lambda s: mk(s, (4, 4), away_from_zero=True), lambda x: x.relu().sum()),
        ("matmul_left", lambda s: mk(s, (4, 3)), lambda x: ((x @ w((3, 5))) * w((4, 5))).sum()),
        ("matmul_right", lambda s: mk(s, (3, 5)), lambda x: ((w((4, 3)) @ x) * w((4, 5))).sum()),
        ("matmul_batched", lambda s: mk(s, (2, 4, 3)),
         lambda x: ((x @ w((3, 2))) * w((2, 4, 2))).sum()),
        ("sum_axis", lambda s: mk(s, (3, 4, 2)),
         lambda x: (x.sum(axis=(0, 2)) * w((4,))).sum()),
        ("mean", lambda s: mk(s, (3, 4)), lambda x: (x.mean(axis=1) * w((3,))).sum()),
        ("reshape", lambda s: mk(s, (3, 4)),
         lambda x: (x.reshape((2, 6)) * w((2, 6))).sum()),
        ("transpose", lambda s: mk(s, (3, 4, 2)),
         lambda x: (x.transpose((2, 0, 1)) * w((2, 3, 4))).sum()),
        ("getitem", lambda s: mk(s, (5, 4)),
         lambda x: (x[1:4, ::2] * w((3, 2))).sum()),
        ("index_select", lambda s: mk(s, (2, 5, 3)),
         lambda x: (index_select(x, 1, np.array([0, 2, 2, 4])) * w((2, 4, 3))).sum()),
        ("take_flat", lambda s: mk(s, (4, 4)),
         lambda x: (take_flat(x, np.array([[0, 5], [10, 15]])) * w((2, 2))).sum()),
        ("concatenate", lambda s: mk(s, (3, 2)),
         lambda x: (concatenate([x, x * 2.0], axis=0) * w((6, 2))).sum()),
    ]
    return cases


@pytest.mark.parametrize("name,builder,fn", _op_cases(), ids=lambda c: c if isinstance(c, str) else "")
def test_every_primitive_passes_grad_check(name, builder, fn):
    for seed in range(10):
        x = builder(1000 + seed)
        assert grad_check(fn, x) < 1e-4, f"{name} failed at seed {seed}"


def test_strict_finite_mode_checks_all_ops():
    strict_finite(True)
    try:
        big = Tensor(np.array([1e308]))
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            big + big
    finally:
        strict_finite(False)
