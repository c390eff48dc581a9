import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from transinv import model as M
from transinv import tensor as T
from transinv.optim import Adam
from transinv.tensor import Tensor

from oracles import adam_reference


def param(value, grad):
    p = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
    p.grad = np.array(grad, dtype=np.float64)
    return p


def test_zero_gradient_leaves_params():
    p = param([1.0, -2.0], [0.0, 0.0])
    opt = Adam()
    opt.step({"p": p})
    opt.step({"p": p})
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert opt.t == 2
    assert opt.m["p"].shape == p.shape and opt.v["p"].shape == p.shape


def test_first_step_closed_form():
    p = param(0.0, 1.0)
    Adam().step({"p": p})
    assert float(p.data) == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_scale_invariance_first_step():
    a, b = param(0.0, 1.0), param(0.0, 100.0)
    Adam().step({"a": a, "b": b})
    assert abs(float(b.data)) == pytest.approx(abs(float(a.data)), rel=1e-3)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(1e-5, 1e4) .map(float), min_size=1, max_size=8), st.randoms(use_true_random=False))
def test_first_step_magnitude_is_lr(mags, rnd):
    g = np.array([m if rnd.random() < 0.5 else -m for m in mags])
    p = param(np.zeros_like(g), g)
    Adam().step({"p": p})
    np.testing.assert_allclose(np.abs(p.data), 1e-3, rtol=1e-2)
    np.testing.assert_array_equal(np.sign(p.data), -np.sign(g))


def test_matches_reference_trajectory():
    grads = [0.3, -1.2, 4.0, 0.0, 2.5, -0.01]
    p = param(0.5, 0.0)
    opt = Adam(lr=0.01)
    traj = []
    for g in grads:
        p.grad = np.array(g)
        opt.step({"p": p})
        traj.append(float(p.data))
    np.testing.assert_allclose(traj, adam_reference(grads, lr=0.01, p0=0.5), rtol=1e-12)


def test_missing_gradient_rejected():
    p = param(1.0, 1.0)
    q = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ValueError, match="q"):
        Adam().step({"p": p, "q": q})


def test_float32_params_stay_float32():
    p = Tensor(np.ones(3, np.float32), requires_grad=True)
    p.grad = np.ones(3, np.float32)
    Adam().step({"p": p})
    assert p.dtype == np.float32


@pytest.mark.slow
def test_vgg_mini_loss_decreases_over_200_steps():
    # memorising sparse random canvases keeps the loss well above float32 resolution for 200 steps
    rng = np.random.default_rng(0)
    x = (rng.random((16, 1, 64, 64)) < 0.1).astype(np.float32)
    y = np.tile([0, 1], 8)
    model = M.build(M.preset("vgg-mini", 2), 0)
    opt = Adam()
    losses = {}
    for step in range(201):
        model.zero_grad()
        loss = T.softmax_cross_entropy(M.forward(model, x), y)
        if step in (0, 100, 200):
            losses[step] = float(loss.data)
        if step < 200:
            T.backward(loss)
            opt.step(model.params)
    assert losses[0] > losses[100] > losses[200]
