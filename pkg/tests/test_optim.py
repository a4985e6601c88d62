import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from layerfuse.errors import ContractError
from layerfuse.optim import AdamW, OptimizerState, adamw_step, linear_decay_lr
from layerfuse.tensor import Parameter


def _param(value, name="w"):
    p = Parameter(np.array(value, dtype=float), name=name)
    return p


def test_one_step_hand_value():
    w = _param([1.0])
    state = OptimizerState.create([w], weight_decay=0.0)
    w.grad = np.array([1.0])
    adamw_step(state, [w], 0.1)
    # m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert w.data[0] == pytest.approx(1.0 - 0.1 / (1 + 1e-8), abs=1e-15)
    assert w.data[0] == pytest.approx(0.9, abs=1e-8)


def test_zero_grad_no_decay_unchanged():
    w = _param([0.5, -2.0])
    state = OptimizerState.create([w], weight_decay=0.0)
    for _ in range(3):
        w.grad = np.zeros(2)
        adamw_step(state, [w], 0.1)
    assert np.array_equal(w.data, [0.5, -2.0])


def test_decoupled_weight_decay():
    w = _param([2.0])
    state = OptimizerState.create([w], weight_decay=0.1)
    w.grad = np.zeros(1)
    adamw_step(state, [w], 0.5)
    assert w.data[0] == pytest.approx(2.0 * (1 - 0.05))


def test_frozen_parameter_unchanged():
    w, f = _param([1.0], "w"), _param([1.0], "f")
    f.freeze()
    opt = AdamW([w, f])
    w.grad = np.ones(1)
    f.grad = np.ones(1)
    opt.step(0.1)
    assert f.data[0] == 1.0
    assert "f" not in opt.state.exp_avg


def test_missing_gradient_is_contract_error():
    w = _param([1.0])
    state = OptimizerState.create([w])
    with pytest.raises(ContractError):
        adamw_step(state, [w], 0.1)


def test_matches_reference_loop():
    rng = np.random.default_rng(3)
    w = _param(rng.normal(size=4))
    ref = w.data.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    opt = AdamW([w], weight_decay=0.01)
    for t in range(1, 6):
        g = rng.normal(size=4)
        w.grad = g.copy()
        opt.step(1e-2)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref * (1 - 1e-2 * 0.01) - 1e-2 * (m / (1 - 0.9 ** t)) / (
            np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(w.data, ref, rtol=1e-13)


def test_lr_endpoints():
    assert linear_decay_lr(0, 100, 5e-5) == 5e-5
    assert linear_decay_lr(100, 100, 5e-5) == 0.0
    assert linear_decay_lr(50, 100, 5e-5) == 2.5e-5
    assert linear_decay_lr(150, 100, 5e-5) == 0.0


@given(st.integers(1, 10_000), st.data())
def test_lr_monotone_non_increasing(total, data):
    a = data.draw(st.integers(0, total))
    b = data.draw(st.integers(a, total + 5))
    assert linear_decay_lr(a, total, 1.0) >= linear_decay_lr(b, total, 1.0) >= 0.0


def test_lr_rejects_bad_total():
    with pytest.raises(ContractError):
        linear_decay_lr(0, 0, 1.0)
