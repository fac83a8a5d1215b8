import math
import warnings

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hear.errors import ConfigError, NumericError
from hear.numerics import AdamW, LrSchedule, OptimizerState, ScheduleOverrun, adamw_step, grad_check, lr_at

PRETRAIN_SCHEDULE = LrSchedule(5e-4, 10_000, 450_000)


def test_peak_at_end_of_warmup():
    assert lr_at(PRETRAIN_SCHEDULE, 10_000) == 5e-4


def test_zero_at_start():
    assert lr_at(PRETRAIN_SCHEDULE, 0) == 0.0
    assert lr_at(LrSchedule(1.0, 3, 10), 0) == 0.0


def test_midpoint_of_decay():
    # step 230000 is exactly halfway through the 440000 decay steps: 0.5 * peak * (1 + cos(pi / 2))
    expected = 2.5e-4
    assert lr_at(PRETRAIN_SCHEDULE, 230_000) == pytest.approx(expected, abs=1e-12)


def test_continuity_and_endpoint():
    left = lr_at(PRETRAIN_SCHEDULE, 10_000 - 1) + 5e-4 / 10_000  # linear extrapolation of the ramp
    assert abs(left - 5e-4) < 1e-12
    assert abs(lr_at(PRETRAIN_SCHEDULE, 10_001) - 5e-4) < 1e-10
    assert abs(lr_at(PRETRAIN_SCHEDULE, 450_000)) < 1e-12


def test_overrun_clamps_and_warns():
    with pytest.warns(ScheduleOverrun):
        assert lr_at(PRETRAIN_SCHEDULE, 450_001) == 0.0


def test_degenerate_schedule():
    with pytest.raises(ConfigError):
        LrSchedule(1e-3, 100, 100)
    with pytest.raises(ConfigError):
        LrSchedule(1e-3, 200, 100)


@given(st.integers(1, 500), st.integers(1, 5000), st.data())
def test_nonincreasing_after_warmup(warm, extra, data):
    s = LrSchedule(1e-3, warm, warm + extra)
    a = data.draw(st.integers(warm, warm + extra))
    b = data.draw(st.integers(a, warm + extra))
    assert lr_at(s, b) <= lr_at(s, a)


def test_adamw_zero_gradient_only_decays():
    p = {"w": torch.tensor([1.0, -2.0], dtype=torch.float64)}
    state = OptimizerState(weight_decay=0.01)
    adamw_step(p, {"w": torch.zeros(2, dtype=torch.float64)}, state, rate=0.1)
    assert torch.equal(p["w"], torch.tensor([1.0, -2.0], dtype=torch.float64) * (1 - 0.1 * 0.01))
    assert torch.count_nonzero(state.exp_avg["w"]) == 0
    assert torch.count_nonzero(state.exp_avg_sq["w"]) == 0


def test_adamw_first_step_hand_computed():
    g, p0, lr, eps = 0.37, 1.5, 1e-3, 1e-8
    p = {"x": torch.tensor([p0], dtype=torch.float64)}
    state = OptimizerState(beta1=0.9, beta2=0.98, eps=eps, weight_decay=0.0)
    adamw_step(p, {"x": torch.tensor([g], dtype=torch.float64)}, state, lr)
    # m = 0.1 g, v = 0.02 g^2; bias correction recovers g and g^2 exactly
    expected = p0 - lr * g / (abs(g) + eps)
    assert p["x"].item() == pytest.approx(expected, abs=1e-15)


def test_adamw_two_steps_ema():
    g, b1, b2 = -0.8, 0.9, 0.98
    p = {"x": torch.tensor([0.0], dtype=torch.float64)}
    state = OptimizerState(beta1=b1, beta2=b2, weight_decay=0.0)
    for _ in range(2):
        adamw_step(p, {"x": torch.tensor([g], dtype=torch.float64)}, state, 1e-3)
    assert state.exp_avg["x"].item() == pytest.approx((1 - b1) * g * (1 + b1), abs=1e-15)
    assert state.exp_avg_sq["x"].item() == pytest.approx((1 - b2) * g * g * (1 + b2), abs=1e-15)
    assert state.step == 2


def test_second_moment_grows_to_g_squared():
    g = 0.5
    p = {"x": torch.tensor([0.0], dtype=torch.float64)}
    state = OptimizerState(weight_decay=0.0)
    prev = 0.0
    for i in range(2000):
        adamw_step(p, {"x": torch.tensor([g], dtype=torch.float64)}, state, 1e-4)
        v = state.exp_avg_sq["x"].item()
        # strictly increasing until it saturates at g^2 in float64
        assert v > prev if i < 500 else v >= prev
        prev = v
    assert prev == pytest.approx(g * g, rel=1e-6)


def test_adamw_nonfinite_aborts_whole_step():
    p = {"a": torch.ones(2), "b": torch.ones(2)}
    state = OptimizerState()
    with pytest.raises(NumericError, match="'b'"):
        adamw_step(p, {"a": torch.ones(2), "b": torch.tensor([1.0, float("nan")])}, state, 0.1)
    assert torch.equal(p["a"], torch.ones(2)) and state.step == 0


def test_adamw_wrapper_skips_frozen():
    lin = torch.nn.Linear(2, 2)
    lin.bias.requires_grad_(False)
    opt = AdamW(lin.named_parameters())
    assert list(opt.params) == ["weight"]


def test_grad_check_square():
    x = torch.tensor([3.0], dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: (x**2).sum(), [x]) < 1e-8


def test_grad_check_sin():
    x = torch.randn(50, dtype=torch.float64, generator=torch.Generator().manual_seed(0)).requires_grad_()
    assert grad_check(lambda: torch.sin(x).sum(), [x], eps=1e-5) < 1e-8


def test_grad_check_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x**2

        @staticmethod
        def backward(ctx, g):
            return g * 3.0  # wrong on purpose

    x = torch.tensor([2.0], dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: Bad.apply(x).sum(), [x]) > 0.1


def test_grad_check_rejects_bad_eps_and_reports_nonfinite():
    x = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
    with pytest.raises(ConfigError):
        grad_check(lambda: x.sum(), [x], eps=1e-2)
    y = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    with pytest.raises(NumericError, match="coordinate 0"):
        grad_check(lambda: torch.sqrt(y).sum() * 0 + torch.log(y + 1e-7).sum(), [y], eps=1e-6)
