import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cfmsep.flow import (P_DROP_BOTH, FlowBatchState, SamplerConfig, apply_cfg, cfm_loss, cfm_loss_from_state,
                         condition_dropout, euler_sample, interpolate, velocity_target)
from cfmsep.numerics import stream
from cfmsep.synthworld import ConditionBundle


def _cond(B=1):
    z = torch.zeros
    return ConditionBundle(z(B, 1, 1), z(B, 1, 1), z(B, 1, 1), torch.zeros(B, dtype=torch.bool),
                           torch.zeros(B, dtype=torch.bool))


def test_interpolate_endpoints_bitwise():
    x0, x1 = torch.randn(3, 4, 2), torch.randn(3, 4, 2)
    assert torch.equal(interpolate(x0, x1, 0.0), x0)
    assert torch.equal(interpolate(x0, x1, 1.0), x1)
    assert torch.equal(interpolate(x0, x1, torch.zeros(3)), x0)
    assert torch.equal(interpolate(x0, x1, torch.ones(3)), x1)


def test_interpolate_hand_value():
    out = interpolate(torch.tensor([0.0, 2.0]), torch.tensor([4.0, -2.0]), 0.25)
    assert torch.equal(out, torch.tensor([1.0, 1.0]))


def test_interpolate_rejects_out_of_range():
    with pytest.raises(ValueError):
        interpolate(torch.zeros(2), torch.zeros(2), 1.5)


def test_velocity_target_cases():
    x = torch.randn(5)
    assert torch.equal(velocity_target(x, x), torch.zeros(5))
    assert torch.equal(velocity_target(torch.zeros(5), x), x)


@pytest.mark.parametrize("t", [0.1, 0.37, 0.5, 0.9])
def test_path_derivative_is_velocity(t):
    g = torch.Generator().manual_seed(1)
    x0 = torch.randn(6, generator=g, dtype=torch.float64)
    x1 = torch.randn(6, generator=g, dtype=torch.float64)
    h = 1e-6
    fd = (interpolate(x0, x1, t + h) - interpolate(x0, x1, t - h)) / (2 * h)
    u = velocity_target(x0, x1)
    assert torch.allclose(fd, u, rtol=1e-6, atol=1e-9)


def test_apply_cfg_identities():
    vc, vu = torch.randn(10_000), torch.randn(10_000)
    assert torch.equal(apply_cfg(vc, vu, 0.0), vu)
    assert torch.equal(apply_cfg(vc, vu, 1.0), vc)
    assert apply_cfg(torch.ones(1), torch.zeros(1), 4.5).item() == 4.5


@given(s1=st.floats(0, 10), s2=st.floats(0, 10), seed=st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_apply_cfg_linear_in_scale(s1, s2, seed):
    g = torch.Generator().manual_seed(seed)
    vc = torch.randn(5, generator=g, dtype=torch.float64)
    vu = torch.randn(5, generator=g, dtype=torch.float64)
    mid = apply_cfg(vc, vu, (s1 + s2) / 2)
    assert torch.allclose(mid, (apply_cfg(vc, vu, s1) + apply_cfg(vc, vu, s2)) / 2, atol=1e-12)
    assert torch.equal(apply_cfg(vc, vc, s1), vc + s1 * (vc - vc))


def test_cfm_loss_zero_field_is_mean_u_squared():
    x1 = torch.randn(4, 3, 2, dtype=torch.float64)
    state = FlowBatchState.draw(x1, stream(0, "l"))
    loss = cfm_loss_from_state(lambda t, x, xm, c: torch.zeros_like(x), state, _cond(4), None)
    assert loss.item() == pytest.approx((state.u ** 2).mean().item(), rel=1e-12)


def test_cfm_loss_oracle_field_is_zero():
    x1 = torch.randn(4, 3, 2, dtype=torch.float64)
    state = FlowBatchState.draw(x1, stream(0, "l"))
    loss = cfm_loss_from_state(lambda t, x, xm, c: state.u, state, _cond(4), None)
    assert loss.item() == 0.0


def test_cfm_loss_scalar_hand_case():
    x0, x1 = torch.zeros(1, 1, 1), torch.full((1, 1, 1), 2.0)
    t = torch.tensor([0.3])
    state = FlowBatchState(x0, x1, t, interpolate(x0, x1, t), velocity_target(x0, x1))
    loss = cfm_loss_from_state(lambda t, x, xm, c: torch.ones_like(x), state, _cond(), None)
    assert loss.item() == 1.0


def test_cfm_loss_separation_feeds_unmodified_mixture():
    seen = []
    x1 = torch.randn(2, 3, 2)
    x_m = torch.randn(2, 3, 2)
    keep = x_m.clone()

    def field(t, x, xm, c):
        seen.append(xm)
        return torch.zeros_like(x)

    cfm_loss(field, x1, _cond(2), stream(0, "s"), x_m=x_m, mode="separation")
    assert seen[0] is x_m and torch.equal(x_m, keep)


def test_cfm_loss_mode_errors():
    class OneChannel:
        cond_channels = 1

        def __call__(self, t, x, xm, c):
            return torch.zeros_like(x)

    with pytest.raises(ValueError):
        cfm_loss(OneChannel(), torch.zeros(1, 2, 2), _cond(), stream(0, "e"), x_m=torch.zeros(1, 2, 2))
    with pytest.raises(ValueError):
        cfm_loss(OneChannel(), torch.zeros(1, 2, 2), _cond(), stream(0, "e"), mode="bogus")


# ---- sampling

def test_euler_constant_field_one_step_is_exact():
    x0 = torch.randn(2, 3, 2, dtype=torch.float64)
    x1 = torch.randn(2, 3, 2, dtype=torch.float64)
    u = x1 - x0
    out = euler_sample(lambda t, x, xm, c: u, _cond(2), None, SamplerConfig(steps=1, guidance_scale=4.5), x0=x0)
    assert torch.equal(out, x0 + u)


def _linear_field(t, x, xm, c):
    return x


def euler_exp(n):
    x0 = torch.ones(1, 1, 1, dtype=torch.float64)
    return euler_sample(_linear_field, _cond(), None, SamplerConfig(steps=n, guidance_scale=1.0), x0=x0).item()


def test_euler_linear_field_closed_form():
    assert euler_exp(25) == pytest.approx((1 + 1 / 25) ** 25, rel=1e-12)
    assert euler_exp(25) == pytest.approx(2.66584, abs=1e-5)


def test_euler_first_order_convergence():
    e25, e50 = math.e - euler_exp(25), math.e - euler_exp(50)
    assert e25 / e50 == pytest.approx(2.0, rel=0.1)
    assert e50 == pytest.approx(math.e - (1 + 1 / 50) ** 50, rel=1e-10)


def test_euler_guidance_uses_both_branches():
    calls = []

    def field(t, x, xm, c):
        calls.append(bool(c.drop_video.all() and c.drop_text.all()))
        return torch.zeros_like(x) if calls[-1] else torch.ones_like(x)

    out = euler_sample(field, _cond(), None, SamplerConfig(steps=2, guidance_scale=4.5), x0=torch.zeros(1, 1, 1))
    assert calls == [False, True, False, True]
    assert out.item() == pytest.approx(4.5)


def test_euler_mixture_untouched_and_deterministic():
    x_m = torch.randn(2, 3, 2)
    keep = x_m.clone()
    field = lambda t, x, xm, c: xm - x
    s = SamplerConfig(steps=5)
    a = euler_sample(field, _cond(2), x_m, s, rng=stream(0, "n"))
    b = euler_sample(field, _cond(2), x_m, s, rng=stream(0, "n"))
    assert torch.equal(x_m, keep) and torch.equal(a, b)


def test_euler_nonfinite_reports_step():
    field = lambda t, x, xm, c: torch.full_like(x, float("inf")) if t[0] > 0.5 else x
    with pytest.raises(FloatingPointError, match="step 3"):
        euler_sample(field, _cond(), None, SamplerConfig(steps=4, guidance_scale=1.0), x0=torch.ones(1, 1, 1))


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(guidance_scale=-1)
    assert SamplerConfig().steps == 25 and SamplerConfig().guidance_scale == 4.5


def test_condition_dropout_rates():
    n = 20_000
    c = condition_dropout(_cond(n), stream(0, "drop"))
    dv, dt = c.drop_video.numpy(), c.drop_text.numpy()
    both = (dv & dt).mean()
    assert both >= P_DROP_BOTH
    assert 0.1 <= dv.mean() <= 0.2 and 0.1 <= dt.mean() <= 0.2
