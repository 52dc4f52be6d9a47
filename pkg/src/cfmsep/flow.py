"""Conditional flow matching on the straight noise-to-data path, with CFG Euler sampling.

A velocity field is any callable ``field(t, x, x_m, cond) -> v`` where
``t`` has shape [B] and ``x`` is [B, T, C]; :class:`~cfmsep.mmdit.MMDiT`
is one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .numerics import NonFiniteError, check_same_shape, mse, rand, randn
from .synthworld import ConditionBundle

VelocityField = Callable[[torch.Tensor, torch.Tensor, "torch.Tensor | None", ConditionBundle], torch.Tensor]

# Training-time condition dropout for guidance.
P_DROP_EACH = 0.1
P_DROP_BOTH = 0.05


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 25
    guidance_scale: float = 4.5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")


def _bcast(t: torch.Tensor | float, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype)
    return t.view(-1, *([1] * (like.dim() - 1))) if t.dim() == 1 else t


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t) -> torch.Tensor:
    """Point ``t*x1 + (1-t)*x0`` on the straight path; ``t`` is a scalar or per-item [B]."""
    check_same_shape("interpolate", x0, x1)
    tt = torch.as_tensor(t, dtype=x0.dtype)
    if bool((tt < 0).any() or (tt > 1).any()):
        raise ValueError("interpolate: t must lie in [0, 1]")
    tt = _bcast(tt, x0)
    return tt * x1 + (1 - tt) * x0


def velocity_target(x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    check_same_shape("velocity_target", x0, x1)
    return x1 - x0


def apply_cfg(v_cond: torch.Tensor, v_uncond: torch.Tensor, s: float) -> torch.Tensor:
    """Guided velocity v_u + s (v_c - v_u).

    s = 1 returns v_c itself: in floating point v_u + (v_c - v_u) can be off by an ulp.
    """
    check_same_shape("apply_cfg", v_cond, v_uncond)
    if s == 1:
        return v_cond
    return v_uncond + s * (v_cond - v_uncond)


@dataclass
class FlowBatchState:
    x0: torch.Tensor
    x1: torch.Tensor
    t: torch.Tensor
    xt: torch.Tensor
    u: torch.Tensor

    @classmethod
    def draw(cls, x1: torch.Tensor, rng: np.random.Generator) -> "FlowBatchState":
        x0 = randn(rng, *x1.shape, dtype=x1.dtype)
        t = rand(rng, x1.shape[0], dtype=x1.dtype)
        return cls(x0, x1, t, interpolate(x0, x1, t), velocity_target(x0, x1))


def mixture_input(field: VelocityField, x1: torch.Tensor, x_m: torch.Tensor | None, mode: str) -> torch.Tensor | None:
    """What goes into the mixture channel for a given task mode."""
    channels = getattr(field, "cond_channels", None)
    if mode == "separation":
        if x_m is None:
            raise ValueError("separation mode needs a mixture")
        if channels == 1:
            raise ValueError("separation mode needs a 2-channel model")
        return x_m
    if mode == "generation":
        if channels == 2:
            return torch.zeros_like(x1)
        if x_m is not None:
            raise ValueError("generation mode with a 1-channel model takes no mixture")
        return None
    raise ValueError(f"unknown mode {mode!r}")


def cfm_loss_from_state(field: VelocityField, state: FlowBatchState, cond: ConditionBundle,
                        x_m: torch.Tensor | None) -> torch.Tensor:
    """Mean squared error between predicted and target velocity for fixed draws."""
    v = field(state.t, state.xt, x_m, cond)
    return mse(v, state.u)


def cfm_loss(field: VelocityField, x1: torch.Tensor, cond: ConditionBundle, rng: np.random.Generator,
             x_m: torch.Tensor | None = None, mode: str = "separation") -> torch.Tensor:
    """Flow-matching loss with fresh ``t ~ U(0,1)`` and ``x0 ~ N(0, I)``.

    In separation mode the mixture enters unchanged at every t; only the
    target channel is noised.
    """
    xm = mixture_input(field, x1, x_m, mode)
    return cfm_loss_from_state(field, FlowBatchState.draw(x1, rng), cond, xm)


def condition_dropout(cond: ConditionBundle, rng: np.random.Generator) -> ConditionBundle:
    """Randomly drop video/text per item so the model also learns the unconditional field."""
    B = cond.batch_size
    both = rng.random(B) < P_DROP_BOTH
    dv = both | (rng.random(B) < P_DROP_EACH)
    dt = both | (rng.random(B) < P_DROP_EACH)
    return ConditionBundle(
        cond.video_tokens, cond.sync_tokens, cond.text_tokens,
        cond.drop_video.to(torch.bool) | torch.from_numpy(dv),
        cond.drop_text.to(torch.bool) | torch.from_numpy(dt),
    )


@torch.no_grad()
def euler_sample(field: VelocityField, cond: ConditionBundle, x_m: torch.Tensor | None,
                 sampler: SamplerConfig, rng: np.random.Generator | None = None,
                 shape: tuple[int, ...] | None = None, x0: torch.Tensor | None = None) -> torch.Tensor:
    """Integrate the guided velocity field from Gaussian noise at t=0 to t=1.

    The unconditional branch drops video and text together; ``x_m`` is fed
    unchanged to both branches and every step.
    """
    if x0 is None:
        if shape is None:
            if x_m is None:
                raise ValueError("euler_sample: need shape, x0 or x_m to size the state")
            shape = tuple(x_m.shape)
        rng = rng if rng is not None else np.random.default_rng(sampler.seed)
        dtype = x_m.dtype if x_m is not None else torch.get_default_dtype()
        x0 = randn(rng, *shape, dtype=dtype)
    x = x0.clone()
    uncond = cond.dropped(video=True, text=True)
    n = sampler.steps
    for k in range(n):
        t = torch.full((x.shape[0],), k / n, dtype=x.dtype)
        v_c = field(t, x, x_m, cond)
        if sampler.guidance_scale != 1.0:
            v = apply_cfg(v_c, field(t, x, x_m, uncond), sampler.guidance_scale)
        else:
            v = v_c
        x = x + v / n
        if not bool(torch.isfinite(x).all()):
            raise NonFiniteError(f"euler_sample: non-finite state at step {k}")
    return x
