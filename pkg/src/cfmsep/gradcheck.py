"""Finite-difference verification of the full model + flow-matching loss."""
from __future__ import annotations

import dataclasses

import torch

from .flow import FlowBatchState, cfm_loss_from_state, mixture_input
from .mmdit import MMDiT, ModelConfig
from .numerics import GradCheckReport, ParamStore, float64_mode, grad_check, stream
from .synthworld import WorldConfig, sample_training_batch


@torch.no_grad()
def randomize_parameters(model: torch.nn.Module, seed: int, scale: float = 0.2) -> None:
    """Overwrite every parameter with Gaussian noise.

    Zero-initialized gates and heads would otherwise block most gradients and
    make the check vacuous.
    """
    g = torch.Generator().manual_seed(seed)
    for p in model.parameters():
        p.copy_(scale * torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype))


def model_grad_check(world: WorldConfig, model_cfg: ModelConfig, seed: int, batch: int = 2,
                     h: float = 1e-5, tol: float = 1e-4, entries_per_param: int | None = 4,
                     mode: str = "separation") -> GradCheckReport:
    """Central differences vs autograd for the CFM loss of a randomized model, in float64.

    ``entries_per_param`` limits how many coordinates of each tensor are probed
    (``None`` probes all of them).
    """
    with float64_mode():
        cfg = dataclasses.replace(model_cfg.for_world(world), cond_channels=2 if mode == "separation" else 1)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            model = MMDiT(cfg).double()
        randomize_parameters(model, seed)
        rng = stream(seed, "grad-check")
        b = sample_training_batch(world, batch, rng)
        x1 = b.target.double()
        cond = b.cond.to(torch.float64)
        x_m = mixture_input(model, x1, b.mixture.double() if mode == "separation" else None, mode)
        state = FlowBatchState.draw(x1, rng)
        params = ParamStore.from_module(model)
        return grad_check(lambda: cfm_loss_from_state(model, state, cond, x_m), params, h=h, tol=tol,
                          max_entries_per_param=entries_per_param, rng=stream(seed, "grad-check-idx"))
