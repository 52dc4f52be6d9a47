"""Tensor substrate: parameter store, AdamW with freeze masks, finite-difference checks, RNG streams.

Tensors are ``torch.Tensor``; reverse-mode differentiation is torch autograd.
Everything stochastic draws from :func:`stream`, a counter-based Philox
generator keyed by ``(seed, label, index)``.
"""
from __future__ import annotations

import contextlib
import hashlib
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np
import torch

LAYERNORM_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    """A tensor contained NaN or Inf."""


class ShapeError(ValueError):
    pass


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"non-finite values in {where} (shape {tuple(x.shape)})")
    return x


def check_same_shape(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


# ---------------------------------------------------------------- precision

@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Make float64 the default dtype inside the block (used for grad checks)."""
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(prev)


def is_float64_mode() -> bool:
    return torch.get_default_dtype() == torch.float64


# ---------------------------------------------------------------- RNG streams

def stream(seed: int, label: str, index: int = 0) -> np.random.Generator:
    """Independent generator for one call site.

    Streams with different ``(seed, label, index)`` never overlap; the same key
    always replays the same numbers.
    """
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode()), int(index) & 0xFFFFFFFF, int(index) >> 32]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def randn(rng: np.random.Generator, *shape: int, dtype: torch.dtype | None = None) -> torch.Tensor:
    dtype = dtype or torch.get_default_dtype()
    return torch.from_numpy(rng.standard_normal(shape)).to(dtype)


def rand(rng: np.random.Generator, *shape: int, dtype: torch.dtype | None = None) -> torch.Tensor:
    dtype = dtype or torch.get_default_dtype()
    return torch.from_numpy(rng.random(shape)).to(dtype)


def torch_generator(rng: np.random.Generator) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(rng.integers(0, 2**62)))
    return g


# ---------------------------------------------------------------- small op helpers

def layer_norm(x: torch.Tensor) -> torch.Tensor:
    """Layer norm over the last axis without a learned affine."""
    return torch.nn.functional.layer_norm(x, x.shape[-1:], eps=LAYERNORM_EPS)


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    check_same_shape("mse", a, b)
    return ((a - b) ** 2).mean()


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Ordered name -> tensor map plus the optimizer step counter.

    Usually built from a module with :meth:`from_module`, in which case the
    entries alias the module's parameters.
    """

    def __init__(self, entries: Iterable[tuple[str, torch.Tensor]] = ()):
        self.entries: OrderedDict[str, torch.Tensor] = OrderedDict()
        self.step_count = 0
        for name, t in entries:
            if name in self.entries:
                raise KeyError(f"duplicate parameter name {name!r}")
            self.entries[name] = t

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParamStore":
        return cls(module.named_parameters())

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.entries[name]

    def __iter__(self):
        return iter(self.entries.items())

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def numel(self, names: Iterable[str] | None = None) -> int:
        names = self.entries if names is None else names
        return sum(self.entries[n].numel() for n in names)

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def tensor_hash(self, name: str) -> str:
        return tensor_digest(self.entries[name])

    def digest(self, names: Iterable[str] | None = None) -> str:
        h = hashlib.sha256()
        for n in (self.entries if names is None else names):
            h.update(n.encode())
            h.update(self.entries[n].detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def tensor_digest(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


@dataclass(frozen=True)
class FreezeMask:
    """Parameter-name prefixes excluded from optimizer updates."""

    frozen: frozenset[str] = frozenset()

    def is_frozen(self, name: str) -> bool:
        return any(name == p or name.startswith(p + ".") or (p.endswith(".") and name.startswith(p))
                   for p in self.frozen)

    def validate(self, names: Iterable[str]) -> None:
        names = list(names)
        for p in self.frozen:
            if not any(FreezeMask(frozenset([p])).is_frozen(n) for n in names):
                raise KeyError(f"freeze prefix {p!r} matches no parameter")

    def split(self, names: Iterable[str]) -> tuple[list[str], list[str]]:
        trainable, frozen = [], []
        for n in names:
            (frozen if self.is_frozen(n) else trainable).append(n)
        return trainable, frozen


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 1e-4
    warmup_steps: int = 200
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)

    def lr_at(self, step: int) -> float:
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, step / self.warmup_steps)


@torch.no_grad()
def adamw_step(params: ParamStore, state: OptimizerState, freeze: FreezeMask = FreezeMask()) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Frozen entries are not touched at all. Gradients are cleared afterwards.
    """
    params.step_count += 1
    step = params.step_count
    lr = state.lr_at(step)
    bc1 = 1.0 - state.beta1 ** step
    bc2 = 1.0 - state.beta2 ** step
    for name, p in params:
        if freeze.is_frozen(name):
            p.grad = None
            continue
        if p.grad is None:
            raise RuntimeError(f"missing gradient for trainable parameter {name!r}")
        g = p.grad
        m = state.exp_avg.setdefault(name, torch.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        if state.weight_decay:
            p.mul_(1.0 - lr * state.weight_decay)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
        p.grad = None


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every leaf on the tape."""
    if loss.numel() != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss is detached from the tape")
    check_finite(loss, "loss")
    loss.backward()


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    tol: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def grad_check(
    f: Callable[[], torch.Tensor],
    params: ParamStore,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd against central differences for every entry of ``params``.

    ``f`` recomputes the scalar loss from the current parameter values. The
    relative error of one coordinate is ``|a - n| / max(|a|, |n|, abs_floor)``,
    so coordinates where both gradients vanish are judged by absolute error.
    With ``max_entries_per_param`` a random subset of coordinates is probed.
    """
    if not is_float64_mode() and any(p.dtype != torch.float64 for _, p in params):
        raise RuntimeError("grad_check requires float64 parameters")
    params.zero_grad()
    loss = f()
    backward(loss)
    analytic = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for n, p in params}
    params.zero_grad()
    report: dict[str, float] = {}
    with torch.no_grad():
        for name, p in params:
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_entries_per_param is not None and flat.numel() > max_entries_per_param:
                idx = (rng or np.random.default_rng(0)).choice(flat.numel(), max_entries_per_param, replace=False)
            worst = 0.0
            a_flat = analytic[name].view(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                num = (up - down) / (2 * h)
                a = a_flat[i].item()
                err = abs(a - num) / max(abs(a), abs(num), abs_floor)
                worst = max(worst, err)
            report[name] = worst
    return GradCheckReport(report, tol)


