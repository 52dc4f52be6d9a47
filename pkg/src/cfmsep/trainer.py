"""Two-phase training: a 1-channel generator, then a 2-channel separation fine-tune.

Fine-tuning runs under one of three configurations: ``scratch`` (fresh
2-channel model), ``pretrain_all`` (expanded pretrained model, everything
trainable) and ``pretrain_frozen`` (expanded pretrained model, only the
audio input projection and the joint blocks trainable).
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .flow import SamplerConfig, cfm_loss, condition_dropout, euler_sample
from .mmdit import (TRAIN_CONFIGS, MMDiT, ModelConfig, expand_model, freeze_sets, load_checkpoint,
                    save_checkpoint)
from .numerics import FreezeMask, NonFiniteError, OptimizerState, ParamStore, adamw_step, backward, randn, stream
from .synthworld import ConditionBundle, WorldConfig, sample_clean_batch, sample_training_batch

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_REF_STEP = 100


class TrainingDiverged(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 1e-4
    warmup_steps: int = 200

    def state(self) -> OptimizerState:
        return OptimizerState(**dataclasses.asdict(self))


@dataclass(frozen=True)
class RunConfig:
    phase: str = "pretrain"
    train_config: str = "pretrain_frozen"
    steps: int = 4000
    batch: int = 32
    eval_every: int = 1000
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    init_checkpoint: str | None = None

    def validate(self) -> None:
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.phase == "finetune" and self.train_config not in TRAIN_CONFIGS:
            raise ConfigError(f"unknown train config {self.train_config!r}")
        if self.steps < 0 or self.batch < 1:
            raise ConfigError("steps must be >= 0 and batch >= 1")

    def model_config(self) -> ModelConfig:
        channels = 1 if self.phase == "pretrain" else 2
        return dataclasses.replace(self.model.for_world(self.world), cond_channels=channels)


@dataclass
class TrainResult:
    model: MMDiT
    checkpoint: Path
    checkpoint_hash: str
    losses: list[float]
    frozen_hashes: dict[str, str] = field(default_factory=dict)


class TrainLog:
    """Append-only line-delimited JSON log."""

    def __init__(self, path: Path | None):
        self.path = path
        self._fh = open(path, "a") if path else None
        self._t0 = time.monotonic()

    def write(self, **record) -> None:
        if self._fh:
            record["wall"] = round(time.monotonic() - self._t0, 3)
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def init_model(cfg: ModelConfig, seed: int) -> MMDiT:
    with torch.random.fork_rng():
        torch.manual_seed(int(stream(seed, "init").integers(2**62)))
        return MMDiT(cfg)


def _train_loop(model: MMDiT, run: RunConfig, mask: FreezeMask, mode: str, out_dir: Path | None,
                tag: str, log_file: TrainLog) -> list[float]:
    store = ParamStore.from_module(model)
    mask.validate(store.names())
    opt = run.optim.state()
    losses: list[float] = []
    ref_loss = None
    for step in range(run.steps):
        rng = stream(run.seed, f"{tag}-step", step)
        if mode == "generation":
            b = sample_clean_batch(run.world, run.batch, rng)
            x_m = None
        else:
            b = sample_training_batch(run.world, run.batch, rng)
            x_m = b.mixture
        cond = condition_dropout(b.cond, rng)
        try:
            loss = cfm_loss(model, b.target, cond, rng, x_m=x_m, mode=mode)
        except NonFiniteError as e:
            log_file.write(step=step, event="diverged", reason=str(e))
            raise TrainingDiverged(f"non-finite forward pass at step {step}: {e}") from e
        value = loss.item()
        if step == DIVERGENCE_REF_STEP:
            ref_loss = value
        if not np.isfinite(value) or (ref_loss is not None and value > DIVERGENCE_FACTOR * ref_loss):
            log_file.write(step=step, loss=value, event="diverged")
            raise TrainingDiverged(f"loss {value:.4g} at step {step} exceeds {DIVERGENCE_FACTOR}x step-{DIVERGENCE_REF_STEP} value {ref_loss}")
        backward(loss)
        adamw_step(store, opt, mask)
        losses.append(value)
        log_file.write(step=step, loss=value, lr=opt.lr_at(store.step_count))
        if out_dir is not None and run.eval_every and (step + 1) % run.eval_every == 0 and step + 1 < run.steps:
            h = save_checkpoint(out_dir / f"{tag}_step{step + 1}.ckpt", model, run.world, _ckpt_tag(run), step + 1)
            log_file.write(step=step + 1, checkpoint=f"{tag}_step{step + 1}.ckpt", sha256=h)
        if step % 500 == 0:
            log.info("%s step %d loss %.4f", tag, step, value)
    return losses


def _ckpt_tag(run: RunConfig) -> str:
    return "pretrain" if run.phase == "pretrain" else run.train_config


def pretrain(run: RunConfig, out_dir: str | Path | None = None) -> TrainResult:
    """Train a 1-channel generator on clean clips (generation mode, with condition dropout)."""
    if run.phase != "pretrain":
        raise ConfigError("pretrain requires phase='pretrain'")
    run.validate()
    out = Path(out_dir) if out_dir is not None else None
    model = init_model(run.model_config(), run.seed)
    log_file = TrainLog(out / "train_log.jsonl" if out else None)
    try:
        losses = _train_loop(model, run, FreezeMask(), "generation", out, "pretrain", log_file)
        ckpt, h = _finish(model, run, out, "pretrain.ckpt", log_file)
    finally:
        log_file.close()
    return TrainResult(model, ckpt, h, losses)


def initial_finetune_model(run: RunConfig) -> MMDiT:
    """The step-0 model of a fine-tune: fresh for ``scratch``, else the expanded checkpoint."""
    if run.train_config == "scratch":
        return init_model(run.model_config(), run.seed)
    if not run.init_checkpoint:
        raise ConfigError(f"train config {run.train_config!r} requires an init checkpoint")
    pretrained, meta = load_checkpoint(run.init_checkpoint)
    if pretrained.cfg.cond_channels != 1:
        raise ConfigError("init checkpoint must be a 1-channel pretrained generator")
    return expand_model(pretrained)


def finetune(run: RunConfig, out_dir: str | Path | None = None) -> TrainResult:
    """Fine-tune for separation; frozen tensors are verified bit-identical at the end."""
    if run.phase != "finetune":
        raise ConfigError("finetune requires phase='finetune'")
    run.validate()
    out = Path(out_dir) if out_dir is not None else None
    model = initial_finetune_model(run)
    mask = freeze_sets(run.train_config)
    store = ParamStore.from_module(model)
    _, frozen = mask.split(store.names())
    before = {n: store.tensor_hash(n) for n in frozen}
    log_file = TrainLog(out / "train_log.jsonl" if out else None)
    try:
        losses = _train_loop(model, run, mask, "separation", out, f"finetune_{run.train_config}", log_file)
        after = {n: store.tensor_hash(n) for n in frozen}
        changed = [n for n in frozen if before[n] != after[n]]
        if changed:
            raise RuntimeError(f"frozen tensors changed during fine-tuning: {changed}")
        ckpt, h = _finish(model, run, out, f"finetune_{run.train_config}.ckpt", log_file)
    finally:
        log_file.close()
    return TrainResult(model, ckpt, h, losses, before)


def _finish(model: MMDiT, run: RunConfig, out: Path | None, name: str, log_file: TrainLog):
    if out is None:
        return Path(), ""
    path = out / name
    h = save_checkpoint(path, model, run.world, _ckpt_tag(run), run.steps)
    log_file.write(step=run.steps, checkpoint=name, sha256=h, final=True)
    return path, h


# ---------------------------------------------------------------- inference

QUERIES = ("text", "text+video")
MIXTURE_SUBS = ("white_noise", "zeros")


def apply_query(cond: ConditionBundle, query: str) -> ConditionBundle:
    if query not in QUERIES:
        raise ConfigError(f"unknown query {query!r}; expected one of {QUERIES}")
    return cond.dropped(video=True, text=False) if query == "text" else cond


def initial_noise(sampler: SamplerConfig, n: int, shape: tuple[int, ...], dtype=torch.float32) -> torch.Tensor:
    """Per-item starting noise; item i depends only on (seed, i), not on batching."""
    return torch.stack([randn(stream(sampler.seed, "sample-noise", i), *shape, dtype=dtype) for i in range(n)])


def _require_two_channels(model: MMDiT) -> None:
    if model.cond_channels != 2:
        raise ConfigError("separation/V2A sampling needs a 2-channel checkpoint")


@torch.no_grad()
def separate(model: MMDiT, mixture: torch.Tensor, cond: ConditionBundle, sampler: SamplerConfig,
             query: str = "text+video") -> torch.Tensor:
    _require_two_channels(model)
    x0 = initial_noise(sampler, mixture.shape[0], tuple(mixture.shape[1:]), mixture.dtype)
    return euler_sample(model, apply_query(cond, query), mixture, sampler, x0=x0)


def mixture_substitute(kind: str, shape: tuple[int, ...], seed: int, dtype=torch.float32) -> torch.Tensor:
    if kind == "zeros":
        return torch.zeros(shape, dtype=dtype)
    if kind == "white_noise":
        return torch.stack([randn(stream(seed, "v2a-noise", i), *shape[1:], dtype=dtype) for i in range(shape[0])])
    raise ConfigError(f"unknown mixture substitute {kind!r}; expected one of {MIXTURE_SUBS}")


@torch.no_grad()
def generate_v2a(model: MMDiT, cond: ConditionBundle, sampler: SamplerConfig, mixture_sub: str = "white_noise",
                 query: str = "text+video") -> torch.Tensor:
    """Sample with the mixture channel replaced by unrelated noise (or zeros)."""
    _require_two_channels(model)
    cfg = model.cfg
    shape = (cond.batch_size, cfg.audio_frames, cfg.latent_channels)
    x_m = mixture_substitute(mixture_sub, shape, sampler.seed)
    return separate(model, x_m, cond, sampler, query=query)


@torch.no_grad()
def generate(model: MMDiT, cond: ConditionBundle, sampler: SamplerConfig) -> torch.Tensor:
    """Plain generation with a 1-channel model."""
    cfg = model.cfg
    shape = (cfg.audio_frames, cfg.latent_channels)
    x0 = initial_noise(sampler, cond.batch_size, shape)
    return euler_sample(model, cond, None, sampler, x0=x0)


def shuffled(cond: ConditionBundle, seed: int) -> ConditionBundle:
    """Conditions re-assigned by a fixed derangement (item i gets the bundle of item i+k)."""
    n = cond.batch_size
    shift = 1 + int(stream(seed, "shuffle").integers(max(n - 1, 1)))
    return cond.select(torch.from_numpy((np.arange(n) + shift) % n))
