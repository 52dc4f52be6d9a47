"""Toy multimodal diffusion transformer predicting the flow velocity of audio latents.

Token streams: audio (noisy target, optionally channel-concatenated with the
mixture), video and text. ``n_joint`` blocks run one attention over all
streams with per-stream weights; ``n_audio`` blocks then process audio alone.
Every block is modulated through adaLN by a global vector built from pooled
video, pooled text and the timestep. Sync tokens are upsampled to the audio
frame rate and added to the audio tokens.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import binfmt
from .numerics import FreezeMask, ParamStore, check_finite, layer_norm
from .synthworld import ConditionBundle, WorldConfig

TRAIN_CONFIGS = ("scratch", "pretrain_all", "pretrain_frozen")


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64
    heads: int = 4
    n_joint: int = 2
    n_audio: int = 2
    cond_channels: int = 2
    time_dim: int | None = None
    mlp_ratio: int = 4
    # Copied from WorldConfig by ``for_world``.
    latent_channels: int = 8
    audio_frames: int = 32
    video_tokens: int = 8
    video_dim: int = 16
    sync_tokens: int = 16
    sync_dim: int = 12
    text_tokens: int = 4
    text_dim: int = 16

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.n_joint < 1 or self.n_audio < 1:
            raise ValueError("n_joint and n_audio must be >= 1")
        if self.cond_channels not in (1, 2):
            raise ValueError("cond_channels must be 1 or 2")

    @property
    def tdim(self) -> int:
        return self.time_dim or self.hidden

    def for_world(self, world: WorldConfig) -> "ModelConfig":
        return dataclasses.replace(
            self,
            latent_channels=world.latent_channels, audio_frames=world.audio_frames,
            video_tokens=world.video_tokens, video_dim=world.video_dim,
            sync_tokens=world.sync_tokens, sync_dim=world.sync_dim,
            text_tokens=world.text_tokens, text_dim=world.text_dim,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def timestep_embedding(t: torch.Tensor, n_freq: int = 32, max_period: float = 1e4) -> torch.Tensor:
    """Sinusoidal features of t in [0, 1]; frequencies spaced geometrically from 1 to ``max_period``."""
    freqs = torch.exp(torch.linspace(0.0, math.log(max_period), n_freq, dtype=t.dtype))
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def upsample_time(x: torch.Tensor, frames: int) -> torch.Tensor:
    """Linear interpolation of [B, T_s, d] onto ``frames`` steps with aligned endpoints."""
    B, T, d = x.shape
    if T == frames:
        return x
    pos = torch.linspace(0.0, T - 1.0, frames, dtype=x.dtype)
    lo = pos.floor().long().clamp(max=T - 1)
    hi = (lo + 1).clamp(max=T - 1)
    w = (pos - lo.to(x.dtype))[None, :, None]
    return x[:, lo] * (1 - w) + x[:, hi] * w


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return layer_norm(x) * (1 + scale[:, None]) + shift[:, None]


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int, return_weights: bool = False):
    B, N, h = q.shape
    dh = h // heads
    split = lambda z: z.view(B, N, heads, dh).transpose(1, 2)
    q, k, v = split(q), split(k), split(v)
    w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
    out = (w @ v).transpose(1, 2).reshape(B, N, h)
    return (out, w) if return_weights else out


class StreamWeights(nn.Module):
    """Per-stream adaLN modulation, QKV and (unless ``pre_only``) output projection and MLP."""

    def __init__(self, hidden: int, mlp_ratio: int, pre_only: bool = False):
        super().__init__()
        self.pre_only = pre_only
        self.n_mod = 2 if pre_only else 6
        self.mod = nn.Linear(hidden, self.n_mod * hidden)
        self.qkv = nn.Linear(hidden, 3 * hidden)
        nn.init.zeros_(self.mod.weight)
        nn.init.zeros_(self.mod.bias)
        if not pre_only:
            self.out = nn.Linear(hidden, hidden)
            self.mlp = nn.Sequential(
                nn.Linear(hidden, mlp_ratio * hidden), nn.GELU(approximate="tanh"),
                nn.Linear(mlp_ratio * hidden, hidden),
            )

    def pre(self, x: torch.Tensor, c: torch.Tensor):
        mods = self.mod(F.silu(c)).chunk(self.n_mod, dim=-1)
        return self.qkv(modulate(x, mods[0], mods[1])).chunk(3, dim=-1), mods

    def post(self, x: torch.Tensor, attn_out: torch.Tensor, mods) -> torch.Tensor:
        _, _, gate1, shift2, scale2, gate2 = mods
        x = x + gate1[:, None] * self.out(attn_out)
        return x + gate2[:, None] * self.mlp(modulate(x, shift2, scale2))


class JointBlock(nn.Module):
    """One attention over concatenated streams; stream 0 is audio.

    In the last joint block the non-audio streams only contribute keys and
    values, since nothing downstream reads their outputs.
    """

    def __init__(self, hidden: int, heads: int, n_streams: int, mlp_ratio: int, last: bool):
        super().__init__()
        self.heads = heads
        self.streams = nn.ModuleList(
            StreamWeights(hidden, mlp_ratio, pre_only=(last and i > 0)) for i in range(n_streams)
        )

    def forward(self, xs: list[torch.Tensor], c: torch.Tensor, return_weights: bool = False):
        qkvs, mods = zip(*(s.pre(x, c) for s, x in zip(self.streams, xs)))
        q, k, v = (torch.cat([z[i] for z in qkvs], dim=1) for i in range(3))
        out, w = attention(q, k, v, self.heads, return_weights=True)
        sizes = [x.shape[1] for x in xs]
        pieces = out.split(sizes, dim=1)
        new = [s.post(x, o, m) if not s.pre_only else x
               for s, x, o, m in zip(self.streams, xs, pieces, mods)]
        return (new, w) if return_weights else new


class AudioBlock(nn.Module):
    def __init__(self, hidden: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.stream = StreamWeights(hidden, mlp_ratio)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        (q, k, v), mods = self.stream.pre(x, c)
        return self.stream.post(x, attention(q, k, v, self.heads), mods)


class FinalLayer(nn.Module):
    def __init__(self, hidden: int, out_channels: int):
        super().__init__()
        self.mod = nn.Linear(hidden, 2 * hidden)
        self.head = nn.Linear(hidden, out_channels)
        for lin in (self.mod, self.head):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale = self.mod(F.silu(c)).chunk(2, dim=-1)
        return self.head(modulate(x, shift, scale))


class ConditionEncoder(nn.Module):
    """Projections and learned null embeddings for the video, sync and text streams."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.hidden
        self.video_null = nn.Parameter(0.02 * torch.randn(cfg.video_dim))
        self.text_null = nn.Parameter(0.02 * torch.randn(cfg.text_dim))
        self.sync_null = nn.Parameter(0.02 * torch.randn(cfg.sync_dim))
        self.video_proj = nn.Linear(cfg.video_dim, h)
        self.text_proj = nn.Linear(cfg.text_dim, h)
        self.sync_proj = nn.Linear(cfg.sync_dim, h)
        self.video_pos = nn.Parameter(0.02 * torch.randn(cfg.video_tokens, h))
        self.text_pos = nn.Parameter(0.02 * torch.randn(cfg.text_tokens, h))

    @staticmethod
    def _substitute(tokens: torch.Tensor, drop: torch.Tensor, null: torch.Tensor) -> torch.Tensor:
        drop = drop.to(torch.bool).view(-1, 1, 1)
        return torch.where(drop, null.expand_as(tokens), tokens)

    def resolve(self, cond: ConditionBundle):
        """Token sets after replacing dropped modalities by their null embeddings.

        Dropping video also drops sync, which is derived from the video.
        """
        video = self._substitute(cond.video_tokens, cond.drop_video, self.video_null)
        sync = self._substitute(cond.sync_tokens, cond.drop_video, self.sync_null)
        text = self._substitute(cond.text_tokens, cond.drop_text, self.text_null)
        return video, sync, text


class GlobalCond(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.hidden
        self.video = nn.Linear(cfg.video_dim, h)
        self.text = nn.Linear(cfg.text_dim, h)
        self.time_mlp = nn.Sequential(nn.Linear(2 * 32, cfg.tdim), nn.SiLU(), nn.Linear(cfg.tdim, h))

    def forward(self, t: torch.Tensor, pooled_video: torch.Tensor, pooled_text: torch.Tensor) -> torch.Tensor:
        return self.video(pooled_video) + self.text(pooled_text) + self.time_mlp(timestep_embedding(t))


def pool_conditions(video: torch.Tensor, text: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean-pool resolved video and text tokens over the token axis."""
    return video.mean(dim=-2), text.mean(dim=-2)


class MMDiT(nn.Module):
    """Velocity field ``v(t, x_t, x_m, cond)`` over audio latents [B, T_a, C]."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        h, C = cfg.hidden, cfg.latent_channels
        self.audio_in = nn.Module()
        self.audio_in.proj = nn.Linear(cfg.cond_channels * C, h)
        self.audio_in.pos = nn.Parameter(0.02 * torch.randn(cfg.audio_frames, h))
        self.cond = ConditionEncoder(cfg)
        self.global_cond = GlobalCond(cfg)
        self.mm_blocks = nn.ModuleList(
            JointBlock(h, cfg.heads, 3, cfg.mlp_ratio, last=(i == cfg.n_joint - 1)) for i in range(cfg.n_joint)
        )
        self.audio_blocks = nn.ModuleList(AudioBlock(h, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.n_audio))
        self.final = FinalLayer(h, C)

    @property
    def cond_channels(self) -> int:
        return self.cfg.cond_channels

    def audio_in_proj(self, x_t: torch.Tensor, x_m: torch.Tensor | None) -> torch.Tensor:
        C = self.cfg.latent_channels
        if x_t.shape[-1] != C:
            raise ValueError(f"audio_in_proj: expected {C} channels, got {x_t.shape[-1]}")
        if self.cfg.cond_channels == 2:
            if x_m is None:
                raise ValueError("audio_in_proj: 2-channel model requires a mixture x_m")
            if x_m.shape != x_t.shape:
                raise ValueError(f"audio_in_proj: x_m shape {tuple(x_m.shape)} != x_t shape {tuple(x_t.shape)}")
            # Same as one [2C -> h] projection of cat([x_t, x_m]); split so an
            # all-zero mixture half adds exact zeros to the target half.
            w = self.audio_in.proj.weight
            return (F.linear(x_t, w[:, :C].contiguous(), self.audio_in.proj.bias)
                    + F.linear(x_m, w[:, C:].contiguous()))
        if x_m is not None:
            raise ValueError("audio_in_proj: 1-channel model takes no mixture")
        return self.audio_in.proj(x_t)

    def forward(self, t: torch.Tensor, x_t: torch.Tensor, x_m: torch.Tensor | None,
                cond: ConditionBundle, return_attention: bool = False):
        cfg = self.cfg
        t = torch.as_tensor(t, dtype=x_t.dtype)
        if t.dim() == 0:
            t = t.expand(x_t.shape[0])
        check_finite(t, "timestep")

        video, sync, text = self.cond.resolve(cond)
        audio = self.audio_in_proj(x_t, x_m) + self.audio_in.pos
        audio = audio + self.cond.sync_proj(upsample_time(sync, cfg.audio_frames))
        check_finite(audio, "audio_in")
        video_tok = self.cond.video_proj(video) + self.cond.video_pos
        text_tok = self.cond.text_proj(text) + self.cond.text_pos

        c = self.global_cond(t, *pool_conditions(video, text))
        check_finite(c, "global_cond")

        xs = [audio, video_tok, text_tok]
        weights = []
        for i, block in enumerate(self.mm_blocks):
            xs, w = block(xs, c, return_weights=True)
            weights.append(w)
            check_finite(xs[0], f"mm_blocks.{i}")
        x = xs[0]
        for i, block in enumerate(self.audio_blocks):
            x = check_finite(block(x, c), f"audio_blocks.{i}")
        v = check_finite(self.final(x, c), "final")
        return (v, weights) if return_attention else v


# ---------------------------------------------------------------- freezing / expansion

FROZEN_IN_PRETRAIN_FROZEN = frozenset({"cond", "global_cond", "audio_blocks", "final"})


def freeze_sets(config_name: str) -> FreezeMask:
    if config_name not in TRAIN_CONFIGS:
        raise ValueError(f"unknown train config {config_name!r}; expected one of {TRAIN_CONFIGS}")
    if config_name == "pretrain_frozen":
        return FreezeMask(FROZEN_IN_PRETRAIN_FROZEN)
    return FreezeMask()


def parameter_report(model: nn.Module, mask: FreezeMask) -> dict[str, int]:
    store = ParamStore.from_module(model)
    trainable, frozen = mask.split(store.names())
    return {"total": store.numel(), "trainable": store.numel(trainable), "frozen": store.numel(frozen)}


@torch.no_grad()
def expand_in_proj(weight: torch.Tensor, bias: torch.Tensor, latent_channels: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Widen a [C -> h] projection to [2C -> h] with zeroed mixture columns.

    torch stores Linear weights as [out, in], so the input columns are the
    last axis.
    """
    h, c_in = weight.shape
    if c_in != latent_channels:
        raise ValueError(f"expand_in_proj: source projection has {c_in} inputs, expected {latent_channels}")
    wide = torch.zeros(h, 2 * latent_channels, dtype=weight.dtype)
    wide[:, :latent_channels] = weight
    return wide, bias.clone()


def expand_model(pretrained: MMDiT) -> MMDiT:
    """2-channel copy of a 1-channel generator whose output ignores an all-zero mixture."""
    if pretrained.cfg.cond_channels != 1:
        raise ValueError("expand_model: source model must have cond_channels=1")
    model = MMDiT(dataclasses.replace(pretrained.cfg, cond_channels=2)).to(next(pretrained.parameters()).dtype)
    state = dict(pretrained.state_dict())
    w, b = expand_in_proj(state["audio_in.proj.weight"], state["audio_in.proj.bias"], pretrained.cfg.latent_channels)
    state["audio_in.proj.weight"], state["audio_in.proj.bias"] = w, b
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, model: MMDiT, world: WorldConfig, train_config: str, step: int,
                    extra: dict | None = None) -> str:
    meta = {
        "kind": "mmdit",
        "model": model.cfg.to_dict(),
        "world": world.to_dict(),
        "train_config": train_config,
        "step": step,
        **(extra or {}),
    }
    blob = binfmt.encode(binfmt.CHECKPOINT_MAGIC, model.state_dict(), meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path: str | Path) -> tuple[MMDiT, dict]:
    tensors, meta = binfmt.read(path, binfmt.CHECKPOINT_MAGIC)
    if meta.get("kind") != "mmdit":
        raise binfmt.FormatError(f"{path} is not a model checkpoint")
    model = MMDiT(ModelConfig(**meta["model"]))
    model.load_state_dict(tensors)
    return model, meta
