"""Synthetic multimodal world: per-class audio latents with matching video, sync and text tokens.

Each class k owns an orthonormal signature ``A_k`` (C x 3), a carrier
frequency and a pair of unit embeddings (visual, textual). A clip is

    latents[t] = amp * env(t) * A_k @ b(t) + noise

where ``b(t)`` are three cosines at the class frequency, phase-shifted by
2*pi/3 from each other plus a random per-clip phase, so ``|A_k b(t)| = 1``
and the channel energy follows ``env(t)**2`` exactly. The envelope is 1-3
smooth bumps; sync tokens carry it (and its slope) at the sync frame rate.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import binfmt
from .numerics import stream


class ZeroEnergyError(ValueError):
    """Interferer has no energy; the caller should draw another one."""


@dataclass(frozen=True)
class WorldConfig:
    num_classes: int = 8
    audio_frames: int = 32
    latent_channels: int = 8
    video_tokens: int = 8
    video_dim: int = 16
    sync_tokens: int = 16
    sync_dim: int = 12
    text_tokens: int = 4
    text_dim: int = 16
    latent_noise: float = 0.05
    video_noise: float = 0.1
    sync_noise: float = 0.05
    text_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name.endswith(("_frames", "_channels", "_tokens", "_dim")) and v < 1:
                raise ValueError(f"{f.name} must be >= 1")
            if f.name.endswith("_noise") and v < 0:
                raise ValueError(f"{f.name} must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_noise(self, scale: float) -> "WorldConfig":
        return dataclasses.replace(self, latent_noise=scale, video_noise=scale, sync_noise=scale, text_noise=scale)


@dataclass
class LatentClip:
    latents: np.ndarray  # [T_a, C], the clean source
    envelope: np.ndarray  # [T_a] in [0, 1]
    class_id: int


@dataclass
class ConditionBundle:
    """Query conditions for one clip, or a batch when tensors carry a leading B axis."""

    video_tokens: torch.Tensor
    sync_tokens: torch.Tensor
    text_tokens: torch.Tensor
    drop_video: torch.Tensor
    drop_text: torch.Tensor

    @property
    def batch_size(self) -> int:
        return self.video_tokens.shape[0]

    def dropped(self, video: bool = True, text: bool = True) -> "ConditionBundle":
        """Copy with drop flags forced on for the requested modalities."""
        return dataclasses.replace(
            self,
            drop_video=torch.ones_like(self.drop_video) if video else self.drop_video.clone(),
            drop_text=torch.ones_like(self.drop_text) if text else self.drop_text.clone(),
        )

    def select(self, index) -> "ConditionBundle":
        return ConditionBundle(*(getattr(self, f.name)[index] for f in dataclasses.fields(self)))

    def to(self, dtype: torch.dtype) -> "ConditionBundle":
        return dataclasses.replace(
            self,
            video_tokens=self.video_tokens.to(dtype),
            sync_tokens=self.sync_tokens.to(dtype),
            text_tokens=self.text_tokens.to(dtype),
        )

    @staticmethod
    def stack(items: list["ConditionBundle"]) -> "ConditionBundle":
        return ConditionBundle(*(torch.stack([getattr(c, f.name) for c in items])
                                 for f in dataclasses.fields(ConditionBundle)))


@dataclass
class MixtureBatch:
    mixture: torch.Tensor  # [B, T_a, C]
    target: torch.Tensor  # [B, T_a, C]
    envelope: torch.Tensor  # [B, T_a]
    class_id: torch.Tensor  # [B] long
    interferer_class: torch.Tensor  # [B] long
    snr_db: torch.Tensor  # [B]
    cond: ConditionBundle

    def __len__(self) -> int:
        return self.mixture.shape[0]

    def select(self, index) -> "MixtureBatch":
        return MixtureBatch(
            self.mixture[index], self.target[index], self.envelope[index], self.class_id[index],
            self.interferer_class[index], self.snr_db[index], self.cond.select(index),
        )


@dataclass
class CleanBatch:
    target: torch.Tensor
    envelope: torch.Tensor
    class_id: torch.Tensor
    cond: ConditionBundle


# Latent amplitude chosen so an average clip has per-entry RMS close to 1.
_AMPLITUDE = 5.0


@dataclass(frozen=True)
class World:
    """Fixed class-level parameters drawn once from the world seed."""

    config: WorldConfig
    signatures: np.ndarray = field(repr=False)  # [K, C, 3]
    frequencies: np.ndarray = field(repr=False)  # [K] radians per frame
    visual_embeddings: np.ndarray = field(repr=False)  # [K, d_v]
    text_embeddings: np.ndarray = field(repr=False)  # [K, d_t]
    sync_basis: np.ndarray = field(repr=False)  # [2, d_s]

    @classmethod
    def build(cls, config: WorldConfig) -> "World":
        rng = stream(config.seed, "world")
        K, C = config.num_classes, config.latent_channels
        r = min(3, C)
        sigs = np.zeros((K, C, 3))
        for k in range(K):
            q, _ = np.linalg.qr(rng.standard_normal((C, r)))
            sigs[k, :, :r] = q
        # Distinct carrier frequencies, 1.5 to 6 cycles per clip.
        cycles = rng.permutation(np.linspace(1.5, 6.0, K))
        freqs = 2 * np.pi * cycles / config.audio_frames
        vis = _unit_rows(rng.standard_normal((K, config.video_dim)))
        txt = _unit_rows(rng.standard_normal((K, config.text_dim)))
        sync = rng.standard_normal((2, config.sync_dim))
        sync[0] /= np.linalg.norm(sync[0])
        sync[1] -= sync[0] * (sync[0] @ sync[1])
        sync[1] /= np.linalg.norm(sync[1]) + 1e-12
        return cls(config, sigs, freqs, vis, txt, sync)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


_WORLDS: dict[WorldConfig, World] = {}


def world_for(config: WorldConfig) -> World:
    if config not in _WORLDS:
        _WORLDS[config] = World.build(config)
    return _WORLDS[config]


def resample(x: np.ndarray, n: int) -> np.ndarray:
    """Linear interpolation of a 1-D signal onto ``n`` frames (endpoints aligned)."""
    src = np.linspace(0.0, 1.0, len(x))
    return np.interp(np.linspace(0.0, 1.0, n), src, x)


def random_envelope(T: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(T)
    env = np.zeros(T)
    for _ in range(rng.integers(1, 4)):
        center = rng.uniform(0, T - 1)
        width = rng.uniform(1.5, 4.0)
        env += np.exp(-0.5 * ((t - center) / width) ** 2)
    return np.clip(env, 0.0, 1.0)


def make_clip(world: WorldConfig | World, class_id: int, rng: np.random.Generator) -> tuple[LatentClip, ConditionBundle]:
    w = world if isinstance(world, World) else world_for(world)
    cfg = w.config
    if not 0 <= class_id < cfg.num_classes:
        raise ValueError(f"class_id {class_id} outside [0, {cfg.num_classes})")
    T = cfg.audio_frames
    env = random_envelope(T, rng)
    phase = rng.uniform(0, 2 * np.pi)
    t = np.arange(T)
    basis = np.sqrt(2 / 3) * np.cos(w.frequencies[class_id] * t[None, :] + phase + 2 * np.pi * np.arange(3)[:, None] / 3)
    latents = _AMPLITUDE * env[:, None] * (w.signatures[class_id] @ basis).T
    latents = latents + cfg.latent_noise * rng.standard_normal(latents.shape)

    video = w.visual_embeddings[class_id][None, :] + cfg.video_noise * rng.standard_normal((cfg.video_tokens, cfg.video_dim))
    env_s = resample(env, cfg.sync_tokens)
    slope = np.gradient(env_s)
    sync = np.outer(env_s, w.sync_basis[0]) + np.outer(slope, w.sync_basis[1])
    sync = sync + cfg.sync_noise * rng.standard_normal(sync.shape)
    text = np.zeros((cfg.text_tokens, cfg.text_dim))
    text[0] = w.text_embeddings[class_id]
    text = text + cfg.text_noise * rng.standard_normal(text.shape)

    f32 = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float32))
    cond = ConditionBundle(f32(video), f32(sync), f32(text), torch.tensor(False), torch.tensor(False))
    return LatentClip(latents.astype(np.float32), env.astype(np.float32), class_id), cond


def rms(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x)))


def mix_gain(target, interferer, snr_db: float) -> float:
    ri = rms(interferer)
    if ri <= 0:
        raise ZeroEnergyError("interferer has zero energy")
    return rms(target) / (ri * 10 ** (snr_db / 20))


def mix(target, interferer, snr_db: float):
    """``target + g * interferer`` with ``g`` setting the target-to-interferer RMS ratio to ``snr_db``."""
    t = np.asarray(target)
    i = np.asarray(interferer)
    if t.shape != i.shape:
        raise ValueError(f"mix: shape mismatch {t.shape} vs {i.shape}")
    if not (np.isfinite(t).all() and np.isfinite(i).all()):
        raise ValueError("mix: non-finite input")
    g = mix_gain(t, i, snr_db)
    return (t + np.asarray(g, dtype=t.dtype) * i).astype(t.dtype)


def _draw_pair(w: World, rng: np.random.Generator):
    K = w.config.num_classes
    k = int(rng.integers(K))
    j = int(rng.integers(K - 1))
    j = j + (j >= k)
    target, cond = make_clip(w, k, rng)
    while True:
        interferer, _ = make_clip(w, j, rng)
        try:
            mix_gain(target.latents, interferer.latents, 0.0)
            return target, cond, interferer
        except ZeroEnergyError:
            continue


def _collate(items, snrs) -> MixtureBatch:
    tgt = [it[0] for it in items]
    return MixtureBatch(
        mixture=torch.from_numpy(np.stack([it[3] for it in items])),
        target=torch.from_numpy(np.stack([c.latents for c in tgt])),
        envelope=torch.from_numpy(np.stack([c.envelope for c in tgt])),
        class_id=torch.tensor([c.class_id for c in tgt]),
        interferer_class=torch.tensor([it[2].class_id for it in items]),
        snr_db=torch.tensor(snrs, dtype=torch.float32),
        cond=ConditionBundle.stack([it[1] for it in items]),
    )


def sample_training_batch(world: WorldConfig | World, batch: int, rng: np.random.Generator,
                          snr_range: tuple[float, float] = (-15.0, 15.0)) -> MixtureBatch:
    """Fresh mixtures: random target class, different interferer class, uniform SNR."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    w = world if isinstance(world, World) else world_for(world)
    items, snrs = [], []
    for _ in range(batch):
        target, cond, interferer = _draw_pair(w, rng)
        snr = float(rng.uniform(*snr_range))
        items.append((target, cond, interferer, mix(target.latents, interferer.latents, snr)))
        snrs.append(snr)
    return _collate(items, snrs)


def sample_clean_batch(world: WorldConfig | World, batch: int, rng: np.random.Generator) -> CleanBatch:
    w = world if isinstance(world, World) else world_for(world)
    clips, conds = [], []
    for _ in range(batch):
        clip, cond = make_clip(w, int(rng.integers(w.config.num_classes)), rng)
        clips.append(clip)
        conds.append(cond)
    return CleanBatch(
        target=torch.from_numpy(np.stack([c.latents for c in clips])),
        envelope=torch.from_numpy(np.stack([c.envelope for c in clips])),
        class_id=torch.tensor([c.class_id for c in clips]),
        cond=ConditionBundle.stack(conds),
    )


def make_eval_set(world: WorldConfig, n_pairs: int) -> MixtureBatch:
    """Fixed evaluation pairs, all mixed at 0 dB. Pair i depends only on (seed, i)."""
    w = world_for(world)
    items = []
    for i in range(n_pairs):
        target, cond, interferer = _draw_pair(w, stream(world.seed, "eval-set", i))
        items.append((target, cond, interferer, mix(target.latents, interferer.latents, 0.0)))
    return _collate(items, [0.0] * n_pairs)


_EVAL_FIELDS = ("mixture", "target", "envelope", "class_id", "interferer_class", "snr_db")
_COND_FIELDS = ("video_tokens", "sync_tokens", "text_tokens", "drop_video", "drop_text")


def batch_tensors(b: MixtureBatch) -> dict[str, torch.Tensor]:
    out = {name: getattr(b, name).float() for name in _EVAL_FIELDS}
    out.update({f"cond.{name}": getattr(b.cond, name).float() for name in _COND_FIELDS})
    return out


def batch_from_tensors(t: dict[str, torch.Tensor]) -> MixtureBatch:
    cond = ConditionBundle(
        t["cond.video_tokens"], t["cond.sync_tokens"], t["cond.text_tokens"],
        t["cond.drop_video"].bool(), t["cond.drop_text"].bool(),
    )
    return MixtureBatch(
        t["mixture"], t["target"], t["envelope"], t["class_id"].long(),
        t["interferer_class"].long(), t["snr_db"], cond,
    )


def export_eval_set(world: WorldConfig, n_pairs: int, path: str | Path) -> MixtureBatch:
    batch = make_eval_set(world, n_pairs)
    binfmt.write(path, binfmt.DATASET_MAGIC, batch_tensors(batch),
                 {"kind": "eval-set", "world": world.to_dict(), "n_pairs": n_pairs})
    return batch


def import_eval_set(path: str | Path) -> tuple[MixtureBatch, WorldConfig]:
    tensors, meta = binfmt.read(path, binfmt.DATASET_MAGIC)
    return batch_from_tensors(tensors), WorldConfig(**meta["world"])
