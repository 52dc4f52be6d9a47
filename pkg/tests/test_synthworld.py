import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cfmsep import binfmt
from cfmsep.evalsuite import clip_descriptor
from cfmsep.numerics import stream
from cfmsep.synthworld import (WorldConfig, ZeroEnergyError, export_eval_set, import_eval_set, make_clip,
                               make_eval_set, mix, mix_gain, rms, sample_clean_batch, sample_training_batch,
                               world_for)


def test_make_clip_deterministic_without_noise(world):
    quiet = world.with_noise(0.0)
    a_clip, a_cond = make_clip(quiet, 3, stream(0, "clip", 7))
    b_clip, b_cond = make_clip(quiet, 3, stream(0, "clip", 7))
    assert np.array_equal(a_clip.latents, b_clip.latents)
    assert np.array_equal(a_clip.envelope, b_clip.envelope)
    for name in ("video_tokens", "sync_tokens", "text_tokens"):
        assert torch.equal(getattr(a_cond, name), getattr(b_cond, name))


def test_make_clip_invariants(world):
    for i in range(50):
        clip, cond = make_clip(world, i % world.num_classes, stream(0, "inv", i))
        assert clip.latents.shape == (world.audio_frames, world.latent_channels)
        assert clip.envelope.max() > 0.5 and clip.envelope.min() >= 0 and clip.envelope.max() <= 1
        assert np.isfinite(clip.latents).all()
        assert cond.video_tokens.shape == (world.video_tokens, world.video_dim)
        assert cond.sync_tokens.shape == (world.sync_tokens, world.sync_dim)
        assert cond.text_tokens.shape == (world.text_tokens, world.text_dim)


def test_make_clip_rejects_bad_class(world):
    with pytest.raises(ValueError):
        make_clip(world, world.num_classes, stream(0, "x"))


def test_energy_tracks_envelope(world):
    quiet = world.with_noise(0.0)
    corrs = []
    for i in range(100):
        clip, _ = make_clip(quiet, i % quiet.num_classes, stream(1, "energy", i))
        energy = (clip.latents ** 2).mean(1)
        corrs.append(np.corrcoef(clip.envelope, energy)[0, 1])
    assert min(corrs) > 0.8


def test_text_embeddings_nearly_orthogonal(world):
    e = world_for(world).text_embeddings
    cos = e @ e.T
    off = cos[~np.eye(len(e), dtype=bool)]
    assert off.mean() < 0.5


def test_world_config_validation():
    with pytest.raises(ValueError):
        WorldConfig(num_classes=1)
    with pytest.raises(ValueError):
        WorldConfig(latent_channels=0)


# ---- mixing

def test_mix_equal_rms_zero_db_is_sum():
    a = np.array([[1.0, -1.0], [1.0, -1.0]])
    b = np.array([[-1.0, 1.0], [1.0, 1.0]])
    assert mix_gain(a, b, 0.0) == 1.0
    assert np.array_equal(mix(a, b, 0.0), a + b)


def test_mix_high_snr_limit():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((8, 4)), rng.standard_normal((8, 4))
    out = mix(a, b, 200.0)
    assert np.abs(out - a).max() < 1e-6 * rms(a)


def test_mix_gain_half_at_six_db():
    a = np.ones((4, 2))
    b = -np.ones((4, 2))
    assert mix_gain(a, b, 20 * np.log10(2)) == pytest.approx(0.5, abs=1e-12)


def test_mix_zero_interferer():
    with pytest.raises(ZeroEnergyError):
        mix(np.ones((2, 2)), np.zeros((2, 2)), 0.0)


@given(snr=st.floats(-30, 30), seed=st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_mix_linearity(snr, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    g = mix_gain(a, b, snr)
    assert np.allclose(mix(a, b, snr) - a, g * b, rtol=1e-12, atol=1e-12)
    assert 20 * np.log10(rms(a) / rms(g * b)) == pytest.approx(snr, abs=1e-9)


# ---- batches

def test_training_snr_distribution(world):
    batch = sample_training_batch(world.with_noise(0.0), 10_000, stream(0, "snr-check"))
    snr = batch.snr_db.numpy()
    assert snr.min() >= -15 and snr.max() <= 15
    assert -0.5 <= snr.mean() <= 0.5
    assert (batch.interferer_class != batch.class_id).all()


def test_training_batch_deterministic(world):
    a = sample_training_batch(world, 8, stream(0, "finetune-step", 12))
    b = sample_training_batch(world, 8, stream(0, "finetune-step", 12))
    assert torch.equal(a.mixture, b.mixture) and torch.equal(a.snr_db, b.snr_db)
    assert torch.equal(a.cond.sync_tokens, b.cond.sync_tokens)


def test_training_batch_carries_target_conditions(world):
    b = sample_training_batch(world.with_noise(0.0), 16, stream(0, "cond"))
    text = world_for(world).text_embeddings
    for i in range(16):
        assert np.allclose(b.cond.text_tokens[i, 0].numpy(), text[b.class_id[i]], atol=1e-6)


def test_class_separability_linear_probe(world):
    """Ridge-regression linear classifier on clip descriptors, 500 train / 500 test."""
    tr = sample_clean_batch(world, 500, stream(0, "sep-train"))
    te = sample_clean_batch(world, 500, stream(0, "sep-test"))
    xtr, xte = clip_descriptor(tr.target).numpy(), clip_descriptor(te.target).numpy()
    mu, sd = xtr.mean(0), xtr.std(0) + 1e-8
    xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    xtr, xte = np.c_[xtr, np.ones(len(xtr))], np.c_[xte, np.ones(len(xte))]
    y = np.eye(world.num_classes)[tr.class_id.numpy()]
    w = np.linalg.solve(xtr.T @ xtr + 1e-2 * np.eye(xtr.shape[1]), xtr.T @ y)
    acc = ((xte @ w).argmax(1) == te.class_id.numpy()).mean()
    assert acc >= 0.95


def test_envelope_recoverable_from_sync_tokens(world):
    tr = sample_clean_batch(world, 800, stream(0, "env-train"))
    te = sample_clean_batch(world, 200, stream(0, "env-test"))
    flat = lambda b: np.c_[b.cond.sync_tokens.reshape(len(b.target), -1).numpy(), np.ones(len(b.target))]
    w, *_ = np.linalg.lstsq(flat(tr), tr.envelope.numpy(), rcond=None)
    pred = flat(te) @ w
    corr = np.corrcoef(pred.ravel(), te.envelope.numpy().ravel())[0, 1]
    assert corr > 0.9


# ---- eval-set file

def test_eval_set_round_trip(tmp_path, world):
    path = tmp_path / "eval.bin"
    batch = export_eval_set(world, 16, path)
    loaded, cfg = import_eval_set(path)
    assert cfg == world
    assert torch.equal(loaded.mixture, batch.mixture)
    assert torch.equal(loaded.target, batch.target)
    assert torch.equal(loaded.cond.sync_tokens, batch.cond.sync_tokens)
    assert torch.equal(loaded.class_id, batch.class_id)
    assert (loaded.snr_db == 0).all()


def test_eval_set_mixtures_at_zero_db(world):
    path_batch = make_eval_set(world, 32)
    for i in range(32):
        t = path_batch.target[i].numpy()
        interf = path_batch.mixture[i].numpy() - t
        assert 20 * np.log10(rms(t) / rms(interf)) == pytest.approx(0.0, abs=1e-4)


def test_eval_set_file_size(tmp_path, world):
    path = tmp_path / "eval.bin"
    export_eval_set(world, 8, path)
    blob = path.read_bytes()
    tensors, _ = binfmt.decode(binfmt.DATASET_MAGIC, blob)
    floats = sum(t.numel() for t in tensors.values())
    assert len(blob) == binfmt.header_size(blob) + 4 * floats


def test_eval_set_format_errors(tmp_path, world):
    path = tmp_path / "eval.bin"
    export_eval_set(world, 4, path)
    blob = path.read_bytes()
    with pytest.raises(binfmt.FormatError, match="magic"):
        binfmt.decode(binfmt.DATASET_MAGIC, b"XXXXXXXX" + blob[8:])
    with pytest.raises(binfmt.FormatError, match="version"):
        binfmt.decode(binfmt.DATASET_MAGIC, blob[:8] + b"\x02\x00" + blob[10:])
    with pytest.raises(binfmt.FormatError, match="truncated"):
        binfmt.decode(binfmt.DATASET_MAGIC, blob[:-4])
    with pytest.raises(binfmt.FormatError, match="magic"):
        binfmt.decode(binfmt.CHECKPOINT_MAGIC, blob)


def test_eval_pairs_independent_of_set_size(world):
    small = make_eval_set(world, 4)
    large = make_eval_set(world, 8)
    assert torch.equal(small.mixture, large.mixture[:4])
