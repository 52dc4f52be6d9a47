"""Metrics for separated or generated latents.

A small probe classifier, trained once per world on clean clips, supplies the
feature map (for Fréchet distance and alignment) and class posteriors (for
the inception-score analog and paired KL). SI-SNR and the envelope-lag
desync score need no probe.
"""
from __future__ import annotations

import dataclasses
import json
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import binfmt
from .numerics import stream
from .synthworld import WorldConfig, sample_clean_batch

SI_SNR_CAP_DB = 60.0
POSTERIOR_FLOOR = 1e-8
COV_EPS = 1e-6
REPORT_VERSION = 1


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------- pure metrics

def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two feature sets."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise MetricError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise MetricError("need at least 2 samples per set")
    d = a.shape[1]
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.cov(a, rowvar=False).reshape(d, d) + COV_EPS * np.eye(d)
    cov_b = np.cov(b, rowvar=False).reshape(d, d) + COV_EPS * np.eye(d)
    # Tr((A B)^{1/2}) = Tr((A^{1/2} B A^{1/2})^{1/2}); both factors symmetric PSD.
    ea, va = np.linalg.eigh(cov_a)
    sqrt_a = (va * np.sqrt(np.clip(ea, 0, None))) @ va.T
    inner = sqrt_a @ cov_b @ sqrt_a
    ev = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(ev, 0, None)).sum()
    diff = mu_a - mu_b
    return float(max(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt, 0.0))


def inception_from_posteriors(p: np.ndarray) -> float:
    p = np.clip(np.asarray(p, dtype=np.float64), POSTERIOR_FLOOR, None)
    p = p / p.sum(1, keepdims=True)
    marginal = p.mean(0, keepdims=True)
    kl = (p * (np.log(p) - np.log(marginal))).sum(1)
    return float(np.exp(kl.mean()))


def kl_from_posteriors(p_ref: np.ndarray, p_gen: np.ndarray) -> float:
    """Mean KL(ref_i || gen_i) over pairs, with posteriors floored before renormalising."""
    p_ref = np.asarray(p_ref, dtype=np.float64)
    p_gen = np.asarray(p_gen, dtype=np.float64)
    if p_ref.shape != p_gen.shape:
        raise MetricError(f"paired sets differ in shape: {p_ref.shape} vs {p_gen.shape}")
    p = np.clip(p_ref, POSTERIOR_FLOOR, None)
    q = np.clip(p_gen, POSTERIOR_FLOOR, None)
    p, q = p / p.sum(1, keepdims=True), q / q.sum(1, keepdims=True)
    return float((p * (np.log(p) - np.log(q))).sum(1).mean())


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise MetricError("cosine of a zero-norm feature")
    return float(a @ b / (na * nb))


def si_snr(estimate, target) -> float:
    e = np.asarray(estimate, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    tt = t @ t
    if tt == 0:
        raise MetricError("si_snr: zero-energy target")
    s = (e @ t / tt) * t
    num, den = s @ s, (e - s) @ (e - s)
    if den == 0:
        return SI_SNR_CAP_DB
    if num == 0:
        return -SI_SNR_CAP_DB
    return float(min(10 * math.log10(num / den), SI_SNR_CAP_DB))


def energy_envelope(clip) -> np.ndarray:
    c = np.asarray(clip, dtype=np.float64)
    return (c * c).sum(-1)


def desync_analog(clip, true_envelope) -> float:
    """Absolute lag (frames) maximising circular cross-correlation of energy and true envelope."""
    e = energy_envelope(clip)
    g = np.asarray(true_envelope, dtype=np.float64)
    if e.shape != g.shape:
        raise MetricError(f"envelope lengths differ: {e.shape} vs {g.shape}")
    e = e - e.mean()
    g = g - g.mean()
    if not e.any() or not g.any():
        raise MetricError("desync_analog: constant envelope")
    T = len(g)
    lags = np.arange(-(T // 2), T // 2 + 1)
    # Ties go to the smallest |lag|.
    lags = lags[np.argsort(np.abs(lags), kind="stable")]
    scores = np.array([e @ np.roll(g, k) for k in lags])
    return float(abs(lags[int(np.argmax(scores))]))


# ---------------------------------------------------------------- probe

def clip_descriptor(clips: torch.Tensor) -> torch.Tensor:
    """Phase-invariant summary of [N, T, C] latents.

    Upper triangle of the channel second-moment matrix plus the
    channel-averaged magnitude spectrum. Magnitudes rather than powers keep
    near-silent high-frequency bins from dominating after standardisation.
    """
    x = clips.to(torch.float64)
    N, T, C = x.shape
    m2 = torch.einsum("ntc,ntd->ncd", x, x) / T
    iu = torch.triu_indices(C, C)
    mag = torch.fft.rfft(x, dim=1).abs().mean(-1) / math.sqrt(T)
    return torch.cat([m2[:, iu[0], iu[1]], mag], dim=1)


class ProbeModel(nn.Module):
    """One hidden layer (tanh, width 32) classifier over clip descriptors."""

    def __init__(self, in_dim: int, num_classes: int, width: int = 32):
        super().__init__()
        self.register_buffer("mean", torch.zeros(in_dim, dtype=torch.float64))
        self.register_buffer("std", torch.ones(in_dim, dtype=torch.float64))
        self.register_buffer("prototypes", torch.zeros(num_classes, width, dtype=torch.float64))
        self.hidden = nn.Linear(in_dim, width).double()
        self.out = nn.Linear(width, num_classes).double()
        self.accuracy = float("nan")

    def features(self, clips: torch.Tensor) -> torch.Tensor:
        z = (clip_descriptor(clips) - self.mean) / self.std
        return torch.tanh(self.hidden(z))

    def logits(self, clips: torch.Tensor) -> torch.Tensor:
        return self.out(self.features(clips))

    @torch.no_grad()
    def embed(self, clips) -> np.ndarray:
        return self.features(torch.as_tensor(clips)).numpy()

    @torch.no_grad()
    def posteriors(self, clips) -> np.ndarray:
        return torch.softmax(self.logits(torch.as_tensor(clips)), -1).numpy()

    @torch.no_grad()
    def predict(self, clips) -> np.ndarray:
        return self.logits(torch.as_tensor(clips)).argmax(-1).numpy()


def train_probe(world: WorldConfig, n_train: int = 2000, n_test: int = 500, iters: int = 600) -> ProbeModel:
    train = sample_clean_batch(world, n_train, stream(world.seed, "probe-train"))
    test = sample_clean_batch(world, n_test, stream(world.seed, "probe-test"))
    desc = clip_descriptor(train.target)
    with torch.random.fork_rng():
        torch.manual_seed(world.seed)
        probe = ProbeModel(desc.shape[1], world.num_classes)
    probe.mean.copy_(desc.mean(0))
    probe.std.copy_(desc.std(0) + 1e-8)
    opt = torch.optim.Adam(probe.parameters(), lr=1e-2)
    y = train.class_id
    for _ in range(iters):
        opt.zero_grad()
        loss = nn.functional.cross_entropy(probe.logits(train.target), y)
        loss.backward()
        opt.step()
    with torch.no_grad():
        feats = probe.features(train.target)
        for k in range(world.num_classes):
            probe.prototypes[k] = feats[y == k].mean(0)
    probe.accuracy = float((probe.predict(test.target) == test.class_id.numpy()).mean())
    return probe


def save_probe(path: str | Path, probe: ProbeModel, world: WorldConfig) -> None:
    state = OrderedDict((k, v) for k, v in probe.state_dict().items())
    meta = {"kind": "probe", "world": world.to_dict(), "in_dim": probe.hidden.in_features,
            "num_classes": probe.out.out_features, "width": probe.hidden.out_features,
            "accuracy": probe.accuracy}
    binfmt.write(path, binfmt.CHECKPOINT_MAGIC, state, meta)


def load_probe(path: str | Path) -> tuple[ProbeModel, WorldConfig]:
    tensors, meta = binfmt.read(path, binfmt.CHECKPOINT_MAGIC)
    if meta.get("kind") != "probe":
        raise binfmt.FormatError(f"{path} is not a probe checkpoint")
    probe = ProbeModel(meta["in_dim"], meta["num_classes"], meta["width"])
    probe.load_state_dict({k: v.double() for k, v in tensors.items()})
    probe.accuracy = meta["accuracy"]
    return probe, WorldConfig(**meta["world"])


# ---------------------------------------------------------------- probe-based metrics

def inception_analog(probe: ProbeModel, clips) -> float:
    return inception_from_posteriors(probe.posteriors(clips))


def kl_paired(probe: ProbeModel, generated, reference) -> float:
    if len(generated) != len(reference):
        raise MetricError(f"paired sets differ in size: {len(generated)} vs {len(reference)}")
    return kl_from_posteriors(probe.posteriors(reference), probe.posteriors(generated))


def alignment_scores(probe: ProbeModel, clip, query_class: int, target) -> tuple[float, float]:
    """(cosine to the query class prototype, cosine to the ground-truth target) in probe feature space."""
    f = probe.embed(torch.as_tensor(clip)[None])[0]
    ft = probe.embed(torch.as_tensor(target)[None])[0]
    return cosine(f, probe.prototypes[query_class].numpy()), cosine(f, ft)


# ---------------------------------------------------------------- reports

@dataclass
class MetricReport:
    fd: float
    is_analog: float
    align_text: float
    align_audio: float
    desync: float
    si_snr_db: float
    kl_paired: float
    n: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def metric_report(probe: ProbeModel, outputs, targets, envelopes, query_classes, clean_reference=None) -> MetricReport:
    """Metrics of ``outputs`` against their paired ground-truth ``targets``.

    FD compares against ``clean_reference`` (defaults to the targets).
    """
    out = torch.as_tensor(outputs).to(torch.float64)
    tgt = torch.as_tensor(targets).to(torch.float64)
    if len(out) < 2:
        raise MetricError("need at least 2 items")
    ref = tgt if clean_reference is None else torch.as_tensor(clean_reference).to(torch.float64)
    f_out, f_tgt = probe.embed(out), probe.embed(tgt)
    protos = probe.prototypes.numpy()
    classes = np.asarray(query_classes)
    align_text = np.mean([_safe_cos(f_out[i], protos[classes[i]]) for i in range(len(out))])
    align_audio = np.mean([_safe_cos(f_out[i], f_tgt[i]) for i in range(len(out))])
    env = np.asarray(envelopes)
    desync = np.mean([_safe_desync(out[i].numpy(), env[i]) for i in range(len(out))])
    snr = np.mean([si_snr(out[i].numpy(), tgt[i].numpy()) for i in range(len(out))])
    return MetricReport(
        fd=frechet_distance(f_out, probe.embed(ref)),
        is_analog=max(inception_analog(probe, out), 1.0),
        align_text=float(align_text),
        align_audio=float(align_audio),
        desync=float(desync),
        si_snr_db=float(snr),
        kl_paired=kl_paired(probe, out, tgt),
        n=len(out),
    )


def _safe_cos(a, b) -> float:
    try:
        return cosine(a, b)
    except MetricError:
        return 0.0


def _safe_desync(clip, env) -> float:
    try:
        return desync_analog(clip, env)
    except MetricError:
        return float(len(env) // 2)


def write_report(path: str | Path, report: MetricReport, **extra) -> dict:
    doc = {"v": REPORT_VERSION, **report.to_dict(), **extra}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc
