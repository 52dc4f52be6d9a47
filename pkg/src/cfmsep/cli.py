"""Command-line entry point: ``cfmsep <command> ...``.

Exit codes: 0 ok, 2 training diverged, 3 config error, 4 missing --init,
5 metric-suite failure, 6 grad-check failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import binfmt
from .evalsuite import MetricError, load_probe, metric_report, save_probe, train_probe, write_report
from .flow import SamplerConfig
from .gradcheck import model_grad_check
from .mmdit import TRAIN_CONFIGS, ModelConfig, load_checkpoint
from .numerics import stream
from .synthworld import WorldConfig, batch_tensors, export_eval_set, import_eval_set, sample_clean_batch
from .trainer import (MIXTURE_SUBS, QUERIES, ConfigError, OptimConfig, RunConfig, TrainingDiverged, finetune,
                      generate_v2a, pretrain, separate)

EXIT_DIVERGED, EXIT_CONFIG, EXIT_MISSING_INIT, EXIT_METRICS, EXIT_GRADCHECK = 2, 3, 4, 5, 6

log = logging.getLogger("cfmsep")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class RunSection:
    train_config: str = "pretrain_frozen"
    pretrain_steps: int = 4000
    finetune_steps: int = 2000
    batch: int = 32
    eval_every: int = 1000


@dataclass(frozen=True)
class DataSection:
    pairs: int = 256
    probe_clips: int = 2000


@dataclass(frozen=True)
class GradCheckSection:
    seeds: int = 3
    entries_per_param: int = 4
    tol: float = 1e-4
    step: float = 1e-5


_MODEL_KEYS = ("hidden", "heads", "n_joint", "n_audio", "time_dim", "mlp_ratio")


@dataclass(frozen=True)
class CliConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    run: RunSection = field(default_factory=RunSection)
    optim: OptimConfig = field(default_factory=OptimConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataSection = field(default_factory=DataSection)
    grad_check: GradCheckSection = field(default_factory=GradCheckSection)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["world"].pop("seed")
        d["sampler"].pop("seed")
        d["model"] = {k: d["model"][k] for k in _MODEL_KEYS}
        return d

    def run_config(self, phase: str, init: str | None = None, steps: int | None = None) -> RunConfig:
        default_steps = self.run.pretrain_steps if phase == "pretrain" else self.run.finetune_steps
        return RunConfig(
            phase=phase, train_config=self.run.train_config,
            steps=default_steps if steps is None else steps,
            batch=self.run.batch, eval_every=self.run.eval_every, seed=self.seed,
            world=self.world, model=self.model.for_world(self.world), sampler=self.sampler,
            optim=self.optim, init_checkpoint=init,
        )


def _section(cls, values: dict, name: str, **fixed):
    if not isinstance(values, dict):
        raise CliError(f"config section {name!r} must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)} - set(fixed)
    if cls is ModelConfig:
        allowed = set(_MODEL_KEYS)
    unknown = set(values) - allowed
    if unknown:
        raise CliError(f"unknown key(s) in {name!r}: {sorted(unknown)}")
    try:
        return cls(**values, **fixed)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid {name!r} section: {e}") from e


def load_config(path: str | None, seed_override: int | None = None, overrides: dict | None = None) -> CliConfig:
    """Resolve file values, then CFMSEP_SEED, then command-line flags (highest)."""
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read config {path}: {e}") from e
        if not isinstance(raw, dict):
            raise CliError("config file must contain a JSON object")
        if "command" in raw and "config" in raw:
            # A resolved.json from an earlier run: replay its fully resolved config.
            raw = raw["config"]
    sections = {f.name for f in dataclasses.fields(CliConfig)}
    unknown = set(raw) - sections
    if unknown:
        raise CliError(f"unknown top-level key(s): {sorted(unknown)}")
    for section, values in (overrides or {}).items():
        raw.setdefault(section, {}).update(values)
    seed = raw.get("seed", 0)
    if os.environ.get("CFMSEP_SEED"):
        try:
            seed = int(os.environ["CFMSEP_SEED"])
        except ValueError as e:
            raise CliError("CFMSEP_SEED must be an integer") from e
    if seed_override is not None:
        seed = seed_override
    if not isinstance(seed, int):
        raise CliError("seed must be an integer")
    world = _section(WorldConfig, raw.get("world", {}), "world", seed=seed)
    return CliConfig(
        seed=seed,
        world=world,
        model=_section(ModelConfig, raw.get("model", {}), "model").for_world(world),
        run=_section(RunSection, raw.get("run", {}), "run"),
        optim=_section(OptimConfig, raw.get("optim", {}), "optim"),
        sampler=_section(SamplerConfig, raw.get("sampler", {}), "sampler", seed=seed),
        data=_section(DataSection, raw.get("data", {}), "data"),
        grad_check=_section(GradCheckSection, raw.get("grad_check", {}), "grad_check"),
    )


def write_resolved(out_dir: Path, command: str, config: dict | None, args: dict) -> None:
    doc = {"command": command, "args": args}
    if config is not None:
        doc["config"] = config
    (out_dir / "resolved.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _outdir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------- commands

def cmd_gen_data(a) -> int:
    overrides = {"data": {"pairs": a.pairs}} if a.pairs is not None else {}
    cfg = load_config(a.config, a.seed, overrides)
    out = _outdir(a.out)
    write_resolved(out, "gen-data", cfg.to_dict(), {})
    export_eval_set(cfg.world, cfg.data.pairs, out / "eval_set.bin")
    clips = sample_clean_batch(cfg.world, cfg.data.probe_clips, stream(cfg.world.seed, "probe-train"))
    binfmt.write(out / "probe_clips.bin", binfmt.DATASET_MAGIC,
                 {"target": clips.target, "envelope": clips.envelope, "class_id": clips.class_id.float()},
                 {"kind": "probe-clips", "world": cfg.world.to_dict(), "n": cfg.data.probe_clips})
    probe = train_probe(cfg.world, n_train=cfg.data.probe_clips)
    save_probe(out / "probe.ckpt", probe, cfg.world)
    print(f"eval pairs: {cfg.data.pairs} (snr 0 dB) -> {out / 'eval_set.bin'}")
    print(f"probe clips: {cfg.data.probe_clips}; probe held-out accuracy {probe.accuracy:.3f}")
    return 0


def cmd_pretrain(a) -> int:
    cfg = load_config(a.config, a.seed)
    out = _outdir(a.out)
    write_resolved(out, "pretrain", cfg.to_dict(), {"steps": a.steps})
    result = pretrain(cfg.run_config("pretrain", steps=a.steps), out)
    print(f"checkpoint {result.checkpoint} sha256 {result.checkpoint_hash}")
    return 0


def cmd_finetune(a) -> int:
    overrides = {"run": {"train_config": a.train_config}} if a.train_config else {}
    cfg = load_config(a.config, a.seed, overrides)
    if cfg.run.train_config not in TRAIN_CONFIGS:
        raise CliError(f"--train-config must be one of {TRAIN_CONFIGS}")
    if cfg.run.train_config != "scratch" and not a.init:
        raise CliError(f"train config {cfg.run.train_config!r} requires --init CKPT", EXIT_MISSING_INIT)
    out = _outdir(a.out)
    init = str(Path(a.init).resolve()) if a.init else None
    write_resolved(out, "finetune", cfg.to_dict(), {"init": init, "steps": a.steps})
    result = finetune(cfg.run_config("finetune", init=init, steps=a.steps), out)
    print(f"checkpoint {result.checkpoint} sha256 {result.checkpoint_hash}")
    return 0


def _sampler(a) -> SamplerConfig:
    base = SamplerConfig()
    try:
        return SamplerConfig(steps=a.steps if a.steps is not None else base.steps,
                             guidance_scale=a.cfg if a.cfg is not None else base.guidance_scale,
                             seed=a.seed if a.seed is not None else int(os.environ.get("CFMSEP_SEED", 0)))
    except ValueError as e:
        raise CliError(str(e)) from e


def _load_model(path: str):
    try:
        model, meta = load_checkpoint(path)
    except (OSError, binfmt.FormatError) as e:
        raise CliError(f"cannot load checkpoint {path}: {e}") from e
    if model.cond_channels != 2:
        raise CliError("this command needs a 2-channel (separation) checkpoint")
    model.eval()
    return model, meta


def _run_sampling(a, mode: str):
    model, meta = _load_model(a.ckpt)
    try:
        ev, world = import_eval_set(a.eval_set)
    except (OSError, binfmt.FormatError) as e:
        raise CliError(f"cannot load eval set {a.eval_set}: {e}") from e
    if ev.target.shape[1:] != (model.cfg.audio_frames, model.cfg.latent_channels):
        raise CliError("eval set shape does not match the checkpoint")
    sampler = _sampler(a)
    if mode == "separation":
        out = separate(model, ev.mixture, ev.cond, sampler, query=a.query)
    else:
        out = generate_v2a(model, ev.cond, sampler, mixture_sub=a.mixture_sub, query=a.query)
    return out, ev, world, sampler


def _sampling_args(a, sampler: SamplerConfig, mode: str) -> dict:
    args = {"ckpt": str(Path(a.ckpt).resolve()), "eval_set": str(Path(a.eval_set).resolve()),
            "query": a.query, "steps": sampler.steps, "cfg": sampler.guidance_scale, "seed": sampler.seed,
            "mode": mode}
    if mode == "v2a":
        args["mixture_sub"] = a.mixture_sub
    return args


def cmd_separate(a, mode: str = "separation") -> int:
    if mode == "separation" and a.mixture_sub is not None:
        raise CliError("--mixture-sub is only valid with the generate command")
    if mode == "v2a" and a.mixture_sub is None:
        a.mixture_sub = "white_noise"
    out_dir = _outdir(a.out)
    outputs, ev, world, sampler = _run_sampling(a, mode)
    args = _sampling_args(a, sampler, mode)
    write_resolved(out_dir, "separate" if mode == "separation" else "generate", None, args)
    drop_video = a.query == "text"
    binfmt.write(out_dir / "outputs.bin", binfmt.DATASET_MAGIC, {"estimate": outputs},
                 {"kind": "outputs", "world": world.to_dict(), "n": len(outputs)})
    manifest = {**args, "n": len(outputs), "drop_video": [drop_video] * len(outputs),
                "outputs": "outputs.bin", "outputs_sha256": _sha256(out_dir / "outputs.bin")}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(outputs)} items to {out_dir / 'outputs.bin'}")
    return 0


def cmd_eval(a) -> int:
    if a.mode == "separation" and a.mixture_sub is not None:
        raise CliError("--mixture-sub is only valid with --mode v2a")
    if a.mode == "v2a" and a.mixture_sub is None:
        a.mixture_sub = "white_noise"
    report_path = Path(a.out)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    outputs, ev, world, sampler = _run_sampling(a, a.mode)
    if a.probe:
        probe, probe_world = load_probe(a.probe)
        if probe_world != world:
            raise CliError("probe was trained on a different world config")
    else:
        probe = train_probe(world)
    if not probe.accuracy >= 0.95:
        raise CliError(f"probe accuracy {probe.accuracy:.3f} < 0.95; evaluation void", EXIT_METRICS)
    try:
        report = metric_report(probe, outputs, ev.target, ev.envelope, ev.class_id)
        mixture = metric_report(probe, ev.mixture, ev.target, ev.envelope, ev.class_id)
    except MetricError as e:
        raise CliError(f"metric suite failed: {e}", EXIT_METRICS) from e
    args = {**_sampling_args(a, sampler, a.mode), "probe": str(Path(a.probe).resolve()) if a.probe else None}
    write_report(report_path, report, mode=a.mode, mixture=mixture.to_dict(), sampler=dataclasses.asdict(sampler),
                 probe_accuracy=probe.accuracy)
    (report_path.parent / (report_path.stem + ".resolved.json")).write_text(
        json.dumps({"command": "eval", "args": args}, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"output": report.to_dict(), "mixture": mixture.to_dict()}, indent=2))
    return 0


def cmd_grad_check(a) -> int:
    cfg = load_config(a.config, a.seed)
    gc = cfg.grad_check
    worst = 0.0
    for i in range(gc.seeds):
        report = model_grad_check(cfg.world, cfg.model, seed=cfg.seed + i, h=gc.step, tol=gc.tol,
                                  entries_per_param=gc.entries_per_param)
        name, err = max(report.max_rel_err.items(), key=lambda kv: kv[1])
        print(f"seed {cfg.seed + i}: {len(report.max_rel_err)} tensors, max rel err {err:.3e} ({name}) "
              f"{'PASS' if report.passed else 'FAIL'}")
        worst = max(worst, err)
    if worst >= gc.tol:
        print(f"grad-check FAILED: {worst:.3e} >= {gc.tol}")
        return EXIT_GRADCHECK
    print(f"grad-check passed: max rel err {worst:.3e} < {gc.tol}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfmsep", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON config file or a previous resolved.json (every field has a default)")
        sp.add_argument("--seed", type=int, help="overrides config seed and CFMSEP_SEED")

    g = sub.add_parser("gen-data", help="write the eval set, probe-training clips and probe")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--pairs", type=int)
    g.set_defaults(fn=cmd_gen_data)

    g = sub.add_parser("pretrain", help="train the 1-channel generator")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--steps", type=int)
    g.set_defaults(fn=cmd_pretrain)

    g = sub.add_parser("finetune", help="fine-tune for separation")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--init", help="pretrained checkpoint (required for pretrain_* configs)")
    g.add_argument("--train-config", help=f"one of {', '.join(TRAIN_CONFIGS)}")
    g.add_argument("--steps", type=int)
    g.set_defaults(fn=cmd_finetune)

    for name, fn in (("separate", cmd_separate), ("generate", lambda a: cmd_separate(a, "v2a"))):
        g = sub.add_parser(name, help="separate mixtures" if name == "separate" else "V2A generation from a noise mixture")
        common(g, config=False)
        g.add_argument("--ckpt", required=True)
        g.add_argument("--eval-set", required=True)
        g.add_argument("--out", required=True)
        g.add_argument("--query", choices=QUERIES, default="text+video")
        g.add_argument("--mixture-sub", choices=MIXTURE_SUBS)
        g.add_argument("--steps", type=int)
        g.add_argument("--cfg", type=float)
        g.set_defaults(fn=fn)

    g = sub.add_parser("eval", help="metric report (with the Mixture baseline row)")
    common(g, config=False)
    g.add_argument("--ckpt", required=True)
    g.add_argument("--eval-set", required=True)
    g.add_argument("--mode", choices=("separation", "v2a"), default="separation")
    g.add_argument("--out", required=True, help="report JSON path")
    g.add_argument("--probe")
    g.add_argument("--query", choices=QUERIES, default="text+video")
    g.add_argument("--mixture-sub", choices=MIXTURE_SUBS)
    g.add_argument("--steps", type=int)
    g.add_argument("--cfg", type=float)
    g.set_defaults(fn=cmd_eval)

    g = sub.add_parser("grad-check", help="finite-difference check of the full model in float64")
    common(g)
    g.set_defaults(fn=cmd_grad_check)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else 0
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        return a.fn(a)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
