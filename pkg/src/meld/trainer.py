"""Optimization loop: warmup/hold/decay schedule, TTS-then-joint curriculum,
global-norm clipping, Adam, CSV logging and checkpoints.

All randomness of step ``s`` (batch order, mode draw, SpecAugment, dropout,
latent sampling) is derived from ``(seed, s)``, so a resumed run replays the
uninterrupted one exactly.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import numerics as nx
from .codebook import Codebook
from .corpus import SpecAugmentConfig, make_batches
from .data import assemble
from .errors import CheckpointError, ConfigError, NonFiniteLossError
from .model import MeldModel, load_checkpoint, save_checkpoint
from .objectives import FIELDS, stt_loss, tts_loss

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "mode"] + FIELDS + ["lr", "grad_norm", "seconds"]

# full-scale reference schedule; the desk defaults below are a short scaled-down version
FULL_SCALE_SCHEDULE = dict(warmup_steps=1000, peak_lr=5e-4, hold_steps=100_000, decay_steps=100_000, grad_clip=10.0)


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    warmup_steps: int = 200
    peak_lr: float = 2e-3
    hold_steps: int = 1000
    decay_steps: int = 800
    grad_clip: float = 10.0
    mode: str = "joint"
    tts_pretrain_steps: int = 600
    seed: int = 0
    checkpoint_every: int = 500
    max_frames_per_batch: int = 1200
    slow_weight: float = 0.2
    kl_weight: float = 1.0
    tts_gmel_dropout: bool = True
    specaugment: str = "joint"  # joint | full | none
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        if self.warmup_steps + self.hold_steps + self.decay_steps != self.total_steps:
            raise ConfigError(
                "train.warmup_steps + train.hold_steps + train.decay_steps must equal train.total_steps"
            )
        if self.mode not in ("tts", "stt", "joint"):
            raise ConfigError(f"train.mode must be tts, stt or joint, got {self.mode!r}")
        if self.specaugment not in ("joint", "full", "none"):
            raise ConfigError("train.specaugment must be joint, full or none")
        if min(self.total_steps, self.checkpoint_every, self.max_frames_per_batch) < 1:
            raise ConfigError("train.total_steps, checkpoint_every and max_frames_per_batch must be >= 1")
        if self.peak_lr < 0 or self.grad_clip <= 0:
            raise ConfigError("train.peak_lr must be >= 0 and train.grad_clip > 0")
        return self

    def specaug_config(self) -> SpecAugmentConfig | None:
        if self.specaugment == "none":
            return None
        return SpecAugmentConfig.joint_preset() if self.specaugment == "joint" else SpecAugmentConfig()

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr``, constant hold, then linear decay to 0."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if step < cfg.warmup_steps + cfg.hold_steps:
        return cfg.peak_lr
    if cfg.decay_steps == 0:
        return 0.0 if step >= cfg.total_steps else cfg.peak_lr
    return cfg.peak_lr * max(0.0, (cfg.total_steps - step) / cfg.decay_steps)


@dataclass
class TrainResult:
    rows: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    adam: nx.AdamState | None = None
    final_step: int = 0
    clip_violations: int = 0


def step_mode(step: int, plan_mode: str, cfg: TrainConfig) -> str:
    if cfg.mode == "joint" and step < cfg.tts_pretrain_steps:
        return "tts"
    return plan_mode


def _plans_for(step: int, lengths, cfg: TrainConfig):
    mix = cfg.mode
    first = make_batches(lengths, cfg.max_frames_per_batch, mix, seed=cfg.seed)
    epoch, idx = divmod(step, len(first))
    plans = make_batches(lengths, cfg.max_frames_per_batch, mix, seed=hash_seed(cfg.seed, epoch))
    return plans[idx], epoch


def hash_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def train(
    model: MeldModel,
    cb: Codebook,
    examples,
    cfg: TrainConfig,
    run_dir=None,
    adam: nx.AdamState | None = None,
    start_step: int = 0,
    meta: dict | None = None,
) -> TrainResult:
    cfg.validate()
    if cb.k != model.vocab.k_latent or cb.dim != model.cfg.d_mel_in:
        raise ConfigError("codebook does not match the model's latent count or frame dimension")
    adam = adam or nx.AdamState()
    run_dir = Path(run_dir) if run_dir is not None else None
    log_path = None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "train_log.csv"
        if start_step == 0 or not log_path.exists():
            with open(log_path, "w", newline="") as f:
                csv.writer(f).writerow(LOG_COLUMNS)
    lengths = [ex.seq_len for ex in examples]
    specaug = cfg.specaug_config()
    named = list(model.named_parameters())
    result = TrainResult(adam=adam, final_step=start_step)
    t0 = time.perf_counter()
    model.train()
    for step in range(start_step, cfg.total_steps):
        plan, _ = _plans_for(step, lengths, cfg)
        mode = step_mode(step, plan.mode, cfg)
        g = nx.make_generator(cfg.seed, step)
        np_rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, step])
        batch = assemble([examples[i] for i in plan.indices], mode, model.vocab, specaug, np_rng, batch_id=step)
        if next(model.parameters()).dtype != torch.float32:
            batch = batch.to(next(model.parameters()).dtype)
        if mode == "tts":
            report = tts_loss(batch, model, cb, g, cfg.slow_weight, cfg.kl_weight, True, cfg.tts_gmel_dropout)
        else:
            report = stt_loss(batch, model, g, train=True)
        if not math.isfinite(report.weighted_total):
            raise NonFiniteLossError(
                f"non-finite loss at step {step} (batch {plan.indices}, mode {mode}): {report.row()}",
                batch_id=step, report=report.row(),
            )
        for _, p in named:
            p.grad = None
        nx.backward(report.loss)
        grad_norm = nx.clip_grad_norm([p for _, p in named], cfg.grad_clip)
        if nx.global_grad_norm([p for _, p in named]) > cfg.grad_clip + 1e-6:
            result.clip_violations += 1
        lr = lr_at(step, cfg)
        nx.adam_step(named, adam, lr, cfg.adam_betas, cfg.adam_eps)
        row = {"step": step + 1, "mode": mode, **{k: getattr(report, k) for k in FIELDS}, "lr": lr, "grad_norm": grad_norm, "seconds": round(time.perf_counter() - t0, 3)}
        result.rows.append(row)
        if log_path is not None:
            with open(log_path, "a", newline="") as f:
                csv.writer(f).writerow([row[c] for c in LOG_COLUMNS])
        done = step + 1
        result.final_step = done
        if run_dir is not None and (done % cfg.checkpoint_every == 0 or done == cfg.total_steps):
            path = run_dir / "checkpoints" / f"step{done:07d}.ckpt"
            save_checkpoint(path, model, adam, {**(meta or {}), "step": done, "train_config": cfg.to_dict(), "codebook_digest": cb.digest()})
            result.checkpoints.append(path)
        if done % 100 == 0:
            log.info("step %d mode %s loss %.4f lr %.2e", done, mode, report.weighted_total, lr)
    model.eval()
    return result


def resume(checkpoint_path, cb: Codebook, examples, cfg: TrainConfig, run_dir=None, expected_hash: str | None = None):
    """Continue training from a checkpoint. Returns ``(model, TrainResult)``."""
    model, adam, meta = load_checkpoint(checkpoint_path, expected_hash)
    if meta.get("codebook_digest") not in (None, cb.digest()):
        raise CheckpointError("checkpoint was trained with a different codebook")
    step = int(meta.get("step", 0))
    if step > cfg.total_steps:
        raise CheckpointError(f"checkpoint step {step} beyond total_steps {cfg.total_steps}")
    if step == cfg.total_steps:
        return model, TrainResult(adam=adam, final_step=step)
    extra = {k: v for k, v in meta.items() if k not in ("model_config", "config_hash", "adam_step", "dtype", "step", "train_config", "codebook_digest")}
    return model, train(model, cb, examples, cfg, run_dir, adam, start_step=step, meta=extra)
