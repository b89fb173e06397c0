"""Training loop: fixed per-step randomness, AdamW with a one-cycle schedule, checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import config as C
from . import model as M
from .autodiff import AdamState, OneCycleSchedule, adam_step, load_checkpoint, one_cycle_lr, save_checkpoint
from .backbones import ConfigError
from .detection import NumericError


class TrainingAborted(NumericError):
    """A step produced a non-finite loss or gradient; ``checkpoint`` holds the last good state."""

    def __init__(self, message: str, step: int, checkpoint: Path | None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class StepRecord:
    step: int
    lr: float
    total: float
    parts: dict[str, float]
    frames: list[str]

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "lr": self.lr, "total": self.total, "parts": self.parts,
                           "frames": self.frames}, sort_keys=True)


@dataclass
class TrainState:
    model: M.MultiViewDetector
    adam: AdamState = field(default_factory=AdamState)
    step: int = 0  # steps completed
    history: list[StepRecord] = field(default_factory=list)


def schedule_for(cfg: C.RunConfig) -> OneCycleSchedule:
    t = cfg.train
    return OneCycleSchedule(t.steps, t.max_lr, t.div_factor, t.final_div_factor, t.pct_start, t.momentum_range)


def batch_indices(n_frames: int, step: int, batch_size: int, seed: int) -> list[int]:
    """Frames of ``step``: each epoch walks a fresh seeded permutation."""
    if n_frames == 0:
        raise ConfigError("no training frames")
    per_epoch = max(n_frames // batch_size, 1)
    epoch, k = divmod(step, per_epoch)
    order = np.random.default_rng([seed, 1, epoch]).permutation(n_frames)
    picks = order[k * batch_size : (k + 1) * batch_size]
    if len(picks) < batch_size:  # fewer frames than one batch
        picks = np.resize(order, batch_size)
    return [int(i) for i in picks]


# -- checkpoints -------------------------------------------------------------------------------
def save_state(path, state: TrainState, cfg: C.RunConfig) -> None:
    arrays = M.state_arrays(state.model)
    for name in state.adam.m:
        arrays[f"adam_m/{name}"] = state.adam.m[name]
        arrays[f"adam_v/{name}"] = state.adam.v[name]
    meta = {"config": C.to_dict(cfg), "step": state.step, "adam_step": state.adam.step,
            "history": [json.loads(r.to_json()) for r in state.history]}
    save_checkpoint(path, arrays, meta)


RUN_ONLY_FIELDS = ("train.steps", "train.log_every", "train.checkpoint_every")


def check_config_matches(cfg: C.RunConfig, meta: dict, model_only: bool = False) -> None:
    """Raise naming every field that differs from the checkpoint's config.

    Resuming compares everything but the run length, logging and data
    location; ``model_only`` (inference) compares the grid, model and
    head sections alone.
    """
    stored = meta.get("config")
    if stored is None:
        raise ConfigError("checkpoint carries no config")
    diverged = C.diff_configs(C.to_dict(cfg), stored)
    if model_only:
        diverged = [f for f in diverged if f.startswith(("grid.", "model.", "head.", "schema_version"))]
    else:
        diverged = [f for f in diverged if f not in RUN_ONLY_FIELDS and not f.startswith("data.")]
    if diverged:
        raise ConfigError("checkpoint was written with a different config; divergent fields: " + ", ".join(diverged))


def load_state(path, cfg: C.RunConfig, model_only: bool = False) -> TrainState:
    arrays, meta = load_checkpoint(path)
    check_config_matches(cfg, meta, model_only)
    model = M.build_model(cfg)
    M.load_state_arrays(model, arrays)
    adam = AdamState(step=int(meta.get("adam_step", 0)))
    for key, arr in arrays.items():
        if key.startswith("adam_m/"):
            adam.m[key[7:]] = arr
        elif key.startswith("adam_v/"):
            adam.v[key[7:]] = arr
    history = [StepRecord(**r) for r in meta.get("history", [])]
    return TrainState(model, adam, int(meta.get("step", 0)), history)


def load_model(path, cfg: C.RunConfig) -> M.MultiViewDetector:
    return load_state(path, cfg, model_only=True).model.eval()


# -- loop ------------------------------------------------------------------------------------------
def _finite_grads(model: M.MultiViewDetector) -> str | None:
    for name, p in model.named_parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return name
    return None


def train(cfg: C.RunConfig, frames, state: TrainState | None = None, steps: int | None = None,
          out_dir: str | Path | None = None, log: Callable[[StepRecord], None] | None = None) -> TrainState:
    """Run until ``steps`` (default ``cfg.train.steps``) are complete.

    Passing a ``state`` resumes it.  With ``out_dir`` the resolved config,
    a JSON-lines log and periodic checkpoints (``last.ckpt``) are written.
    Step ``s`` draws its augmentation from ``default_rng([seed, s])``, so a
    given seed reproduces the same run whether or not it was resumed.
    """
    t = cfg.train
    steps = t.steps if steps is None else steps
    state = state or TrainState(M.build_model(cfg))
    model = state.model.train()
    schedule = schedule_for(cfg)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        C.save_config(cfg, out / "config.yaml")
        log_file = open(out / "train_log.jsonl", "a")
    cached: dict[tuple[int, ...], M.BatchTargets] = {}
    params = dict(model.named_parameters())
    try:
        while state.step < steps:
            s = state.step
            picks = batch_indices(len(frames), s, t.batch_size, t.seed)
            rng = np.random.default_rng([t.seed, s])
            batch = M.make_batch([frames[i] for i in picks], cfg, rng)
            if t.augment:
                targets = M.batch_targets(model, batch)
            else:
                key = tuple(picks)
                if key not in cached:
                    cached[key] = M.batch_targets(model, batch)
                targets = cached[key]
            try:
                out_ = model(batch)
                parts = M.loss_parts(model, out_, targets)
                total = M.det.total_loss(parts, M.loss_weights(cfg))
                model.zero_grad()
                total.backward()
                bad = _finite_grads(model)
                if bad is not None:
                    raise NumericError(f"gradient of {bad} is not finite")
            except NumericError as exc:
                ckpt = None
                if out is not None:
                    ckpt = out / "last_good.ckpt"
                    save_state(ckpt, state, cfg)
                raise TrainingAborted(f"step {s + 1}: {exc}", s + 1, ckpt) from exc
            lr, momentum = one_cycle_lr(s, schedule)
            adam_step(params, state.adam, lr, beta1=momentum, weight_decay=t.weight_decay)
            state.step += 1
            rec = StepRecord(state.step, lr, total.item(), {k: v.item() for k, v in parts.items()},
                             [frames[i].frame_id for i in picks])
            state.history.append(rec)
            if log_file is not None:
                log_file.write(rec.to_json() + "\n")
            if log is not None and (state.step % t.log_every == 0 or state.step in (1, steps)):
                log(rec)
            if out is not None and (state.step % t.checkpoint_every == 0 or state.step == steps):
                save_state(out / "last.ckpt", state, cfg)
    finally:
        if log_file is not None:
            log_file.close()
    return state


def loss_reduction(history: list[StepRecord]) -> float:
    """Fractional drop of the total loss from the first step to the mean of the last five."""
    if len(history) < 2:
        return 0.0
    first = history[0].total
    last = float(np.mean([r.total for r in history[-5:]]))
    return 1.0 - last / first if first > 0 and math.isfinite(last) else 0.0
