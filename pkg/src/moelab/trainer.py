"""Adafactor training loop with skip-on-NaN and checkpoint rollback.

The optimizer follows the memory-frugal recipe: no first moment, a running
second moment whose decay is beta2_hat(t) = 1 - t**-0.8 (so the very first
step uses the raw squared gradient), factored row/column accumulators for
matrices, update RMS-clipped at 1.0, and an inverse-sqrt learning-rate
schedule that holds its peak through warmup.

Stability policy: a non-finite gradient skips the step without touching any
state; a diverged loss (NaN, or more than ``divergence_threshold`` times the
trailing median) restores the last checkpoint and reshuffles the data order
under a fresh seed.
"""

from __future__ import annotations

import json
import math
import statistics
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .model import TransformerLM
from .moe import ConfigError
from .tensor import Tensor
from .util import substream_seed

__all__ = [
    "AdafactorState",
    "TrainLogEntry",
    "CheckpointManager",
    "beta2_hat",
    "lr_schedule",
    "adafactor_step",
    "train_step",
    "train",
]

_EPS_ACCUM = 1e-30  # keeps zero gradients from dividing zero by zero


def beta2_hat(t: int) -> float:
    """Second-moment decay at step t >= 1: 1 - t**-0.8 (0 at t=1)."""
    if t < 1:
        raise ConfigError(f"step index must be >= 1, got {t}")
    return 1.0 - t**-0.8


def lr_schedule(t: int, warmup_steps: int = 10_000, peak: float = 0.01) -> float:
    """Peak learning rate through warmup, then peak * sqrt(warmup / t)."""
    if t < 1:
        raise ConfigError(f"step index must be >= 1, got {t}")
    if warmup_steps < 1:
        raise ConfigError(f"warmup_steps must be >= 1, got {warmup_steps}")
    if t <= warmup_steps:
        return peak
    return peak * math.sqrt(warmup_steps / t)


@dataclass
class AdafactorState:
    """Per-parameter second-moment accumulators plus the shared step count.

    Matrices hold factored "row" (mean over columns) and "col" (mean over
    rows) accumulators; vectors and scalars hold a full accumulator.
    """

    clip_threshold: float = 1.0
    step: int = 0
    accum: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"step": np.array([self.step], dtype=np.int64)}
        for name, parts in self.accum.items():
            for kind, arr in parts.items():
                out[f"{name}@{kind}"] = arr
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], clip_threshold: float = 1.0):
        state = cls(clip_threshold=clip_threshold)
        for key, arr in arrays.items():
            if key == "step":
                state.step = int(arr[0])
                continue
            name, kind = key.rsplit("@", 1)
            state.accum.setdefault(name, {})[kind] = arr.astype(np.float64).copy()
        return state


def _factored_vhat(row: np.ndarray, col: np.ndarray) -> np.ndarray:
    # v_ij = row_i * col_j / mean(row); exact for rank-one squared gradients
    return np.outer(row, col) / row.mean()


def adafactor_step(
    state: AdafactorState,
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    lr: float,
) -> dict[str, Tensor]:
    """Apply one update in place; increments the shared step counter."""
    state.step += 1
    b2 = beta2_hat(state.step)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        sq = g * g + _EPS_ACCUM
        slot = state.accum.setdefault(name, {})
        if g.ndim == 2:
            row = slot.get("row")
            col = slot.get("col")
            new_row = sq.mean(axis=1) if row is None else b2 * row + (1 - b2) * sq.mean(axis=1)
            new_col = sq.mean(axis=0) if col is None else b2 * col + (1 - b2) * sq.mean(axis=0)
            slot["row"], slot["col"] = new_row, new_col
            vhat = _factored_vhat(new_row, new_col)
        else:
            full = slot.get("full")
            new_full = sq if full is None else b2 * full + (1 - b2) * sq
            slot["full"] = new_full
            vhat = new_full
        update = g / np.sqrt(vhat)
        rms = math.sqrt(float((update * update).mean()))
        update /= max(1.0, rms / state.clip_threshold)
        p.data = p.data - lr * update
    return params


@dataclass
class TrainLogEntry:
    step: int
    loss: float
    aux_loss: float
    lr: float
    skipped: bool = False
    rollback: bool = False
    expert_load: list[list[float]] = field(default_factory=list)
    dropped_tokens: int = 0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


def train_step(
    model: TransformerLM,
    batch: np.ndarray,
    state: AdafactorState,
    lr: float,
    aux_coeff: float = 0.01,
) -> TrainLogEntry:
    """One forward/backward/update on a [B, S] batch of token ids.

    The loss is next-token cross-entropy over the shifted batch plus
    ``aux_coeff`` times the mean load-balancing loss.  A non-finite gradient
    anywhere skips the update entirely: no parameter, accumulator, or step
    counter changes.
    """
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] < 2:
        raise ConfigError(f"batch must be [B, S>=2] token ids, got shape {batch.shape}")
    logits, aux, stats = model.forward(batch[:, :-1])
    ce = T.cross_entropy(logits, batch[:, 1:])
    loss = ce + aux_coeff * aux if stats else ce

    model.zero_grad()
    loss.backward()
    params = model.params()
    grads: dict[str, np.ndarray] = {}
    finite = True
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            finite = False
            break
        grads[name] = g

    entry = TrainLogEntry(
        step=state.step + 1,
        loss=float(loss.data),
        aux_loss=float(aux.data),
        lr=lr,
        expert_load=[s.load_fractions.tolist() for s in stats],
        dropped_tokens=sum(s.dropped_tokens for s in stats),
    )
    if not finite:
        entry.skipped = True
        entry.step = state.step  # nothing advanced
        return entry
    adafactor_step(state, params, grads, lr)
    return entry


class CheckpointManager:
    """Periodic checkpointing plus divergence detection and rollback."""

    def __init__(
        self,
        out_dir: str | Path,
        interval: int = 50,
        divergence_threshold: float = 3.0,
        window: int = 50,
    ):
        if interval < 1:
            raise ConfigError(f"checkpoint interval must be >= 1, got {interval}")
        if divergence_threshold <= 1.0:
            raise ConfigError(f"divergence threshold must exceed 1, got {divergence_threshold}")
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.interval = interval
        self.divergence_threshold = divergence_threshold
        self.window = window
        self.history: deque[float] = deque(maxlen=window)
        self.last_path: Path | None = None
        self.rollbacks = 0

    def save(self, model: TransformerLM, state: AdafactorState, data_seed: int, step: int) -> Path:
        path = self.out_dir / "checkpoint_last.ckpt"
        save_checkpoint(
            path,
            model.config,
            model.params(),
            opt_arrays=state.arrays(),
            meta={"step": step, "data_seed": data_seed},
        )
        self.last_path = path
        return path

    def observe(self, loss: float) -> bool:
        """Record a loss; True means the run has diverged and needs rollback."""
        if math.isnan(loss) or math.isinf(loss):
            return self.last_path is not None
        diverged = False
        if self.history:
            diverged = loss > self.divergence_threshold * statistics.median(self.history)
        if not diverged:
            self.history.append(loss)
        return diverged and self.last_path is not None

    def rollback(self, model: TransformerLM, state: AdafactorState) -> tuple[AdafactorState, int]:
        """Restore the last checkpoint in place; returns (state, saved data seed)."""
        if self.last_path is None:
            raise ConfigError("no checkpoint available to roll back to")
        snap = load_checkpoint(self.last_path)
        params = model.params()
        for name, arr in snap.params.items():
            params[name].data = arr.copy()
        restored = AdafactorState.from_arrays(snap.opt_arrays, clip_threshold=state.clip_threshold)
        state.step = restored.step
        state.accum = restored.accum
        self.rollbacks += 1
        self.history.clear()
        return state, int(snap.meta["data_seed"])


BatchSource = Callable[[int], Iterator[np.ndarray]]


def train(
    model: TransformerLM,
    batch_source: BatchSource,
    steps: int,
    *,
    seed: int = 0,
    aux_coeff: float = 0.01,
    peak_lr: float = 0.01,
    warmup_steps: int | None = None,
    manager: CheckpointManager | None = None,
    log_path: str | Path | None = None,
) -> list[TrainLogEntry]:
    """Run ``steps`` updates drawing batches from ``batch_source(data_seed)``.

    ``batch_source`` must return a fresh infinite iterator for a given seed;
    a rollback re-creates it with a new derived seed so the replayed steps see
    a different batch order.  Default warmup is 1% of the run, at least 10.
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    warmup = warmup_steps if warmup_steps is not None else max(10, steps // 100)
    state = AdafactorState()
    data_seed = substream_seed(seed, "data")
    batches = batch_source(data_seed)
    entries: list[TrainLogEntry] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    # A pathological run that diverges or skips forever must still terminate.
    budget = 10 * steps + 100
    try:
        if manager is not None:
            manager.save(model, state, data_seed, step=0)
        while state.step < steps and budget > 0:
            budget -= 1
            batch = next(batches)
            lr = lr_schedule(state.step + 1, warmup, peak_lr)
            entry = train_step(model, batch, state, lr, aux_coeff)
            if manager is not None and manager.observe(entry.loss):
                state, old_seed = manager.rollback(model, state)
                data_seed = substream_seed(old_seed, f"reshuffle{manager.rollbacks}")
                batches = batch_source(data_seed)
                entry.rollback = True
                entry.skipped = True
            entries.append(entry)
            if log_fh:
                log_fh.write(entry.to_json() + "\n")
            if not entry.skipped and manager is not None and state.step % manager.interval == 0:
                manager.save(model, state, data_seed, step=state.step)
        if manager is not None:
            manager.save(model, state, data_seed, step=state.step)
    finally:
        if log_fh:
            log_fh.close()
    return entries
