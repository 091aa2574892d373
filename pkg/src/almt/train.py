"""AdamW, warmup plus cosine learning rate, the epoch loop and evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .data import Dataset, iterate_batches, read_mmf
from .metrics import BucketSpec, MetricsReport, compute_report, write_pairs_csv
from .model import ALMTModel, ModelConfig, compute_loss
from .tensor import ContractError, NonFiniteError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 1e-4
    warmup_steps: int = 0
    total_steps: int = 1
    floor_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ContractError(
                f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}"
            )
        if self.floor_lr < 0:
            raise ContractError("floor_lr must be non-negative")


def lr_at(sched: ScheduleConfig, step: int) -> float:
    """Linear warmup to ``base_lr`` over ``warmup_steps``, then cosine decay to ``floor_lr``."""
    if not 0 <= step <= sched.total_steps:
        raise ContractError(f"step {step} outside [0, {sched.total_steps}]")
    w, s = sched.warmup_steps, sched.total_steps
    if step < w:
        return sched.base_lr * (step + 1) / w
    phase = (step - w) / (s - w)
    return sched.floor_lr + (sched.base_lr - sched.floor_lr) * 0.5 * (1.0 + math.cos(math.pi * phase))


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def for_params(cls, params, **hyper) -> "OptimState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **hyper)


def adamw_step(params, grads, state: OptimState, lr: float, names=None) -> None:
    """One AdamW update in place. Decay ``p *= 1 - lr*wd`` precedes the Adam step.

    Parameters whose gradient is ``None`` are left untouched. Nothing is
    modified if any gradient or updated value is non-finite.
    """
    params, grads = list(params), list(grads)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("adamw_step: params, grads and optimizer state differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"adamw_step: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            label = names[i] if names else (p.name or f"#{i}")
            raise NonFiniteError(f"non-finite gradient for parameter {label}; step aborted")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    staged = []
    with np.errstate(over="ignore", invalid="ignore"):
        for i, (p, g, m, v) in enumerate(zip(params, grads, state.m, state.v)):
            if g is None:
                continue
            dt = p.data.dtype.type
            m_new = dt(b1) * m + dt(1.0 - b1) * g
            v_new = dt(b2) * v + dt(1.0 - b2) * (g * g)
            decayed = p.data * dt(1.0 - lr * state.weight_decay) if state.weight_decay else p.data
            update = dt(lr) * (m_new / dt(corr1)) / (np.sqrt(v_new / dt(corr2)) + dt(state.eps))
            new = (decayed - update).astype(p.data.dtype)
            if not np.isfinite(new).all():
                label = names[i] if names else (p.name or f"#{i}")
                raise NonFiniteError(f"update overflows parameter {label}; step aborted")
            staged.append((p, m, v, m_new, v_new, new))
    # commit only once every update is known to be finite
    state.t = t
    for p, m, v, m_new, v_new, new in staged:
        m[...] = m_new
        v[...] = v_new
        p.data = new


def clip_grad_norm(grads, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads if g is not None))
    if total > max_norm > 0:
        factor = max_norm / (total + 1e-12)
        for g in grads:
            if g is not None:
                g *= g.dtype.type(factor)
    return total


@dataclass
class TrainConfig:
    model: ModelConfig
    train_data: Dataset | str | Path
    valid_data: Dataset | str | Path | None = None
    test_data: Dataset | str | Path | None = None
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    base_lr: float = 1e-4
    warmup_frac: float = 0.05
    warmup_steps: int | None = None
    floor_lr: float = 0.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    checkpoint_path: str | Path | None = None
    metrics_log_path: str | Path | None = None
    buckets: str | dict = "mosi"

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ContractError("warmup_frac must lie in [0, 1)")
        self.model.validate()
        return self


@dataclass
class EvalResult:
    report: MetricsReport
    preds: np.ndarray
    labels: np.ndarray
    loss: float

    def write_pairs(self, path) -> None:
        write_pairs_csv(self.preds, self.labels, path)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    best_epoch: int
    model: ALMTModel
    test: EvalResult | None = None
    notes: list[str] = field(default_factory=list)


class TrainingDiverged(NonFiniteError):
    def __init__(self, message, last_checkpoint: Checkpoint | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


def _load(data):
    if data is None or isinstance(data, Dataset):
        return data
    return read_mmf(data)


def predict(model: ALMTModel, dataset: Dataset, batch_size: int = 64) -> np.ndarray:
    out = []
    with T.no_grad():
        for batch in iterate_batches(dataset, batch_size):
            y, _ = model.forward(batch.inputs)
            out.append(y.data.astype(np.float32))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)


def evaluate(model: ALMTModel, dataset: Dataset, buckets: str | dict[str, BucketSpec] = "mosi",
             batch_size: int = 64) -> EvalResult:
    """Metrics over every sample plus the raw ``(prediction, label)`` pairs."""
    if len(dataset) == 0:
        raise ContractError("evaluate: empty dataset")
    check_shapes(model.config, dataset)
    was_training = model.training
    model.eval()
    preds = predict(model, dataset, batch_size)
    model.train(was_training)
    labels = dataset.labels()
    loss = float(np.mean((preds.astype(np.float64) - labels) ** 2))
    return EvalResult(compute_report(preds, labels, buckets), preds, labels, loss)


def check_shapes(config: ModelConfig, dataset: Dataset) -> None:
    shapes = dataset.shapes()
    if shapes is None:
        return
    for m, (t, d) in shapes.items():
        want = (int(config.input_lens[m]), int(config.input_dims[m]))
        if (t, d) != want:
            raise ContractError(f"dataset {m} features are {t}x{d}, model expects {want[0]}x{want[1]}")


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train(cfg: TrainConfig) -> TrainResult:
    """Minimise mean squared error; keep the parameters with the lowest validation loss.

    Without a validation set the training loss selects the checkpoint. Each
    epoch appends one JSON line to ``metrics_log_path`` when it is set.
    """
    cfg.validate()
    train_set, valid_set, test_set = (_load(d) for d in (cfg.train_data, cfg.valid_data, cfg.test_data))
    if train_set is None or len(train_set) == 0:
        raise ContractError("training set is empty")
    for ds in (train_set, valid_set, test_set):
        if ds is not None:
            check_shapes(cfg.model, ds)

    notes = []
    flags = cfg.model.ablation
    if flags.drop_audio or flags.drop_video:
        dropped = [m for m, f in (("audio", flags.drop_audio), ("visual", flags.drop_video)) if f]
        notes.append(
            f"dropped modalities {dropped} are zeroed after embedding; parameter count is unchanged"
        )
    for note in notes:
        log.info(note)

    model = ALMTModel(cfg.model, seed=cfg.seed)
    model.train()
    names, params = zip(*model.named_parameters())
    state = OptimState.for_params(params, lr=cfg.base_lr, beta1=cfg.beta1, beta2=cfg.beta2,
                                  eps=cfg.eps, weight_decay=cfg.weight_decay)
    per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total = cfg.epochs * per_epoch
    warmup = cfg.warmup_steps if cfg.warmup_steps is not None else int(cfg.warmup_frac * total)
    sched = ScheduleConfig(cfg.base_lr, min(warmup, total - 1), total, cfg.floor_lr)

    log_file = None
    if cfg.metrics_log_path is not None:
        log_file = open(cfg.metrics_log_path, "w")
    history: list[dict] = []
    best, best_loss, best_epoch = None, math.inf, -1
    step = 0
    try:
        for epoch in range(cfg.epochs):
            start = time.perf_counter()
            total_loss, seen = 0.0, 0
            lr = sched.base_lr
            for batch in iterate_batches(train_set, cfg.batch_size, _epoch_seed(cfg.seed, epoch)):
                lr = lr_at(sched, step)
                try:
                    preds, _ = model.forward(batch.inputs)
                    loss = compute_loss(preds, batch.labels)
                    model.zero_grad()
                    T.backward(loss)
                    grads = [p.grad for p in params]
                    if cfg.clip_norm:
                        clip_grad_norm(grads, cfg.clip_norm)
                    adamw_step(params, grads, state, lr, names)
                except NonFiniteError as exc:
                    raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}", best) from exc
                total_loss += float(loss.data) * len(batch)
                seen += len(batch)
                step += 1
            entry = {"epoch": epoch, "lr": lr, "train_loss": total_loss / seen}
            if valid_set is not None and len(valid_set):
                result = evaluate(model, valid_set, cfg.buckets)
                model.train()
                entry["valid_loss"] = result.loss
                entry["valid_mae"] = result.report.mae
                score = result.loss
            else:
                entry["valid_loss"] = None
                entry["valid_mae"] = None
                score = entry["train_loss"]
            entry["wall_ms"] = round(1000.0 * (time.perf_counter() - start), 3)
            history.append(entry)
            if log_file is not None:
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()
            if score < best_loss:
                best_loss, best_epoch = score, epoch
                best = Checkpoint.from_model(model)
                if cfg.checkpoint_path is not None:
                    best.save(cfg.checkpoint_path)
    finally:
        if log_file is not None:
            log_file.close()

    best_model = best.build_model()
    test = evaluate(best_model, test_set, cfg.buckets) if test_set is not None and len(test_set) else None
    return TrainResult(best, history, best_epoch, best_model, test, notes)


def loss_sequence(history: list[dict]) -> list[tuple]:
    """The deterministic part of a training log (everything but wall time)."""
    return [tuple(v for k, v in sorted(e.items()) if k != "wall_ms") for e in history]
