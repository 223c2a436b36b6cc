"""Cross-entropy training with AdamW and plateau learning-rate decay."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

from . import tensor as tn
from .model import CalibrationError, ModelConfig, ModelState, calibrate, forward, init
from .task import END, Batch, TaskConfig, batch_at, make_batch, sample


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.01
    batches_per_epoch: int = 2000
    batch_size: int = 128
    decay_factor: float = 0.5
    decay_patience: int = 3
    epochs: int = 100
    wall_clock: float | None = None  # seconds; whichever budget ends first
    seed: int = 0
    beta_1: float = 0.9
    beta_2: float = 0.999
    epsilon: float = 1e-7
    eval_points: int = 1024
    target_accuracy: float | None = None  # stop once in-distribution accuracy reaches this

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.decay_patience < 1:
            raise ValueError("decay_patience must be >= 1")
        if self.batches_per_epoch < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch counts must be positive")

    def replace(self, **changes) -> "TrainConfig":
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)


TRAIN_PRESETS = {
    "baseline": TrainConfig(),
    # 50 epochs of 200x64 batches; lr tuned for the desk model.
    "desk": TrainConfig(lr=1e-3, batches_per_epoch=200, batch_size=64, epochs=50, eval_points=1024),
}


def train_preset(name: str, **overrides) -> TrainConfig:
    try:
        cfg = TRAIN_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown training preset {name!r}; choose from {sorted(TRAIN_PRESETS)}") from None
    return cfg.replace(**overrides) if overrides else cfg


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    per_token_accuracy: dict[str, float]
    current_lr: float
    wall_time: float
    per_token_stderr: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class AdamW:
    """Adam with decoupled weight decay applied to every parameter.

    Per step, with bias-corrected moment estimates::

        p <- p - lr * wd * p
        p <- p - lr * m_hat / (sqrt(v_hat) + eps)
    """

    def __init__(self, params, lr: float, weight_decay: float = 0.01, beta_1: float = 0.9,
                 beta_2: float = 0.999, epsilon: float = 1e-7):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta_1, self.beta_2, self.epsilon = beta_1, beta_2, epsilon
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta_1, self.beta_2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "lr": self.lr}


class PlateauDecay:
    """Multiply the lr by ``factor`` after ``patience`` epochs without a new best loss."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 3):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def offset_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x0FF5E7])))


def eval_task(task: TaskConfig) -> TaskConfig:
    """Held-out stream for evaluation: same distribution, disjoint seed."""
    return task.with_seed(task.seed + 1_000_003)


def prepare(config: ModelConfig, task: TaskConfig, cfg: TrainConfig) -> ModelState:
    """Initialise from ``config`` and calibrate on the first training batch."""
    return calibrate(init(config), batch_at(task, 0, cfg.batch_size))


def loss_on(state: ModelState, batch: Batch, rng: np.random.Generator | None = None) -> tuple[float, tn.Tape, tn.Tensor]:
    with tn.Tape() as tape:
        logits, _ = forward(state, batch, rng)
        loss = tn.cross_entropy(logits, batch.target_ids, batch.loss_mask)
    return loss.item(), tape, loss


@dataclass
class EvalResult:
    accuracy: float
    stderr: float
    correct: int
    total: int

    def __iter__(self):
        return iter((self.accuracy, self.stderr))


def token_accuracy(pred: np.ndarray, batch: Batch, exclude_end: bool = False) -> tuple[int, int]:
    mask = batch.loss_mask
    if exclude_end:
        mask = mask & (batch.target_ids != END)
    return int(np.sum((pred == batch.target_ids) & mask)), int(np.sum(mask))


def binomial(correct: int, total: int) -> EvalResult:
    if total == 0:
        raise ValueError("no unmasked target tokens to evaluate")
    p = correct / total
    return EvalResult(p, math.sqrt(p * (1.0 - p) / total), correct, total)


def evaluate(
    state: ModelState,
    dataset: TaskConfig,
    n_points: int = 1024,
    batch_size: int = 128,
    exclude_end: bool = False,
    predict: Callable[[ModelState, Batch], np.ndarray] | None = None,
) -> EvalResult:
    """Teacher-forced per-token accuracy with binomial standard error."""
    if n_points < 1:
        raise ValueError("empty dataset")
    if not state.calibrated:
        raise CalibrationError("model must be calibrated before evaluation")
    correct = total = 0
    for start in range(0, n_points, batch_size):
        batch = make_batch([sample(dataset, i) for i in range(start, min(start + batch_size, n_points))])
        pred = predict(state, batch) if predict else np.argmax(forward(state, batch)[0].data, axis=-1)
        c, n = token_accuracy(pred, batch, exclude_end)
        correct += c
        total += n
    return binomial(correct, total)


def train_iter(
    state: ModelState,
    task: TaskConfig,
    cfg: TrainConfig,
    eval_sets: Mapping[str, TaskConfig] | None = None,
    log: Callable[[str], None] | None = None,
) -> Iterator[MetricsRecord]:
    """Train ``state`` in place, yielding one record per epoch.

    Training batches are a deterministic function of ``task.seed`` and the
    global batch index; position offsets come from a generator seeded by
    ``cfg.seed`` whose state is kept on the model.
    """
    if not state.calibrated:
        raise CalibrationError("train needs a calibrated model")
    eval_sets = dict(eval_sets) if eval_sets is not None else {"train": eval_task(task)}
    rng = offset_rng(cfg.seed)
    opt = AdamW(state.parameters(), cfg.lr, cfg.weight_decay, cfg.beta_1, cfg.beta_2, cfg.epsilon)
    sched = PlateauDecay(cfg.lr, cfg.decay_factor, cfg.decay_patience)
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for i in range(cfg.batches_per_epoch):
            index = (epoch - 1) * cfg.batches_per_epoch + i
            batch = batch_at(task, index, cfg.batch_size)
            try:
                loss, tape, loss_t = loss_on(state, batch, rng)
                if not math.isfinite(loss):
                    raise tn.NonFiniteError(f"loss {loss}")
                opt.zero_grad()
                tape.backward(loss_t)
            except tn.NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"non-finite value at epoch {epoch}, batch {i} (global {index}), lr {opt.lr:g}: {exc}"
                ) from exc
            opt.step()
            losses.append(loss)
            if cfg.wall_clock is not None and time.perf_counter() - t0 > cfg.wall_clock:
                break
        opt.lr = sched.step(float(np.mean(losses)))
        acc, err = {}, {}
        for name, ds in eval_sets.items():
            r = evaluate(state, ds, cfg.eval_points)
            acc[name], err[name] = r.accuracy, r.stderr
        state.rng_state = rng.bit_generator.state
        rec = MetricsRecord(epoch, float(np.mean(losses)), acc, opt.lr, time.perf_counter() - t0, err)
        if log:
            log(f"epoch {epoch} loss {rec.train_loss:.4f} acc {acc} lr {opt.lr:g}")
        yield rec
        if cfg.wall_clock is not None and time.perf_counter() - t0 > cfg.wall_clock:
            return
        if cfg.target_accuracy is not None and min(acc.values()) >= cfg.target_accuracy:
            return


def train(state: ModelState, task: TaskConfig, cfg: TrainConfig, eval_sets=None, log=None
          ) -> tuple[ModelState, list[MetricsRecord]]:
    records = list(train_iter(state, task, cfg, eval_sets, log))
    return state, records


def overfit(state: ModelState, batch: Batch, steps: int = 500, lr: float = 1e-3, target: float = 0.01
            ) -> list[float]:
    """Fit a single batch (no offsets, no decay); returns the loss history."""
    opt = AdamW(state.parameters(), lr, weight_decay=0.0)
    history = []
    for _ in range(steps):
        loss, tape, loss_t = loss_on(state, batch)
        history.append(loss)
        if loss < target:
            break
        opt.zero_grad()
        tape.backward(loss_t)
        opt.step()
    return history
