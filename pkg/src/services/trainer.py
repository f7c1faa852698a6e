"""
Training loop for one level's operator network.

Every step takes one branch batch of samples and one group of snapshots:
forward on those times only, relative L2 loss on the matching slices,
reverse sweep, Adam update. Each time group is its own optimizer step, so
activation memory scales with the group size rather than with the full
time grid. Snapshot groups and sample order are reshuffled every epoch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from src.errors import ContractError, ShapeError, TrainingError
from src.models import Schedule, TimeGrid, TrainerConfig
from src.services import autodiff as ad
from src.services.autodiff import LOSS_GUARD, Tape
from src.services.operator_model import FourierDeepONet, forward_on_tape, register_parameters

logger = logging.getLogger(__name__)


@dataclass
class TrainingExample:
    """
    One supervised pair.

    Attributes:
        branch_in: ``(C_in, *grid)`` or time-resolved ``(T, C_in, *grid)``.
        times: Normalized snapshot times ``(T,)``.
        target: ``(T, *grid)``.
    """

    branch_in: np.ndarray
    times: np.ndarray
    target: np.ndarray

    def select(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        branch = self.branch_in[idx] if self.branch_in.ndim == 5 else self.branch_in
        return branch, self.times[idx], self.target[idx]


@dataclass
class OptimState:
    """Adam moments per parameter (float64 views for complex parameters)."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config: TrainerConfig) -> "OptimState":
        return cls(beta1=config.beta1, beta2=config.beta2, eps=config.eps)


@dataclass
class LossRecord:
    epoch: int
    step: int
    lr: float
    loss: float


def l2_relative_loss(pred: np.ndarray, truth: np.ndarray) -> float:
    """``||pred - truth|| / (||truth|| + 1e-12)`` over every entry of one sample."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    return float(np.linalg.norm((pred - truth).ravel()) / (np.linalg.norm(truth.ravel()) + LOSS_GUARD))


def batched_l2_relative_loss(preds: list[np.ndarray], truths: list[np.ndarray]) -> float:
    """Per-sample relative loss averaged over a branch batch."""
    return float(np.mean([l2_relative_loss(p, t) for p, t in zip(preds, truths)]))


def lr_at_epoch(sched: Schedule, epoch: int) -> float:
    """``base_lr * decay ** (epoch // period)``."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return sched.base_lr * sched.decay ** (epoch // sched.period)


def _real_view(a: np.ndarray) -> np.ndarray:
    return a.view(np.float64) if np.iscomplexobj(a) else a


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState,
              lr: float) -> dict[str, np.ndarray]:
    """
    One bias-corrected Adam update.

    Complex parameters are updated as independent real and imaginary parts.

    Returns:
        New parameter arrays (inputs are not modified).

    Raises:
        TrainingError: If a gradient holds NaN or Inf.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient", parameter=name)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    updated = {}
    for name, p in params.items():
        g = _real_view(np.ascontiguousarray(grads[name], dtype=p.dtype))
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new = _real_view(np.array(p, copy=True)) - step
        updated[name] = new.view(p.dtype) if np.iscomplexobj(p) else new
    return updated


def time_batches(time_grid: Union[TimeGrid, int], batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    """
    Shuffled partition of snapshot indices into groups of ``batch``.

    Indices are sorted inside each group, so ``batch == n_T`` gives the
    natural order.

    Raises:
        ContractError: If ``batch`` is outside ``[1, n_T]``.
    """
    n_t = time_grid if isinstance(time_grid, int) else time_grid.n_t
    if not 1 <= batch <= n_t:
        raise ContractError(f"time batch {batch} must lie in [1, {n_t}]")
    order = rng.permutation(n_t)
    return [np.sort(order[i:i + batch]) for i in range(0, n_t, batch)]


def training_step(model: FourierDeepONet, batch: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
                  state: OptimState, lr: float) -> tuple[float, int]:
    """
    Forward, backward and Adam update on one (branch batch, time group).

    Gradients of the per-sample losses are averaged over the branch batch.

    Returns:
        Mean loss and the largest activation element count held by a tape.
    """
    total: dict[str, np.ndarray] = {}
    losses = []
    peak = 0
    for branch_in, times, target in batch:
        tape = Tape()
        params = register_parameters(model, tape)
        pred = forward_on_tape(model, tape, branch_in, times, params)
        loss = ad.l2_relative(pred, target)
        if not math.isfinite(float(loss.value)):
            raise TrainingError("non-finite loss")
        grads = ad.backward(tape, loss)
        for name, g in grads.items():
            total[name] = g if name not in total else total[name] + g
        losses.append(float(loss.value))
        peak = max(peak, tape.peak_elements)
    scale = 1.0 / len(batch)
    grads = {name: g * scale for name, g in total.items()}
    updated = adam_step(dict(model.named_parameters()), grads, state, lr)
    for name, value in updated.items():
        model.set_parameter(name, value)
    return float(np.mean(losses)), peak


def train_level(model: FourierDeepONet, examples: list[TrainingExample], epochs: int,
                config: Optional[TrainerConfig] = None, rng: Optional[np.random.Generator] = None,
                state: Optional[OptimState] = None, label: str = "model", first_epoch: int = 0
                ) -> tuple[FourierDeepONet, list[LossRecord]]:
    """
    Train ``model`` in place.

    Args:
        model: Network to update.
        examples: Nonempty training set.
        epochs: Number of passes over every (sample, snapshot) pair.
        config: Batch sizes, schedule and Adam constants.
        rng: Shuffling source; a fixed seed gives an identical loss history.
        state: Optimizer state to continue from.
        first_epoch: Schedule epoch of the first pass (for continued training).
        label: Name used in log lines.

    Returns:
        The model and one ``LossRecord`` per optimizer step.

    Raises:
        ContractError: If ``examples`` is empty.
    """
    if not examples:
        raise ContractError(f"{label}: training set is empty")
    config = config or TrainerConfig()
    rng = rng or np.random.default_rng(0)
    state = state or OptimState.from_config(config)
    n_t = examples[0].times.size
    time_batch = min(config.time_batch, n_t)

    history: list[LossRecord] = []
    step = 0
    for epoch in range(epochs):
        lr = lr_at_epoch(config.schedule, first_epoch + epoch)
        groups = time_batches(n_t, time_batch, rng)
        order = rng.permutation(len(examples))
        epoch_losses = []
        for start in range(0, len(order), config.branch_batch):
            chunk = [examples[i] for i in order[start:start + config.branch_batch]]
            for idx in groups:
                loss, _ = training_step(model, [ex.select(idx) for ex in chunk], state, lr)
                history.append(LossRecord(epoch=first_epoch + epoch, step=step, lr=lr, loss=loss))
                epoch_losses.append(loss)
                step += 1
        logger.info(f"📉 {label} epoch {epoch + 1}/{epochs}: loss {np.mean(epoch_losses):.4e} (lr {lr:.2e})")
    return model, history
