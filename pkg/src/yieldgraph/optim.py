"""Log-cosh loss, Adam, and learning-rate schedules.

The loss is computed in the overflow-safe form

    log(cosh(r)) = |r| + log((1 + exp(-2|r|)) / 2)

(naive cosh overflows near r = 710 in float64) and averaged over the
unmasked batch entries only; masked entries contribute neither loss nor
gradient. L2 regularization is coupled through the gradient (classic
Adam + weight decay).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from yieldgraph.autodiff import NonFiniteError, Tensor, take_rows

LOG2 = math.log(2.0)


class EmptyBatchError(ValueError):
    """Every element of a loss batch is masked out."""


def logcosh_loss(pred, target, mask=None):
    """Mean log-cosh of (pred - target) over unmasked entries.

    pred: Tensor [n]; target: array [n] (finite wherever unmasked);
    mask: optional boolean array [n], True = contributes.
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape or pred.data.ndim != 1:
        raise ValueError(f"pred/target shapes differ: {pred.data.shape} vs {target.shape}")
    if mask is None:
        mask = np.ones(target.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != target.shape:
            raise ValueError(f"mask shape {mask.shape} does not match {target.shape}")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise EmptyBatchError("no unmasked elements: batch carries no signal")
    r = take_rows(pred, idx) - Tensor(target[idx])
    a = r.abs()
    return (a + ((-2.0 * a).exp() + 1.0).log() - LOG2).mean()


@dataclass
class AdamState:
    """Per-parameter first/second moment buffers plus step bookkeeping."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state):
    """One bias-corrected Adam update over a {name: Tensor} mapping.

    Parameters with no gradient this step are skipped. Weight decay is
    added into the gradient before the moment updates. A non-finite
    gradient aborts the step (no parameter is touched) with a diagnostic
    naming the parameter.
    """
    live = [(name, p) for name, p in sorted(params.items()) if p.grad is not None]
    for name, p in live:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}; step aborted")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in live:
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass(frozen=True)
class LrSchedule:
    """constant, step decay, or cosine annealing with restarts."""

    kind: str = "constant"
    lr_max: float = 1e-3
    period: int = 25       # step: epochs per decay
    gamma: float = 0.5     # step: decay factor
    t0: int = 100          # cosine: restart period
    eta_min: float = 1e-6  # cosine: floor

    def __post_init__(self):
        if self.kind not in ("constant", "step", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.lr_max <= 0 or (self.kind == "cosine" and self.eta_min <= 0):
            raise ValueError("learning rates must stay positive")


def lr_at(schedule, epoch):
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if schedule.kind == "constant":
        return schedule.lr_max
    if schedule.kind == "step":
        return schedule.lr_max * schedule.gamma ** (epoch // schedule.period)
    phase = math.pi * (epoch % schedule.t0) / schedule.t0
    return schedule.eta_min + (schedule.lr_max - schedule.eta_min) * (1.0 + math.cos(phase)) / 2.0
