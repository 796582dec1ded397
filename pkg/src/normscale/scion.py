"""Scion optimizer: momentum, per-group duality maps, LR schedule and weight decay."""

import enum
from dataclasses import dataclass, field

import numpy as np

from .lmo import DEFAULT_NS, NewtonSchulzConfig, batched_lmo, dual
from .norms import NormKind


class LayerGroup(str, enum.Enum):
    INPUT = "input"
    HIDDEN = "hidden"
    OUTPUT = "output"


DEFAULT_NORMS = {
    LayerGroup.INPUT: NormKind.ONE_TO_RMS,
    LayerGroup.HIDDEN: NormKind.RMS_TO_RMS,
    LayerGroup.OUTPUT: NormKind.RMS_TO_INF,
}


@dataclass(frozen=True)
class ParamGroup:
    name: str
    layer_group: LayerGroup
    norm: NormKind
    lr_scale: float = 1.0

    def __post_init__(self):
        if self.lr_scale <= 0:
            raise ValueError(f"lr_scale must be positive, got {self.lr_scale}")


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "constant"
    total_horizon: float | None = None
    decay_fraction: float = 0.25

    def __post_init__(self):
        if self.kind not in ("constant", "linear-decay-tail"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind != "constant" and not self.total_horizon:
            raise ValueError("a decaying schedule needs total_horizon")
        if not 0 < self.decay_fraction <= 1:
            raise ValueError("decay_fraction must be in (0, 1]")


def lr_at(schedule: ScheduleSpec, tokens_seen: float, base_lr: float) -> float:
    """Learning rate after ``tokens_seen`` tokens; no warmup.

    The decaying schedule holds ``base_lr`` and ramps linearly to zero over the
    final ``decay_fraction`` of ``total_horizon``.
    """
    if tokens_seen < 0:
        raise ValueError("tokens_seen must be nonnegative")
    T = schedule.total_horizon
    if T is not None and tokens_seen > T:
        raise ValueError(f"tokens_seen={tokens_seen} exceeds total horizon {T}")
    if schedule.kind == "constant":
        return base_lr
    decay_start = (1.0 - schedule.decay_fraction) * T
    if tokens_seen < decay_start:
        return base_lr
    return base_lr * (T - tokens_seen) / (schedule.decay_fraction * T)


@dataclass
class ScionState:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    ns: NewtonSchulzConfig = DEFAULT_NS
    nesterov: bool = False
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.nesterov:
            raise ValueError("Nesterov momentum is not supported")


def momentum_update(state: ScionState, name: str, grad):
    """``buffer <- (1 - mu) grad + mu buffer``; a fresh buffer starts at zero."""
    grad = np.asarray(grad)
    buf = state.buffers.get(name)
    if buf is not None and buf.shape != grad.shape:
        raise ValueError(f"{name}: gradient shape {grad.shape} != buffer shape {buf.shape}")
    mu = state.momentum
    if mu == 0.0:
        buf = grad.copy()
    elif buf is None:
        buf = (1.0 - mu) * grad
    else:
        buf = (1.0 - mu) * grad + mu * buf
    state.buffers[name] = buf
    return buf


def lmo_for(g, norm: NormKind, ns: NewtonSchulzConfig = DEFAULT_NS):
    """Duality map for a 2-D parameter or a 3-D expert batch."""
    if g.ndim == 3:
        return batched_lmo(g, norm, ns)
    return dual(g, norm, ns)


def apply_update(W, u, lr: float, weight_decay: float = 0.0):
    if weight_decay:
        return W - lr * (u + weight_decay * W)
    return W - lr * u


def check_coverage(params, groups):
    missing = [name for name in params if name not in groups]
    if missing:
        raise KeyError(f"parameters without a group: {missing}")


def scion_step(params: dict, grads: dict, state: ScionState, groups: dict, lr_at_step: float) -> dict:
    """One Scion update over every parameter.

    ``groups`` maps parameter name to ``ParamGroup``; each parameter moves by
    ``lr_at_step * group.lr_scale`` along the duality map of its momentum
    buffer. With ``state.weight_decay > 0`` the decoupled constrained form
    ``W <- W - lr (u + wd W)`` is used.
    """
    check_coverage(params, groups)
    new = {}
    for name, W in params.items():
        group = groups[name]
        buf = momentum_update(state, name, grads[name])
        u = lmo_for(buf, group.norm, state.ns)
        W_next = apply_update(W, u, lr_at_step * group.lr_scale, state.weight_decay)
        if not np.all(np.isfinite(W_next)):
            raise FloatingPointError(f"non-finite update for parameter {name!r}")
        new[name] = W_next
    return new
