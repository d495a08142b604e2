"""Closed-form learning-rate trajectories and batch bookkeeping.

Every schedule is a pure function of ``(step, spec)``; the torch scheduler
returned by :func:`make_scheduler` calls the same functions, so iterating a
scheduler and evaluating a step directly give bitwise-identical rates.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import torch

from .exceptions import ConfigurationError, InvalidInputError

KINDS = ("warmup_interval_decay", "warmup_cosine")


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str
    init_lr: float
    peak_lr: float
    floor_lr: float
    warmup_steps: int
    total_steps: int
    interval_steps: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        rates = (self.init_lr, self.peak_lr, self.floor_lr)
        if not all(math.isfinite(r) and r >= 0 for r in rates):
            raise ConfigurationError("learning rates must be finite and non-negative")
        if not self.floor_lr <= self.peak_lr:
            raise ConfigurationError("floor_lr must not exceed peak_lr")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigurationError("need 0 <= warmup_steps <= total_steps")
        if self.kind == "warmup_interval_decay":
            iv = self.interval_steps
            if iv is None or iv < 1:
                raise ConfigurationError("interval decay needs interval_steps >= 1")
            if self.total_steps % iv:
                raise ConfigurationError("total_steps must be a whole number of intervals")
            if self.warmup_steps and self.warmup_steps >= iv:
                raise ConfigurationError("warmup must finish inside the first interval")

    def rescaled(self, total_steps: int) -> "ScheduleSpec":
        """Same shape over a new horizon (desk-scale runs)."""
        frac = total_steps / self.total_steps
        warmup = min(int(round(self.warmup_steps * frac)), total_steps)
        interval = self.interval_steps
        if interval is not None:
            n = self.total_steps // interval
            if total_steps % n:
                raise ConfigurationError(f"{total_steps} steps do not split into {n} intervals")
            interval = total_steps // n
            if warmup >= interval:
                warmup = interval - 1
        return replace(self, total_steps=total_steps, warmup_steps=warmup, interval_steps=interval)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_step(step: int, spec: ScheduleSpec) -> None:
    if not 0 <= step <= spec.total_steps:
        raise InvalidInputError(f"step {step} outside [0, {spec.total_steps}]")


def _warmup(step: int, spec: ScheduleSpec) -> float:
    return spec.init_lr + (spec.peak_lr - spec.init_lr) * step / spec.warmup_steps


def plip_lr(step: int, spec: ScheduleSpec) -> float:
    """Linear warmup, then geometric decay once per interval down to ``floor_lr``.

    Interval boundaries sit at multiples of ``interval_steps`` from step 0
    (epoch ends). The per-interval factor is ``(floor/peak) ** (1/n)`` so the
    last boundary, ``total_steps``, lands on the floor.
    """
    _check_step(step, spec)
    if step < spec.warmup_steps:
        return _warmup(step, spec)
    if spec.peak_lr == 0:
        return 0.0
    n = spec.total_steps // spec.interval_steps
    k = step // spec.interval_steps
    if k == n:
        return spec.floor_lr
    return spec.peak_lr * (spec.floor_lr / spec.peak_lr) ** (k / n)


def warmup_cosine(step: int, spec: ScheduleSpec) -> float:
    _check_step(step, spec)
    if step < spec.warmup_steps:
        return _warmup(step, spec)
    span = spec.total_steps - spec.warmup_steps
    if span == 0:
        return spec.peak_lr
    progress = (step - spec.warmup_steps) / span
    return spec.floor_lr + (spec.peak_lr - spec.floor_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def lr_at(step: int, spec: ScheduleSpec) -> float:
    if spec.kind == "warmup_interval_decay":
        return plip_lr(step, spec)
    return warmup_cosine(step, spec)


def effective_batch(micro_batch: int, accum: int, workers: int) -> int:
    if min(micro_batch, accum, workers) < 1:
        raise InvalidInputError("micro_batch, accum and workers must all be >= 1")
    return micro_batch * accum * workers


def make_scheduler(optimizer: torch.optim.Optimizer, specs: list[ScheduleSpec]):
    """LambdaLR whose per-group multiplier is the absolute rate (base lr set to 1)."""
    if len(specs) != len(optimizer.param_groups):
        raise ConfigurationError("need exactly one ScheduleSpec per optimizer param group")
    for group in optimizer.param_groups:
        group["lr"] = 1.0
        group["initial_lr"] = 1.0
    lambdas = [lambda s, spec=spec: lr_at(min(s, spec.total_steps), spec) for spec in specs]
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambdas)


def schedule_from_dict(d: dict) -> ScheduleSpec:
    try:
        return ScheduleSpec(**d)
    except TypeError as e:
        raise ConfigurationError(f"bad schedule fields: {e}") from None


# Reported trajectories. Epoch-sized horizons are placeholders; callers
# rescale them to their dataset with ``rescaled``.
PLIP_STEPS_PER_EPOCH = 4310  # ceil(827,401 / (4 * 48))
PLIP_DEFAULT = ScheduleSpec(
    kind="warmup_interval_decay",
    init_lr=1e-5,
    peak_lr=1e-4,
    floor_lr=5e-5,
    warmup_steps=1000,
    total_steps=30 * PLIP_STEPS_PER_EPOCH,
    interval_steps=PLIP_STEPS_PER_EPOCH,
)
ALIGN_STEPS = 9 * math.ceil(518_413 / 576)
FINETUNE_STEPS = 12 * math.ceil(35_543 / 384)
STAGE2_CONNECTOR = ScheduleSpec(
    kind="warmup_cosine", init_lr=1e-5, peak_lr=1e-4, floor_lr=0.0,
    warmup_steps=round(0.03 * ALIGN_STEPS), total_steps=ALIGN_STEPS,
)
STAGE2_LORA = STAGE2_CONNECTOR
STAGE3_CONNECTOR = ScheduleSpec(
    kind="warmup_cosine", init_lr=1e-5, peak_lr=1e-4, floor_lr=1e-6,
    warmup_steps=round(0.03 * FINETUNE_STEPS), total_steps=FINETUNE_STEPS,
)
STAGE3_LORA = ScheduleSpec(
    kind="warmup_cosine", init_lr=1e-5, peak_lr=2e-4, floor_lr=1e-6,
    warmup_steps=round(0.03 * FINETUNE_STEPS), total_steps=FINETUNE_STEPS,
)
