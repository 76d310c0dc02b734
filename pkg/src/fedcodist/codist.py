"""Server-side codistillation between the small and large server models.

Two strategies are provided on top of dual-pool FedAvg:

* periodic: every ``period_p`` rounds both models are distilled into each other
  for ``steps_s`` steps, replaced by their students, and their server Adam
  moments are reset.
* merged: every round, the parameter change produced by distillation is
  rescaled to the norm of the FedAvg gradient and blended with it using
  ``alpha`` before the server step.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal, Optional

import numpy as np

from .errors import InvalidAlpha, NoDistillationData
from .fedcore import (
    AggregatedGradient,
    DualPoolSetup,
    DualState,
    ModelState,
    RoundHook,
    stream_rng,
)
from .numerics import Batch, MlpSpec, ParamVector, backprop, forward_logits, mixup, softmax_temp
from .optim import AdamState, LinearSchedule, adam_step, reset_moments, schedule_lr


@dataclass(frozen=True)
class DistillConfig:
    """Per-student distillation settings.

    ``self_reg_lambda`` mixes the student's own round-start soft labels into the
    target. With ``student_temperature`` the student's logits are divided by
    ``temperature_cross`` inside the KL, otherwise the student uses T=1.
    """

    temperature_cross: float = 1.0
    temperature_self: float = 1.0
    self_reg_lambda: float = 0.0
    steps_s: int = 32
    distill_batch_size: int = 64
    student_lr_schedule: LinearSchedule = LinearSchedule(1e-3, 1)
    student_temperature: bool = True
    mixup_beta: Optional[float] = None

    def __post_init__(self):
        if not (self.temperature_cross > 0 and self.temperature_self > 0):
            raise ValueError("temperatures must be positive")
        if not 0.0 <= self.self_reg_lambda <= 1.0:
            raise ValueError("self_reg_lambda must lie in [0, 1]")
        if self.steps_s < 0 or self.distill_batch_size < 1:
            raise ValueError("steps_s must be >= 0 and distill_batch_size >= 1")
        if self.mixup_beta is not None and not self.mixup_beta > 0:
            raise ValueError("mixup_beta must be positive")


@dataclass(frozen=True)
class CodistSchedule:
    mode: Literal["periodic", "merged"]
    period_p: int = 200
    steps_s: Optional[int] = None
    alpha: float = 0.5
    # skip distillation entirely when alpha == 1 (its result would be discarded)
    skip_distill_at_alpha_one: bool = False

    def __post_init__(self):
        if self.mode not in ("periodic", "merged"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.steps_s is None:
            object.__setattr__(self, "steps_s", 200 if self.mode == "periodic" else 32)
        if self.period_p < 1 or self.steps_s < 0:
            raise ValueError("period_p must be positive and steps_s non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidAlpha(f"alpha must lie in [0, 1], got {self.alpha}")


def build_targets(
    spec: MlpSpec,
    teacher_cross: ParamVector,
    teacher_self: ParamVector,
    batch: Batch,
    cfg: DistillConfig,
    self_spec: Optional[MlpSpec] = None,
) -> np.ndarray:
    """``(1 - lam) * p_cross + lam * p_self`` on the batch features.

    Evaluated as ``p_cross + lam * (p_self - p_cross)`` so that matching
    distributions give bit-identical targets for any ``lam``.

    ``spec`` describes ``teacher_cross``; ``self_spec`` (default ``spec``)
    describes ``teacher_self``, the student's frozen round-start parameters.
    """
    self_spec = spec if self_spec is None else self_spec
    lam = cfg.self_reg_lambda
    p_cross = softmax_temp(forward_logits(spec, teacher_cross, batch.features), cfg.temperature_cross)
    if lam == 0.0:
        return p_cross
    p_self = softmax_temp(forward_logits(self_spec, teacher_self, batch.features), cfg.temperature_self)
    if lam == 1.0:
        return p_self
    return p_cross + lam * (p_self - p_cross)


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index chunks over a reshuffled range(n)."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]


def distill(
    spec_student: MlpSpec,
    student_init: ParamVector,
    spec_teacher: MlpSpec,
    teacher_cross: ParamVector,
    distill_data: Batch,
    cfg: DistillConfig,
    round: int,
    rng: np.random.Generator,
) -> ParamVector:
    """Run ``cfg.steps_s`` Adam steps on ``KL(targets || student)``.

    ``round`` indexes ``cfg.student_lr_schedule``. A fresh Adam state is used
    for each call; teachers are never modified.
    """
    if spec_student.num_classes != spec_teacher.num_classes:
        raise ValueError("student and teacher must share num_classes")
    if cfg.steps_s == 0:
        return student_init
    if distill_data is None or len(distill_data) == 0:
        raise NoDistillationData("distillation set is empty")
    lr = schedule_lr(cfg.student_lr_schedule, round)
    T_student = cfg.temperature_cross if cfg.student_temperature else 1.0
    features = Batch(distill_data.features)

    student = student_init
    state = AdamState.fresh(student_init)
    chunks = _minibatches(len(features), cfg.distill_batch_size, rng)
    for _ in range(cfg.steps_s):
        mb = features.take(next(chunks))
        if cfg.mixup_beta is not None:
            mb = mixup(mb, mb.take(rng.permutation(len(mb))), cfg.mixup_beta, rng)
        targets = build_targets(
            spec_teacher, teacher_cross, student_init, mb, cfg, self_spec=spec_student
        )
        _, grad = backprop(spec_student, student, mb, "kl_to_target", targets, T_student)
        student, state = adam_step(student, grad, state, lr)
    return student


def distillation_gradient(theta_round_start: ParamVector, theta_student: ParamVector) -> ParamVector:
    return theta_round_start - theta_student


def merge_gradients(g: ParamVector, delta: ParamVector, alpha: float) -> ParamVector:
    """``alpha * g + (1 - alpha) * delta * |g| / |delta|`` with global L2 norms.

    A zero ``delta`` contributes nothing (result ``alpha * g``); a zero ``g``
    gives a zero result.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InvalidAlpha(f"alpha must lie in [0, 1], got {alpha}")
    g.check_compatible(delta)
    if alpha == 1.0:
        return g
    g_norm = g.norm()
    d_norm = delta.norm()
    if g_norm == 0.0:
        return g.zeros_like()
    if d_norm == 0.0:
        return g * alpha
    return g.with_values(alpha * g.values + ((1.0 - alpha) * g_norm / d_norm) * delta.values)


def _codistill(
    setup: DualPoolSetup,
    state: DualState,
    t: int,
    distill_small: DistillConfig,
    distill_large: DistillConfig,
    distill_data: Batch,
) -> tuple[ParamVector, ParamVector]:
    """Distill both models into each other from frozen round-``t`` teachers."""
    teacher_small = state.small.params
    teacher_large = state.large.params
    student_small = distill(
        setup.small_spec, teacher_small, setup.large_spec, teacher_large, distill_data,
        distill_small, t - 1, stream_rng(setup.seed, "distill_small", t),
    )
    student_large = distill(
        setup.large_spec, teacher_large, setup.small_spec, teacher_small, distill_data,
        distill_large, t - 1, stream_rng(setup.seed, "distill_large", t),
    )
    return student_small, student_large


def run_periodic_codist(
    setup: DualPoolSetup,
    init: DualState,
    total_rounds: int,
    schedule: CodistSchedule,
    distill_small: DistillConfig,
    distill_large: DistillConfig,
    distill_data: Batch,
    hook: Optional[RoundHook] = None,
) -> DualState:
    if schedule.mode != "periodic":
        raise ValueError("schedule.mode must be 'periodic'")
    distill_small = replace(distill_small, steps_s=schedule.steps_s)
    distill_large = replace(distill_large, steps_s=schedule.steps_s)
    state = init
    if hook:
        hook(0, state, False)
    for t in range(1, total_rounds + 1):
        state = setup.fedavg_step(state, t)
        codistilled = t % schedule.period_p == 0
        if codistilled:
            students = _codistill(setup, state, t, distill_small, distill_large, distill_data)
            state = DualState(
                ModelState(students[0], reset_moments(state.small.server_state)),
                ModelState(students[1], reset_moments(state.large.server_state)),
            )
        if hook:
            hook(t, state, codistilled)
    return state


def run_merged_codist(
    setup: DualPoolSetup,
    init: DualState,
    total_rounds: int,
    schedule: CodistSchedule,
    distill_small: DistillConfig,
    distill_large: DistillConfig,
    distill_data: Batch,
    hook: Optional[RoundHook] = None,
) -> DualState:
    if schedule.mode != "merged":
        raise ValueError("schedule.mode must be 'merged'")
    distill_small = replace(distill_small, steps_s=schedule.steps_s)
    distill_large = replace(distill_large, steps_s=schedule.steps_s)
    skip = schedule.skip_distill_at_alpha_one and schedule.alpha == 1.0
    state = init
    if hook:
        hook(0, state, False)
    for t in range(1, total_rounds + 1):
        g_small, g_large = setup.client_gradients(state, t)
        if not skip:
            student_small, student_large = _codistill(
                setup, state, t, distill_small, distill_large, distill_data
            )
            merged_small = merge_gradients(
                g_small.value, distillation_gradient(state.small.params, student_small), schedule.alpha
            )
            merged_large = merge_gradients(
                g_large.value, distillation_gradient(state.large.params, student_large), schedule.alpha
            )
            g_small = AggregatedGradient(merged_small, g_small.total_examples)
            g_large = AggregatedGradient(merged_large, g_large.total_examples)
        state = setup.apply(state, t, g_small, g_large)
        if hook:
            hook(t, state, not skip)
    return state
