"""The training loop: curriculum-sampled batches, group rollouts, accuracy-scaled KL."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .akl import RhoFunction, batch_mean_accuracy, beta_effective
from .core import ConfigError, GroupResult, RhoVariant, TrainConfig, seeded_rng, validate_config
from .estimators import ObjectiveBreakdown, batch_objective, group_advantages, objective_gradient
from .gcs import (
    CurriculumWeights,
    PassRateTable,
    TraceRow,
    apply_step_updates,
    compute_weights,
    sample_batch,
    uniform_weights,
)
from .testbed import PolicyLogprobs, PolicyParams, QuestionBank, sample_group

__all__ = ["InvariantError", "StepRecord", "RunResult", "train", "ablation_matrix", "ABLATION_ARMS", "arm_config"]


class InvariantError(RuntimeError):
    """An internal consistency check failed during a run."""


@dataclass(frozen=True)
class StepRecord:
    step: int
    question_ids: tuple[str, ...]
    batch_accuracy: float
    n_rollouts: int
    beta_eff: float
    objective: ObjectiveBreakdown
    mean_abs_advantage: float
    pass_rates: tuple[tuple[str, float], ...]
    wall_clock_s: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        # Wall-clock time is left out so metrics files stay byte-reproducible.
        return {
            "step": self.step,
            "question_ids": list(self.question_ids),
            "batch_accuracy": self.batch_accuracy,
            "n_rollouts": self.n_rollouts,
            "beta_eff": self.beta_eff,
            "surrogate": self.objective.surrogate,
            "kl_estimate": self.objective.kl_estimate,
            "total": self.objective.total,
            "mean_abs_advantage": self.mean_abs_advantage,
            "pass_rates": dict(self.pass_rates),
        }


@dataclass(frozen=True)
class RunResult:
    config: TrainConfig
    params: PolicyParams
    steps: tuple[StepRecord, ...]
    table: PassRateTable
    trace: tuple[TraceRow, ...] = ()


StepObserver = Callable[[StepRecord, PassRateTable, CurriculumWeights], None]


def _check_ratios_at_rollout(provider: PolicyLogprobs, groups) -> None:
    for g in groups:
        lp, lp_old, _ = provider(g)
        if not np.array_equal(lp, lp_old):
            raise InvariantError(f"importance ratio differs from 1 at rollout time for {g.question_id}")


def train(
    cfg: TrainConfig,
    bank: QuestionBank,
    init: PolicyParams,
    *,
    total_steps: Optional[int] = None,
    observer: Optional[StepObserver] = None,
) -> RunResult:
    """Run the training loop for ``cfg.total_steps`` steps (or ``total_steps`` if given, which may be 0).

    ``init`` doubles as the frozen reference policy.  Rollouts at step ``t``
    come from the parameters at the start of that step, and exactly one
    gradient-ascent step is applied per batch.
    """
    validate_config(cfg)
    T = cfg.total_steps if total_steps is None else total_steps
    if T < 0:
        raise ValueError("total_steps must be non-negative")
    if cfg.group_size < 2:
        raise ConfigError(["group_size: training needs at least 2 rollouts per question"])
    if len(bank) == 0:
        raise ValueError("empty question bank")
    if cfg.batch_size > len(bank):
        raise ConfigError([f"batch_size: {cfg.batch_size} exceeds bank size {len(bank)}"])
    if init.shape != (bank.L, bank.V, bank.F):
        raise ValueError(f"initial policy shape {init.shape} does not match bank ({bank.L}, {bank.V}, {bank.F})")

    ref = init.with_temperature(cfg.sampling_temperature)
    params = ref
    rho = RhoFunction.from_variant(cfg.rho_variant)
    table = PassRateTable.initial(bank.ids)
    uniform = uniform_weights(bank.ids) if cfg.sampler_variant == "uniform" else None
    records: list[StepRecord] = []
    trace: list[TraceRow] = []

    for t in range(1, T + 1):
        started = time.perf_counter()
        weights = uniform if uniform is not None else compute_weights(
            table, cfg.curriculum_mean, cfg.curriculum_std
        )
        batch = sample_batch(weights, cfg.batch_size, seeded_rng(cfg.seed, f"sampler/{t}"))

        groups: list[GroupResult] = [
            sample_group(params, bank[q], cfg.group_size, seeded_rng(cfg.seed, f"rollout/{t}/{q}"))
            for q in batch
        ]
        advantages = np.concatenate([group_advantages(g.rewards, cfg.adv_eps) for g in groups])
        table = apply_step_updates(table, groups, cfg.ema_factor)

        acc = batch_mean_accuracy(groups)
        beta_eff = beta_effective(cfg.base_kl_coeff, acc, rho)

        provider = PolicyLogprobs(params, ref, bank)
        _check_ratios_at_rollout(provider, groups)
        breakdown = batch_objective(groups, provider, beta_eff, cfg.clip_threshold, cfg.adv_eps)
        grad = objective_gradient(groups, provider, beta_eff, cfg.clip_threshold, cfg.adv_eps)
        params = params.stepped(grad, cfg.learning_rate)

        for g in groups:
            i = table.index(g.question_id)
            trace.append(
                TraceRow(t, g.question_id, g.empirical_pass_rate, float(table.values[i]), float(weights.weights[i]))
            )
        record = StepRecord(
            step=t,
            question_ids=tuple(batch),
            batch_accuracy=acc.value,
            n_rollouts=acc.n_rollouts,
            beta_eff=beta_eff,
            objective=breakdown,
            mean_abs_advantage=float(np.abs(advantages).mean()),
            pass_rates=tuple((g.question_id, g.empirical_pass_rate) for g in groups),
            wall_clock_s=time.perf_counter() - started,
        )
        records.append(record)
        if observer is not None:
            observer(record, table, weights)

    return RunResult(cfg, params, tuple(records), table, tuple(trace))


ABLATION_ARMS = ("grpo", "akl_only", "gcs_only", "full")


def arm_config(cfg: TrainConfig, arm: str) -> TrainConfig:
    """Config for one ablation arm: the AKL switch picks rho, the GCS switch picks the sampler."""
    akl, gcs = {
        "grpo": (False, False),
        "akl_only": (True, False),
        "gcs_only": (False, True),
        "full": (True, True),
    }[arm]
    return cfg.replace(
        rho_variant=RhoVariant.tanh_shifted() if akl else RhoVariant.constant(1.0),
        sampler_variant="gaussian_curriculum" if gcs else "uniform",
    )


def ablation_matrix(cfg: TrainConfig, bank: QuestionBank, init: PolicyParams, **kwargs) -> dict[str, RunResult]:
    """GRPO, AKL without GCS, GCS without AKL, and both; shared seed, bank and init."""
    return {arm: train(arm_config(cfg, arm), bank, init, **kwargs) for arm in ABLATION_ARMS}
