"""pass@1 / pass@k measurement from a shared k-sample budget."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .testbed import PolicyParams, QuestionBank, sample_rollouts

__all__ = ["EvalReport", "evaluate", "report_from_rewards", "exploration_gap", "DEFAULT_EVAL_TEMPERATURE"]

DEFAULT_EVAL_TEMPERATURE = 0.6


@dataclass(frozen=True, eq=False)
class EvalReport:
    question_ids: tuple[str, ...]
    rewards: np.ndarray  # (n_questions, k) binary
    k: int
    temperature: float

    def __post_init__(self):
        r = np.array(self.rewards, dtype=np.int64)
        if r.ndim != 2 or r.shape != (len(self.question_ids), self.k):
            raise ValueError("rewards must have shape (n_questions, k)")
        if not np.all((r == 0) | (r == 1)):
            raise ValueError("rewards must be binary")
        r.flags.writeable = False
        object.__setattr__(self, "rewards", r)

    @property
    def pass1(self) -> np.ndarray:
        return self.rewards.sum(axis=1) / self.k

    @property
    def passk(self) -> np.ndarray:
        return self.rewards.max(axis=1).astype(np.float64)

    @property
    def mean_pass1(self) -> float:
        return float(self.pass1.mean())

    @property
    def mean_passk(self) -> float:
        return float(self.passk.mean())

    def prefix(self, k: int) -> EvalReport:
        """Report restricted to the first ``k`` samples of each question's pool."""
        if not 1 <= k <= self.k:
            raise ValueError(f"k must lie in [1, {self.k}]")
        return EvalReport(self.question_ids, self.rewards[:, :k], k, self.temperature)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "temperature": self.temperature,
            "mean_pass1": self.mean_pass1,
            "mean_passk": self.mean_passk,
            "exploration_gap": exploration_gap(self),
            "questions": [
                {"id": q, "rewards": r.tolist(), "pass1": p1, "passk": pk}
                for q, r, p1, pk in zip(self.question_ids, self.rewards, self.pass1.tolist(), self.passk.tolist())
            ],
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["question_id", "pass1", "passk"])
            for q, p1, pk in zip(self.question_ids, self.pass1.tolist(), self.passk.tolist()):
                w.writerow([q, repr(p1), repr(pk)])


def report_from_rewards(question_ids, rewards, temperature: float = DEFAULT_EVAL_TEMPERATURE) -> EvalReport:
    rewards = np.asarray(rewards)
    return EvalReport(tuple(question_ids), rewards, rewards.shape[1], temperature)


def evaluate(
    params: PolicyParams,
    bank: QuestionBank,
    k: int,
    temperature: float = DEFAULT_EVAL_TEMPERATURE,
    rng: np.random.Generator | None = None,
) -> EvalReport:
    """Draw ``k`` independent rollouts per question at ``temperature`` and score them."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if rng is None:
        raise ValueError("an explicit random stream is required")
    policy = params.with_temperature(temperature)
    rewards = np.array(
        [[r.reward for r in sample_rollouts(policy, q, k, rng)] for q in bank], dtype=np.int64
    ).reshape(len(bank), k)
    return EvalReport(bank.ids, rewards, k, temperature)


def exploration_gap(report: EvalReport) -> float:
    return report.mean_passk - report.mean_pass1
