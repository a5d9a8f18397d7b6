"""Gaussian curriculum sampling over EMA-smoothed per-question pass rates."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import GroupResult

__all__ = [
    "PassRateTable",
    "CurriculumWeights",
    "ema_update",
    "apply_step_updates",
    "gaussian_weight",
    "compute_weights",
    "uniform_weights",
    "sample_batch",
    "TRACE_COLUMNS",
    "TraceRow",
    "write_trace",
    "read_trace",
    "summarize_trace",
    "frontier_mass",
]


@dataclass(frozen=True)
class PassRateTable:
    """Smoothed pass rate per question, stored in bank order."""

    ids: tuple[str, ...]
    values: np.ndarray
    step: int = 0
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (len(self.ids),):
            raise ValueError("one pass rate per question is required")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("question ids must be unique")
        if np.any((values < 0.0) | (values > 1.0)):
            raise ValueError("pass rates must lie in [0, 1]")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_index", {q: i for i, q in enumerate(self.ids)})

    @classmethod
    def initial(cls, ids: Iterable[str], value: float = 0.5) -> PassRateTable:
        ids = tuple(ids)
        return cls(ids, np.full(len(ids), value))

    @property
    def entries(self) -> dict[str, float]:
        return dict(zip(self.ids, self.values.tolist()))

    def __getitem__(self, qid: str) -> float:
        return float(self.values[self._index[qid]])

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, qid: str) -> int:
        return self._index[qid]

    def __eq__(self, other):
        if not isinstance(other, PassRateTable):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.step == other.step
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


@dataclass(frozen=True)
class CurriculumWeights:
    ids: tuple[str, ...]
    weights: np.ndarray
    normalizer: float

    @property
    def probabilities(self) -> np.ndarray:
        """Single-draw sampling distribution ``w / Z``."""
        return self.weights / self.normalizer

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.ids, self.weights.tolist()))


def ema_update(p_prev: float, p_emp: float, alpha: float) -> float:
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha!r}")
    if not (0.0 <= p_prev <= 1.0 and 0.0 <= p_emp <= 1.0):
        raise ValueError("pass rates must lie in [0, 1]")
    p = alpha * p_prev + (1.0 - alpha) * p_emp
    # Convex combination; clamp only guards the last ulp.
    return min(max(p, 0.0), 1.0)


def apply_step_updates(
    table: PassRateTable, groups: Sequence[GroupResult], alpha: float
) -> PassRateTable:
    """EMA-update the sampled questions; all other entries carry over unchanged."""
    seen = set()
    values = table.values.copy()
    for g in groups:
        if g.question_id not in table._index:
            raise KeyError(f"unknown question id {g.question_id!r}")
        if g.question_id in seen:
            raise ValueError(f"question {g.question_id!r} appears twice in one batch")
        seen.add(g.question_id)
        i = table._index[g.question_id]
        values[i] = ema_update(float(values[i]), g.empirical_pass_rate, alpha)
    return PassRateTable(table.ids, values, table.step + 1)


def gaussian_weight(p_tilde, mu_c: float = 0.5, sigma_c: float = 0.35):
    """Unnormalised Gaussian kernel ``exp(-(p - mu)^2 / (2 sigma^2))``; works on arrays."""
    if not sigma_c > 0:
        raise ValueError("sigma_c must be positive")
    z = np.exp(-((np.asarray(p_tilde, dtype=np.float64) - mu_c) ** 2) / (2.0 * sigma_c**2))
    return float(z) if np.ndim(z) == 0 else z


def compute_weights(table: PassRateTable, mu_c: float = 0.5, sigma_c: float = 0.35) -> CurriculumWeights:
    if len(table) == 0:
        raise ValueError("empty pass-rate table")
    w = gaussian_weight(table.values, mu_c, sigma_c)
    return CurriculumWeights(table.ids, w, math.fsum(w.tolist()))


def uniform_weights(ids: Sequence[str]) -> CurriculumWeights:
    ids = tuple(ids)
    if not ids:
        raise ValueError("no questions to weight")
    return CurriculumWeights(ids, np.ones(len(ids)), float(len(ids)))


def sample_batch(weights: CurriculumWeights, batch_size: int, rng: np.random.Generator) -> list[str]:
    """Draw ``batch_size`` distinct ids, renormalising over the remainder after each draw.

    The first draw follows ``w / Z`` exactly.
    """
    n = len(weights.ids)
    if batch_size < 1 or batch_size > n:
        raise ValueError(f"batch_size must lie in [1, {n}], got {batch_size}")
    w = np.array(weights.weights, dtype=np.float64)
    chosen = []
    for _ in range(batch_size):
        cum = np.cumsum(w)
        if cum[-1] <= 0.0:
            # Every remaining kernel value underflowed (tiny sigma): draw uniformly from what is left.
            w = np.where(np.isin(np.arange(n), [weights.ids.index(q) for q in chosen]), 0.0, 1.0)
            cum = np.cumsum(w)
        u = rng.random() * cum[-1]
        i = int(np.searchsorted(cum, u, side="right"))
        # Guard against u landing on the end of the cumsum through rounding.
        i = min(i, n - 1)
        while w[i] == 0.0:
            i -= 1
        chosen.append(weights.ids[i])
        w[i] = 0.0
    return chosen


TRACE_COLUMNS = ("step", "question_id", "p_emp", "p_tilde_after", "weight", "sampled_flag")


@dataclass(frozen=True)
class TraceRow:
    step: int
    question_id: str
    p_emp: float
    p_tilde_after: float
    weight: float
    sampled_flag: int = 1

    def as_row(self) -> list:
        return [self.step, self.question_id, repr(self.p_emp), repr(self.p_tilde_after), repr(self.weight), self.sampled_flag]


def write_trace(path, rows: Iterable[TraceRow], header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for row in rows:
            writer.writerow(row.as_row())


def read_trace(path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
        raise ValueError(f"{path}: unexpected trace columns {reader.fieldnames}")
    return [
        TraceRow(
            int(r["step"]),
            r["question_id"],
            float(r["p_emp"]),
            float(r["p_tilde_after"]),
            float(r["weight"]),
            int(r["sampled_flag"]),
        )
        for r in reader
    ]


def summarize_trace(rows: Sequence[TraceRow], band: float = 0.15) -> list[dict]:
    """Per-step summary of the weights and smoothed pass rates of sampled questions.

    ``frontier_frac`` counts questions whose updated pass rate lies within
    ``band`` of 0.5.
    """
    by_step: dict[int, list[TraceRow]] = {}
    for r in rows:
        by_step.setdefault(r.step, []).append(r)
    out = []
    for step in sorted(by_step):
        rs = by_step[step]
        w = np.array([r.weight for r in rs])
        p = np.array([r.p_tilde_after for r in rs])
        out.append(
            {
                "step": step,
                "n_sampled": len(rs),
                "weight_mean": float(w.mean()),
                "weight_min": float(w.min()),
                "weight_max": float(w.max()),
                "p_tilde_mean": float(p.mean()),
                "frontier_frac": float(np.mean(np.abs(p - 0.5) <= band)),
                "p_emp_mean": float(np.mean([r.p_emp for r in rs])),
            }
        )
    return out


def frontier_mass(weights: CurriculumWeights, members: Mapping[str, bool] | Iterable[str]) -> float:
    """Single-draw probability mass falling on ``members``."""
    members = set(members)
    probs = weights.probabilities
    return float(sum(p for q, p in zip(weights.ids, probs.tolist()) if q in members))
