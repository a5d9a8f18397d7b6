"""Group-relative advantages, the K3 KL estimator, the clipped surrogate and
the combined KL-regularised objective with its analytic gradient.

A *logprob provider* is any callable taking a :class:`GroupResult` and
returning three ``(G, L)`` float arrays ``(logp_theta, logp_old, logp_ref)``
for the realised tokens.  Entry ``[g, t]`` is the token triple for rollout
``g`` at position ``t``.  For :func:`objective_gradient` the provider must also
implement ``grad(group, coeffs)``, returning the gradient of
``sum(coeffs * logp_theta)`` with respect to its policy parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import GroupResult

__all__ = [
    "TokenLogprobTriple",
    "ObjectiveBreakdown",
    "group_advantages",
    "k3_estimate",
    "k3_terms",
    "clipped_token_term",
    "batch_objective",
    "objective_gradient",
]

LogprobProvider = Callable[[GroupResult], tuple[np.ndarray, np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class TokenLogprobTriple:
    logp_theta: float
    logp_old: float
    logp_ref: float

    def __post_init__(self):
        for name in ("logp_theta", "logp_old", "logp_ref"):
            v = getattr(self, name)
            if not math.isfinite(v) or v > 0:
                raise ValueError(f"{name} must be finite and <= 0, got {v!r}")


@dataclass(frozen=True)
class ObjectiveBreakdown:
    surrogate: float
    kl_estimate: float
    beta_eff_used: float
    total: float

    @classmethod
    def combine(cls, surrogate: float, kl_estimate: float, beta_eff: float) -> ObjectiveBreakdown:
        return cls(surrogate, kl_estimate, beta_eff, surrogate - beta_eff * kl_estimate)


def group_advantages(rewards: Sequence[int], eps_adv: float = 1e-8) -> np.ndarray:
    """Standardise a group's rewards by its mean and population std.

    Groups with identical rewards get exactly zero advantage.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError(f"a group needs at least 2 rewards, got {r.size}")
    if not np.all((r == 0.0) | (r == 1.0)):
        raise ValueError("rewards must be binary 0/1")
    mu = r.mean()
    sigma = math.sqrt(float(np.mean((r - mu) ** 2)))
    return (r - mu) / (sigma + eps_adv)


def k3_terms(logp_theta, logp_ref) -> np.ndarray:
    """Elementwise ``r - log r - 1`` with ``r = pi_ref / pi_theta``.

    Evaluated as ``expm1(d) - d`` so values near ``r = 1`` keep their sign.
    """
    d = np.asarray(logp_ref, dtype=np.float64) - np.asarray(logp_theta, dtype=np.float64)
    return np.maximum(np.expm1(d) - d, 0.0)


def k3_estimate(triple: TokenLogprobTriple) -> float:
    if not (math.isfinite(triple.logp_theta) and math.isfinite(triple.logp_ref)):
        raise ValueError("non-finite log-probability")
    return float(k3_terms(triple.logp_theta, triple.logp_ref))


def clipped_token_term(ratio: float, advantage: float, eps_clip: float) -> float:
    if not ratio > 0:
        raise ValueError(f"ratio must be positive, got {ratio!r}")
    if not 0 < eps_clip < 1:
        raise ValueError(f"eps_clip must lie in (0, 1), got {eps_clip!r}")
    clipped = min(max(ratio, 1.0 - eps_clip), 1.0 + eps_clip)
    return min(ratio * advantage, clipped * advantage)


def _ordered(groups: Sequence[GroupResult]) -> list[GroupResult]:
    groups = list(groups)
    if not groups:
        raise ValueError("empty batch")
    sizes = {len(g) for g in groups}
    if len(sizes) != 1:
        raise ValueError(f"all groups must share the same G, got sizes {sorted(sizes)}")
    # Fixed reduction order keeps floating-point sums run-invariant.
    return sorted(groups, key=lambda g: g.question_id)


def _group_terms(group, provider, beta_eff, eps_clip, eps_adv, n_rollouts, want_coeffs):
    lp, lp_old, lp_ref = (np.asarray(a, dtype=np.float64) for a in provider(group))
    expected = (len(group), len(group.rollouts[0].tokens))
    for name, arr in (("logp_theta", lp), ("logp_old", lp_old), ("logp_ref", lp_ref)):
        if arr.shape != expected:
            raise ValueError(
                f"provider does not cover every token of {group.question_id}: "
                f"{name} has shape {arr.shape}, expected {expected}"
            )
    adv = group_advantages(group.rewards, eps_adv)[:, None]
    ratio = np.exp(lp - lp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip) * adv
    surr = np.minimum(unclipped, clipped).mean(axis=1)
    kl = k3_terms(lp, lp_ref).mean(axis=1)
    coeffs = None
    if want_coeffs:
        # d/dlogp of min(): r*A where the unclipped branch is selected, else 0.
        d_surr = np.where(unclipped <= clipped, unclipped, 0.0)
        # d/dlogp of k3: -expm1(logp_ref - logp_theta).
        d_kl = -np.expm1(lp_ref - lp)
        coeffs = (d_surr - beta_eff * d_kl) / (expected[1] * n_rollouts)
    return surr, kl, coeffs


def batch_objective(
    groups: Sequence[GroupResult],
    logprob_provider: LogprobProvider,
    beta_eff: float,
    eps_clip: float,
    eps_adv: float = 1e-8,
) -> ObjectiveBreakdown:
    """Clipped surrogate minus ``beta_eff`` times the mean K3 estimate.

    Both terms average tokens within each rollout, then average rollouts.
    """
    ordered = _ordered(groups)
    n = sum(len(g) for g in ordered)
    surr, kl = [], []
    for g in ordered:
        s, k, _ = _group_terms(g, logprob_provider, beta_eff, eps_clip, eps_adv, n, False)
        surr.append(s)
        kl.append(k)
    return ObjectiveBreakdown.combine(
        float(np.concatenate(surr).mean()), float(np.concatenate(kl).mean()), beta_eff
    )


def objective_gradient(
    groups: Sequence[GroupResult],
    logprob_provider,
    beta_eff: float,
    eps_clip: float,
    eps_adv: float = 1e-8,
) -> np.ndarray:
    """Analytic gradient of ``batch_objective(...).total`` w.r.t. the provider's parameters.

    ``logp_old`` and ``logp_ref`` are constants; the clip contributes its
    zero subgradient wherever the clipped branch is the active minimum.
    """
    ordered = _ordered(groups)
    n = sum(len(g) for g in ordered)
    grad = None
    for g in ordered:
        _, _, coeffs = _group_terms(g, logprob_provider, beta_eff, eps_clip, eps_adv, n, True)
        contrib = logprob_provider.grad(g, coeffs)
        grad = contrib if grad is None else grad + contrib
    return grad
