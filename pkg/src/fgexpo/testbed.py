"""Synthetic verifiable-reward environment.

Each question carries a feature vector and a target token sequence.  The
policy is position-factored: at position ``t`` it draws a token from
``softmax(theta[t] @ x / temperature)``, independent of earlier tokens.  A
rollout earns reward 1 only if it reproduces the target exactly, so a
question's true success probability is the product of the per-position
target probabilities and is available in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import GroupResult, RolloutRecord

__all__ = [
    "Question",
    "QuestionBank",
    "PolicyParams",
    "generate_bank",
    "tiered_bank",
    "policy_logprobs",
    "position_logprobs",
    "sample_rollouts",
    "sample_group",
    "verify",
    "logprob_gradient",
    "success_probability",
    "PolicyLogprobs",
    "bank_to_dict",
    "bank_from_dict",
    "params_to_dict",
    "params_from_dict",
]

BANK_FORMAT = "fgexpo.bank/1"
PARAMS_FORMAT = "fgexpo.params/1"


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Question:
    id: str
    features: np.ndarray
    target: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen(self.features, np.float64))
        object.__setattr__(self, "target", tuple(int(t) for t in self.target))
        if self.features.ndim != 1:
            raise ValueError("features must be a vector")

    def __eq__(self, other):
        if not isinstance(other, Question):
            return NotImplemented
        return (
            self.id == other.id
            and self.target == other.target
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class QuestionBank:
    questions: tuple[Question, ...]
    F: int
    L: int
    V: int
    _by_id: dict = field(init=False, repr=False)

    def __post_init__(self):
        qs = tuple(self.questions)
        object.__setattr__(self, "questions", qs)
        ids = [q.id for q in qs]
        if len(set(ids)) != len(ids):
            raise ValueError("question ids must be unique")
        for q in qs:
            if q.features.shape != (self.F,):
                raise ValueError(f"{q.id}: expected {self.F} features")
            if len(q.target) != self.L:
                raise ValueError(f"{q.id}: expected target length {self.L}")
            if any(not 0 <= t < self.V for t in q.target):
                raise ValueError(f"{q.id}: target token outside vocabulary")
        object.__setattr__(self, "_by_id", {q.id: q for q in qs})

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(q.id for q in self.questions)

    def __getitem__(self, qid: str) -> Question:
        return self._by_id[qid]

    def __contains__(self, qid) -> bool:
        return qid in self._by_id

    def __len__(self) -> int:
        return len(self.questions)

    def __iter__(self):
        return iter(self.questions)

    def __eq__(self, other):
        if not isinstance(other, QuestionBank):
            return NotImplemented
        return (self.F, self.L, self.V) == (other.F, other.L, other.V) and self.questions == other.questions

    __hash__ = None


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Position-wise logit maps ``theta`` of shape ``(L, V, F)``."""

    theta: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        theta = _frozen(self.theta, np.float64)
        if theta.ndim != 3:
            raise ValueError("theta must have shape (L, V, F)")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        object.__setattr__(self, "theta", theta)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.theta.shape

    def with_temperature(self, temperature: float) -> PolicyParams:
        return PolicyParams(self.theta, temperature)

    def stepped(self, direction: np.ndarray, lr: float) -> PolicyParams:
        return PolicyParams(self.theta + lr * direction, self.temperature)

    def __eq__(self, other):
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return self.temperature == other.temperature and np.array_equal(self.theta, other.theta)

    __hash__ = None


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def position_logprobs(params: PolicyParams, q: Question) -> np.ndarray:
    """``(L, V)`` table of per-position token log-probabilities for ``q``."""
    return _log_softmax(params.theta @ q.features / params.temperature)


def _check_tokens(tokens, L: int, V: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape[-1] != L:
        raise ValueError(f"expected {L} tokens, got {tokens.shape[-1]}")
    if np.any((tokens < 0) | (tokens >= V)):
        raise ValueError("token outside vocabulary")
    return tokens


def policy_logprobs(params: PolicyParams, q: Question, tokens: Sequence[int]) -> np.ndarray:
    L, V, _ = params.shape
    tokens = _check_tokens(tokens, L, V)
    return position_logprobs(params, q)[np.arange(L), tokens]


def verify(tokens: Sequence[int], q: Question) -> int:
    if len(tokens) != len(q.target):
        raise ValueError(f"expected {len(q.target)} tokens, got {len(tokens)}")
    return int(all(int(a) == b for a, b in zip(tokens, q.target)))


def _draw_tokens(logp: np.ndarray, G: int, rng: np.random.Generator) -> np.ndarray:
    # Inverse-CDF draw per position; one uniform per (rollout, position).
    cum = np.cumsum(np.exp(logp), axis=1)
    u = rng.random((G, logp.shape[0])) * cum[:, -1]
    tokens = (u[:, :, None] >= cum[None, :, :]).sum(axis=2)
    return np.minimum(tokens, logp.shape[1] - 1)


def sample_rollouts(params: PolicyParams, q: Question, G: int, rng: np.random.Generator) -> list[RolloutRecord]:
    if G < 1:
        raise ValueError("G must be positive")
    logp = position_logprobs(params, q)
    tokens = _draw_tokens(logp, G, rng)
    lp = logp[np.arange(logp.shape[0])[None, :], tokens]
    target = np.asarray(q.target)
    rewards = np.all(tokens == target[None, :], axis=1)
    return [
        RolloutRecord(q.id, tuple(tokens[g].tolist()), tuple(lp[g].tolist()), int(rewards[g]))
        for g in range(G)
    ]


def sample_group(params: PolicyParams, q: Question, G: int, rng: np.random.Generator) -> GroupResult:
    return GroupResult(q.id, tuple(sample_rollouts(params, q, G, rng)))


def logprob_gradient(params: PolicyParams, q: Question, tokens, weights=None) -> np.ndarray:
    """Gradient of ``sum_t weights[t] * log pi(tokens[t])`` w.r.t. ``theta``.

    ``tokens`` may be a single sequence ``(L,)`` or a group ``(G, L)`` with
    matching ``weights``; unit weights give the summed log-prob gradient.
    """
    L, V, _ = params.shape
    tokens = _check_tokens(tokens, L, V)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    w = np.ones(tokens.shape) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), tokens.shape)
    probs = np.exp(position_logprobs(params, q))
    # Per position: sum_g w[g,t] * (onehot(tokens[g,t]) - probs[t]).
    coef = -w.sum(axis=0)[:, None] * probs
    np.add.at(coef, (np.broadcast_to(np.arange(L), tokens.shape), tokens), w)
    return coef[:, :, None] * q.features[None, None, :] / params.temperature


def success_probability(params: PolicyParams, q: Question) -> float:
    """Closed-form probability that one rollout reproduces the target."""
    logp = position_logprobs(params, q)
    return math.exp(float(logp[np.arange(len(q.target)), list(q.target)].sum()))


class PolicyLogprobs:
    """Logprob provider for the objective: current params against a frozen reference."""

    def __init__(self, params: PolicyParams, ref: PolicyParams, bank: QuestionBank):
        self.params = params
        self.ref = ref
        self.bank = bank
        self._tables: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def _tables_for(self, qid: str):
        if qid not in self._tables:
            q = self.bank[qid]
            self._tables[qid] = (position_logprobs(self.params, q), position_logprobs(self.ref, q))
        return self._tables[qid]

    def __call__(self, group: GroupResult):
        tokens = group.tokens
        L = self.params.shape[0]
        _check_tokens(tokens, L, self.params.shape[1])
        cur, ref = self._tables_for(group.question_id)
        pos = np.arange(L)[None, :]
        return cur[pos, tokens], group.logprob_old, ref[pos, tokens]

    def grad(self, group: GroupResult, coeffs) -> np.ndarray:
        return logprob_gradient(self.params, self.bank[group.question_id], group.tokens, coeffs)


def _ids(n: int) -> list[str]:
    width = max(4, len(str(n - 1)))
    return [f"q{i:0{width}d}" for i in range(n)]


def generate_bank(
    n: int,
    F: int,
    L: int,
    V: int,
    difficulty_spread: float,
    rng: np.random.Generator,
    *,
    init_scale: float = 8.0,
    temperature: float = 1.0,
) -> tuple[QuestionBank, PolicyParams]:
    """Random bank with mixed initial difficulty, plus the matching initial policy.

    Targets are the argmax of a hidden linear teacher's logits plus Gumbel
    noise of scale ``difficulty_spread``; targets are uniform over the
    vocabulary by symmetry.  Questions whose noise overrides the teacher are
    the hard ones.  The initial policy is the least-squares regression of
    one-hot targets on features, scaled by ``init_scale``.
    """
    if min(n, F, L) < 1 or V < 2:
        raise ValueError("need n, F, L >= 1 and V >= 2")
    if not difficulty_spread > 0:
        raise ValueError("difficulty_spread must be positive")
    X = rng.standard_normal((n, F))
    teacher = rng.standard_normal((L, V, F)) / math.sqrt(F)
    logits = np.einsum("lvf,nf->nlv", teacher, X) + difficulty_spread * rng.gumbel(size=(n, L, V))
    targets = np.argmax(logits, axis=2)
    onehot = np.eye(V)[targets]  # (n, L, V)
    theta = np.empty((L, V, F))
    for t in range(L):
        sol, *_ = np.linalg.lstsq(X, onehot[:, t, :], rcond=None)
        theta[t] = sol.T
    theta *= init_scale * temperature
    bank = QuestionBank(
        tuple(Question(i, X[k], targets[k]) for k, i in enumerate(_ids(n))), F, L, V
    )
    return bank, PolicyParams(theta, temperature)


def tiered_bank(
    pass_rates: Sequence[float],
    L: int,
    V: int,
    rng: np.random.Generator,
    temperature: float = 1.0,
) -> tuple[QuestionBank, PolicyParams]:
    """Bank with one-hot features whose initial success probabilities are exactly ``pass_rates``."""
    n = len(pass_rates)
    if V < 2 or L < 1 or n < 1:
        raise ValueError("need V >= 2, L >= 1, at least one question")
    theta = np.zeros((L, V, n))
    targets = rng.integers(0, V, size=(n, L))
    for k, p in enumerate(pass_rates):
        if not 0 < p < 1:
            raise ValueError("pass rates must lie strictly inside (0, 1)")
        per_pos = p ** (1.0 / L)
        z = math.log(per_pos * (V - 1) / (1.0 - per_pos))
        theta[np.arange(L), targets[k], k] = z * temperature
    feats = np.eye(n)
    bank = QuestionBank(tuple(Question(i, feats[k], targets[k]) for k, i in enumerate(_ids(n))), n, L, V)
    return bank, PolicyParams(theta, temperature)


def params_to_dict(params: PolicyParams) -> dict:
    return {
        "format": PARAMS_FORMAT,
        "temperature": params.temperature,
        "shape": list(params.shape),
        "theta": params.theta.tolist(),
    }


def params_from_dict(data: dict) -> PolicyParams:
    theta = np.array(data["theta"], dtype=np.float64)
    if list(theta.shape) != list(data.get("shape", theta.shape)):
        raise ValueError("theta does not match its declared shape")
    return PolicyParams(theta, float(data["temperature"]))


def bank_to_dict(bank: QuestionBank, init: PolicyParams | None = None) -> dict:
    out = {
        "format": BANK_FORMAT,
        "F": bank.F,
        "L": bank.L,
        "V": bank.V,
        "questions": [
            {"id": q.id, "features": q.features.tolist(), "target": list(q.target)} for q in bank
        ],
    }
    if init is not None:
        out["init_policy"] = params_to_dict(init)
    return out


def bank_from_dict(data: dict) -> tuple[QuestionBank, PolicyParams | None]:
    if data.get("format") != BANK_FORMAT:
        raise ValueError(f"not a question bank document (format={data.get('format')!r})")
    bank = QuestionBank(
        tuple(Question(q["id"], q["features"], q["target"]) for q in data["questions"]),
        int(data["F"]),
        int(data["L"]),
        int(data["V"]),
    )
    init = params_from_dict(data["init_policy"]) if "init_policy" in data else None
    if init is not None and init.shape != (bank.L, bank.V, bank.F):
        raise ValueError("initial policy shape does not match the bank")
    return bank, init


def initial_pass_rates(params: PolicyParams, bank: Iterable[Question]) -> np.ndarray:
    return np.array([success_probability(params, q) for q in bank])
