import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from fgexpo.core import GroupResult, RolloutRecord, seeded_rng
from fgexpo.estimators import (
    ObjectiveBreakdown,
    TokenLogprobTriple,
    batch_objective,
    clipped_token_term,
    group_advantages,
    k3_estimate,
    k3_terms,
    objective_gradient,
)
from fgexpo.testbed import PolicyLogprobs, PolicyParams, generate_bank, sample_group

SQRT3 = 1.7320508075688772935


# -- advantages ---------------------------------------------------------------

def test_advantages_single_success():
    adv = group_advantages([1, 0, 0, 0], 1e-8)
    # mu = 1/4, sigma = sqrt(3)/4: (3/4)/(sqrt(3)/4) = sqrt(3), (-1/4)/(sqrt(3)/4) = -1/sqrt(3)
    assert adv[0] == pytest.approx(SQRT3, rel=1e-7)
    assert adv[1:] == pytest.approx([-1 / SQRT3] * 3, rel=1e-7)


@pytest.mark.parametrize("rewards", [[1, 1, 1, 1], [0, 0, 0, 0], [1] * 8])
def test_degenerate_groups_are_exactly_zero(rewards):
    adv = group_advantages(rewards, 1e-8)
    assert np.all(adv == 0.0)


def test_advantages_reject_bad_groups():
    with pytest.raises(ValueError):
        group_advantages([1], 1e-8)
    with pytest.raises(ValueError):
        group_advantages([1, 0.5, 0], 1e-8)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=2, max_size=64).filter(lambda r: 0 < sum(r) < len(r)))
def test_advantages_standardised(rewards):
    adv = group_advantages(rewards, 1e-8)
    assert abs(adv.mean()) < 1e-12
    sd = math.sqrt(np.mean(adv**2))
    assert 1 - 1e-6 <= sd <= 1


# -- K3 -----------------------------------------------------------------------

def test_k3_identity_and_known_values():
    assert k3_estimate(TokenLogprobTriple(-1.3, -1.0, -1.3)) == 0.0
    # r = 2: 2 - ln 2 - 1 ; r = 1/2: 1/2 + ln 2 - 1
    assert k3_estimate(TokenLogprobTriple(-2.0, -1.0, -2.0 + math.log(2))) == pytest.approx(0.30685281944005469, rel=1e-12)
    assert k3_estimate(TokenLogprobTriple(-1.0, -1.0, -1.0 - math.log(2))) == pytest.approx(0.19314718055994531, rel=1e-12)


def test_k3_rejects_nonfinite():
    with pytest.raises(ValueError):
        TokenLogprobTriple(float("-inf"), -1.0, -1.0)
    with pytest.raises(ValueError):
        TokenLogprobTriple(0.5, -1.0, -1.0)


@settings(max_examples=300, deadline=None)
@given(st.floats(-50, 0), st.floats(-50, 0))
def test_k3_nonnegative_zero_iff_equal(a, b):
    v = k3_terms(a, b)
    assert v >= 0
    if a == b:
        assert v == 0
    elif abs(a - b) > 1e-6:
        assert v > 0


def test_k3_unbiased_on_categoricals():
    P = np.array([0.3, 0.2, 0.15, 0.1, 0.1, 0.07, 0.05, 0.03])
    Q = np.array([0.1, 0.1, 0.2, 0.2, 0.1, 0.1, 0.1, 0.1])
    exact = float(np.sum(P * np.log(P / Q)))
    rng = seeded_rng(1, "k3-unbiased")
    x = rng.choice(8, size=100_000, p=P)
    est = k3_terms(np.log(P[x]), np.log(Q[x]))
    se = est.std(ddof=1) / math.sqrt(est.size)
    assert abs(est.mean() - exact) < 3 * se


# -- clipping -----------------------------------------------------------------

def test_clip_examples():
    assert clipped_token_term(1.0, 0.37, 0.2) == 0.37
    assert clipped_token_term(1.5, 1.0, 0.2) == pytest.approx(1.2)
    assert clipped_token_term(1.5, -1.0, 0.2) == pytest.approx(-1.5)
    assert clipped_token_term(0.5, -1.0, 0.2) == pytest.approx(-0.8)
    assert clipped_token_term(0.5, 1.0, 0.2) == pytest.approx(0.5)


def test_clip_preconditions():
    with pytest.raises(ValueError):
        clipped_token_term(0.0, 1.0, 0.2)
    with pytest.raises(ValueError):
        clipped_token_term(1.0, 1.0, 1.0)


@settings(max_examples=300, deadline=None)
@given(st.floats(1e-3, 10), st.floats(-5, 5), st.floats(0.01, 0.99))
def test_clip_is_pessimistic(ratio, adv, eps):
    v = clipped_token_term(ratio, adv, eps)
    assert v <= ratio * adv + 1e-12
    if 1 - eps <= ratio <= 1 + eps:
        assert v == ratio * adv


# -- objective ----------------------------------------------------------------

def _group(qid, rewards, L, rng, V=4):
    rs = tuple(
        RolloutRecord(qid, tuple(rng.integers(0, V, L).tolist()), tuple((-rng.random(L) * 2).tolist()), r)
        for r in rewards
    )
    return GroupResult(qid, rs)


class TableProvider:
    """Provider backed by explicit (G, L) arrays per question."""

    def __init__(self, tables):
        self.tables = tables

    def __call__(self, group):
        return self.tables[group.question_id]


def test_identity_policies_objective():
    rng = seeded_rng(0, "t")
    g = _group("a", [1, 0, 0, 1], 3, rng)
    lp = g.logprob_old
    out = batch_objective([g], TableProvider({"a": (lp, lp, lp)}), 0.02, 0.2)
    adv = group_advantages([1, 0, 0, 1])
    assert out.surrogate == pytest.approx(adv.mean(), abs=1e-15)
    assert out.kl_estimate == 0.0
    assert out.total == out.surrogate - 0.02 * out.kl_estimate

    sat = _group("b", [1, 1, 1, 1], 3, rng)
    lp = sat.logprob_old
    assert batch_objective([sat], TableProvider({"b": (lp, lp, lp)}), 0.02, 0.2).total == 0.0


def _naive_objective(groups, tables, beta, eps_clip, eps_adv):
    surr_terms, kl_terms = [], []
    for grp in sorted(groups, key=lambda g: g.question_id):
        lp, lpo, lpr = tables[grp.question_id]
        rewards = grp.rewards
        G = len(rewards)
        mu = sum(rewards) / G
        sigma = math.sqrt(sum((r - mu) ** 2 for r in rewards) / G)
        for g in range(G):
            a = (rewards[g] - mu) / (sigma + eps_adv)
            L = len(grp.rollouts[g].tokens)
            s = k = 0.0
            for t in range(L):
                r = math.exp(lp[g][t] - lpo[g][t])
                s += min(r * a, min(max(r, 1 - eps_clip), 1 + eps_clip) * a)
                rr = math.exp(lpr[g][t] - lp[g][t])
                k += rr - math.log(rr) - 1
            surr_terms.append(s / L)
            kl_terms.append(k / L)
    s = sum(surr_terms) / len(surr_terms)
    k = sum(kl_terms) / len(kl_terms)
    return s, k, s - beta * k


def test_batch_objective_matches_triple_loop():
    rng = seeded_rng(5, "bruteforce")
    groups = [_group("q1", [1, 0, 1, 0], 3, rng), _group("q0", [0, 0, 1, 0], 3, rng)]
    tables = {}
    for g in groups:
        old = g.logprob_old
        cur = np.minimum(old + rng.normal(0, 0.3, old.shape), -1e-3)
        ref = np.minimum(old + rng.normal(0, 0.3, old.shape), -1e-3)
        tables[g.question_id] = (cur, old, ref)
    out = batch_objective(groups, TableProvider(tables), 0.02, 0.2, 1e-8)
    s, k, tot = _naive_objective(groups, tables, 0.02, 0.2, 1e-8)
    assert out.surrogate == pytest.approx(s, rel=1e-12)
    assert out.kl_estimate == pytest.approx(k, rel=1e-12)
    assert out.total == pytest.approx(tot, rel=1e-12)
    assert out == ObjectiveBreakdown.combine(out.surrogate, out.kl_estimate, 0.02)


def test_batch_objective_errors():
    rng = seeded_rng(0, "t")
    g1 = _group("a", [1, 0, 0, 1], 3, rng)
    g2 = _group("b", [1, 0, 0], 3, rng)
    lp = g1.logprob_old
    with pytest.raises(ValueError):
        batch_objective([g1, g2], TableProvider({"a": (lp, lp, lp), "b": (lp, lp, lp)}), 0.0, 0.2)
    with pytest.raises(ValueError, match="cover"):
        batch_objective([g1], TableProvider({"a": (lp[:, :2], lp, lp)}), 0.0, 0.2)
    with pytest.raises(ValueError):
        batch_objective([], TableProvider({}), 0.0, 0.2)


def test_objective_order_invariant():
    rng = seeded_rng(9, "order")
    groups = [_group(f"q{i}", [1, 0, 0, 1], 2, rng) for i in range(5)]
    tables = {g.question_id: (g.logprob_old * 0.9, g.logprob_old, g.logprob_old * 1.1) for g in groups}
    a = batch_objective(groups, TableProvider(tables), 0.02, 0.2)
    b = batch_objective(groups[::-1], TableProvider(tables), 0.02, 0.2)
    assert a == b


# -- gradient -----------------------------------------------------------------

def random_instance(seed):
    """Small bank, rollouts from theta_old, and perturbed current / reference policies."""
    rng = seeded_rng(seed, "grad-instance")
    V = int(rng.integers(2, 6))
    L = int(rng.integers(1, 5))
    G = int(rng.integers(2, 9))
    F = int(rng.integers(2, 5))
    bank, old = generate_bank(3, F, L, V, 0.5, rng, init_scale=2.0)
    groups = []
    for q in bank:
        for attempt in range(50):
            grp = sample_group(old, q, G, rng)
            if 0 < sum(grp.rewards) < G:
                break
        groups.append(grp)
    cur = PolicyParams(old.theta + rng.normal(0, 0.15, old.shape), old.temperature)
    ref = PolicyParams(old.theta + rng.normal(0, 0.3, old.shape), old.temperature)
    return bank, groups, old, cur, ref


def _fd_check(seed, beta):
    bank, groups, old, cur, ref = random_instance(seed)

    def f(theta):
        return batch_objective(groups, PolicyLogprobs(PolicyParams(theta), ref, bank), beta, 0.2).total

    g = objective_gradient(groups, PolicyLogprobs(cur, ref, bank), beta, 0.2)
    assert g.shape == cur.shape
    return rel_err(g, central_diff(f, cur.theta, 1e-5))


@pytest.mark.parametrize("seed", range(8))
@pytest.mark.parametrize("beta", [0.0, 0.02, 0.5])
def test_gradient_matches_finite_differences(seed, beta):
    assert _fd_check(seed, beta) < 1e-6


def test_zero_advantage_gradient_is_pure_kl():
    bank, groups, old, cur, ref = random_instance(3)
    sat = [GroupResult(g.question_id, tuple(RolloutRecord(r.question_id, r.tokens, r.logprob_old, 1) for r in g.rollouts)) for g in groups]
    prov = PolicyLogprobs(old, ref, bank)
    grad = objective_gradient(sat, prov, 0.02, 0.2)
    kl_only = objective_gradient(sat, prov, 1.0, 0.2)
    assert np.allclose(grad, 0.02 * kl_only, rtol=1e-12, atol=1e-15)
    assert np.abs(objective_gradient(sat, PolicyLogprobs(old, old, bank), 0.02, 0.2)).max() == 0.0
