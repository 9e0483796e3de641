"""Exact tabular verification of the leader-conditioned value construction.

A small follower MDP carries an extra leader action channel.  Fixed points
of the evaluation operator under the true leader policy and under a
predicted one let us check, exactly, that the sup-norm gap between the two
values is at most the operator gap divided by (1 - gamma), and that the
performance-difference identity between two follower policies holds to
solver precision.  Everything here is dense linear algebra on purpose:
exactness over scalability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_FP_TOL = 1e-10


@dataclass
class TabularSEMDP:
    """Follower MDP with a leader action channel.

    ``transition`` has shape (S, A_f, A_l, S) and each slice sums to one;
    ``reward`` has shape (S, A_f, A_l) and is bounded by ``r_max``.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    r_max: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.transition = np.asarray(self.transition, dtype=float)
        self.reward = np.asarray(self.reward, dtype=float)
        if self.transition.ndim != 4:
            raise ValueError("transition must have shape (S, A_f, A_l, S)")
        s, af, al, s2 = self.transition.shape
        if s != s2 or self.reward.shape != (s, af, al):
            raise ValueError("reward shape must match (S, A_f, A_l)")
        sums = self.transition.sum(axis=3)
        if np.max(np.abs(sums - 1.0)) > 1e-12:
            raise ValueError("each transition slice must sum to 1")
        if np.any(self.transition < 0):
            raise ValueError("transition probabilities must be nonnegative")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.r_max is None:
            self.r_max = float(np.max(np.abs(self.reward)))
        elif np.max(np.abs(self.reward)) > self.r_max + 1e-12:
            raise ValueError("reward exceeds the stated bound")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def v_max(self) -> float:
        return self.r_max / (1.0 - self.gamma)


def _validate_policy(probs: np.ndarray, what: str) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2 or np.any(probs < 0) or np.max(np.abs(probs.sum(axis=1) - 1.0)) > 1e-9:
        raise ValueError(f"{what} rows must be distributions")
    return probs


@dataclass
class LeaderPolicy:
    probs: np.ndarray  # (S, A_l)

    def __post_init__(self) -> None:
        self.probs = _validate_policy(self.probs, "leader policy")


@dataclass
class FollowerPolicy:
    probs: np.ndarray  # (S, A_f)

    def __post_init__(self) -> None:
        self.probs = _validate_policy(self.probs, "follower policy")

    def is_deterministic(self) -> bool:
        return bool(np.all(np.max(self.probs, axis=1) == 1.0))


def se_bellman_backup(
    v: np.ndarray, mdp: TabularSEMDP, follower: FollowerPolicy, leader: LeaderPolicy
) -> np.ndarray:
    """One evaluation backup under joint follower and leader randomization."""
    v = np.asarray(v, dtype=float)
    if v.shape != (mdp.n_states,):
        raise ValueError("value vector has the wrong shape")
    ev = np.einsum("sfln,n->sfl", mdp.transition, v)
    return np.einsum("sf,sl,sfl->s", follower.probs, leader.probs, mdp.reward + mdp.gamma * ev)


def fixed_point(
    mdp: TabularSEMDP,
    follower: FollowerPolicy,
    leader: LeaderPolicy,
    tol: float = DEFAULT_FP_TOL,
) -> np.ndarray:
    """Iterate the backup from zero until the fixed point is pinned to tol."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    gamma = mdp.gamma
    threshold = tol * (1.0 - gamma) / gamma
    cap = max(10, math.ceil(10.0 * math.log(1.0 / tol) / math.log(1.0 / gamma)))
    v = np.zeros(mdp.n_states)
    for _ in range(cap):
        v_next = se_bellman_backup(v, mdp, follower, leader)
        if np.max(np.abs(v_next - v)) < threshold:
            return v_next
        v = v_next
    raise RuntimeError("fixed-point iteration failed to converge within the cap")


def operator_gap_bound(
    mdp: TabularSEMDP,
    follower: FollowerPolicy,
    leader: LeaderPolicy,
    predicted: LeaderPolicy,
) -> float:
    """Certified sup-norm bound on the backup gap caused by swapping the
    leader policy for its prediction, valid for every |V| <= V_max."""
    delta = leader.probs - predicted.probs  # (S, A_l)
    dr = np.abs(np.einsum("sl,sfl->sf", delta, mdp.reward))
    dp = np.einsum("sl,sflk->sfk", delta, mdp.transition)
    l1 = np.abs(dp).sum(axis=2)
    per_state = np.einsum("sf,sf->s", follower.probs, dr + mdp.gamma * mdp.v_max * l1)
    return float(np.max(per_state))


def verify_bellman_bound(
    mdp: TabularSEMDP,
    follower: FollowerPolicy,
    leader: LeaderPolicy,
    predicted: LeaderPolicy,
    tol: float = 1e-8,
    rhs_scale: float = 1.0,
) -> dict:
    """Check the fixed-point gap against the certified bound / (1 - gamma).

    ``rhs_scale`` is a harness self-test hook: scaling the bound toward zero
    must make the verdict fail.
    """
    v_true = fixed_point(mdp, follower, leader)
    v_pred = fixed_point(mdp, follower, predicted)
    lhs = float(np.max(np.abs(v_true - v_pred)))
    rhs = rhs_scale * operator_gap_bound(mdp, follower, leader, predicted) / (1.0 - mdp.gamma)
    return {"lhs": lhs, "rhs": rhs, "holds": bool(lhs <= rhs + tol)}


def transition_matrix(
    mdp: TabularSEMDP, follower: FollowerPolicy, leader: LeaderPolicy
) -> np.ndarray:
    return np.einsum("sf,sl,sflk->sk", follower.probs, leader.probs, mdp.transition)


def exact_values(
    mdp: TabularSEMDP, follower: FollowerPolicy, leader: LeaderPolicy
) -> tuple[np.ndarray, np.ndarray]:
    """(V, Q) by direct linear solve; Q is over follower actions."""
    p_pi = transition_matrix(mdp, follower, leader)
    r_pi = np.einsum("sf,sl,sfl->s", follower.probs, leader.probs, mdp.reward)
    eye = np.eye(mdp.n_states)
    v = np.linalg.solve(eye - mdp.gamma * p_pi, r_pi)
    ev = np.einsum("sflk,k->sfl", mdp.transition, v)
    q = np.einsum("sl,sfl->sf", leader.probs, mdp.reward + mdp.gamma * ev)
    return v, q


def visitation_distribution(
    mdp: TabularSEMDP,
    follower: FollowerPolicy,
    leader: LeaderPolicy,
    start: np.ndarray,
) -> np.ndarray:
    """Discounted state visitation (1-gamma) * (I - gamma P^T)^-1 start."""
    start = np.asarray(start, dtype=float)
    if start.shape != (mdp.n_states,) or abs(start.sum() - 1.0) > 1e-9 or np.any(start < 0):
        raise ValueError("start must be a distribution over states")
    p_pi = transition_matrix(mdp, follower, leader)
    eye = np.eye(mdp.n_states)
    try:
        d = (1.0 - mdp.gamma) * np.linalg.solve(eye - mdp.gamma * p_pi.T, start)
    except np.linalg.LinAlgError as exc:  # unreachable for gamma < 1
        raise RuntimeError("visitation solve is singular") from exc
    if abs(d.sum() - 1.0) > 1e-10:
        raise RuntimeError("visitation distribution fails to normalize")
    return d


def verify_pdl(
    mdp: TabularSEMDP,
    pi: FollowerPolicy,
    pi_tilde: FollowerPolicy,
    leader: LeaderPolicy,
    start: np.ndarray,
) -> dict:
    """Performance-difference identity between two follower policies.

    Returns both sides, their gap, and (for deterministic pi) the gap of the
    state-only form, which must agree with the action form exactly.
    """
    v_pi, _ = exact_values(mdp, pi, leader)
    v_til, q_til = exact_values(mdp, pi_tilde, leader)
    adv = q_til - v_til[:, None]
    lhs = float(start @ v_pi - start @ v_til)
    d_pi = visitation_distribution(mdp, pi, leader, start)
    per_state = (pi.probs * adv).sum(axis=1)
    rhs = float(d_pi @ per_state / (1.0 - mdp.gamma))
    out = {"lhs": lhs, "rhs": rhs, "gap": abs(lhs - rhs)}
    if pi.is_deterministic():
        acts = np.argmax(pi.probs, axis=1)
        rhs_state = float(d_pi @ adv[np.arange(mdp.n_states), acts] / (1.0 - mdp.gamma))
        out["rhs_state_form"] = rhs_state
        out["state_form_exact"] = bool(rhs_state == rhs)
    return out


# ---------------------------------------------------------------------------
# random instances and verification suites


def random_semdp(
    rng: np.random.Generator,
    n_states: int = 5,
    n_follower: int = 3,
    n_leader: int = 3,
    gamma: float = 0.9,
    reward_scale: float = 1.0,
) -> TabularSEMDP:
    raw = rng.uniform(0.05, 1.0, size=(n_states, n_follower, n_leader, n_states))
    transition = raw / raw.sum(axis=3, keepdims=True)
    reward = rng.uniform(-reward_scale, reward_scale, size=(n_states, n_follower, n_leader))
    return TabularSEMDP(transition=transition, reward=reward, gamma=gamma)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> np.ndarray:
    raw = rng.uniform(0.05, 1.0, size=(n_states, n_actions))
    return raw / raw.sum(axis=1, keepdims=True)


def perturb_policy(rng: np.random.Generator, probs: np.ndarray, scale: float) -> np.ndarray:
    raw = probs + scale * rng.uniform(0.0, 1.0, size=probs.shape)
    return raw / raw.sum(axis=1, keepdims=True)


def run_lemma1_suite(
    n_instances: int = 100,
    gammas: tuple[float, ...] = (0.5, 0.9, 0.99),
    seed: int = 0,
    n_states: int = 5,
    n_follower: int = 3,
    n_leader: int = 3,
    tol: float = 1e-8,
    rhs_scale: float = 1.0,
) -> list[dict]:
    """Value-gap bound over random instances; one record per check."""
    records = []
    for gamma in gammas:
        for k in range(n_instances):
            inst_seed = hash((seed, round(gamma * 1000), k)) % (2**32)
            rng = np.random.default_rng(inst_seed)
            mdp = random_semdp(rng, n_states, n_follower, n_leader, gamma)
            follower = FollowerPolicy(random_policy(rng, n_states, n_follower))
            leader = LeaderPolicy(random_policy(rng, n_states, n_leader))
            predicted = LeaderPolicy(
                perturb_policy(rng, leader.probs, scale=float(rng.uniform(0.0, 2.0)))
            )
            rec = verify_bellman_bound(mdp, follower, leader, predicted, tol, rhs_scale)
            records.append({"lemma": 1, "seed": inst_seed, "gamma": gamma, **rec})
    return records


def run_lemma2_suite(
    n_instances: int = 200,
    gammas: tuple[float, ...] = (0.5, 0.9, 0.99),
    seed: int = 0,
    n_states: int = 5,
    n_follower: int = 3,
    n_leader: int = 3,
    tol: float = 1e-8,
) -> list[dict]:
    """Performance-difference identity over random policy triples."""
    records = []
    for k in range(n_instances):
        gamma = gammas[k % len(gammas)]
        inst_seed = hash((seed, "pdl", round(gamma * 1000), k)) % (2**32)
        rng = np.random.default_rng(inst_seed)
        mdp = random_semdp(rng, n_states, n_follower, n_leader, gamma)
        leader = LeaderPolicy(random_policy(rng, n_states, n_leader))
        if k % 3 == 0:
            probs = np.zeros((n_states, n_follower))
            probs[np.arange(n_states), rng.integers(0, n_follower, size=n_states)] = 1.0
            pi = FollowerPolicy(probs)
        else:
            pi = FollowerPolicy(random_policy(rng, n_states, n_follower))
        pi_tilde = FollowerPolicy(random_policy(rng, n_states, n_follower))
        start = random_policy(rng, 1, n_states)[0]
        rec = verify_pdl(mdp, pi, pi_tilde, leader, start)
        holds = rec["gap"] < tol and rec.get("state_form_exact", True)
        records.append(
            {
                "lemma": 2,
                "seed": inst_seed,
                "gamma": gamma,
                "lhs": rec["lhs"],
                "rhs": rec["rhs"],
                "gap": rec["gap"],
                "holds": bool(holds),
            }
        )
    return records
