import numpy as np
import pytest

from weavecoord.tabular import (
    FollowerPolicy,
    LeaderPolicy,
    TabularSEMDP,
    exact_values,
    fixed_point,
    operator_gap_bound,
    perturb_policy,
    random_policy,
    random_semdp,
    run_lemma1_suite,
    run_lemma2_suite,
    se_bellman_backup,
    transition_matrix,
    verify_bellman_bound,
    verify_pdl,
    visitation_distribution,
)


def make_instance(seed, gamma=0.9, n_states=4, n_f=2, n_l=2):
    rng = np.random.default_rng(seed)
    mdp = random_semdp(rng, n_states, n_f, n_l, gamma)
    follower = FollowerPolicy(random_policy(rng, n_states, n_f))
    leader = LeaderPolicy(random_policy(rng, n_states, n_l))
    return rng, mdp, follower, leader


def backup_loop_oracle(v, mdp, follower, leader):
    s_n, a_f, a_l, _ = mdp.transition.shape
    out = np.zeros(s_n)
    for s in range(s_n):
        for f in range(a_f):
            for l in range(a_l):
                ev = sum(mdp.transition[s, f, l, k] * v[k] for k in range(s_n))
                out[s] += follower.probs[s, f] * leader.probs[s, l] * (
                    mdp.reward[s, f, l] + mdp.gamma * ev
                )
    return out


def test_mdp_validation():
    rng = np.random.default_rng(0)
    mdp = random_semdp(rng)
    bad_p = mdp.transition.copy()
    bad_p[0, 0, 0, :] *= 1.5
    with pytest.raises(ValueError):
        TabularSEMDP(bad_p, mdp.reward, 0.9)
    with pytest.raises(ValueError):
        TabularSEMDP(mdp.transition, mdp.reward, 1.0)
    with pytest.raises(ValueError):
        TabularSEMDP(mdp.transition, mdp.reward, 0.9, r_max=1e-6)
    with pytest.raises(ValueError):
        FollowerPolicy(np.array([[0.5, 0.6]]))


def test_backup_constant_value_and_myopic():
    _, mdp, follower, leader = make_instance(1)
    zero_r = TabularSEMDP(mdp.transition, np.zeros_like(mdp.reward), mdp.gamma, r_max=0.0)
    v = np.full(mdp.n_states, 3.0)
    out = se_bellman_backup(v, zero_r, follower, leader)
    np.testing.assert_allclose(out, mdp.gamma * 3.0, atol=1e-12)

    tiny = TabularSEMDP(mdp.transition, mdp.reward, 1e-12)
    out = se_bellman_backup(np.zeros(mdp.n_states), tiny, follower, leader)
    expected = np.einsum("sf,sl,sfl->s", follower.probs, leader.probs, mdp.reward)
    np.testing.assert_allclose(out, expected, atol=1e-10)


def test_backup_matches_triple_loop_oracle():
    rng, mdp, follower, leader = make_instance(2)
    v = rng.normal(size=mdp.n_states)
    np.testing.assert_allclose(
        se_bellman_backup(v, mdp, follower, leader),
        backup_loop_oracle(v, mdp, follower, leader),
        atol=1e-12,
    )


def test_backup_is_contraction():
    rng, mdp, follower, leader = make_instance(3)
    for _ in range(50):
        v = rng.normal(scale=5, size=mdp.n_states)
        w = rng.normal(scale=5, size=mdp.n_states)
        tv = se_bellman_backup(v, mdp, follower, leader)
        tw = se_bellman_backup(w, mdp, follower, leader)
        assert np.max(np.abs(tv - tw)) <= mdp.gamma * np.max(np.abs(v - w)) + 1e-12


def test_fixed_point_constant_reward_closed_form():
    _, mdp, follower, leader = make_instance(4, gamma=0.8)
    const = TabularSEMDP(mdp.transition, np.ones_like(mdp.reward), 0.8, r_max=1.0)
    v = fixed_point(const, follower, leader)
    np.testing.assert_allclose(v, 1.0 / (1.0 - 0.8), atol=1e-8)
    assert np.max(np.abs(v)) <= const.v_max + 1e-8


def test_fixed_point_matches_linear_solve():
    _, mdp, follower, leader = make_instance(5, gamma=0.9)
    v = fixed_point(mdp, follower, leader)
    p_pi = transition_matrix(mdp, follower, leader)
    r_pi = np.einsum("sf,sl,sfl->s", follower.probs, leader.probs, mdp.reward)
    v_solve = np.linalg.solve(np.eye(mdp.n_states) - 0.9 * p_pi, r_pi)
    np.testing.assert_allclose(v, v_solve, atol=1e-8)
    # residual of the fixed point is below tolerance
    assert np.max(np.abs(se_bellman_backup(v, mdp, follower, leader) - v)) < 1e-10


def test_fixed_point_iterates_contract():
    _, mdp, follower, leader = make_instance(6, gamma=0.9)
    v_star = fixed_point(mdp, follower, leader, tol=1e-12)
    v = np.zeros(mdp.n_states)
    prev_err = np.max(np.abs(v - v_star))
    for _ in range(30):
        v = se_bellman_backup(v, mdp, follower, leader)
        err = np.max(np.abs(v - v_star))
        assert err <= mdp.gamma * prev_err + 1e-10
        prev_err = err


def test_operator_gap_zero_cases():
    rng, mdp, follower, leader = make_instance(7)
    assert operator_gap_bound(mdp, follower, leader, leader) == 0.0

    # leader-irrelevant MDP: duplicate one leader slice everywhere
    p = np.repeat(mdp.transition[:, :, :1, :], mdp.transition.shape[2], axis=2)
    r = np.repeat(mdp.reward[:, :, :1], mdp.reward.shape[2], axis=2)
    flat = TabularSEMDP(p, r, mdp.gamma)
    predicted = LeaderPolicy(random_policy(rng, mdp.n_states, p.shape[2]))
    assert operator_gap_bound(flat, follower, leader, predicted) < 1e-12


def test_operator_gap_dominates_sampled_sup():
    rng, mdp, follower, leader = make_instance(8, gamma=0.9)
    predicted = LeaderPolicy(perturb_policy(rng, leader.probs, 1.0))
    bound = operator_gap_bound(mdp, follower, leader, predicted)
    worst = 0.0
    for _ in range(1000):
        v = rng.uniform(-mdp.v_max, mdp.v_max, size=mdp.n_states)
        gap = np.max(
            np.abs(
                se_bellman_backup(v, mdp, follower, leader)
                - se_bellman_backup(v, mdp, follower, predicted)
            )
        )
        worst = max(worst, float(gap))
    assert bound >= worst - 1e-12


def test_bellman_bound_reward_scaling_linearity():
    rng, mdp, follower, leader = make_instance(9, gamma=0.8)
    predicted = LeaderPolicy(perturb_policy(rng, leader.probs, 0.7))
    base = verify_bellman_bound(mdp, follower, leader, predicted)
    lam = 3.5
    scaled = TabularSEMDP(mdp.transition, lam * mdp.reward, mdp.gamma)
    out = verify_bellman_bound(scaled, follower, leader, predicted)
    assert out["lhs"] == pytest.approx(lam * base["lhs"], rel=1e-6, abs=1e-8)
    assert out["rhs"] == pytest.approx(lam * base["rhs"], rel=1e-9)


def test_bellman_bound_identical_prediction():
    _, mdp, follower, leader = make_instance(10)
    out = verify_bellman_bound(mdp, follower, leader, leader)
    assert out["lhs"] <= 1e-9 and out["rhs"] == 0.0 and out["holds"]


def test_bellman_bound_random_suite():
    records = run_lemma1_suite(n_instances=20, seed=7)
    assert len(records) == 60
    assert all(r["holds"] for r in records)
    # the self-test hook must break the verdicts
    broken = run_lemma1_suite(n_instances=3, gammas=(0.9,), seed=7, rhs_scale=0.0)
    assert not all(r["holds"] for r in broken)


def test_visitation_limits_and_series_oracle():
    rng, mdp, follower, leader = make_instance(11, gamma=1e-8)
    start = random_policy(rng, 1, mdp.n_states)[0]
    d = visitation_distribution(mdp, follower, leader, start)
    np.testing.assert_allclose(d, start, atol=1e-6)

    _, mdp2, fol2, led2 = make_instance(12, gamma=0.9)
    start2 = np.zeros(mdp2.n_states)
    start2[0] = 1.0
    d2 = visitation_distribution(mdp2, fol2, led2, start2)
    assert abs(d2.sum() - 1.0) < 1e-10
    assert np.all(d2 >= 0)
    # truncated geometric-series oracle
    p_pi = transition_matrix(mdp2, fol2, led2)
    acc = np.zeros(mdp2.n_states)
    vec = start2.copy()
    k = 0
    while 0.9**k >= 1e-12:
        acc += (0.9**k) * vec
        vec = p_pi.T @ vec
        k += 1
    np.testing.assert_allclose(d2, (1 - 0.9) * acc, atol=1e-9)


def test_visitation_absorbing_state():
    # single absorbing state pulls the discounted mass as gamma -> 1
    n = 3
    p = np.zeros((n, 1, 1, n))
    p[0, 0, 0, 1] = 1.0
    p[1, 0, 0, 2] = 1.0
    p[2, 0, 0, 2] = 1.0
    mdp = TabularSEMDP(p, np.zeros((n, 1, 1)), gamma=0.999)
    one = FollowerPolicy(np.ones((n, 1)))
    led = LeaderPolicy(np.ones((n, 1)))
    d = visitation_distribution(mdp, one, led, np.array([1.0, 0.0, 0.0]))
    assert d[2] > 0.99


def test_pdl_self_comparison_and_advantage_mean():
    rng, mdp, follower, leader = make_instance(13, gamma=0.9)
    start = random_policy(rng, 1, mdp.n_states)[0]
    out = verify_pdl(mdp, follower, follower, leader, start)
    assert abs(out["lhs"]) < 1e-10 and abs(out["rhs"]) < 1e-10

    # E_{d_pi, a~pi}[A_pi] = 0
    v, q = exact_values(mdp, follower, leader)
    adv = q - v[:, None]
    d = visitation_distribution(mdp, follower, leader, start)
    assert abs(np.einsum("s,sf,sf->", d, follower.probs, adv)) < 1e-10


def test_pdl_random_suite_and_deterministic_form():
    records = run_lemma2_suite(n_instances=60, seed=3)
    assert len(records) == 60
    assert all(r["holds"] for r in records)
    assert all(r["gap"] < 1e-8 for r in records)

    # deterministic action-form vs state-form, explicitly
    rng, mdp, _, leader = make_instance(14, gamma=0.9)
    probs = np.zeros((mdp.n_states, 2))
    probs[np.arange(mdp.n_states), rng.integers(0, 2, size=mdp.n_states)] = 1.0
    pi = FollowerPolicy(probs)
    tilde = FollowerPolicy(random_policy(rng, mdp.n_states, 2))
    start = random_policy(rng, 1, mdp.n_states)[0]
    out = verify_pdl(mdp, pi, tilde, leader, start)
    assert out["state_form_exact"]
    assert out["gap"] < 1e-8
