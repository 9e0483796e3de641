import math

import numpy as np
import pytest

from weavecoord import autodiff as ad
from weavecoord.nets import (
    NetConfig,
    ParamStore,
    decide,
    encode,
    forward,
    leader_set,
    predict_leader_actions,
    squashed_log_prob,
    topk_select,
    topo_attention,
    topo_decode,
    value_head,
)

from helpers import grad_check, random_obs, tiny_config


def make_store(cfg, seed=0):
    return ParamStore.init(cfg, np.random.default_rng(seed))


def test_encode_shapes_and_gating():
    cfg = tiny_config()
    store = make_store(cfg)
    rng = np.random.default_rng(1)
    ego, nbr = random_obs(rng, b=4, m=cfg.M, n_valid=2)
    h_ego, h_nbr = encode(ego, nbr, store.arrays, cfg)
    assert h_ego.shape == (4, cfg.d_e)
    assert h_nbr.shape == (4, cfg.M, cfg.d_n)
    np.testing.assert_array_equal(h_nbr[:, 2:, :], 0.0)
    assert np.all(h_nbr[:, :2, :] != 0.0)


def test_encode_zero_params_bias_only():
    cfg = tiny_config()
    store = make_store(cfg)
    for k in store.arrays:
        if k.startswith(("ego_enc", "nbr_enc")) and ".W" in k:
            store.arrays[k][:] = 0.0
    store.arrays["nbr_enc.b2"][:] = 0.4
    rng = np.random.default_rng(2)
    ego, nbr = random_obs(rng, b=3, m=cfg.M, n_valid=cfg.M)
    _, h_nbr = encode(ego, nbr, store.arrays, cfg)
    # with zero weights all valid slots collapse to the bias encoding
    np.testing.assert_allclose(h_nbr, np.full_like(h_nbr, math.tanh(0.4)))


def test_topo_decode_invalid_forced_half():
    cfg = tiny_config()
    store = make_store(cfg)
    rng = np.random.default_rng(3)
    ego, nbr = random_obs(rng, b=2, m=cfg.M, n_valid=0)
    h_ego, h_nbr = encode(ego, nbr, store.arrays, cfg)
    _, p_hat, s_hat = topo_decode(h_ego, h_nbr, nbr[:, :, 4], store.arrays, cfg)
    np.testing.assert_array_equal(p_hat, 0.5)
    assert np.all(np.isfinite(s_hat))

    ego, nbr = random_obs(rng, b=5, m=cfg.M, n_valid=cfg.M)
    h_ego, h_nbr = encode(ego, nbr, store.arrays, cfg)
    _, p_hat, _ = topo_decode(h_ego, h_nbr, nbr[:, :, 4], store.arrays, cfg)
    assert np.all((p_hat > 0) & (p_hat < 1))


def test_topo_decode_gradients():
    cfg = tiny_config()
    store = make_store(cfg)
    rng = np.random.default_rng(4)
    ego, nbr = random_obs(rng, b=2, m=cfg.M, n_valid=2)
    w = rng.normal(size=(2, cfg.M))
    ws = rng.normal(size=2)

    def scalar(params):
        h_ego, h_nbr = encode(ego, nbr, params, cfg)
        _, p_hat, s_hat = topo_decode(h_ego, h_nbr, nbr[:, :, 4], params, cfg)
        return ad.sum_(p_hat * w) + ad.sum_(s_hat * ws)

    grad_check(scalar, store)


def test_topk_select_cases():
    p = np.array([[0.9, 0.1, 0.8, 0.2]])
    valid = np.ones((1, 4))
    sel, mask = topk_select(p, valid, 2)
    np.testing.assert_array_equal(sel[0], [0, 2])
    np.testing.assert_array_equal(mask[0], [1.0, 1.0])

    p = np.full((1, 4), 0.4)
    sel, mask = topk_select(p, valid, 2)
    np.testing.assert_array_equal(sel[0], [0, 1])  # ties go to lower slots

    valid = np.array([[0.0, 1.0, 0.0, 0.0]])
    sel, mask = topk_select(np.array([[0.9, 0.2, 0.9, 0.9]]), valid, 2)
    np.testing.assert_array_equal(mask[0], [1.0, 0.0])
    assert sel[0, 0] == 1


def test_topk_monotonicity():
    rng = np.random.default_rng(5)
    for _ in range(200):
        m = int(rng.integers(3, 7))
        k = int(rng.integers(1, m))
        p = rng.uniform(size=(1, m))
        valid = np.ones((1, m))
        sel, mask = topk_select(p, valid, k)
        selected = set(sel[0][mask[0] > 0])
        outside = [j for j in range(m) if j not in selected]
        if not outside:
            continue
        j = int(rng.choice(outside))
        kth = min(p[0][list(selected)])
        p2 = p.copy()
        p2[0, j] = kth + (1.0 - kth) * 0.5 + 1e-9
        sel2, mask2 = topk_select(p2, valid, k)
        assert j in set(sel2[0][mask2[0] > 0])


def test_attention_weights_and_empty_fallback():
    cfg = tiny_config()
    store = make_store(cfg)
    rng = np.random.default_rng(6)
    ego, nbr = random_obs(rng, b=1, m=cfg.M, n_valid=1)
    h_ego, h_nbr = encode(ego, nbr, store.arrays, cfg)
    sel_idx = np.array([[0, 0]])
    sel_mask = np.array([[1.0, 0.0]])
    _, w, _ = topo_attention(h_ego, h_nbr, sel_idx, sel_mask, store.arrays, cfg)
    assert w[0, 0] == 1.0  # softmax of a singleton

    # two identical neighbor slots share the weight equally
    nbr2 = nbr.copy()
    nbr2[0, 1] = nbr2[0, 0]
    h_ego2, h_nbr2 = encode(ego, nbr2, store.arrays, cfg)
    _, w2, _ = topo_attention(h_ego2, h_nbr2, np.array([[0, 1]]), np.array([[1.0, 1.0]]), store.arrays, cfg)
    np.testing.assert_allclose(w2[0], [0.5, 0.5], atol=1e-14)

    # zero selected neighbors: context equals the projection of the ego
    # embedding alone
    ctx, w3, _ = topo_attention(h_ego, h_nbr, np.array([[0, 0]]), np.zeros((1, 2)), store.arrays, cfg)
    np.testing.assert_array_equal(w3, 0.0)
    manual = np.concatenate([ad.val(h_ego), np.zeros((1, cfg.d_c))], axis=1) @ store.arrays[
        "attn.Wp"
    ] + store.arrays["attn.bp"]
    np.testing.assert_allclose(ad.val(ctx), manual, atol=1e-14)


def test_attention_gradients():
    cfg = tiny_config()
    store = make_store(cfg)
    rng = np.random.default_rng(7)
    ego, nbr = random_obs(rng, b=2, m=cfg.M, n_valid=cfg.M)
    sel_idx, sel_mask = topk_select(rng.uniform(size=(2, cfg.M)), nbr[:, :, 4], cfg.K)
    w = rng.normal(size=(2, cfg.d_c))

    def scalar(params):
        h_ego, h_nbr = encode(ego, nbr, params, cfg)
        ctx, _, _ = topo_attention(h_ego, h_nbr, sel_idx, sel_mask, params, cfg)
        return ad.sum_(ctx * w)

    grad_check(scalar, store)


def context_and_score(store, cfg, ego, nbr, params=None):
    params = store.arrays if params is None else params
    h_ego, h_nbr = encode(ego, nbr, params, cfg)
    _, p_hat, s_hat = topo_decode(h_ego, h_nbr, nbr[:, :, 4], params, cfg)
    sel_idx, sel_mask = topk_select(ad.val(p_hat), nbr[:, :, 4], cfg.K)
    ctx, _, _ = topo_attention(h_ego, h_nbr, sel_idx, sel_mask, params, cfg)
    return ctx, s_hat


def test_decide_deterministic_and_range():
    cfg = tiny_config()
    store = make_store(cfg)
    rng = np.random.default_rng(8)
    ego, nbr = random_obs(rng, b=4, m=cfg.M)
    ctx, s_hat = context_and_score(store, cfg, ego, nbr)
    u, pol = decide(ctx, s_hat, store.arrays, cfg, deterministic=True)
    np.testing.assert_allclose(pol.action, np.tanh(pol.mean), atol=1e-14)
    assert np.all(np.abs(pol.action) <= 1.0)
    assert np.all(pol.std > 0)
    assert np.all(np.isfinite(pol.log_prob))
    u2, pol2 = decide(ctx, s_hat, store.arrays, cfg, rng=np.random.default_rng(0))
    assert np.all(np.abs(pol2.action) <= 1.0)


def test_decide_log_prob_matches_density_oracle():
    cfg = tiny_config()
    store = make_store(cfg)
    rng = np.random.default_rng(9)
    ego, nbr = random_obs(rng, b=6, m=cfg.M)
    ctx, s_hat = context_and_score(store, cfg, ego, nbr)
    _, pol = decide(ctx, s_hat, store.arrays, cfg, rng=rng)
    mean, std, raw = pol.mean, pol.std, pol.raw
    z = (raw - mean) / std
    gauss = -np.log(std) - 0.5 * math.log(2 * math.pi) - 0.5 * z**2
    corr = np.log(1.0 - np.tanh(raw) ** 2)
    oracle = np.sum(gauss - corr, axis=1)
    np.testing.assert_allclose(pol.log_prob, oracle, atol=1e-9)


def test_squashed_density_integrates_to_one():
    cfg1 = tiny_config(action_dim=1)
    mean = np.array([[0.3]])
    std = np.array([[0.6]])
    a = np.linspace(-1 + 1e-7, 1 - 1e-7, 40001)
    raw = np.arctanh(a)[:, None]
    lp = squashed_log_prob(np.full_like(raw, mean[0, 0]), np.full_like(raw, std[0, 0]), raw)
    total = np.trapezoid(np.exp(lp), a)
    assert abs(total - 1.0) < 0.01
    assert cfg1.action_dim == 1


def test_decide_gradients_via_log_prob():
    cfg = tiny_config()
    store = make_store(cfg)
    rng = np.random.default_rng(10)
    ego, nbr = random_obs(rng, b=2, m=cfg.M)
    raw = rng.normal(scale=0.7, size=(2, cfg.action_dim))
    w = rng.normal(size=2)

    def scalar(params):
        ctx, s_hat = context_and_score(store, cfg, ego, nbr, params)
        _, pol = decide(ctx, s_hat, params, cfg, raw_action=raw)
        return ad.sum_(pol.log_prob * w)

    grad_check(scalar, store)


def test_leader_set_threshold():
    sel_mask = np.ones((1, 2))
    assert leader_set(np.array([[0.9, 0.4]]), sel_mask, 0.05).tolist() == [[1.0, 0.0]]
    # boundary is strict
    assert leader_set(np.array([[0.55, 0.55 + 1e-12]]), sel_mask, 0.05).tolist() == [[0.0, 1.0]]
    assert leader_set(np.array([[0.49, 0.3]]), sel_mask, 0.0).tolist() == [[0.0, 0.0]]
    # masked slots never lead
    assert leader_set(np.array([[0.99, 0.99]]), np.array([[1.0, 0.0]]), 0.0).tolist() == [[1.0, 0.0]]


def test_predict_head_range_equivariance_gradients():
    cfg = tiny_config()
    store = make_store(cfg)
    rng = np.random.default_rng(11)
    sel_emb = rng.normal(size=(3, cfg.K, cfg.d_n))
    sel_p = rng.uniform(size=(3, cfg.K))
    out = predict_leader_actions(sel_emb, sel_p, store.arrays, cfg)
    assert np.all(np.abs(out) < 1.0)
    perm = out[:, ::-1, :]
    out_swapped = predict_leader_actions(sel_emb[:, ::-1, :], sel_p[:, ::-1], store.arrays, cfg)
    np.testing.assert_allclose(out_swapped, perm, atol=1e-14)

    w = rng.normal(size=(2, cfg.K, cfg.action_dim))
    ego, nbr = random_obs(rng, b=2, m=cfg.M, n_valid=cfg.M)

    def scalar(params):
        h_ego, h_nbr = encode(ego, nbr, params, cfg)
        _, p_hat, _ = topo_decode(h_ego, h_nbr, nbr[:, :, 4], params, cfg)
        sel_idx, sel_mask = topk_select(ad.val(p_hat), nbr[:, :, 4], cfg.K)
        emb = ad.take_slots(h_nbr, sel_idx)
        pred = predict_leader_actions(emb, ad.take_slots(p_hat, sel_idx), params, cfg)
        return ad.sum_(pred * w)

    grad_check(scalar, store)


def test_value_head_bias_sensitivity_target_and_gradients():
    cfg = tiny_config()
    store = make_store(cfg)
    rng = np.random.default_rng(12)
    u = rng.normal(size=(3, cfg.d_u))
    acts = rng.uniform(-1, 1, size=(3, cfg.K, cfg.action_dim))
    lmask = np.ones((3, cfg.K))

    zeroed = store.clone()
    for k in zeroed.arrays:
        if k.startswith("value.") and ".W" in k:
            zeroed.arrays[k][:] = 0.0
    zeroed.arrays["value.b2"][:] = 0.77
    v = value_head(u, acts, lmask, zeroed.arrays, cfg)
    np.testing.assert_allclose(v, 0.77, atol=1e-14)

    v0 = value_head(u, acts, lmask, store.arrays, cfg)
    bumped = acts.copy()
    bumped[0, 0, 0] += 0.05
    v1 = value_head(u, bumped, lmask, store.arrays, cfg)
    assert v1[0] != v0[0]
    assert v1[1] == v0[1]

    # the target flag routes through the target copy
    store.arrays["target_value.b2"][:] += 1.0
    vt = value_head(u, acts, lmask, store.arrays, cfg, use_target=True)
    assert not np.allclose(vt, v0)

    w = rng.normal(size=3)

    def scalar(params):
        return ad.sum_(value_head(u, acts, lmask, params, cfg) * w)

    grad_check(scalar, store, names=[k for k in store.trainable_names() if k.startswith("value.")])


def test_forward_full_pass_and_value_detached_predictions():
    cfg = tiny_config()
    store = make_store(cfg)
    rng = np.random.default_rng(13)
    ego, nbr = random_obs(rng, b=4, m=cfg.M, n_valid=cfg.M)
    tensors = store.tensors()
    res = forward(tensors, cfg, ego, nbr, rng=np.random.default_rng(0), need_value=True)
    total = ad.sum_(res.value * np.ones(4))
    total.backward()
    for k in store.trainable_names():
        if k.startswith("predict."):
            g = tensors[k].grad
            assert g is None or np.all(g == 0.0), "critic gradient leaked into predict head"


def test_forward_decentralized_and_actor_input_contract():
    cfg = tiny_config()
    store = make_store(cfg)
    # push priorities above the leader threshold so the leader set is busy
    store.arrays["topo_head.b"][:] = 2.0
    rng = np.random.default_rng(14)
    ego, nbr = random_obs(rng, b=5, m=cfg.M, n_valid=cfg.M)
    base = forward(store.arrays, cfg, ego, nbr, deterministic=True)
    # Decentralization: perturbing every other agent's observation leaves
    # agent 0's action bit-identical.
    ego2, nbr2 = ego.copy(), nbr.copy()
    ego2[1:] += rng.normal(size=ego2[1:].shape)
    nbr2[1:] += rng.normal(size=nbr2[1:].shape)
    nbr2[..., 4] = nbr[..., 4]
    after = forward(store.arrays, cfg, ego2, nbr2, deterministic=True)
    np.testing.assert_array_equal(base.policy.action[0], after.policy.action[0])

    # Actor-input contract: predicted leader actions never reach the actor.
    mutated = store.clone()
    for k in mutated.arrays:
        if k.startswith("predict."):
            mutated.arrays[k] = rng.normal(size=mutated.arrays[k].shape)
    res2 = forward(mutated.arrays, cfg, ego, nbr, deterministic=True, need_value=True)
    np.testing.assert_array_equal(base.policy.action, res2.policy.action)
    res_base = forward(store.arrays, cfg, ego, nbr, deterministic=True, need_value=True)
    assert not np.allclose(ad.val(res_base.value), ad.val(res2.value))


def test_forward_ablations():
    cfg = tiny_config()
    store = make_store(cfg)
    rng = np.random.default_rng(15)
    ego, nbr = random_obs(rng, b=4, m=cfg.M, n_valid=cfg.M)
    res = forward(store.arrays, cfg, ego, nbr, deterministic=True, ablation="no_stackelberg")
    np.testing.assert_array_equal(res.leader_mask, 0.0)

    r1 = forward(store.arrays, cfg, ego, nbr, deterministic=True, ablation="random_priority",
                 rng=np.random.default_rng(3))
    r2 = forward(store.arrays, cfg, ego, nbr, deterministic=True, ablation="random_priority",
                 rng=np.random.default_rng(3))
    np.testing.assert_array_equal(r1.sel_idx, r2.sel_idx)
    with pytest.raises(ValueError):
        forward(store.arrays, cfg, ego, nbr, deterministic=True, ablation="random_priority")

    cfg_all = tiny_config(k=3)  # K == M expresses the no-topk variant
    store_all = make_store(cfg_all)
    res3 = forward(store_all.arrays, cfg_all, ego, nbr, deterministic=True)
    np.testing.assert_array_equal(res3.sel_mask, 1.0)
    np.testing.assert_array_equal(res3.sel_idx, np.tile(np.arange(3), (4, 1)))


def test_priority_override_pins_selection():
    cfg = tiny_config()
    store = make_store(cfg)
    rng = np.random.default_rng(16)
    ego, nbr = random_obs(rng, b=3, m=cfg.M, n_valid=cfg.M)
    override = rng.uniform(size=(3, cfg.M))
    a = forward(store.arrays, cfg, ego, nbr, deterministic=True, priority_override=override)
    b = forward(store.arrays, cfg, ego, nbr, deterministic=True, priority_override=override)
    np.testing.assert_array_equal(a.sel_idx, b.sel_idx)
    np.testing.assert_array_equal(a.leader_mask, b.leader_mask)


def test_numpy_and_tape_forwards_agree():
    cfg = tiny_config()
    store = make_store(cfg)
    rng = np.random.default_rng(17)
    ego, nbr = random_obs(rng, b=4, m=cfg.M)
    raw = rng.normal(size=(4, cfg.action_dim))
    res_np = forward(store.arrays, cfg, ego, nbr, raw_action=raw, need_value=True)
    res_tp = forward(store.tensors(), cfg, ego, nbr, raw_action=raw, need_value=True)
    np.testing.assert_array_equal(res_np.policy.action, ad.val(res_tp.policy.action))
    np.testing.assert_array_equal(res_np.policy.log_prob, ad.val(res_tp.policy.log_prob))
    np.testing.assert_array_equal(ad.val(res_np.value), ad.val(res_tp.value))
    np.testing.assert_array_equal(res_np.sel_idx, res_tp.sel_idx)


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_config()
    store = make_store(cfg, seed=5)
    path = tmp_path / "params.wvc"
    store.save(path)
    loaded = ParamStore.load(path)
    assert loaded.cfg == cfg
    assert set(loaded.arrays) == set(store.arrays)
    for k in store.arrays:
        np.testing.assert_array_equal(loaded.arrays[k], store.arrays[k])
    bad = tmp_path / "bad.wvc"
    bad.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        ParamStore.load(bad)


def test_target_sync():
    cfg = tiny_config()
    store = make_store(cfg)
    online = {k: v.copy() for k, v in store.arrays.items() if k.startswith("value.")}
    for k in online:
        store.arrays[k] += 1.0
    store.sync_target(rho=1.0)
    for k in online:
        np.testing.assert_array_equal(store.arrays["target_" + k], store.arrays[k])
    store.arrays["value.b2"] += 2.0
    before = store.arrays["target_value.b2"].copy()
    store.sync_target(rho=0.25)
    np.testing.assert_allclose(
        store.arrays["target_value.b2"], 0.75 * before + 0.25 * store.arrays["value.b2"]
    )
