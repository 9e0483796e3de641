"""Centralized training with decentralized execution.

Rollouts run every agent through one shared parameter store on local
observations only; priority labels are computed after each episode from the
logged ground-truth trajectories and attached to every step.  Mini-batches
are sampled as whole timestep groups (all agents of a step together) so the
score-consistency loss can pair each edge with the neighbor's score from
the same step.  Updates are plain clipped gradient descent by default, with
a soft-updated target value head.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .losses import LabelBatch, LossWeights, loss_policy_value_total, td_target_and_advantage
from .nets import NetConfig, ParamStore, forward
from .priority_graph import FieldParams, rollout_label_arrays
from .sim.engine import RewardWeights, Simulator, observe_all, rewards_all
from .sim.metrics import EpisodeLog, metrics_summary
from .sim.scenario import Scenario
from .weaving import WeaveParams

ABLATION_MODES = ("full", "random_priority", "no_stackelberg", "no_topk")


@dataclass
class TrainConfig:
    iterations: int = 250
    steps_per_iter: int = 4096
    batch_size: int = 256
    updates_per_iter: int = 8
    learning_rate: float = 0.02
    target_rho: float = 0.01
    replay_capacity: int | None = None  # env steps; defaults to 2x steps_per_iter
    seed: int = 0
    ablation: str = "full"
    optimizer: str = "sgd"
    grad_clip: float = 1.0
    eval_every: int = 0
    eval_episodes: int = 4

    def __post_init__(self) -> None:
        if self.iterations < 0 or self.steps_per_iter < 0:
            raise ValueError("iteration and step counts must be nonnegative")
        if self.batch_size < 1 or self.updates_per_iter < 0:
            raise ValueError("batch settings must be positive")
        if self.ablation not in ABLATION_MODES:
            raise ValueError(f"ablation must be one of {ABLATION_MODES}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be sgd or adam")
        if self.replay_capacity is None:
            self.replay_capacity = 2 * max(self.steps_per_iter, 1)


@dataclass
class EpisodeRollout:
    """One episode of per-agent samples plus everything training needs."""

    ego: np.ndarray  # (T, N, 5)
    nbr: np.ndarray  # (T, N, M, 5)
    slot_ids: np.ndarray  # (T, N, M)
    u: np.ndarray  # (T, N, d_u) decision states at collection time
    raw: np.ndarray  # (T, N, A)
    action: np.ndarray  # (T, N, A)
    log_prob: np.ndarray  # (T, N)
    reward: np.ndarray  # (T, N)
    next_ego: np.ndarray
    next_nbr: np.ndarray
    terminal: np.ndarray  # (T,)
    label_p: np.ndarray  # (T, N, M)
    label_c: np.ndarray
    label_mask: np.ndarray
    label_s: np.ndarray  # (T, N)
    realized_nbr: np.ndarray  # (T, N, M, A)
    select_p: np.ndarray  # (T, N, M) priorities used for selection per step
    log: EpisodeLog

    @property
    def n_steps(self) -> int:
        return self.ego.shape[0]

    @property
    def n_agents(self) -> int:
        return self.ego.shape[1]


@dataclass
class RolloutBatch:
    agent_id: np.ndarray  # (B,)
    t: np.ndarray  # (B,)
    ego: np.ndarray
    nbr: np.ndarray
    u: np.ndarray
    raw: np.ndarray
    action: np.ndarray
    log_prob: np.ndarray
    reward: np.ndarray
    next_ego: np.ndarray
    next_nbr: np.ndarray
    terminal: np.ndarray
    realized_nbr: np.ndarray  # (B, M, A)
    select_p: np.ndarray  # (B, M) collection-time selection priorities
    next_select_p: np.ndarray  # (B, M)
    labels: LabelBatch

    @property
    def size(self) -> int:
        return self.ego.shape[0]


class ReplayBuffer:
    """Episode FIFO capped in environment steps; samples whole step groups."""

    def __init__(self, capacity_steps: int):
        self.capacity = capacity_steps
        self.episodes: deque[EpisodeRollout] = deque()
        self._steps = 0

    def __len__(self) -> int:
        return self._steps

    def add(self, ep: EpisodeRollout) -> None:
        self.episodes.append(ep)
        self._steps += ep.n_steps
        while self._steps > self.capacity and len(self.episodes) > 1:
            gone = self.episodes.popleft()
            self._steps -= gone.n_steps

    def sample(self, rng: np.random.Generator, n_groups: int) -> RolloutBatch:
        if not self.episodes:
            raise ValueError("buffer is empty")
        lengths = np.array([ep.n_steps for ep in self.episodes])
        cum = np.cumsum(lengths)
        flat = rng.integers(0, cum[-1], size=n_groups)
        cols = {k: [] for k in (
            "agent_id", "t", "ego", "nbr", "u", "raw", "action", "log_prob", "reward",
            "next_ego", "next_nbr", "terminal", "realized_nbr", "select_p", "next_select_p",
            "p", "c", "mask", "s", "nbr_index",
        )}
        row_base = 0
        for f in flat:
            e = int(np.searchsorted(cum, f, side="right"))
            t = int(f - (cum[e - 1] if e else 0))
            ep = self.episodes[e]
            n = ep.n_agents
            cols["agent_id"].append(np.arange(n))
            cols["t"].append(np.full(n, t))
            cols["ego"].append(ep.ego[t])
            cols["nbr"].append(ep.nbr[t])
            cols["u"].append(ep.u[t])
            cols["raw"].append(ep.raw[t])
            cols["action"].append(ep.action[t])
            cols["log_prob"].append(ep.log_prob[t])
            cols["reward"].append(ep.reward[t])
            cols["next_ego"].append(ep.next_ego[t])
            cols["next_nbr"].append(ep.next_nbr[t])
            cols["terminal"].append(np.full(n, ep.terminal[t]))
            cols["realized_nbr"].append(ep.realized_nbr[t])
            cols["select_p"].append(ep.select_p[t])
            t_next = min(t + 1, ep.n_steps - 1)
            cols["next_select_p"].append(ep.select_p[t_next])
            cols["p"].append(ep.label_p[t])
            cols["c"].append(ep.label_c[t])
            cols["mask"].append(ep.label_mask[t])
            cols["s"].append(ep.label_s[t])
            # neighbor j of agent i at this step sits at batch row base + j
            ids = ep.slot_ids[t]
            cols["nbr_index"].append(np.where(ids >= 0, row_base + ids, -1))
            row_base += n
        stacked = {k: np.concatenate(v, axis=0) for k, v in cols.items()}
        labels = LabelBatch(
            p=stacked["p"],
            c=stacked["c"],
            mask=stacked["mask"],
            s_star=stacked["s"],
            nbr_index=stacked["nbr_index"].astype(int),
        )
        return RolloutBatch(
            agent_id=stacked["agent_id"],
            t=stacked["t"],
            ego=stacked["ego"],
            nbr=stacked["nbr"],
            u=stacked["u"],
            raw=stacked["raw"],
            action=stacked["action"],
            log_prob=stacked["log_prob"],
            reward=stacked["reward"],
            next_ego=stacked["next_ego"],
            next_nbr=stacked["next_nbr"],
            terminal=stacked["terminal"],
            realized_nbr=stacked["realized_nbr"],
            select_p=stacked["select_p"],
            next_select_p=stacked["next_select_p"],
            labels=labels,
        )


def _episode_labels(
    positions: np.ndarray,
    headings: np.ndarray,
    slot_ids: np.ndarray,
    weave: WeaveParams,
    field_params: FieldParams,
):
    """Per-step slot-aligned labels from logged ground-truth trajectories."""
    t_steps, n, m = slot_ids.shape
    p, c, mask, scores = rollout_label_arrays(
        positions, headings, weave, field_params, n_label_steps=t_steps
    )
    label_p = np.zeros((t_steps, n, m))
    label_c = np.zeros((t_steps, n, m))
    label_mask = np.zeros((t_steps, n, m))
    t_idx = np.arange(t_steps)[:, None, None]
    i_idx = np.arange(n)[None, :, None]
    safe = np.where(slot_ids >= 0, slot_ids, 0)
    ok = (slot_ids >= 0) & (mask[t_idx, i_idx, safe] > 0)
    label_p[ok] = p[t_idx, i_idx, safe][ok]
    label_c[ok] = c[t_idx, i_idx, safe][ok]
    label_mask[ok] = 1.0
    return label_p, label_c, label_mask, scores


def run_episode(
    sim: Simulator,
    arrays: dict[str, np.ndarray],
    net_cfg: NetConfig,
    weave: WeaveParams,
    field_params: FieldParams,
    reward_weights: RewardWeights,
    rng: np.random.Generator | None,
    ablation: str = "full",
    deterministic: bool = False,
    with_labels: bool = True,
) -> EpisodeRollout:
    """Roll one episode under the shared policy from local observations."""
    scenario = sim.scenario
    t_steps = scenario.episode_len
    n = scenario.n_vehicles
    m = net_cfg.M
    a_dim = net_cfg.action_dim

    st = sim.reset(rng)
    ego_t, nbr_t, ids_t = observe_all(st, scenario, m)

    ego = np.zeros((t_steps, n, 5))
    nbr = np.zeros((t_steps, n, m, 5))
    slot_ids = np.zeros((t_steps, n, m), dtype=int)
    u_log = np.zeros((t_steps, n, net_cfg.d_u))
    select_p = np.zeros((t_steps, n, m))
    raw = np.zeros((t_steps, n, a_dim))
    action = np.zeros((t_steps, n, a_dim))
    log_prob = np.zeros((t_steps, n))
    reward = np.zeros((t_steps, n))
    next_ego = np.zeros((t_steps, n, 5))
    next_nbr = np.zeros((t_steps, n, m, 5))
    positions = np.zeros((t_steps + 1, n, 2))
    headings = np.zeros((t_steps + 1, n))
    speeds = np.zeros((t_steps, n))
    coll_aa = np.zeros((t_steps, n), dtype=bool)
    coll_am = np.zeros((t_steps, n), dtype=bool)
    respawned = np.zeros((t_steps, n), dtype=bool)

    positions[0] = st.pos
    headings[0] = st.heading
    for t in range(t_steps):
        ego[t] = ego_t
        nbr[t] = nbr_t
        slot_ids[t] = ids_t
        res = forward(
            arrays,
            net_cfg,
            ego_t,
            nbr_t,
            rng=rng,
            deterministic=deterministic,
            ablation=ablation,
            need_pred=False,
        )
        u_log[t] = ad.val(res.u)
        select_p[t] = res.select_p
        raw[t] = ad.val(res.policy.raw)
        action[t] = ad.val(res.policy.action)
        log_prob[t] = ad.val(res.policy.log_prob)
        prev = st
        st, events = sim.step(action[t])
        reward[t] = rewards_all(prev, st, events, reward_weights, scenario)
        ego_t, nbr_t, ids_t = observe_all(st, scenario, m)
        next_ego[t] = ego_t
        next_nbr[t] = nbr_t
        positions[t + 1] = st.pos
        headings[t + 1] = st.heading
        speeds[t] = st.speed
        coll_aa[t] = events.agent_agent
        coll_am[t] = events.agent_map
        respawned[t] = events.respawned

    terminal = np.zeros(t_steps)
    terminal[-1] = 1.0

    if with_labels:
        label_p, label_c, label_mask, label_s = _episode_labels(
            positions, headings, slot_ids, weave, field_params
        )
    else:
        label_p = np.zeros((t_steps, n, m))
        label_c = np.zeros((t_steps, n, m))
        label_mask = np.zeros((t_steps, n, m))
        label_s = np.zeros((t_steps, n))

    realized = np.zeros((t_steps, n, m, a_dim))
    for slot in range(m):
        ids = slot_ids[:, :, slot]
        ok = ids >= 0
        realized[:, :, slot][ok] = action[np.nonzero(ok)[0], ids[ok]]

    log = EpisodeLog(
        t=np.arange(t_steps),
        x=positions[1:, :, 0].copy(),
        y=positions[1:, :, 1].copy(),
        heading=headings[1:].copy(),
        speed=speeds,
        lon=action[:, :, 0].copy(),
        steer=action[:, :, 1].copy(),
        coll_aa=coll_aa,
        coll_am=coll_am,
        respawned=respawned,
    )
    return EpisodeRollout(
        ego=ego,
        nbr=nbr,
        slot_ids=slot_ids,
        u=u_log,
        raw=raw,
        action=action,
        log_prob=log_prob,
        reward=reward,
        next_ego=next_ego,
        next_nbr=next_nbr,
        terminal=terminal,
        label_p=label_p,
        label_c=label_c,
        label_mask=label_mask,
        label_s=label_s,
        realized_nbr=realized,
        select_p=select_p,
        log=log,
    )


def collect(
    sim: Simulator,
    store: ParamStore,
    net_cfg: NetConfig,
    weave: WeaveParams,
    field_params: FieldParams,
    reward_weights: RewardWeights,
    n_steps: int,
    rng: np.random.Generator,
    ablation: str = "full",
) -> list[EpisodeRollout]:
    """Whole episodes until at least n_steps environment steps are gathered."""
    episodes: list[EpisodeRollout] = []
    done = 0
    while done < n_steps:
        ep = run_episode(
            sim, store.arrays, net_cfg, weave, field_params, reward_weights, rng, ablation
        )
        episodes.append(ep)
        done += ep.n_steps
    return episodes


def _global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


class _AdamState:
    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0


def train_iteration(
    buffer: ReplayBuffer,
    store: ParamStore,
    loss_weights: LossWeights,
    tcfg: TrainConfig,
    rng: np.random.Generator,
    adam_state: _AdamState | None = None,
) -> dict[str, float]:
    """Sampled mini-batch updates plus target soft-updates; returns means of
    the per-term losses and the pre-clip gradient norm."""
    if len(buffer) == 0:
        raise ValueError("buffer is empty")
    cfg = store.cfg
    n_agents = buffer.episodes[0].n_agents
    groups = max(1, tcfg.batch_size // n_agents)
    agg: dict[str, float] = {}
    for _ in range(tcfg.updates_per_iter):
        batch = buffer.sample(rng, groups)
        # Replay the selection priorities recorded when the step was
        # collected, for every mode: the sample's decision state is then
        # rebuilt over the same slots the agent actually acted on.
        po = batch.select_p
        po_next = batch.next_select_p
        tensors = store.tensors()
        fwd = forward(
            tensors,
            cfg,
            batch.ego,
            batch.nbr,
            raw_action=batch.raw,
            ablation=tcfg.ablation,
            priority_override=po,
            need_value=True,
        )
        y, adv = td_target_and_advantage(
            store.arrays,
            cfg,
            loss_weights.gamma,
            batch.reward,
            batch.terminal,
            batch.next_ego,
            batch.next_nbr,
            v_current=ad.val(fwd.value),
            ablation=tcfg.ablation,
            priority_override=po_next,
        )
        realized_sel = np.take_along_axis(
            batch.realized_nbr, fwd.sel_idx[:, :, None], axis=1
        )
        total, parts = loss_policy_value_total(
            fwd, batch.labels, realized_sel, y, adv, loss_weights, cfg
        )
        if not np.isfinite(parts["total"]):
            raise RuntimeError(f"non-finite training loss: {parts}")
        total.backward()
        grads = {}
        for k in store.trainable_names():
            g = tensors[k].grad
            grads[k] = np.zeros_like(store.arrays[k]) if g is None else g
        norm = _global_norm(grads)
        parts["grad_norm"] = norm
        if tcfg.grad_clip > 0 and norm > tcfg.grad_clip:
            scale = tcfg.grad_clip / norm
            for k in grads:
                grads[k] = grads[k] * scale
        if tcfg.optimizer == "adam":
            assert adam_state is not None
            adam_state.t += 1
            b1, b2, eps = 0.9, 0.999, 1e-8
            for k, g in grads.items():
                adam_state.m[k] = b1 * adam_state.m.get(k, np.zeros_like(g)) + (1 - b1) * g
                adam_state.v[k] = b2 * adam_state.v.get(k, np.zeros_like(g)) + (1 - b2) * g * g
                mh = adam_state.m[k] / (1 - b1**adam_state.t)
                vh = adam_state.v[k] / (1 - b2**adam_state.t)
                store.arrays[k] -= tcfg.learning_rate * mh / (np.sqrt(vh) + eps)
        else:
            for k, g in grads.items():
                store.arrays[k] -= tcfg.learning_rate * g
        store.sync_target(tcfg.target_rho)
        for k, v in parts.items():
            agg[k] = agg.get(k, 0.0) + v
    return {k: v / max(tcfg.updates_per_iter, 1) for k, v in agg.items()}


def evaluate(
    store: ParamStore,
    scenario: Scenario,
    n_episodes: int,
    seed: int,
    ablation: str = "full",
    beta: float = 0.5,
) -> tuple[dict[str, float], list[EpisodeLog]]:
    """Deterministic-policy evaluation; never touches labels or other
    agents' realized actions."""
    sim = Simulator(scenario)
    logs = []
    dummy_weave = WeaveParams()
    dummy_field = FieldParams()
    for k in range(n_episodes):
        rng = np.random.default_rng([seed, k])
        ep = run_episode(
            sim,
            store.arrays,
            store.cfg,
            dummy_weave,
            dummy_field,
            RewardWeights(),
            rng,
            ablation=ablation,
            deterministic=True,
            with_labels=False,
        )
        logs.append(ep.log)
    return metrics_summary(logs, scenario.v_max, beta), logs


def effective_net_config(net: NetConfig, ablation: str) -> NetConfig:
    """The no-topk variant widens the selection to every slot (K = M)."""
    if ablation == "no_topk":
        return replace(net, K=net.M)
    return net
