"""Training losses: priority supervision, leader prediction, TD and policy.

The topological loss fits edge probabilities with binary cross entropy
(computed from logits for stability), node scores with squared error, and
ties the two together with a consistency penalty that compares each edge
probability against the logistic of the score difference, where the
neighbor's score comes from that agent's sample at the same step of the
batch.  Leader prediction is squared error against realized actions on
leader slots only.  Advantages are detached; the critic consumes detached
leader predictions, so the prediction head learns from its own loss alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nets import ActResult, NetConfig, forward


@dataclass
class LossWeights:
    lambda_v: float = 1.0
    lambda_topo: float = 1.0
    lambda_lead: float = 1.0
    lambda_node: float = 1.0
    lambda_cons: float = 1.0
    gamma: float = 0.97

    def __post_init__(self) -> None:
        for name in ("lambda_v", "lambda_topo", "lambda_lead", "lambda_node", "lambda_cons"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")


@dataclass
class LabelBatch:
    """Per-slot priority labels aligned with a sample batch.

    ``mask`` marks slots that correspond to an interaction edge; ``nbr_index``
    points at the batch row of the agent occupying the slot (-1 when that
    agent is not part of the batch).
    """

    p: np.ndarray  # (B, M)
    c: np.ndarray  # (B, M)
    mask: np.ndarray  # (B, M) float
    s_star: np.ndarray  # (B,)
    nbr_index: np.ndarray  # (B, M) int


def loss_topo(fwd: ActResult, labels: LabelBatch, weights: LossWeights, cfg: NetConfig):
    """Edge + node + consistency loss; neutralized edges leave the edge term."""
    active = np.asarray(labels.mask, dtype=float)
    if np.any((labels.p < 0) & (active > 0)) or np.any((labels.p > 1) & (active > 0)):
        raise ValueError("edge labels must lie in [0, 1]")
    edge_mask = active * (labels.c > 0)
    z = fwd.edge_logits
    # BCE from logits: softplus(z) - p*z
    l_edge = ad.sum_((ad.softplus(z) - labels.p * z) * edge_mask)

    diff = fwd.s_hat - labels.s_star
    l_node = ad.sum_(diff * diff)

    nbr_idx = np.asarray(labels.nbr_index, dtype=int)
    cons_mask = active * (nbr_idx >= 0)
    safe_idx = np.where(nbr_idx >= 0, nbr_idx, 0)
    b, m = safe_idx.shape
    s_nbr = ad.reshape(ad.take_rows(fwd.s_hat, safe_idx.reshape(-1)), (b, m))
    s_own = ad.reshape(fwd.s_hat, (b, 1)) * np.ones((1, m))
    p_tilde = ad.sigmoid((s_nbr - s_own) / cfg.tau_s)
    cdiff = (fwd.p_hat - p_tilde) * cons_mask
    l_cons = ad.sum_(cdiff * cdiff)

    total = l_edge + weights.lambda_node * l_node + weights.lambda_cons * l_cons
    parts = {
        "edge": float(ad.val(l_edge)),
        "node": float(ad.val(l_node)),
        "cons": float(ad.val(l_cons)),
    }
    return total, parts


def loss_lead(fwd: ActResult, realized_sel: np.ndarray):
    """Squared prediction error against realized actions, leader slots only."""
    mask = fwd.leader_mask[:, :, None]
    diff = (fwd.pred_actions - np.asarray(realized_sel, dtype=np.float64)) * mask
    return ad.sum_(diff * diff)


def td_target_and_advantage(
    params_arrays: dict[str, np.ndarray],
    cfg: NetConfig,
    gamma: float,
    rewards: np.ndarray,
    terminal: np.ndarray,
    next_ego: np.ndarray,
    next_nbr: np.ndarray,
    v_current: np.ndarray,
    ablation: str = "full",
    priority_override: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
):
    """One-step bootstrapped targets through the target critic, plus
    detached advantages against the online value of the current state."""
    nxt = forward(
        params_arrays,
        cfg,
        next_ego,
        next_nbr,
        deterministic=True,
        ablation=ablation,
        priority_override=priority_override,
        rng=rng,
        need_value=True,
        use_target_value=True,
    )
    y = rewards + gamma * (1.0 - np.asarray(terminal, dtype=float)) * ad.val(nxt.value)
    return y, y - np.asarray(v_current, dtype=float)


def loss_policy_value_total(
    fwd: ActResult,
    labels: LabelBatch,
    realized_sel: np.ndarray,
    y: np.ndarray,
    advantage: np.ndarray,
    weights: LossWeights,
    cfg: NetConfig,
):
    """Aggregate objective with detached advantages; returns tape scalar and
    per-term float diagnostics."""
    l_policy = -ad.sum_(fwd.policy.log_prob * np.asarray(advantage, dtype=float))
    vdiff = fwd.value - np.asarray(y, dtype=float)
    l_value = ad.sum_(vdiff * vdiff)
    l_topo, topo_parts = loss_topo(fwd, labels, weights, cfg)
    l_lead = loss_lead(fwd, realized_sel)
    total = (
        l_policy
        + weights.lambda_v * l_value
        + weights.lambda_topo * l_topo
        + weights.lambda_lead * l_lead
    )
    parts = {
        "policy": float(ad.val(l_policy)),
        "value": float(ad.val(l_value)),
        "topo": float(ad.val(l_topo)),
        "lead": float(ad.val(l_lead)),
        "total": float(ad.val(total)),
        **topo_parts,
    }
    return total, parts
