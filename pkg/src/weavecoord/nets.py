"""Priority-conditioned coordination network, in plain numpy.

One shared parameter store drives every agent.  The forward pass encodes the
ego features and each neighbor slot separately, decodes per-slot priority
probabilities and a scalar priority score, keeps the top-K most dominant
neighbors, aggregates them with single-head attention into a decision state,
and emits a tanh-squashed Gaussian action.  Neighbors whose priority clears
1/2 by a margin form the leader set; a prediction head guesses their actions
and only the value head consumes those guesses, so the actor stays a pure
function of the agent's own observation.

All maps run on either plain ndarrays (fast rollouts) or tape tensors from
``autodiff`` (training), through the same code path.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"WVC1"
CHECKPOINT_VERSION = 1

EGO_DIM = 5
NBR_DIM = 5


@dataclass
class NetConfig:
    d_e: int = 32  # ego embedding width
    d_n: int = 32  # neighbor embedding width
    d_t: int = 16  # per-slot topology feature width
    d_c: int = 32  # decision context width (also attention and u width)
    hidden: int = 32
    M: int = 4  # neighbor slot capacity
    K: int = 2  # top-K selection size
    delta_p: float = 0.05  # leader margin above 1/2
    action_dim: int = 2
    tau_s: float = 1.0  # temperature tying scores to probabilities
    pos_scale: float = 15.0  # meters; normalizes neighbor relative positions
    std_floor: float = 1e-3

    def __post_init__(self) -> None:
        if self.K > self.M:
            raise ValueError("K cannot exceed the slot capacity M")
        if not 0.0 <= self.delta_p < 0.5:
            raise ValueError("delta_p must lie in [0, 0.5)")
        if self.std_floor <= 0:
            raise ValueError("std_floor must be positive")

    @property
    def d_u(self) -> int:
        return self.d_c


@dataclass
class PolicyOutput:
    mean: object  # (B, A)
    std: object  # (B, A), strictly positive
    raw: object  # (B, A) pre-squash sample
    action: object  # (B, A) in [-1, 1]
    log_prob: object  # (B,)


@dataclass
class ActResult:
    h_ego: object
    h_nbr: object  # (B, M, d_n), invalid slots exactly zero
    edge_logits: object  # (B, M)
    p_hat: object  # (B, M), invalid slots forced to 1/2
    s_hat: object  # (B,)
    select_p: np.ndarray  # (B, M) priorities actually used for selection
    sel_idx: np.ndarray  # (B, K) int, ascending slot order, padded with 0
    sel_mask: np.ndarray  # (B, K) 1.0 where a slot is actually selected
    sel_p: object  # (B, K)
    leader_mask: np.ndarray  # (B, K)
    context: object  # (B, d_c)
    u: object  # (B, d_u)
    policy: PolicyOutput
    pred_actions: object  # (B, K, A)
    value: object | None = None


# ---------------------------------------------------------------------------
# parameters


def _dense_init(rng, d_in, d_out, scale=1.0):
    return rng.normal(0.0, scale / math.sqrt(d_in), size=(d_in, d_out))


def _submap(rng, name, d_in, d_hidden, d_out, out_scale=1.0):
    return {
        f"{name}.W1": _dense_init(rng, d_in, d_hidden),
        f"{name}.b1": np.zeros(d_hidden),
        f"{name}.W2": _dense_init(rng, d_hidden, d_out, out_scale),
        f"{name}.b2": np.zeros(d_out),
    }


class ParamStore:
    """Named dense arrays for every sub-map plus a target value-head copy."""

    def __init__(self, arrays: dict[str, np.ndarray], cfg: NetConfig):
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        self.cfg = cfg

    @classmethod
    def init(cls, cfg: NetConfig, rng: np.random.Generator) -> "ParamStore":
        a: dict[str, np.ndarray] = {}
        a.update(_submap(rng, "ego_enc", EGO_DIM, cfg.hidden, cfg.d_e))
        a.update(_submap(rng, "nbr_enc", NBR_DIM, cfg.hidden, cfg.d_n))
        a.update(_submap(rng, "topo_dec", cfg.d_e + cfg.d_n, cfg.hidden, cfg.d_t))
        a["topo_head.W"] = _dense_init(rng, cfg.d_t, 1)
        a["topo_head.b"] = np.zeros(1)
        a["node_head.W"] = _dense_init(rng, cfg.M * cfg.d_t, 1)
        a["node_head.b"] = np.zeros(1)
        a["attn.Wq"] = _dense_init(rng, cfg.d_e, cfg.d_c)
        a["attn.Wk"] = _dense_init(rng, cfg.d_n, cfg.d_c)
        a["attn.Wv"] = _dense_init(rng, cfg.d_n, cfg.d_c)
        a["attn.Wp"] = _dense_init(rng, cfg.d_e + cfg.d_c, cfg.d_c)
        a["attn.bp"] = np.zeros(cfg.d_c)
        a.update(_submap(rng, "ego_dec", cfg.d_c + 1, cfg.hidden, cfg.d_u))
        a.update(_submap(rng, "policy", cfg.d_u, cfg.hidden, 2 * cfg.action_dim, out_scale=0.05))
        # start with a moderate exploration std: softplus(-1) ~ 0.31
        a["policy.b2"] = np.concatenate([np.zeros(cfg.action_dim), -np.ones(cfg.action_dim)])
        a.update(_submap(rng, "predict", cfg.d_n + 1, cfg.hidden, cfg.action_dim))
        a.update(
            _submap(rng, "value", cfg.d_u + cfg.K * cfg.action_dim + 1, cfg.hidden, 1, out_scale=0.1)
        )
        for k in [k for k in a if k.startswith("value.")]:
            a["target_" + k] = a[k].copy()
        return cls(a, cfg)

    def trainable_names(self) -> list[str]:
        return [k for k in self.arrays if not k.startswith("target_")]

    def validate_shapes(self) -> None:
        """Cross-check stored arrays against what the config implies."""
        ref = ParamStore.init(self.cfg, np.random.default_rng(0))
        if set(ref.arrays) != set(self.arrays):
            missing = set(ref.arrays) ^ set(self.arrays)
            raise ValueError(f"parameter set mismatch for config: {sorted(missing)}")
        for k, v in ref.arrays.items():
            if self.arrays[k].shape != v.shape:
                raise ValueError(
                    f"parameter {k} has shape {self.arrays[k].shape}, config implies {v.shape}"
                )

    def tensors(self) -> dict[str, ad.Tensor]:
        return {k: ad.Tensor(v) for k, v in self.arrays.items()}

    def clone(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.arrays.items()}, self.cfg)

    def sync_target(self, rho: float) -> None:
        for k in list(self.arrays):
            if k.startswith("value."):
                t = "target_" + k
                self.arrays[t] = (1.0 - rho) * self.arrays[t] + rho * self.arrays[k]

    def save(self, path: str | Path) -> None:
        names = sorted(self.arrays)
        blobs = []
        entries = []
        offset = 0
        for name in names:
            raw = np.ascontiguousarray(self.arrays[name], dtype="<f8").tobytes()
            entries.append(
                {"name": name, "shape": list(self.arrays[name].shape), "offset": offset, "nbytes": len(raw)}
            )
            blobs.append(raw)
            offset += len(raw)
        header = json.dumps(
            {"format_version": CHECKPOINT_VERSION, "config": asdict(self.cfg), "arrays": entries}
        ).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for raw in blobs:
                fh.write(raw)

    @classmethod
    def load(cls, path: str | Path) -> "ParamStore":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a parameter checkpoint (bad magic {magic!r})")
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            if header.get("format_version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
            data = fh.read()
        arrays = {}
        for e in header["arrays"]:
            buf = data[e["offset"] : e["offset"] + e["nbytes"]]
            arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).copy()
        return cls(arrays, NetConfig(**header["config"]))


# ---------------------------------------------------------------------------
# forward maps (backend-agnostic: ndarray or tape Tensor parameters)


def _two_layer(x, params, name, out_tanh):
    h = ad.tanh(x @ params[f"{name}.W1"] + params[f"{name}.b1"])
    out = h @ params[f"{name}.W2"] + params[f"{name}.b2"]
    return ad.tanh(out) if out_tanh else out


def encode(ego, nbr, params, cfg: NetConfig):
    """Ego and per-slot neighbor embeddings; invalid slots gate to zero."""
    b = ego.shape[0]
    h_ego = _two_layer(np.asarray(ego, dtype=np.float64), params, "ego_enc", out_tanh=True)
    scale = np.array([1.0 / cfg.pos_scale, 1.0 / cfg.pos_scale, 1.0, 1.0, 1.0])
    nbr = np.asarray(nbr, dtype=np.float64)
    flat = (nbr * scale).reshape(b * cfg.M, NBR_DIM)
    h_flat = _two_layer(flat, params, "nbr_enc", out_tanh=True)
    valid = nbr[:, :, 4:5]
    h_nbr = ad.reshape(h_flat, (b, cfg.M, cfg.d_n)) * valid
    return h_ego, h_nbr


def topo_decode(h_ego, h_nbr, valid, params, cfg: NetConfig):
    """Per-slot priority logits/probabilities and the scalar node score."""
    b = valid.shape[0]
    ego_b = ad.reshape(h_ego, (b, 1, cfg.d_e)) * np.ones((1, cfg.M, 1))
    q_in = ad.reshape(ad.concat([ego_b, h_nbr], axis=2), (b * cfg.M, cfg.d_e + cfg.d_n))
    q = _two_layer(q_in, params, "topo_dec", out_tanh=True)
    logits = ad.reshape(q @ params["topo_head.W"] + params["topo_head.b"], (b, cfg.M))
    p_hat = ad.where(valid > 0, ad.sigmoid(logits), np.full((b, cfg.M), 0.5))
    s_hat = ad.reshape(
        ad.reshape(q, (b, cfg.M * cfg.d_t)) @ params["node_head.W"] + params["node_head.b"], (b,)
    )
    return logits, p_hat, s_hat


def topk_select(priorities: np.ndarray, valid: np.ndarray, k: int):
    """Indices of the k valid slots with the largest priorities.

    Ties break toward the lower slot index (the nearer neighbor).  The
    returned indices are re-sorted ascending so downstream slot placement is
    deterministic; padded entries carry mask 0 and a safe index of 0.
    """
    p = np.where(np.asarray(valid) > 0, np.asarray(priorities, dtype=float), -np.inf)
    order = np.argsort(-p, axis=1, kind="stable")[:, :k]
    mask = np.take_along_axis(p, order, axis=1) > -np.inf
    keyed = np.where(mask, order, np.iinfo(np.int64).max)
    reorder = np.argsort(keyed, axis=1, kind="stable")
    sel = np.take_along_axis(order, reorder, axis=1)
    mask = np.take_along_axis(mask, reorder, axis=1)
    return np.where(mask, sel, 0), mask.astype(float)


def topo_attention(h_ego, h_nbr, sel_idx, sel_mask, params, cfg: NetConfig):
    """Single-head scaled dot-product attention over the selected slots."""
    b, k = sel_idx.shape
    sel_emb = ad.take_slots(h_nbr, sel_idx)
    sel_flat = ad.reshape(sel_emb, (b * k, cfg.d_n))
    q = h_ego @ params["attn.Wq"]
    keys = ad.reshape(sel_flat @ params["attn.Wk"], (b, k, cfg.d_c))
    vals = ad.reshape(sel_flat @ params["attn.Wv"], (b, k, cfg.d_c))
    scores = ad.sum_(ad.reshape(q, (b, 1, cfg.d_c)) * keys, axis=2) / math.sqrt(cfg.d_c)
    shifted = scores + (sel_mask - 1.0) * 1e4
    shift = np.max(ad.val(shifted), axis=1, keepdims=True)
    e = ad.exp(shifted - shift) * sel_mask
    any_row = (sel_mask.sum(axis=1, keepdims=True) > 0).astype(float)
    denom = ad.sum_(e, axis=1, keepdims=True) + (1.0 - any_row)
    weights = e / denom
    attn = ad.sum_(ad.reshape(weights, (b, k, 1)) * vals, axis=1)
    ctx = ad.concat([h_ego, attn], axis=1) @ params["attn.Wp"] + params["attn.bp"]
    return ctx, weights, sel_emb


_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG2 = math.log(2.0)


def squashed_log_prob(mean, std, raw):
    """Log density of tanh(raw) under the squashed Gaussian (exact Jacobian)."""
    z = (raw - mean) / std
    gauss = -ad.log(std) - _HALF_LOG_2PI - 0.5 * z * z
    corr = 2.0 * (_LOG2 - raw - ad.softplus(-2.0 * raw))
    return ad.sum_(gauss - corr, axis=1)


def decide(
    context,
    s_hat,
    params,
    cfg: NetConfig,
    rng: np.random.Generator | None = None,
    deterministic: bool = False,
    raw_action: np.ndarray | None = None,
):
    """Decision state and squashed-Gaussian policy output.

    ``raw_action`` replays a stored pre-squash sample (training); otherwise a
    sample is drawn from ``rng``, or the mode is returned when deterministic.
    """
    b = ad.val(context).shape[0]
    x = ad.concat([context, ad.reshape(s_hat, (b, 1))], axis=1)
    u = _two_layer(x, params, "ego_dec", out_tanh=True)
    out = _two_layer(u, params, "policy", out_tanh=False)
    mean = out[:, : cfg.action_dim]
    std = ad.softplus(out[:, cfg.action_dim :]) + cfg.std_floor
    if raw_action is not None:
        raw = np.asarray(raw_action, dtype=np.float64)
    elif deterministic:
        raw = mean
    else:
        if rng is None:
            raise ValueError("sampling requires a random generator")
        raw = ad.val(mean) + ad.val(std) * rng.standard_normal((b, cfg.action_dim))
    action = ad.tanh(raw)
    log_prob = squashed_log_prob(mean, std, raw)
    return u, PolicyOutput(mean=mean, std=std, raw=raw, action=action, log_prob=log_prob)


def leader_set(sel_p_values: np.ndarray, sel_mask: np.ndarray, delta_p: float) -> np.ndarray:
    """Mask of selected slots whose priority strictly clears 1/2 + delta_p."""
    return ((np.asarray(sel_p_values) > 0.5 + delta_p) & (np.asarray(sel_mask) > 0)).astype(float)


def predict_leader_actions(sel_emb, sel_p, params, cfg: NetConfig):
    """Per-slot one-step action guesses in [-1, 1]^A; no cross-slot mixing."""
    b, k = ad.val(sel_p).shape
    x = ad.concat(
        [ad.reshape(sel_emb, (b * k, cfg.d_n)), ad.reshape(sel_p, (b * k, 1))], axis=1
    )
    out = _two_layer(x, params, "predict", out_tanh=True)
    return ad.reshape(out, (b, k, cfg.action_dim))


def value_head(u, leader_actions, leader_mask, params, cfg: NetConfig, use_target: bool = False):
    """Leader-conditioned state value; zero leader input plus a count of 0
    when the leader set is empty."""
    b = ad.val(u).shape[0]
    gated = leader_actions * leader_mask[:, :, None]
    flat = ad.reshape(gated, (b, cfg.K * cfg.action_dim))
    count = leader_mask.sum(axis=1, keepdims=True)
    x = ad.concat([u, flat, count], axis=1)
    name = "target_value" if use_target else "value"
    return ad.reshape(_two_layer(x, params, name, out_tanh=False), (b,))


def forward(
    params,
    cfg: NetConfig,
    ego: np.ndarray,
    nbr: np.ndarray,
    rng: np.random.Generator | None = None,
    deterministic: bool = False,
    raw_action: np.ndarray | None = None,
    ablation: str = "full",
    need_value: bool = False,
    use_target_value: bool = False,
    priority_override: np.ndarray | None = None,
    value_pred_override: np.ndarray | None = None,
    need_pred: bool = True,
) -> ActResult:
    """Full per-agent pass from observation to action (and optionally value).

    ``params`` maps names to ndarrays (fast path) or tape tensors (training).
    ``ablation`` is one of full / random_priority / no_stackelberg; the
    no_topk variant is expressed through the config (K == M).  The value fed
    to the critic consumes detached leader predictions, so value errors never
    steer the prediction head.  ``priority_override`` pins the selection
    priorities (used to keep tape and numpy passes of one batch consistent
    under the random_priority ablation, and to hold the discrete selection
    fixed in finite-difference harnesses); ``value_pred_override`` likewise
    pins the critic's leader-action input to explicit constants.
    """
    nbr = np.asarray(nbr, dtype=np.float64)
    valid = nbr[:, :, 4]
    h_ego, h_nbr = encode(ego, nbr, params, cfg)
    edge_logits, p_hat, s_hat = topo_decode(h_ego, h_nbr, valid, params, cfg)

    if priority_override is not None:
        select_p = np.asarray(priority_override, dtype=float)
    elif ablation == "random_priority":
        if rng is None:
            raise ValueError("random_priority ablation requires a random generator")
        select_p = rng.uniform(size=valid.shape)
    else:
        select_p = ad.val(p_hat)
    sel_idx, sel_mask = topk_select(select_p, valid, cfg.K)
    sel_p = ad.take_slots(p_hat, sel_idx)

    context, _, sel_emb = topo_attention(h_ego, h_nbr, sel_idx, sel_mask, params, cfg)
    u, policy = decide(context, s_hat, params, cfg, rng, deterministic, raw_action)

    if ablation == "no_stackelberg":
        leaders = np.zeros_like(sel_mask)
    else:
        sel_select_p = np.take_along_axis(np.asarray(select_p), sel_idx, axis=1)
        leaders = leader_set(sel_select_p, sel_mask, cfg.delta_p)

    pred = None
    if need_pred or need_value:
        pred = predict_leader_actions(sel_emb, sel_p, params, cfg)
    val_out = None
    if need_value:
        v_in = ad.detach(pred) if value_pred_override is None else np.asarray(value_pred_override)
        val_out = value_head(u, v_in, leaders, params, cfg, use_target=use_target_value)
    return ActResult(
        h_ego=h_ego,
        h_nbr=h_nbr,
        edge_logits=edge_logits,
        p_hat=p_hat,
        s_hat=s_hat,
        select_p=np.asarray(select_p),
        sel_idx=sel_idx,
        sel_mask=sel_mask,
        sel_p=sel_p,
        leader_mask=leaders,
        context=context,
        u=u,
        policy=policy,
        pred_actions=pred,
        value=val_out,
    )
