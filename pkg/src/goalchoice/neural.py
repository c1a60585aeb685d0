"""Encoder, social attention, goal scoring and mixture decoder.

The forward pass is batched over instances: every agent track of every
instance in a batch is folded by one shared LSTM, neighbours reach the
attention heads through an index table, and the ``L`` mode decoders of all
instances run as one recurrent batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import ParamStore, Tensor, init_lstm, lstm_cell, xavier_uniform
from .config import ModelConfig
from .dcm import DcmFeatures, compute_features
from .errors import ContractError
from .grid import build_grid, label_goal
from .ingest import InteractionSpace, PredictionInstance, anchor_state
from .scene import THETA, cv_path

STATE_SCALE_ANGLE = math.pi
MASK_NEG = -1e30


# --------------------------------------------------------------- parameters


def init_params(cfg: ModelConfig, rng) -> ParamStore:
    """Xavier-uniform matrices, zero biases (forget gates +1), zero DCM coefficients."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    p = ParamStore()
    C, E, d, H = cfg.hidden, cfg.embed, cfg.attn_dim, cfg.n_heads
    p.add("emb.w", xavier_uniform(rng, 5, E))
    p.add("emb.b", np.zeros(E))
    init_lstm(p, "enc", E, C, rng)
    for name in ("q", "k", "v"):
        p.add(f"att.w{name}", xavier_uniform(rng, C, H * d))
        p.add(f"att.b{name}", np.zeros(H * d))
    p.add("score.w", xavier_uniform(rng, C + d, 1))
    p.add("goal.w", xavier_uniform(rng, 2, cfg.goal_embed))
    p.add("goal.b", np.zeros(cfg.goal_embed))
    init_lstm(p, "dec", C + d + cfg.goal_embed, cfg.dec_hidden, rng)
    p.add("out.w", xavier_uniform(rng, cfg.dec_hidden, 5))
    p.add("out.b", np.zeros(5))
    p.add("prob.w", xavier_uniform(rng, cfg.dec_hidden, 1))
    p.add("prob.b", np.zeros(1))
    if cfg.dcm is not None:
        p.add("dcm.beta", np.zeros((cfg.n_features, 1)))
    return p


# ------------------------------------------------------------ social tensor


@dataclass
class SocialTensor:
    """Neighbour placement on an (M, N) grid over the interaction space.

    ``cells`` maps (row, col) to an index into ``instance.scene.neighbors``;
    rows run from behind to ahead, columns from right (-x) to left (+x).
    ``states`` optionally holds the encoder state placed in each cell.
    """

    m: int
    n: int
    cells: dict[tuple[int, int], int] = field(default_factory=dict)
    states: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    dropped: int = 0

    @property
    def occupancy(self) -> np.ndarray:
        grid = np.full((self.m, self.n), -1, dtype=int)
        for (r, c), j in self.cells.items():
            grid[r, c] = j
        return grid

    def ordered(self) -> list[tuple[tuple[int, int], int]]:
        """Occupied cells in row-major order."""
        return sorted(self.cells.items())


def cell_index(point, space: InteractionSpace, m: int, n: int) -> tuple[int, int]:
    x, y = float(point[0]), float(point[1])
    row = math.floor((y + space.behind) / (space.ahead + space.behind) * m)
    col = math.floor((x + space.side) / (2 * space.side) * n)
    return min(max(row, 0), m - 1), min(max(col, 0), n - 1)


def placement_anchor(track, instance: PredictionInstance, space: InteractionSpace) -> Optional[np.ndarray]:
    """Position used to place a neighbour: t_obs if inside, else its first CV position inside."""
    s = instance.scene
    if track.start > s.obs_step:
        return None
    state = anchor_state(track, s.obs_step, s.dt)
    if space.contains(state[:2])[0]:
        return np.asarray(state[:2], dtype=float)
    path = cv_path(state, np.arange(1, s.t_f + 1) * s.dt)
    inside = np.flatnonzero(space.contains(path))
    return path[inside[0]] if len(inside) else None


def build_social_tensor(instance: PredictionInstance, space: InteractionSpace = InteractionSpace(),
                        m: int = 10, n: int = 10, encoder_out=None) -> SocialTensor:
    """Place selected neighbours; a shared cell keeps the neighbour nearest the origin."""
    tensor = SocialTensor(m, n)
    best: dict[tuple[int, int], tuple] = {}
    for j, (track, keep) in enumerate(zip(instance.scene.neighbors, instance.neighbor_mask)):
        if not keep:
            continue
        anchor = placement_anchor(track, instance, space)
        if anchor is None:
            continue
        cell = cell_index(anchor, space, m, n)
        # order-independent key so permuting neighbours cannot change the winner
        key = (math.hypot(*anchor), tuple(track.states.ravel().tolist()), j)
        if cell in best:
            tensor.dropped += 1
            if key[:2] >= best[cell][:2]:
                continue
        best[cell] = key
    tensor.cells = {cell: key[2] for cell, key in best.items()}
    if encoder_out is not None:
        tensor.states = {cell: encoder_out.neighbors[j] for cell, j in tensor.cells.items()}
    return tensor


# ------------------------------------------------------------ batch assembly


@dataclass
class InstanceData:
    """Numeric inputs of one instance, precomputed once per phase."""

    instance_id: str
    target_obs: np.ndarray  # (t_obs, 5)
    nb_obs: np.ndarray  # (n, t_obs, 5) placed neighbours, row-major cell order
    nb_mask: np.ndarray  # (n, t_obs) 1 where observed
    goals: Optional[np.ndarray]  # (K, 2)
    features: Optional[DcmFeatures]
    k_star: Optional[int]
    gt: Optional[np.ndarray]  # (t_f, 2)
    t_f: int


def _obs_window(track, t0: int, t_obs: int) -> tuple[np.ndarray, np.ndarray]:
    states = np.zeros((t_obs, 5))
    mask = np.zeros(t_obs)
    for i, step in enumerate(range(t0, t0 + t_obs)):
        if track.has(step):
            states[i] = track.row(step)
            mask[i] = 1.0
    return states, mask


def prepare_instance(instance: PredictionInstance, cfg: ModelConfig, phase: str = "train") -> InstanceData:
    s = instance.scene
    target_obs = instance.target_obs()
    if len(target_obs) != s.t_obs:
        raise ContractError(f"instance {instance.instance_id}: target lacks a full observation window")
    tensor = build_social_tensor(instance, cfg.space, cfg.grid_m, cfg.grid_n)
    nb_obs, nb_mask = [], []
    for _, j in tensor.ordered():
        st, mk = _obs_window(s.neighbors[j], s.t0, s.t_obs)
        nb_obs.append(st)
        nb_mask.append(mk)
    goals = feats = k_star = None
    if cfg.uses_goals:
        grid = build_grid(target_obs[-1], s.horizon, cfg.grid, cfg.grid_mode)
        goals = np.array(grid.positions)
        if cfg.dcm is not None:
            feats = compute_features(grid, instance, cfg.dcm, phase, cfg.features)
        if instance.ground_truth_future is not None:
            k_star = label_goal(grid, instance.ground_truth_future[-1])
    gt = None if instance.ground_truth_future is None else np.array(instance.ground_truth_future)
    return InstanceData(
        instance_id=instance.instance_id,
        target_obs=np.array(target_obs),
        nb_obs=np.array(nb_obs).reshape(-1, s.t_obs, 5),
        nb_mask=np.array(nb_mask).reshape(-1, s.t_obs),
        goals=goals,
        features=feats,
        k_star=k_star,
        gt=gt,
        t_f=s.t_f,
    )


@dataclass
class Batch:
    ids: list[str]
    agent_x: np.ndarray  # (t_obs, A, 5) scaled inputs; rows 0..B-1 are the targets
    agent_mask: np.ndarray  # (t_obs, A, 1)
    nb_index: np.ndarray  # (B, Nmax) rows of agent_x
    nb_valid: np.ndarray  # (B, Nmax) bool
    goals: Optional[np.ndarray]  # (B, K, 2)
    features: Optional[np.ndarray]  # (B, K, F)
    k_star: Optional[np.ndarray]  # (B,)
    gt: Optional[np.ndarray]  # (B, t_f, 2)
    t_f: int

    @property
    def size(self) -> int:
        return len(self.ids)


def scale_states(states: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    scale = np.array([cfg.in_scale, cfg.in_scale, cfg.in_scale, cfg.in_scale / 2, STATE_SCALE_ANGLE])
    return states / scale


def collate(items: Sequence[InstanceData], cfg: ModelConfig) -> Batch:
    if not items:
        raise ContractError("empty batch")
    t_obs = items[0].target_obs.shape[0]
    t_f = items[0].t_f
    if any(it.target_obs.shape[0] != t_obs or it.t_f != t_f for it in items):
        raise ContractError("all instances in a batch need the same t_obs and t_f")
    B = len(items)
    counts = [len(it.nb_obs) for it in items]
    n_max = max(counts) if counts else 0
    rows = [it.target_obs for it in items] + [nb for it in items for nb in it.nb_obs]
    masks = [np.ones(t_obs) for _ in items] + [mk for it in items for mk in it.nb_mask]
    agent_x = scale_states(np.stack(rows), cfg).transpose(1, 0, 2)
    agent_mask = np.stack(masks).T[:, :, None]
    nb_index = np.zeros((B, n_max), dtype=int)
    nb_valid = np.zeros((B, n_max), dtype=bool)
    offset = B
    for b, c in enumerate(counts):
        nb_index[b, :c] = np.arange(offset, offset + c)
        nb_valid[b, :c] = True
        offset += c
    goals = np.stack([it.goals for it in items]) if cfg.uses_goals else None
    features = None
    if cfg.dcm is not None:
        features = np.stack([it.features.matrix(cfg.dcm) for it in items])
    k_star = None
    if cfg.uses_goals and all(it.k_star is not None for it in items):
        k_star = np.array([it.k_star for it in items])
    gt = np.stack([it.gt for it in items]) if all(it.gt is not None for it in items) else None
    return Batch([it.instance_id for it in items], agent_x, agent_mask, nb_index, nb_valid,
                 goals, features, k_star, gt, t_f)


# ------------------------------------------------------------------ network


def encode(agent_x: np.ndarray, agent_mask: np.ndarray, params: ParamStore) -> Tensor:
    """Shared embedding + LSTM over every agent row; returns the final hidden states (A, C)."""
    t_obs, A, _ = agent_x.shape
    C = params["enc.b"].shape[0] // 4
    dtype = params["enc.w"].value.dtype
    h = Tensor(np.zeros((A, C), dtype=dtype))
    c = Tensor(np.zeros((A, C), dtype=dtype))
    for t in range(t_obs):
        e = ag.tanh(ag.add(ag.matmul(agent_x[t], params["emb.w"]), params["emb.b"]))
        h_new, c_new = lstm_cell(e, h, c, params["enc.w"], params["enc.b"], fused=True)
        m = agent_mask[t]
        if np.all(m == 1):
            h, c = h_new, c_new
        else:
            # agents not yet (or no longer) observed keep their previous state
            h = ag.add(h, ag.mul(ag.sub(h_new, h), m))
            c = ag.add(c, ag.mul(ag.sub(c_new, c), m))
    return h


def attend(h_target: Tensor, h_all: Tensor, nb_index: np.ndarray, nb_valid: np.ndarray,
           params: ParamStore, n_heads: int) -> Tensor:
    """Scaled dot-product attention of each target over its placed neighbours, per head.

    Returns (B, H, d); heads whose instance has no neighbour output zeros.
    """
    B = h_target.shape[0]
    d = params["att.bq"].shape[0] // n_heads
    dtype = params["att.wq"].value.dtype
    n_max = nb_index.shape[1]
    if n_max == 0:
        return Tensor(np.zeros((B, n_heads, d), dtype=dtype))
    q = ag.add(ag.matmul(h_target, params["att.wq"]), params["att.bq"])
    q = ag.reshape(q, (B, n_heads, 1, d))
    hn = ag.getitem(h_all, nb_index)  # (B, Nmax, C)
    k = ag.add(ag.matmul(hn, params["att.wk"]), params["att.bk"])
    k = ag.transpose(ag.reshape(k, (B, n_max, n_heads, d)), (0, 2, 3, 1))  # (B, H, d, Nmax)
    v = ag.add(ag.matmul(hn, params["att.wv"]), params["att.bv"])
    v = ag.transpose(ag.reshape(v, (B, n_max, n_heads, d)), (0, 2, 1, 3))  # (B, H, Nmax, d)
    scores = ag.mul(ag.matmul(q, k), 1.0 / math.sqrt(d))
    scores = ag.add(scores, np.where(nb_valid, 0.0, MASK_NEG)[:, None, None, :])
    w = ag.softmax(scores, axis=-1)
    out = ag.reshape(ag.matmul(w, v), (B, n_heads, d))
    has_any = nb_valid.any(axis=1).astype(float)[:, None, None]
    if np.all(has_any == 1):
        return out
    return ag.mul(out, has_any)


def contexts(h_target: Tensor, heads: Tensor) -> Tensor:
    """Concat(h_T, A_h) for every head: (B, H, C + d)."""
    B, H, _ = heads.shape
    C = h_target.shape[-1]
    hT = ag.broadcast_to(ag.reshape(h_target, (B, 1, C)), (B, H, C))
    return ag.concat([hT, heads], axis=-1)


def goal_scores(z: Tensor, params: ParamStore) -> Tensor:
    """Shared scalar projection of each goal context: (B, K, C+d) -> (B, K)."""
    z = ag.tensor(z)
    s = ag.matmul(z, params["score.w"])
    return ag.reshape(s, s.shape[:-1])


def top_goals(s: np.ndarray, n: int) -> np.ndarray:
    """First ``n`` goal indices by descending score, ties by lower index."""
    return np.argsort(-np.asarray(s), axis=-1, kind="stable")[..., :n]


# Output bounds: tanh saturates to exactly 1 in float64, so rho is scaled just
# inside the unit interval, and log sigma is squashed to keep sigma finite and positive.
RHO_MAX = 1.0 - 1e-6
LOG_SIGMA_BOUND = 15.0


@dataclass
class DecoderOut:
    mu: Tensor  # (B, L, T, 2)
    log_sigma: Tensor  # (B, L, T, 2), within +-LOG_SIGMA_BOUND
    rho: Tensor  # (B, L, T), within +-RHO_MAX
    p_logits: Tensor  # (B, L)


def decode(ctx: Tensor, goal_xy: Optional[np.ndarray], params: ParamStore, cfg: ModelConfig, t_f: int) -> DecoderOut:
    """Unroll one decoder per mode from a zero state with a constant input.

    ``ctx`` is (B, L, C+d); ``goal_xy`` (B, L, 2) or None when no goals are used
    (the goal embedding input is then zero).
    """
    B, L, _ = ctx.shape
    G = params["goal.b"].shape[0]
    Hd = params["dec.b"].shape[0] // 4
    dtype = params["dec.w"].value.dtype
    if goal_xy is None:
        g_emb = Tensor(np.zeros((B, L, G), dtype=dtype))
    else:
        if goal_xy.shape[:2] != (B, L):
            raise ContractError(f"need {L} goals per instance, got {goal_xy.shape[:2]}")
        g_emb = ag.add(ag.matmul(goal_xy / cfg.in_scale, params["goal.w"]), params["goal.b"])
    x = ag.reshape(ag.concat([ctx, g_emb], axis=-1), (B * L, -1))
    h = Tensor(np.zeros((B * L, Hd), dtype=dtype))
    c = Tensor(np.zeros((B * L, Hd), dtype=dtype))
    hs = []
    for _ in range(t_f):
        h, c = lstm_cell(x, h, c, params["dec.w"], params["dec.b"], fused=True)
        hs.append(ag.reshape(h, (B * L, 1, Hd)))
    seq = ag.concat(hs, axis=1)  # (B*L, T, Hd)
    raw = ag.reshape(ag.add(ag.matmul(seq, params["out.w"]), params["out.b"]), (B, L, t_f, 5))
    logits = ag.add(ag.matmul(h, params["prob.w"]), params["prob.b"])
    return DecoderOut(
        mu=ag.mul(raw[..., 0:2], mean_scale(cfg, t_f)),
        log_sigma=ag.mul(ag.tanh(ag.mul(raw[..., 2:4], 1.0 / LOG_SIGMA_BOUND)), LOG_SIGMA_BOUND),
        rho=ag.mul(ag.tanh(raw[..., 4]), RHO_MAX),
        p_logits=ag.reshape(logits, (B, L)),
    )


def mean_scale(cfg: ModelConfig, t_f: int) -> np.ndarray:
    """Per-step factor from raw output to mean position, (T, 1).

    Grows linearly with the step index so that motion at constant velocity is a
    constant raw output; reaches ``out_scale`` at the last step.
    """
    return (cfg.out_scale * np.arange(1, t_f + 1) / t_f)[:, None]


@dataclass
class ForwardOut:
    u: Optional[Tensor]  # (B, K) DCM utilities
    nn: Optional[Tensor]  # (B, K) network goal scores
    s: Optional[Tensor]  # (B, K) fused scores
    log_pi: Optional[Tensor]  # (B, K)
    top_l: Optional[np.ndarray]  # (B, L)
    dec: DecoderOut
    h_target: Tensor
    heads: Tensor


def forward(batch: Batch, params: ParamStore, cfg: ModelConfig, top_l: Optional[np.ndarray] = None) -> ForwardOut:
    """Full network pass. ``top_l`` pins the goals fed to the decoders instead of
    taking the top-L fused scores (used to differentiate one selection piece)."""
    B, K, L = batch.size, cfg.n_goals, cfg.n_modes
    h_all = encode(batch.agent_x, batch.agent_mask, params)
    h_target = h_all[:B]
    heads = attend(h_target, h_all, batch.nb_index, batch.nb_valid, params, cfg.n_heads)
    ctx = contexts(h_target, heads)
    u = nn = s = log_pi = goal_xy = None
    pinned, top_l = top_l, None
    if cfg.uses_goals:
        if cfg.uses_dcm:
            u = ag.reshape(ag.matmul(batch.features, params["dcm.beta"]), (B, K))
        if cfg.uses_nn_score:
            nn = goal_scores(ctx[:, :K], params)
        s = fuse_scores(u, nn, B, K, params["enc.w"].value.dtype)
        log_pi = ag.log_softmax(s, axis=-1)
        top_l = top_goals(s.value, L) if pinned is None else np.asarray(pinned)
        goal_xy = np.take_along_axis(batch.goals, top_l[..., None], axis=1)
    dec = decode(ctx[:, K:], goal_xy, params, cfg, batch.t_f)
    return ForwardOut(u, nn, s, log_pi, top_l, dec, h_target, heads)


def fuse_scores(u: Optional[Tensor], nn: Optional[Tensor], B: int, K: int, dtype=float) -> Tensor:
    if u is None and nn is None:
        return Tensor(np.zeros((B, K), dtype=dtype))
    if u is None:
        return nn
    if nn is None:
        return u
    return ag.add(u, nn)


# --------------------------------------------------------------- mode sets


@dataclass
class ModeSet:
    """Per-mode Gaussian sequences: mu, sigma (L, T, 2), rho (L, T), probs (L,)."""

    mu: np.ndarray
    sigma: np.ndarray
    rho: np.ndarray
    probs: np.ndarray

    @property
    def n_modes(self) -> int:
        return len(self.probs)


def mode_sets(dec: DecoderOut) -> list[ModeSet]:
    mu = dec.mu.value
    sigma = np.exp(dec.log_sigma.value)
    rho = dec.rho.value
    logits = dec.p_logits.value
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    probs = e / e.sum(axis=-1, keepdims=True)
    return [ModeSet(mu[b], sigma[b], rho[b], probs[b]) for b in range(len(mu))]


# ------------------------------------------------- single-instance helpers


@dataclass
class EncoderOutput:
    target: np.ndarray  # (C,)
    neighbors: dict[int, np.ndarray]  # scene neighbour index -> (C,)


def encode_tracks(instance: PredictionInstance, params: ParamStore, cfg: ModelConfig) -> EncoderOutput:
    """Encode the target and every neighbour observed in the window with shared weights."""
    s = instance.scene
    target = instance.target_obs()
    if len(target) == 0:
        raise ContractError(f"instance {instance.instance_id}: empty target track")
    rows, masks, idx = [target], [np.ones(s.t_obs)], []
    for j, track in enumerate(s.neighbors):
        st, mk = _obs_window(track, s.t0, s.t_obs)
        if mk.sum() == 0:
            continue
        rows.append(st)
        masks.append(mk)
        idx.append(j)
    x = scale_states(np.stack(rows), cfg).transpose(1, 0, 2)
    h = encode(x, np.stack(masks).T[:, :, None], params).value
    return EncoderOutput(h[0], {j: h[i + 1] for i, j in enumerate(idx)})


def decode_modes(contexts_l, goal_xy, params: ParamStore, cfg: ModelConfig, t_f: int) -> ModeSet:
    """Decode one instance's ``L`` contexts, each paired with its goal position."""
    ctx = ag.tensor(contexts_l)
    if ctx.ndim != 2 or ctx.shape[0] != cfg.n_modes:
        raise ContractError(f"expected {cfg.n_modes} contexts, got shape {ctx.shape}")
    if goal_xy is not None:
        goal_xy = np.asarray(goal_xy, dtype=float)
        if goal_xy.shape != (cfg.n_modes, 2):
            raise ContractError(f"expected {cfg.n_modes} goal positions, got shape {goal_xy.shape}")
        goal_xy = goal_xy[None]
    dec = decode(ag.reshape(ctx, (1,) + ctx.shape), goal_xy, params, cfg, t_f)
    return mode_sets(dec)[0]
