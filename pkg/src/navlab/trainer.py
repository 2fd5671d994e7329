"""Rollout collection, minibatch optimization, and the training loop.

Collection executes the policy in parallel environment lanes while an
expert labels every visited state, so one batch serves both the
reinforcement and the imitation objectives. The per-update policy term
is weighted per training mode: a fixed schedule (ppo, dagger, mixed,
early_switcher, hard_switch) or the entropy-gated mix (ealm).

Window bookkeeping: during collection the transformer context resets at
episode starts and whenever it reaches context_len. Each stored step
records its position inside its window, and the raw observations of the
window that was open at segment start are carried along, so update-time
forwards reconstruct exactly the inputs the policy acted from.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .evalstats import EpisodeResult, episode_metrics
from .expert import ExplorationState, expert_action, update_visibility
from .gridworld import NavEnv
from .losses import (
    EALMState,
    bc_loss,
    ealm_gate,
    entropy_terms,
    gae_batch,
    gate_lambda,
    ppo_loss,
    ppo_terms,
    seg_loss,
    total_loss,
    value_loss,
)
from .optim import OptimizerState, adam_step, clip_global_norm
from .policy import (
    PolicyParams,
    encode_observations,
    forward_features,
    head_outputs,
    last_position_outputs,
    load_checkpoint,
    sample_action,
    save_checkpoint,
)
from .runner import EpisodeSampler, WorldConfig, cached_map, evaluate_policy, source_mask

MODES = ("ealm", "ppo", "dagger", "dagger_plus_ppo", "early_switcher", "hard_switch")

LOG_COLUMNS = ("env_steps", "sr", "spl", "softspl", "collisions", "loss_total",
               "loss_ppo", "loss_bc", "loss_value", "loss_dice", "loss_bce",
               "entropy", "ema_entropy", "lambda", "p_ppo", "grad_norm", "lr")


@dataclass
class TrainConfig:
    mode: str = "ealm"
    num_envs: int = 8
    steps_per_update: int = 100
    ppo_epochs: int = 1
    minibatches: int = 2
    total_env_steps: int = 100_000
    lr: float = 2.5e-4
    linear_lr_decay: bool = True
    adam_eps: float = 1e-5
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    c_v: float = 0.5
    beta: float = 0.01
    max_grad_norm: float = 0.2
    seg_weight: float = 1.0
    reward_window: int = 50
    seed: int = 1
    switch_start: int = 0
    switch_end: int = 0
    eval_every: int = 0
    eval_episodes: int = 40
    checkpoint_every: int = 0
    teacher_forcing: float = 0.0
    mask_source: str = "gt"  # training-time mask input: gt or none
    mask_filter_extent: int = 0
    mask_filter_area: int = 0
    ealm_alpha: float = 0.95
    h_low: float = 0.35
    h_high: float = 0.75
    scale_gate_bounds: bool = True
    per_sample_gate: bool = False

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        batch = self.num_envs * self.steps_per_update
        if batch % self.minibatches:
            raise ValueError("minibatches must divide num_envs * steps_per_update")
        if self.mode in ("early_switcher", "hard_switch"):
            if self.switch_start <= 0:
                raise ValueError(f"mode {self.mode} needs switch_start > 0")
            if self.mode == "early_switcher" and not self.switch_start < self.switch_end:
                raise ValueError("early_switcher needs switch_start < switch_end")
        if self.mask_source not in ("gt", "none"):
            raise ValueError("training mask_source must be 'gt' or 'none'")


@dataclass
class RolloutBatch:
    views: np.ndarray
    goals: np.ndarray
    prevs: np.ndarray
    masks: np.ndarray
    win_pos: np.ndarray
    actions: np.ndarray
    expert_actions: np.ndarray
    logprobs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    bootstrap: np.ndarray
    carry: list  # per env: dict of obs arrays for the window open at t=0
    episodes: list = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def size(self):
        return int(self.views.shape[0] * self.views.shape[1])


class _Lane:
    """One environment worker lane with its expert state and window cache."""

    __slots__ = ("env", "explo", "window_vecs", "window_obs", "pending")

    def __init__(self, spec):
        self.env = NavEnv(spec, cached_map(spec.map_seed, spec.map_params))
        self.explo = ExplorationState.for_map(self.env.grid, spec.goal_category)
        self.window_vecs = []
        self.window_obs = []  # raw (view, goal, prev, mask) as fed to the policy
        self.pending = self.env.observe()
        update_visibility(self.explo, self.env.pose, self.pending.ego_view)

    def start_episode(self, spec):
        self.__init__(spec)


def _mask_filter(cfg: TrainConfig):
    if cfg.mask_filter_extent > 0 or cfg.mask_filter_area > 0:
        return (cfg.mask_filter_extent, cfg.mask_filter_area)
    return None


def collect_rollout(lanes, params: PolicyParams, cfg: TrainConfig,
                    spec_stream, act_rng, seed_tag=0) -> RolloutBatch:
    """Gather steps_per_update transitions per lane with expert labels."""
    e_n = len(lanes)
    t_n = cfg.steps_per_update
    k = params.cfg.view_size
    c = params.cfg.context_len
    filt = _mask_filter(cfg)

    batch = RolloutBatch(
        views=np.zeros((e_n, t_n, k, k), dtype=np.int16),
        goals=np.zeros((e_n, t_n), dtype=np.int64),
        prevs=np.zeros((e_n, t_n), dtype=np.int64),
        masks=np.zeros((e_n, t_n, k, k), dtype=np.uint8),
        win_pos=np.zeros((e_n, t_n), dtype=np.int64),
        actions=np.zeros((e_n, t_n), dtype=np.int64),
        expert_actions=np.zeros((e_n, t_n), dtype=np.int64),
        logprobs=np.zeros((e_n, t_n), dtype=np.float64),
        values=np.zeros((e_n, t_n), dtype=np.float64),
        rewards=np.zeros((e_n, t_n), dtype=np.float64),
        dones=np.zeros((e_n, t_n), dtype=np.uint8),
        bootstrap=np.zeros(e_n, dtype=np.float64),
        carry=[{
            "views": np.stack([o[0] for o in ln.window_obs]) if ln.window_obs else np.zeros((0, k, k), np.int16),
            "goals": np.array([o[1] for o in ln.window_obs], dtype=np.int64),
            "prevs": np.array([o[2] for o in ln.window_obs], dtype=np.int64),
            "masks": np.stack([o[3] for o in ln.window_obs]) if ln.window_obs else np.zeros((0, k, k), np.uint8),
        } for ln in lanes],
    )

    def encode_pending():
        views = np.stack([ln.pending.ego_view for ln in lanes])
        goals = np.array([ln.pending.goal_category for ln in lanes])
        prevs = np.array([ln.pending.prev_action for ln in lanes])
        masks = np.stack([
            source_mask(ln.pending, cfg.mask_source, mask_filter=filt)
            for ln in lanes
        ])
        vecs = encode_observations(params, views, goals, prevs, masks).data
        return views, goals, prevs, masks, vecs

    def forward_lanes():
        t_max = max(len(ln.window_vecs) for ln in lanes)
        obs = np.zeros((e_n, t_max, params.cfg.obs_dim), dtype=params.dtype)
        positions = np.zeros((e_n, t_max), dtype=np.int64)
        lengths = np.zeros(e_n, dtype=np.int64)
        for i, ln in enumerate(lanes):
            m = len(ln.window_vecs)
            obs[i, :m] = ln.window_vecs
            positions[i, :m] = np.arange(m)
            lengths[i] = m
        feats = forward_features(params, Tensor(obs), positions, lengths=lengths)
        return last_position_outputs(params, feats, lengths - 1)

    for t in range(t_n):
        views, goals, prevs, masks, vecs = encode_pending()
        for i, ln in enumerate(lanes):
            if len(ln.window_vecs) >= c:  # truncation: a fresh window opens
                ln.window_vecs = []
                ln.window_obs = []
            ln.window_vecs.append(vecs[i])
            ln.window_obs.append((views[i], goals[i], prevs[i], masks[i]))
            batch.views[i, t] = views[i]
            batch.goals[i, t] = goals[i]
            batch.prevs[i, t] = prevs[i]
            batch.masks[i, t] = masks[i]
            batch.win_pos[i, t] = len(ln.window_vecs) - 1

        logits, values = forward_lanes()
        for i, ln in enumerate(lanes):
            _, logprobs_row, _ = _dist(logits[i])
            action, _, _ = sample_action(logits[i], act_rng)
            teacher = expert_action(ln.explo, ln.env.grid, ln.env.pose,
                                    ln.env.spec.goal_category, ln.env.spec.success_radius)
            if cfg.teacher_forcing > 0.0 and act_rng.random() < cfg.teacher_forcing:
                action = teacher
            res = ln.env.step(action)
            batch.actions[i, t] = action
            batch.expert_actions[i, t] = teacher
            batch.logprobs[i, t] = logprobs_row[action]
            batch.values[i, t] = values[i]
            batch.rewards[i, t] = res.reward
            batch.dones[i, t] = int(res.done)
            if res.done:
                batch.episodes.append(EpisodeResult(
                    success=res.info["success"],
                    shortest_path=ln.env.shortest_path,
                    agent_path=ln.env.path_length,
                    start_distance=ln.env.start_goal_distance,
                    final_distance=ln.env.final_goal_distance(),
                    collisions=ln.env.collisions,
                    steps=ln.env.steps,
                    goal_category=ln.env.spec.goal_category,
                    split="train",
                    seed=seed_tag,
                ))
                ln.start_episode(next(spec_stream))
            else:
                ln.pending = res.observation
                update_visibility(ln.explo, ln.env.pose, ln.pending.ego_view)

    # Bootstrap values for unfinished episodes from the next observation.
    _, _, _, _, vecs = encode_pending()
    boot_windows = []
    for i, ln in enumerate(lanes):
        w = list(ln.window_vecs)
        if len(w) >= c:
            w = []
        w.append(vecs[i])
        boot_windows.append(w)
    t_max = max(len(w) for w in boot_windows)
    obs = np.zeros((e_n, t_max, params.cfg.obs_dim), dtype=params.dtype)
    positions = np.zeros((e_n, t_max), dtype=np.int64)
    lengths = np.zeros(e_n, dtype=np.int64)
    for i, w in enumerate(boot_windows):
        obs[i, : len(w)] = w
        positions[i, : len(w)] = np.arange(len(w))
        lengths[i] = len(w)
    feats = forward_features(params, Tensor(obs), positions, lengths=lengths)
    _, boot_values = last_position_outputs(params, feats, lengths - 1)
    batch.bootstrap[:] = boot_values
    return batch


def _dist(logits_row):
    shifted = logits_row - logits_row.max()
    e = np.exp(shifted)
    probs = e / e.sum()
    logprobs = shifted - np.log(e.sum())
    return probs, logprobs, float(-(probs * logprobs).sum())


def apply_gae(batch: RolloutBatch, cfg: TrainConfig):
    batch.advantages, batch.returns = gae_batch(
        batch.rewards, batch.values, batch.dones, batch.bootstrap,
        gamma=cfg.gamma, lam=cfg.gae_lambda,
    )
    return batch


def mode_weights(cfg: TrainConfig, env_steps):
    """Fixed-schedule policy-term weights; ealm is handled via the gate."""
    if cfg.mode == "ppo":
        return 1.0, 0.0
    if cfg.mode == "dagger":
        return 0.0, 1.0
    if cfg.mode == "dagger_plus_ppo":
        return 0.5, 0.5
    if cfg.mode == "early_switcher":
        frac = (env_steps - cfg.switch_start) / max(1, cfg.switch_end - cfg.switch_start)
        p = float(np.clip(frac, 0.0, 1.0))
        return p, 1.0 - p
    if cfg.mode == "hard_switch":
        p = 0.0 if env_steps < cfg.switch_start else 1.0
        return p, 1.0 - p
    raise ValueError(f"mode_weights does not apply to mode {cfg.mode!r}")


def _window_slices(batch: RolloutBatch, env, t0, t1):
    """Window instances covering steps [t0, t1) of one env row.

    Yields (seq_start, loss_steps) where seq_start < 0 means the window
    begins -seq_start observations into the env's carry buffer."""
    t = t0
    while t < t1:
        start = t - int(batch.win_pos[env, t])
        end = t
        while end + 1 < t1 and batch.win_pos[env, end + 1] != 0:
            end += 1
        yield start, (max(start, t0), end + 1)
        t = end + 1


def _build_sequences(batch: RolloutBatch, flat_lo, flat_hi):
    """Sequence assembly for one contiguous minibatch shard.

    Returns (views, goals, prevs, masks, seq_positions, lengths, loss map)
    where loss map aligns flattened (sequence, position) rows with global
    (env, t) step indices."""
    e_n, t_n = batch.win_pos.shape
    seqs = []
    for env in range(e_n):
        lo = max(flat_lo - env * t_n, 0)
        hi = min(flat_hi - env * t_n, t_n)
        if lo >= hi:
            continue
        for start, (loss_a, loss_b) in _window_slices(batch, env, lo, hi):
            seqs.append((env, start, loss_a, loss_b))
    k = batch.views.shape[2]
    views, goals, prevs, masks = [], [], [], []
    lengths = []
    loss_seq, loss_pos, loss_env, loss_t = [], [], [], []
    for si, (env, start, loss_a, loss_b) in enumerate(seqs):
        if start < 0:
            carry = batch.carry[env]
            n0 = -start
            v = np.concatenate([carry["views"][-n0:], batch.views[env, :loss_b]])
            g = np.concatenate([carry["goals"][-n0:], batch.goals[env, :loss_b]])
            p = np.concatenate([carry["prevs"][-n0:], batch.prevs[env, :loss_b]])
            m = np.concatenate([carry["masks"][-n0:], batch.masks[env, :loss_b]])
        else:
            v = batch.views[env, start:loss_b]
            g = batch.goals[env, start:loss_b]
            p = batch.prevs[env, start:loss_b]
            m = batch.masks[env, start:loss_b]
        views.append(v)
        goals.append(g)
        prevs.append(p)
        masks.append(m)
        lengths.append(len(v))
        for t in range(loss_a, loss_b):
            loss_seq.append(si)
            loss_pos.append(t - start)
            loss_env.append(env)
            loss_t.append(t)
    return (views, goals, prevs, masks, lengths,
            np.array(loss_seq), np.array(loss_pos), np.array(loss_env), np.array(loss_t))


def _minibatch_terms(params, batch, flat_lo, flat_hi, cfg, shuffle_rng):
    """Forward one contiguous shard and compute the raw loss ingredients.

    Returns a dict of Tensors/arrays; the caller decides the policy-term
    weights (the gate reads the batch entropy from this same forward)."""
    (views, goals, prevs, masks, lengths,
     loss_seq, loss_pos, loss_env, loss_t) = _build_sequences(batch, flat_lo, flat_hi)
    b = len(views)
    t_max = max(lengths)
    c = params.cfg.context_len
    vecs = encode_observations(params, np.concatenate(views), np.concatenate(goals),
                               np.concatenate(prevs), np.concatenate(masks))

    index = np.zeros((b, t_max), dtype=np.int64)
    positions = np.zeros((b, t_max), dtype=np.int64)
    row = 0
    for i, n in enumerate(lengths):
        index[i, :n] = np.arange(row, row + n)
        offset = 0
        if params.cfg.shuffle_position_ids and c > n:
            offset = int(shuffle_rng.integers(0, c - n + 1))
        positions[i, :n] = np.arange(n) + offset
        row += n
    padded = ad.embedding(vecs, index)  # (b, t_max, obs_dim)
    feats = forward_features(params, padded, positions, lengths=np.array(lengths))
    logits, values, mask_logits = head_outputs(params, feats)

    flat_rows = loss_seq * t_max + loss_pos
    a_n = params.cfg.action_count
    k = params.cfg.view_size
    sel_logits = ad.embedding(ad.reshape(logits, (b * t_max, a_n)), flat_rows)
    sel_values = ad.reshape(
        ad.embedding(ad.reshape(values, (b * t_max, 1)), flat_rows), (len(flat_rows),))
    sel_mask_logits = ad.reshape(
        ad.embedding(ad.reshape(mask_logits, (b * t_max, k * k)), flat_rows),
        (len(flat_rows), k, k))

    logp = ad.log_softmax(sel_logits, axis=-1)
    per_entropy, batch_entropy = entropy_terms(sel_logits)
    return {
        "new_lp": ad.take_last(logp, batch.actions[loss_env, loss_t]),
        "expert_lp": ad.take_last(logp, batch.expert_actions[loss_env, loss_t]),
        "per_entropy": per_entropy,
        "batch_entropy": batch_entropy,
        "value_term": value_loss(sel_values, batch.returns[loss_env, loss_t]),
        "seg": seg_loss(sel_mask_logits, batch.masks[loss_env, loss_t]),
        "old_lp": batch.logprobs[loss_env, loss_t],
        "adv": batch.advantages[loss_env, loss_t],
        "n_steps": len(flat_rows),
    }


def _assemble(terms, cfg, p_ppo, p_bc, lam_per_sample=None):
    """Total loss from precomputed terms under the given weights."""
    dice, bce = terms["seg"]
    if lam_per_sample is not None:
        ppo_t = ppo_terms(terms["new_lp"], terms["old_lp"], terms["adv"], cfg.clip_eps)
        bc_t = ad.mul(terms["expert_lp"], -1.0)
        lams = lam_per_sample.astype(ppo_t.data.dtype)
        policy_term = ad.mean(ad.add(ad.mul(ppo_t, Tensor(lams)),
                                     ad.mul(bc_t, Tensor(1.0 - lams))))
        total, breakdown = total_loss(
            ad.mean(ppo_t), ad.mean(bc_t), terms["value_term"],
            terms["batch_entropy"], dice, bce, p_ppo=0.0, p_bc=0.0,
            c_v=cfg.c_v, beta=cfg.beta, seg_weight=cfg.seg_weight)
        total = ad.add(total, policy_term)
        breakdown.total = float(total.data)
        return total, breakdown
    ppo_term = (ppo_loss(terms["new_lp"], terms["old_lp"], terms["adv"], cfg.clip_eps)
                if p_ppo else Tensor(np.array(0.0)))
    bc_term = bc_loss(terms["expert_lp"]) if p_bc else Tensor(np.array(0.0))
    return total_loss(ppo_term, bc_term, terms["value_term"], terms["batch_entropy"],
                      dice, bce, p_ppo=p_ppo, p_bc=p_bc,
                      c_v=cfg.c_v, beta=cfg.beta, seg_weight=cfg.seg_weight)


def update(params: PolicyParams, opt: OptimizerState, batch: RolloutBatch,
           ealm_state: EALMState, cfg: TrainConfig, env_steps, shuffle_rng):
    """One optimization pass over a collected batch. Returns the log row."""
    if batch.advantages is None:
        raise ValueError("apply_gae before update")
    n = batch.size
    shard = n // cfg.minibatches
    lr = cfg.lr
    if cfg.linear_lr_decay:
        lr = cfg.lr * max(0.0, 1.0 - env_steps / cfg.total_env_steps)

    sums = {k: 0.0 for k in ("loss_total", "loss_ppo", "loss_bc", "loss_value",
                             "loss_dice", "loss_bce", "entropy", "grad_norm")}
    count = 0
    trainable = params.trainable()
    for _epoch in range(cfg.ppo_epochs):
        for s in range(cfg.minibatches):
            flat_lo, flat_hi = s * shard, (s + 1) * shard
            with Tape() as tape:
                terms = _minibatch_terms(params, batch, flat_lo, flat_hi, cfg, shuffle_rng)
                batch_entropy = float(terms["batch_entropy"].data)
                lam_per_sample = None
                if cfg.mode == "ealm":
                    # The gate reads this minibatch's entropy through the EMA;
                    # the resulting weights are detached scheduler constants.
                    ealm_state, lam, p_ppo, p_bc = ealm_gate(ealm_state, batch_entropy)
                    if cfg.per_sample_gate:
                        lo, hi = ealm_state.h_low, ealm_state.h_high
                        lam_per_sample = np.clip(
                            (hi - terms["per_entropy"].data) / (hi - lo), 0.0, 1.0)
                else:
                    p_ppo, p_bc = mode_weights(cfg, env_steps)
                    # Track the EMA and gate value for logging parity.
                    ealm_state.ema_entropy = (cfg.ealm_alpha * ealm_state.ema_entropy
                                              + (1 - cfg.ealm_alpha) * batch_entropy)
                    ealm_state.lam = gate_lambda(ealm_state.ema_entropy,
                                                 ealm_state.h_low, ealm_state.h_high)
                total, breakdown = _assemble(terms, cfg, p_ppo, p_bc, lam_per_sample)
                grads = backward(tape, total, trainable)
            grads, pre_norm = clip_global_norm(grads, cfg.max_grad_norm)
            adam_step(trainable, grads, opt, lr)
            sums["loss_total"] += breakdown.total
            sums["loss_ppo"] += breakdown.ppo
            sums["loss_bc"] += breakdown.bc
            sums["loss_value"] += breakdown.value
            sums["loss_dice"] += breakdown.seg_dice
            sums["loss_bce"] += breakdown.seg_bce
            sums["entropy"] += batch_entropy
            sums["grad_norm"] += min(pre_norm, cfg.max_grad_norm)
            count += 1

    p_ppo_final = ealm_state.p_ppo if cfg.mode == "ealm" else mode_weights(cfg, env_steps)[0]
    row = {k: v / count for k, v in sums.items()}
    row.update(env_steps=env_steps, ema_entropy=ealm_state.ema_entropy,
               p_ppo=p_ppo_final, lr=lr)
    row["lambda"] = ealm_state.lam
    return row, opt, ealm_state


def _rolling(episodes, window):
    recent = episodes[-window:]
    if not recent:
        return {m: float("nan") for m in ("sr", "spl", "softspl", "collisions")}
    out = {}
    for m in ("sr", "spl", "softspl", "collisions"):
        out[m] = float(np.mean([episode_metrics(r)[m] for r in recent]))
    return out


def format_log_row(row):
    return ",".join(f"{row[c]:.6g}" if isinstance(row[c], float) else str(row[c])
                    for c in LOG_COLUMNS)


def train(cfg: TrainConfig, policy_cfg, world: WorldConfig, out_dir=None,
          initial_params=None, initial_opt=None, quiet=True):
    """Full training loop. Returns (params, opt_state, log rows, eval rows)."""
    cfg.validate()
    params = initial_params if initial_params is not None else PolicyParams(policy_cfg, seed=cfg.seed)
    if not quiet:
        print(f"policy parameters: {params.param_count()}")
    opt = initial_opt if initial_opt is not None else OptimizerState.for_params(
        params.trainable(), eps=cfg.adam_eps)
    opt.eps = cfg.adam_eps
    ealm_state = EALMState.for_action_count(
        params.cfg.action_count, alpha=cfg.ealm_alpha, h_low=cfg.h_low,
        h_high=cfg.h_high, scale_bounds=cfg.scale_gate_bounds)

    sampler = EpisodeSampler(world)
    stream = sampler.train_stream(cfg.seed)
    lanes = [_Lane(next(stream)) for _ in range(cfg.num_envs)]
    act_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 21]))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 22]))

    log_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_file = open(os.path.join(out_dir, "train_log.csv"), "w")
        log_file.write(",".join(LOG_COLUMNS) + "\n")

    episodes_seen = []
    rows = []
    eval_rows = []
    env_steps = 0
    next_eval = cfg.eval_every if cfg.eval_every > 0 else None
    next_ckpt = cfg.checkpoint_every if cfg.checkpoint_every > 0 else None
    per_update = cfg.num_envs * cfg.steps_per_update
    n_updates = max(1, cfg.total_env_steps // per_update)

    for _u in range(n_updates):
        batch = collect_rollout(lanes, params, cfg, stream, act_rng, seed_tag=cfg.seed)
        episodes_seen.extend(batch.episodes)
        apply_gae(batch, cfg)
        env_steps += per_update
        row, opt, ealm_state = update(params, opt, batch, ealm_state, cfg,
                                      env_steps, shuffle_rng)
        row.update(_rolling(episodes_seen, cfg.reward_window))
        rows.append(row)
        if log_file is not None:
            log_file.write(format_log_row(row) + "\n")
            log_file.flush()
        if next_eval is not None and env_steps >= next_eval:
            next_eval += cfg.eval_every
            for split in ("seen", "unseen"):
                specs = sampler.eval_episodes(split, cfg.eval_episodes)
                res = evaluate_policy(params, specs, split=split, seed=cfg.seed,
                                      mask_source=cfg.mask_source)
                m = {k: float(np.mean([episode_metrics(r)[k] for r in res]))
                     for k in ("sr", "spl", "softspl", "collisions")}
                eval_rows.append({"env_steps": env_steps, "split": split, **m})
        if next_ckpt is not None and env_steps >= next_ckpt and out_dir is not None:
            next_ckpt += cfg.checkpoint_every
            save_checkpoint(os.path.join(out_dir, f"checkpoint_{env_steps}.ckpt"), params, opt)

    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "checkpoint_final.ckpt"), params, opt)
        if eval_rows:
            with open(os.path.join(out_dir, "eval_log.csv"), "w") as f:
                f.write("env_steps,split,sr,spl,softspl,collisions\n")
                for r in eval_rows:
                    f.write(f"{r['env_steps']},{r['split']},{r['sr']:.6g},"
                            f"{r['spl']:.6g},{r['softspl']:.6g},{r['collisions']:.6g}\n")
        log_file.close()
    return params, opt, rows, eval_rows


def finetune_filtered(checkpoint_path, cfg: TrainConfig, policy_cfg, world: WorldConfig,
                      out_dir=None):
    """Resume a checkpoint with pure-PPO loss and size-filtered input masks."""
    params, opt = load_checkpoint(checkpoint_path)
    if policy_cfg is not None and params.cfg != policy_cfg:
        raise ValueError("checkpoint policy config does not match the requested config")
    ft_cfg = replace(cfg, mode="ppo")
    return train(ft_cfg, params.cfg, world, out_dir=out_dir,
                 initial_params=params, initial_opt=opt)
