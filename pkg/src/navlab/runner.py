"""Episode execution shared by training, evaluation, and calibration.

Owns the dataset layout (fixed train/eval/calibration map pools derived
from a dataset seed), episode sampling, the goal-mask sourcing pipeline
(ground truth, zero, or noisy detections through a threshold table, with
optional small-component filtering), and a batched episode driver that
runs a policy over many episodes in lockstep.

Evaluation drives the policy with a sliding window of the most recent
context_len observations; training collection uses periodic truncation
instead (see trainer) so that update-time recomputation is exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .evalstats import EpisodeResult
from .expert import ExplorationState, run_expert_episode, update_visibility
from .gridworld import (
    Action,
    EpisodeSpec,
    MapParams,
    NavEnv,
    Pose,
    generate_map,
    goal_distance,
)
from .policy import (
    PolicyParams,
    encode_observations,
    forward_features,
    last_position_outputs,
    sample_action,
)
from .segnoise import (
    CalibrationTable,
    apply_threshold,
    detection_rng,
    filter_small_masks,
    predict_detections,
)


@dataclass(frozen=True)
class WorldConfig:
    """Environment-side configuration shared by training and evaluation."""

    map_params: MapParams = field(default_factory=MapParams)
    view_size: int = 9
    success_radius: int = 1
    horizon: int = 128
    collision_penalty: float = -0.01
    train_pool: int = 24
    eval_pool: int = 8
    calib_pool: int = 8
    dataset_seed: int = 1234


_MAP_CACHE = {}


def cached_map(seed, params: MapParams):
    key = (seed, params)
    grid = _MAP_CACHE.get(key)
    if grid is None:
        grid = generate_map(seed, params)
        _MAP_CACHE[key] = grid
    return grid


def _pool_seeds(world: WorldConfig, pool):
    base = world.dataset_seed * 100_000
    offset = {"train": 0, "eval": 50_000, "calib": 70_000}[pool]
    count = {"train": world.train_pool, "eval": world.eval_pool,
             "calib": world.calib_pool}[pool]
    return [base + offset + i for i in range(count)]


def _sample_spec(world: WorldConfig, map_seed, goal_category, rng) -> EpisodeSpec:
    grid = cached_map(map_seed, world.map_params)
    free = grid.free_cells()
    goal_cells = grid.category_cells(goal_category)
    for _ in range(64):
        x, y = free[int(rng.integers(len(free)))]
        heading = int(rng.integers(4))
        if goal_distance(grid, (x, y), goal_cells) > world.success_radius:
            break
    return EpisodeSpec(
        map_seed=map_seed,
        start_pose=Pose(x, y, heading),
        goal_category=goal_category,
        success_radius=world.success_radius,
        horizon=world.horizon,
        collision_penalty=world.collision_penalty,
        map_params=world.map_params,
        view_size=world.view_size,
    )


class EpisodeSampler:
    """Deterministic episode streams per dataset split.

    Training episodes draw from the train map pool with seen-category
    goals; eval and calibration episodes come from held-out map pools and
    are fully determined by (dataset_seed, split, index)."""

    def __init__(self, world: WorldConfig):
        self.world = world

    def train_stream(self, run_seed):
        rng = np.random.default_rng(np.random.SeedSequence([self.world.dataset_seed,
                                                            int(run_seed), 101]))
        seeds = _pool_seeds(self.world, "train")
        params = self.world.map_params
        seen = sorted(range(params.seen_count))
        while True:
            map_seed = seeds[int(rng.integers(len(seeds)))]
            goal = seen[int(rng.integers(len(seen)))]
            yield _sample_spec(self.world, map_seed, goal, rng)

    def eval_episodes(self, split, count):
        """split: 'seen' / 'unseen' (eval maps) or 'calib' (calibration maps)."""
        params = self.world.map_params
        if split == "seen":
            pool, cats = "eval", sorted(range(params.seen_count))
        elif split == "unseen":
            pool, cats = "eval", sorted(range(params.seen_count, params.category_count))
        elif split == "calib":
            pool, cats = "calib", sorted(range(params.category_count))
        else:
            raise ValueError(f"unknown split {split!r}")
        seeds = _pool_seeds(self.world, pool)
        specs = []
        for i in range(count):
            rng = np.random.default_rng(np.random.SeedSequence(
                [self.world.dataset_seed, {"seen": 1, "unseen": 2, "calib": 3}[split], i]))
            map_seed = seeds[int(rng.integers(len(seeds)))]
            goal = cats[int(rng.integers(len(cats)))]
            specs.append(_sample_spec(self.world, map_seed, goal, rng))
        return specs

    def calibration_episodes_by_category(self, per_category):
        params = self.world.map_params
        seeds = _pool_seeds(self.world, "calib")
        out = {}
        for cat in range(params.category_count):
            specs = []
            for i in range(per_category):
                rng = np.random.default_rng(np.random.SeedSequence(
                    [self.world.dataset_seed, 4, cat, i]))
                map_seed = seeds[int(rng.integers(len(seeds)))]
                specs.append(_sample_spec(self.world, map_seed, cat, rng))
            out[cat] = specs
        return out


def source_mask(obs, mask_source, noise_model=None, calibration=None,
                episode_seed=0, step=0, mask_filter=None):
    """Produce the policy-facing goal mask for one observation."""
    if mask_source == "gt":
        mask = obs.goal_mask
    elif mask_source == "none":
        mask = np.zeros_like(obs.goal_mask)
    elif mask_source == "noisy":
        if noise_model is None:
            raise ValueError("mask_source='noisy' needs a noise model")
        rng = detection_rng(noise_model, episode_seed, step)
        dets = predict_detections(obs.ego_view, obs.goal_category, noise_model, rng)
        table = calibration if calibration is not None else CalibrationTable()
        mask = apply_threshold(dets, table, obs.goal_category)
        if mask is None:
            mask = np.zeros_like(obs.goal_mask)
    else:
        raise ValueError(f"unknown mask source {mask_source!r}")
    if mask_filter is not None:
        min_extent, min_area = mask_filter
        if min_extent > 0 or min_area > 0:
            mask = filter_small_masks(mask, min_extent, min_area)
    return mask


class _EvalLane:
    __slots__ = ("env", "spec", "rng", "index", "window", "pending", "ep_seed")

    def __init__(self, spec, rng, index, ep_seed):
        self.spec = spec
        self.env = NavEnv(spec, cached_map(spec.map_seed, spec.map_params))
        self.rng = rng
        self.index = index
        self.window = []
        self.pending = self.env.observe()
        self.ep_seed = ep_seed


def _batched_last_outputs(params: PolicyParams, windows):
    """Forward a list of variable-length windows; returns (logits, values)."""
    b = len(windows)
    t_max = max(len(w) for w in windows)
    obs_dim = params.cfg.obs_dim
    batch = np.zeros((b, t_max, obs_dim), dtype=params.dtype)
    positions = np.zeros((b, t_max), dtype=np.int64)
    lengths = np.zeros(b, dtype=np.int64)
    for i, w in enumerate(windows):
        batch[i, : len(w)] = w
        positions[i, : len(w)] = np.arange(len(w))
        lengths[i] = len(w)
    feats = forward_features(params, Tensor(batch), positions, lengths=lengths)
    return last_position_outputs(params, feats, lengths - 1)


def evaluate_policy(params: PolicyParams, specs, split="", seed=0,
                    mask_source="gt", noise_model=None, calibration=None,
                    mask_filter=None, batch_size=8):
    """Run the policy over a list of episode specs (batched, deterministic
    per (seed, episode index) regardless of batch composition)."""
    results = [None] * len(specs)
    queue = list(enumerate(specs))
    lanes = []

    def next_lane():
        if not queue:
            return None
        idx, spec = queue.pop(0)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), 7, idx]))
        return _EvalLane(spec, rng, idx, ep_seed=idx * 1_000_003 + int(seed))

    while len(lanes) < batch_size:
        lane = next_lane()
        if lane is None:
            break
        lanes.append(lane)

    while lanes:
        views = np.stack([ln.pending.ego_view for ln in lanes])
        goals = np.array([ln.pending.goal_category for ln in lanes])
        prevs = np.array([ln.pending.prev_action for ln in lanes])
        masks = np.stack([
            source_mask(ln.pending, mask_source, noise_model, calibration,
                        episode_seed=ln.ep_seed, step=ln.env.steps,
                        mask_filter=mask_filter)
            for ln in lanes
        ])
        vecs = encode_observations(params, views, goals, prevs, masks).data
        c = params.cfg.context_len
        for i, ln in enumerate(lanes):
            ln.window.append(vecs[i])
            if len(ln.window) > c:  # sliding window at evaluation time
                ln.window.pop(0)
        logits, _values = _batched_last_outputs(params, [ln.window for ln in lanes])
        done_lanes = []
        for i, ln in enumerate(lanes):
            action, _, _ = sample_action(logits[i], ln.rng)
            res = ln.env.step(action)
            if res.done:
                results[ln.index] = EpisodeResult(
                    success=res.info["success"],
                    shortest_path=ln.env.shortest_path,
                    agent_path=ln.env.path_length,
                    start_distance=ln.env.start_goal_distance,
                    final_distance=ln.env.final_goal_distance(),
                    collisions=ln.env.collisions,
                    steps=ln.env.steps,
                    goal_category=ln.spec.goal_category,
                    split=split,
                    seed=seed,
                )
                done_lanes.append(i)
            else:
                ln.pending = res.observation
        for i in reversed(done_lanes):
            fresh = next_lane()
            if fresh is None:
                lanes.pop(i)
            else:
                lanes[i] = fresh
    return results


def run_policy_episode(params, spec, seed=0, **kwargs):
    """Single-episode convenience wrapper around evaluate_policy."""
    return evaluate_policy(params, [spec], seed=seed, batch_size=1, **kwargs)[0]


def run_expert_reference(specs, split="", seed=0):
    """Expert rollouts over the same spec list, for baselines and demos."""
    results = []
    for spec in specs:
        env = NavEnv(spec, cached_map(spec.map_seed, spec.map_params))
        success, steps, _ = run_expert_episode(env)
        results.append(EpisodeResult(
            success=success,
            shortest_path=env.shortest_path,
            agent_path=env.path_length,
            start_distance=env.start_goal_distance,
            final_distance=env.final_goal_distance(),
            collisions=env.collisions,
            steps=steps,
            goal_category=spec.goal_category,
            split=split,
            seed=seed,
        ))
    return results
