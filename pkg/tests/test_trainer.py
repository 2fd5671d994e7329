import copy
import math
from dataclasses import replace

import numpy as np
import pytest

from navlab.gridworld import MapParams
from navlab.losses import EALMState
from navlab.policy import PolicyConfig, PolicyParams, load_checkpoint, save_checkpoint
from navlab.optim import OptimizerState
from navlab.runner import EpisodeSampler, WorldConfig, evaluate_policy, run_expert_reference
from navlab.trainer import (
    TrainConfig,
    _Lane,
    _build_sequences,
    _minibatch_terms,
    apply_gae,
    collect_rollout,
    finetune_filtered,
    format_log_row,
    mode_weights,
    train,
    update,
    LOG_COLUMNS,
)

WORLD = WorldConfig(
    map_params=MapParams(16, 16, 8, 2, 6),
    view_size=7,
    horizon=48,
    train_pool=6,
    eval_pool=3,
    calib_pool=3,
)

# Horizon long enough for the expert to finish every episode (4 * (W + H)).
WORLD_LONG = WorldConfig(
    map_params=MapParams(16, 16, 8, 2, 6),
    view_size=7,
    horizon=128,
    train_pool=6,
    eval_pool=3,
    calib_pool=3,
)

PCFG = PolicyConfig(
    layers=2, heads=2, hidden=32, mlp_hidden=64, context_len=12,
    vis_dim=16, goal_dim=16, action_embed_dim=8, mask_embed_dim=16,
    view_size=7, category_count=8, latent_dim=12, cell_dim=8,
    view_channels=6, mask_channels=4, seg_channels=8,
)


def make_cfg(**kw):
    base = dict(mode="ealm", num_envs=4, steps_per_update=12, total_env_steps=480,
                minibatches=2, ppo_epochs=1, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def fresh_lanes(cfg, seed=3):
    sampler = EpisodeSampler(WORLD)
    stream = sampler.train_stream(seed)
    lanes = [_Lane(next(stream)) for _ in range(cfg.num_envs)]
    return lanes, stream


class TestCollect:
    def test_batch_shape_contract(self):
        cfg = make_cfg(num_envs=4, steps_per_update=12)
        params = PolicyParams(PCFG, seed=0)
        lanes, stream = fresh_lanes(cfg)
        rng = np.random.default_rng(0)
        batch = collect_rollout(lanes, params, cfg, stream, rng)
        assert batch.size == 48
        assert batch.views.shape == (4, 12, 7, 7)
        assert batch.actions.shape == (4, 12)

    def test_every_transition_has_expert_label(self):
        cfg = make_cfg()
        params = PolicyParams(PCFG, seed=0)
        lanes, stream = fresh_lanes(cfg)
        batch = collect_rollout(lanes, params, cfg, stream, np.random.default_rng(0))
        assert ((batch.expert_actions >= 0) & (batch.expert_actions < 4)).all()

    def test_window_positions_bounded_by_context(self):
        cfg = make_cfg(steps_per_update=30)
        params = PolicyParams(PCFG, seed=0)
        lanes, stream = fresh_lanes(cfg)
        batch = collect_rollout(lanes, params, cfg, stream, np.random.default_rng(0))
        assert batch.win_pos.max() < PCFG.context_len
        assert (batch.win_pos >= 0).all()

    def test_teacher_forcing_replays_expert(self):
        # With full teacher forcing the executed trajectory is the expert's,
        # so every finished episode succeeds, matching the expert oracle.
        cfg = make_cfg(teacher_forcing=1.0, num_envs=4, steps_per_update=130)
        params = PolicyParams(PCFG, seed=0)
        sampler = EpisodeSampler(WORLD_LONG)
        stream = sampler.train_stream(3)
        lanes = [_Lane(next(stream)) for _ in range(cfg.num_envs)]
        batch = collect_rollout(lanes, params, cfg, stream, np.random.default_rng(0))
        assert len(batch.episodes) >= 8
        assert all(r.success for r in batch.episodes)
        assert np.array_equal(batch.actions, batch.expert_actions)

    def test_gae_integration(self):
        cfg = make_cfg()
        params = PolicyParams(PCFG, seed=0)
        lanes, stream = fresh_lanes(cfg)
        batch = collect_rollout(lanes, params, cfg, stream, np.random.default_rng(0))
        apply_gae(batch, cfg)
        assert batch.advantages.shape == (4, 12)
        np.testing.assert_allclose(batch.returns, batch.advantages + batch.values)


class TestWindowReconstruction:
    def test_update_forward_reproduces_collection_logprobs(self):
        # The core consistency requirement: with position shuffling off, the
        # update-time forward over reconstructed windows must reproduce the
        # collection-time log-probabilities (ratio 1 before the first step).
        pcfg = replace(PCFG, shuffle_position_ids=False)
        params = PolicyParams(pcfg, seed=1)
        cfg = make_cfg(num_envs=2, steps_per_update=18, minibatches=2)
        sampler = EpisodeSampler(WORLD)
        stream = sampler.train_stream(5)
        lanes = [_Lane(next(stream)) for _ in range(cfg.num_envs)]
        rng = np.random.default_rng(1)
        shuffle_rng = np.random.default_rng(2)
        # Two consecutive rollouts so the second one exercises carry windows.
        for trial in range(2):
            batch = collect_rollout(lanes, params, cfg, stream, rng)
            apply_gae(batch, cfg)
            n = batch.size
            shard = n // cfg.minibatches
            for s in range(cfg.minibatches):
                terms = _minibatch_terms(params, batch, s * shard, (s + 1) * shard,
                                         cfg, shuffle_rng)
                new_lp = terms["new_lp"].data
                old_lp = terms["old_lp"]
                np.testing.assert_allclose(new_lp, old_lp, atol=2e-5,
                                           err_msg=f"trial {trial} shard {s}")

    def test_sequences_cover_each_step_once(self):
        params = PolicyParams(PCFG, seed=1)
        cfg = make_cfg(num_envs=2, steps_per_update=18)
        lanes, stream = fresh_lanes(cfg, seed=6)
        batch = collect_rollout(lanes, params, cfg, stream, np.random.default_rng(3))
        seen = set()
        n = batch.size
        for lo, hi in ((0, n // 2), (n // 2, n)):
            out = _build_sequences(batch, lo, hi)
            loss_env, loss_t = out[-2], out[-1]
            for e, t in zip(loss_env, loss_t):
                key = (int(e), int(t))
                assert key not in seen
                seen.add(key)
        assert len(seen) == n


class TestModeWeights:
    def test_ppo_mode(self):
        cfg = make_cfg(mode="ppo")
        assert mode_weights(cfg, 100) == (1.0, 0.0)

    def test_dagger_mode(self):
        cfg = make_cfg(mode="dagger")
        assert mode_weights(cfg, 100) == (0.0, 1.0)

    def test_mixed_mode(self):
        cfg = make_cfg(mode="dagger_plus_ppo")
        assert mode_weights(cfg, 100) == (0.5, 0.5)

    def test_early_switcher_ramp(self):
        cfg = make_cfg(mode="early_switcher", switch_start=100, switch_end=200)
        assert mode_weights(cfg, 50) == (0.0, 1.0)
        assert mode_weights(cfg, 150) == (0.5, 0.5)
        assert mode_weights(cfg, 250) == (1.0, 0.0)

    def test_hard_switch(self):
        cfg = make_cfg(mode="hard_switch", switch_start=100)
        assert mode_weights(cfg, 99) == (0.0, 1.0)
        assert mode_weights(cfg, 100) == (1.0, 0.0)

    def test_invalid_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            make_cfg(mode="sarsa").validate()

    def test_switch_windows_validated(self):
        with pytest.raises(ValueError):
            make_cfg(mode="early_switcher", switch_start=10, switch_end=5).validate()


class TestUpdate:
    def run_one_update(self, mode, params=None, seed=4, **cfg_kw):
        cfg = make_cfg(mode=mode, num_envs=2, steps_per_update=12, **cfg_kw)
        params = params if params is not None else PolicyParams(PCFG, seed=2)
        lanes, stream = fresh_lanes(cfg, seed=seed)
        batch = collect_rollout(lanes, params, cfg, stream, np.random.default_rng(seed))
        apply_gae(batch, cfg)
        opt = OptimizerState.for_params(params.trainable(), eps=cfg.adam_eps)
        state = EALMState.for_action_count(PCFG.action_count)
        row, opt, state = update(params, opt, batch, state, cfg,
                                 env_steps=24, shuffle_rng=np.random.default_rng(9))
        return row, batch, params

    def test_ppo_mode_logs_zero_bc(self):
        row, _, _ = self.run_one_update("ppo")
        assert row["p_ppo"] == 1.0
        assert row["loss_bc"] == 0.0

    def test_fresh_ealm_is_pure_bc(self):
        row, _, _ = self.run_one_update("ealm")
        assert row["lambda"] == 0.0
        assert row["p_ppo"] == 0.0
        assert row["loss_ppo"] == 0.0

    def test_grad_norm_clipped(self):
        row, _, _ = self.run_one_update("dagger")
        assert row["grad_norm"] <= 0.2 + 1e-9

    def test_mode_equivalences_on_fixed_batch(self):
        # A gate pinned at saturation reproduces the dedicated modes exactly.
        base = PolicyParams(PCFG, seed=5)
        cfg = make_cfg(num_envs=2, steps_per_update=12)
        lanes, stream = fresh_lanes(cfg, seed=7)
        batch = collect_rollout(lanes, base, cfg, stream, np.random.default_rng(7))
        apply_gae(batch, cfg)

        def run(mode, h_low=0.35, h_high=0.75):
            params = copy.deepcopy(base)
            c = make_cfg(mode=mode, num_envs=2, steps_per_update=12,
                         h_low=h_low, h_high=h_high, scale_gate_bounds=False)
            opt = OptimizerState.for_params(params.trainable(), eps=c.adam_eps)
            state = EALMState.for_action_count(PCFG.action_count, h_low=h_low,
                                               h_high=h_high, scale_bounds=False)
            row, _, _ = update(params, opt, copy.deepcopy(batch), state, c,
                               env_steps=24, shuffle_rng=np.random.default_rng(11))
            return row, params

        # Bounds far above any achievable entropy: EMA <= h_low, gate = 1 (ppo).
        row_gate_ppo, p1 = run("ealm", h_low=1e9, h_high=2e9)
        row_ppo, p2 = run("ppo")
        for key in ("loss_total", "loss_ppo", "loss_value", "loss_dice", "loss_bce"):
            assert row_gate_ppo[key] == pytest.approx(row_ppo[key], abs=1e-9)
        for a, b in zip(p1.trainable(), p2.trainable()):
            np.testing.assert_array_equal(a.data, b.data)

        # Bounds far below: EMA >= h_high, gate = 0 (behavior cloning + critic).
        row_gate_bc, p3 = run("ealm", h_low=-2e9, h_high=-1e9)
        row_dagger, p4 = run("dagger")
        for key in ("loss_total", "loss_bc", "loss_value"):
            assert row_gate_bc[key] == pytest.approx(row_dagger[key], abs=1e-9)
        for a, b in zip(p3.trainable(), p4.trainable()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_per_sample_gate_runs(self):
        row, _, _ = self.run_one_update("ealm", per_sample_gate=True)
        assert math.isfinite(row["loss_total"])

    def test_update_requires_gae(self):
        cfg = make_cfg(num_envs=2, steps_per_update=12)
        params = PolicyParams(PCFG, seed=2)
        lanes, stream = fresh_lanes(cfg)
        batch = collect_rollout(lanes, params, cfg, stream, np.random.default_rng(0))
        opt = OptimizerState.for_params(params.trainable())
        with pytest.raises(ValueError, match="gae"):
            update(params, opt, batch, EALMState.for_action_count(4), cfg, 10,
                   np.random.default_rng(0))


class TestTrainLoop:
    def test_smoke_run_writes_logs(self, tmp_path):
        cfg = make_cfg(num_envs=2, steps_per_update=12, total_env_steps=96)
        out = tmp_path / "run"
        params, opt, rows, _ = train(cfg, PCFG, WORLD, out_dir=str(out))
        assert len(rows) == 4
        log = (out / "train_log.csv").read_text().splitlines()
        assert log[0] == ",".join(LOG_COLUMNS)
        assert len(log) == 5
        assert (out / "checkpoint_final.ckpt").exists()

    def test_lr_linear_decay(self):
        cfg = make_cfg(num_envs=2, steps_per_update=12, total_env_steps=96)
        _, _, rows, _ = train(cfg, PCFG, WORLD)
        for row in rows:
            want = cfg.lr * max(0.0, 1.0 - row["env_steps"] / cfg.total_env_steps)
            assert row["lr"] == pytest.approx(want, abs=1e-12)
            assert row["lr"] >= 0.0

    def test_deterministic_across_runs_single_env(self, tmp_path):
        cfg = make_cfg(num_envs=1, steps_per_update=12, total_env_steps=48,
                       minibatches=2, seed=11)
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            train(cfg, PCFG, WORLD, out_dir=str(out))
            outs.append(((out / "train_log.csv").read_bytes(),
                         (out / "checkpoint_final.ckpt").read_bytes()))
        assert outs[0][0] == outs[1][0]
        assert outs[0][1] == outs[1][1]

    def test_eval_during_training(self, tmp_path):
        cfg = make_cfg(num_envs=2, steps_per_update=12, total_env_steps=48,
                       eval_every=24, eval_episodes=4)
        out = tmp_path / "run"
        _, _, _, eval_rows = train(cfg, PCFG, WORLD, out_dir=str(out))
        assert len(eval_rows) == 4  # two eval points x two splits
        assert (out / "eval_log.csv").exists()

    def test_rolling_metrics_match_recent_episodes(self):
        cfg = make_cfg(num_envs=2, steps_per_update=140, total_env_steps=280,
                       reward_window=5, teacher_forcing=1.0)
        _, _, rows, _ = train(cfg, PCFG, WORLD_LONG)
        assert rows[-1]["sr"] == 1.0  # expert-driven episodes all succeed


class TestFinetune:
    def test_filter_zero_is_identical_to_ppo_resume(self, tmp_path):
        cfg = make_cfg(num_envs=2, steps_per_update=12, total_env_steps=48)
        out = tmp_path / "base"
        params, opt, _, _ = train(cfg, PCFG, WORLD, out_dir=str(out))
        ckpt = out / "checkpoint_final.ckpt"

        ft_cfg = make_cfg(num_envs=2, steps_per_update=12, total_env_steps=48,
                          mask_filter_extent=0, mask_filter_area=0)
        p1, _, rows1, _ = finetune_filtered(str(ckpt), ft_cfg, PCFG, WORLD)

        params2, opt2 = load_checkpoint(str(ckpt))
        resume_cfg = replace(ft_cfg, mode="ppo")
        p2, _, rows2, _ = train(resume_cfg, PCFG, WORLD,
                                initial_params=params2, initial_opt=opt2)
        for r1, r2 in zip(rows1, rows2):
            assert r1["loss_total"] == pytest.approx(r2["loss_total"], abs=1e-12)
        for a, b in zip(p1.trainable(), p2.trainable()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_small_masks_never_reach_encoder(self):
        cfg = make_cfg(num_envs=2, steps_per_update=20,
                       mask_filter_extent=50, mask_filter_area=50)
        params = PolicyParams(PCFG, seed=0)
        lanes, stream = fresh_lanes(cfg)
        batch = collect_rollout(lanes, params, cfg, stream, np.random.default_rng(0))
        assert batch.masks.sum() == 0  # the filter removes every component

    def test_config_mismatch_rejected(self, tmp_path):
        params = PolicyParams(PCFG, seed=0)
        ckpt = tmp_path / "m.ckpt"
        save_checkpoint(str(ckpt), params)
        other = replace(PCFG, hidden=64)
        with pytest.raises(ValueError, match="config"):
            finetune_filtered(str(ckpt), make_cfg(), other, WORLD)


class TestRunnerEval:
    def test_eval_batching_is_deterministic(self):
        params = PolicyParams(PCFG, seed=0)
        sampler = EpisodeSampler(WORLD)
        specs = sampler.eval_episodes("seen", 6)
        a = evaluate_policy(params, specs, split="seen", seed=1, batch_size=3)
        b = evaluate_policy(params, specs, split="seen", seed=1, batch_size=6)
        for r1, r2 in zip(a, b):
            assert r1.success == r2.success
            assert r1.steps == r2.steps
            assert r1.collisions == r2.collisions

    def test_expert_reference_solves_eval_split(self):
        sampler = EpisodeSampler(WORLD_LONG)
        specs = sampler.eval_episodes("unseen", 10)
        results = run_expert_reference(specs, split="unseen", seed=0)
        assert all(r.success for r in results)

    def test_mask_source_none_zeroes_input(self):
        params = PolicyParams(PCFG, seed=0)
        sampler = EpisodeSampler(WORLD)
        specs = sampler.eval_episodes("seen", 2)
        res = evaluate_policy(params, specs, split="seen", seed=1, mask_source="none")
        assert len(res) == 2

    def test_unknown_split_rejected(self):
        sampler = EpisodeSampler(WORLD)
        with pytest.raises(ValueError):
            sampler.eval_episodes("validation", 2)


def test_format_log_row_covers_all_columns():
    row = {c: 0.5 for c in LOG_COLUMNS}
    row["env_steps"] = 100
    text = format_log_row(row)
    assert len(text.split(",")) == len(LOG_COLUMNS)
