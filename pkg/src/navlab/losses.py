"""Training objectives: GAE, clipped-ratio policy loss, value regression,
behavior cloning, the entropy-gated loss mix, and Dice+BCE mask
reconstruction, plus the total-loss assembly used by the trainer.

The policy term blends behavior cloning with the clipped surrogate using a
gate driven by an exponential moving average of policy entropy: high
entropy (an uncertain policy) weights imitation, low entropy weights
reinforcement. Loss functions return autodiff Tensors; GAE and the gate
are plain float math.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def gae(rewards, values, dones, bootstrap_value, gamma=0.99, lam=0.95):
    """Generalized advantage estimation over one rollout sequence.

    dones mark episode ends; nothing bootstraps across them. Returns
    (advantages, returns) as float64 arrays.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError("rewards, values and dones must have equal length")
    t = len(rewards)
    adv = np.zeros(t, dtype=np.float64)
    next_value = float(bootstrap_value)
    acc = 0.0
    for i in range(t - 1, -1, -1):
        not_done = 1.0 - dones[i]
        delta = rewards[i] + gamma * next_value * not_done - values[i]
        acc = delta + gamma * lam * not_done * acc
        adv[i] = acc
        next_value = values[i]
    return adv, adv + values


def gae_batch(rewards, values, dones, bootstrap_values, gamma=0.99, lam=0.95):
    """Row-wise GAE over (E, T) arrays with per-row bootstrap values."""
    advs = np.zeros_like(np.asarray(rewards, dtype=np.float64))
    rets = np.zeros_like(advs)
    for e in range(advs.shape[0]):
        advs[e], rets[e] = gae(rewards[e], values[e], dones[e], bootstrap_values[e],
                               gamma=gamma, lam=lam)
    return advs, rets


def ppo_terms(new_logprobs, old_logprobs, advantages, clip_eps=0.2):
    """Per-sample clipped-surrogate terms, -min(r*A, clip(r)*A)."""
    old = np.asarray(old_logprobs)
    adv = np.asarray(advantages)
    ratio = ad.exp(ad.sub(new_logprobs, Tensor(old.astype(new_logprobs.data.dtype))))
    adv_t = Tensor(adv.astype(new_logprobs.data.dtype))
    unclipped = ad.mul(ratio, adv_t)
    clipped = ad.mul(ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), adv_t)
    return ad.mul(ad.minimum(unclipped, clipped), -1.0)


def ppo_loss(new_logprobs, old_logprobs, advantages, clip_eps=0.2):
    """Mean clipped-surrogate term; advantages enter unnormalized."""
    return ad.mean(ppo_terms(new_logprobs, old_logprobs, advantages, clip_eps))


def value_loss(values, returns):
    """Mean 0.5 * (V - R)^2."""
    diff = ad.sub(values, Tensor(np.asarray(returns, dtype=values.data.dtype)))
    return ad.mul(ad.mean(ad.mul(diff, diff)), 0.5)


def bc_loss(expert_logprobs):
    """Mean negative log-likelihood of the teacher actions."""
    return ad.mul(ad.mean(expert_logprobs), -1.0)


def entropy_terms(action_logits):
    """Per-sample entropies and their batch mean from (N, A) logits."""
    lp = ad.log_softmax(action_logits, axis=-1)
    p = ad.softmax(action_logits, axis=-1)
    per_sample = ad.mul(ad.sum_(ad.mul(p, lp), axis=-1), -1.0)
    return per_sample, ad.mean(per_sample)


@dataclass
class EALMState:
    """Entropy EMA and gate bounds. Bounds were tuned for a 6-action space
    and rescale by ln|A|/ln 6 unless raw bounds are requested."""

    ema_entropy: float
    alpha: float = 0.95
    h_low: float = 0.35
    h_high: float = 0.75
    lam: float = 0.0
    p_ppo: float = 0.0
    p_bc: float = 1.0

    @classmethod
    def for_action_count(cls, action_count, alpha=0.95, h_low=0.35, h_high=0.75,
                         scale_bounds=True):
        if scale_bounds and action_count != 6:
            scale = math.log(action_count) / math.log(6)
            h_low, h_high = h_low * scale, h_high * scale
        if not h_low < h_high:
            raise ValueError("need h_low < h_high")
        # EMA starts at maximum entropy, so training opens imitation-heavy.
        return cls(ema_entropy=math.log(action_count), alpha=alpha,
                   h_low=h_low, h_high=h_high)


def gate_lambda(ema_entropy, h_low, h_high):
    return float(np.clip((h_high - ema_entropy) / (h_high - h_low), 0.0, 1.0))


def ealm_gate(state: EALMState, batch_mean_entropy):
    """EMA update followed by the gate; mutates and returns the state."""
    if batch_mean_entropy < 0:
        raise ValueError("entropy cannot be negative")
    state.ema_entropy = state.alpha * state.ema_entropy + (1.0 - state.alpha) * float(batch_mean_entropy)
    state.lam = gate_lambda(state.ema_entropy, state.h_low, state.h_high)
    state.p_ppo = state.lam
    state.p_bc = 1.0 - state.lam
    return state, state.lam, state.p_ppo, state.p_bc


def seg_loss(mask_logits, mask_gt, smooth=1.0):
    """(dice, bce) between sigmoid(mask_logits) and a binary target."""
    gt = np.asarray(mask_gt, dtype=mask_logits.data.dtype)
    if gt.shape != mask_logits.data.shape:
        raise ValueError(f"mask shapes differ: {gt.shape} vs {mask_logits.data.shape}")
    p = ad.sigmoid(mask_logits)
    g = Tensor(gt)
    inter = ad.sum_(ad.mul(p, g))
    denom = ad.add(ad.sum_(p), float(gt.sum()))
    dice = ad.sub(1.0, ad.div(ad.add(ad.mul(inter, 2.0), smooth), ad.add(denom, smooth)))
    pc = ad.clip(p, 1e-7, 1.0 - 1e-7)
    bce_terms = ad.add(ad.mul(g, ad.log(pc)), ad.mul(ad.sub(1.0, g), ad.log(ad.sub(1.0, pc))))
    bce = ad.mul(ad.mean(bce_terms), -1.0)
    return dice, bce


@dataclass
class LossBreakdown:
    ppo: float
    bc: float
    value: float
    entropy_bonus: float
    seg_dice: float
    seg_bce: float
    total: float
    lam: float
    ema_entropy: float
    batch_entropy: float


def total_loss(ppo, bc, value, batch_entropy, dice, bce, p_ppo, p_bc,
               c_v=0.5, beta=0.01, seg_weight=1.0, ealm_state=None):
    """Assemble c_v*L_V + p_ppo*L_PPO + p_bc*L_BC - beta*H + seg_weight*(dice+bce).

    Terms with zero weight are omitted from the graph entirely. Returns
    (total Tensor, LossBreakdown). The entropy bonus uses the raw batch
    entropy, never the EMA.
    """
    total = ad.mul(value, c_v)
    if p_ppo:
        total = ad.add(total, ad.mul(ppo, p_ppo))
    if p_bc:
        total = ad.add(total, ad.mul(bc, p_bc))
    if beta:
        total = ad.sub(total, ad.mul(batch_entropy, beta))
    if seg_weight:
        total = ad.add(total, ad.mul(ad.add(dice, bce), seg_weight))
    breakdown = LossBreakdown(
        ppo=float(ppo.data) if isinstance(ppo, Tensor) else float(ppo),
        bc=float(bc.data) if isinstance(bc, Tensor) else float(bc),
        value=float(value.data),
        entropy_bonus=float(batch_entropy.data) if isinstance(batch_entropy, Tensor) else float(batch_entropy),
        seg_dice=float(dice.data) if isinstance(dice, Tensor) else float(dice),
        seg_bce=float(bce.data) if isinstance(bce, Tensor) else float(bce),
        total=float(total.data),
        lam=ealm_state.lam if ealm_state is not None else p_ppo,
        ema_entropy=ealm_state.ema_entropy if ealm_state is not None else float("nan"),
        batch_entropy=float(batch_entropy.data) if isinstance(batch_entropy, Tensor) else float(batch_entropy),
    )
    return total, breakdown
