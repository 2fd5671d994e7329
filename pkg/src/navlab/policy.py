"""Observation encoders, causal transformer trunk, and output heads.

Each step's observation is encoded into a single vector
[view, goal, prev-action, mask] and a window of up to `context_len`
such vectors feeds a pre-norm decoder-only transformer with rotary
positions. Three heads read the per-step features: action logits, a
scalar value, and K x K mask logits for the auxiliary reconstruction
objective.

Category identity enters only through a frozen codebook: per-category
latents drawn once from a seeded Gaussian and projected into a cell
appearance space (used to paint the ego view) and a goal space (the
instruction vector). Unseen categories get codebook vectors the same
way, they are just never sampled as goals during training.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gridworld import FREE, OBJECT_BASE, UNKNOWN, WALL

CKPT_MAGIC = b"NAVLABCK"
CKPT_VERSION = 1


@dataclass
class PolicyConfig:
    layers: int = 2
    heads: int = 4
    hidden: int = 128
    mlp_hidden: int = 256
    context_len: int = 64
    vis_dim: int = 64
    goal_dim: int = 64
    action_embed_dim: int = 32
    mask_embed_dim: int = 128
    action_count: int = 4
    view_size: int = 9
    category_count: int = 8
    latent_dim: int = 24
    cell_dim: int = 16
    view_channels: int = 16
    mask_channels: int = 8
    seg_channels: int = 16
    shuffle_position_ids: bool = True
    pos_encoding: str = "rotary"  # or "learned"
    embed_seed: int = 7

    def validate(self):
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        if (self.hidden // self.heads) % 2:
            raise ValueError("head dimension must be even for rotary positions")
        if self.context_len < 1:
            raise ValueError("context_len must be >= 1")
        if self.view_size < 3 or self.view_size % 2 == 0:
            raise ValueError("view_size must be odd and >= 3")
        if self.action_count not in (4, 6):
            raise ValueError("action_count must be 4 or 6")
        if self.pos_encoding not in ("rotary", "learned"):
            raise ValueError("pos_encoding must be 'rotary' or 'learned'")
        for name in ("vis_dim", "goal_dim", "action_embed_dim", "mask_embed_dim",
                     "latent_dim", "cell_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def obs_dim(self):
        return self.vis_dim + self.goal_dim + self.action_embed_dim + self.mask_embed_dim

    @property
    def seg_h0(self):
        # Transposed conv (kernel 4, stride 2) maps h0 -> 2*h0 + 2 >= K.
        return max(1, (self.view_size - 1) // 2)


@dataclass
class PolicyOutput:
    action_logits: np.ndarray
    value: float
    mask_logits: np.ndarray


class PolicyParams:
    """Frozen codebook plus trainable tensors, keyed by name."""

    def __init__(self, cfg: PolicyConfig, seed=0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self.appearance_table, self.goal_table = build_codebook(cfg, dtype)
        self.tensors: dict[str, Tensor] = {}
        self._init_trainable(np.random.default_rng(np.random.SeedSequence([seed, 11])))

    def _add(self, name, arr):
        self.tensors[name] = Tensor(arr.astype(self.dtype), requires_grad=True)

    def _init_trainable(self, rng):
        cfg = self.cfg

        def dense(name, fan_in, fan_out, scale=1.0):
            std = scale / np.sqrt(fan_in)
            self._add(f"{name}.w", rng.standard_normal((fan_in, fan_out)) * std)
            self._add(f"{name}.b", np.zeros(fan_out))

        def conv(name, out_ch, in_ch, k, scale=1.0):
            std = scale / np.sqrt(in_ch * k * k)
            self._add(f"{name}.w", rng.standard_normal((out_ch, in_ch, k, k)) * std)
            self._add(f"{name}.b", np.zeros(out_ch))

        k = cfg.view_size
        half = (k + 1) // 2  # stride-2 valid conv output size for odd k
        conv("view.conv1", cfg.view_channels, cfg.cell_dim, 3)
        conv("view.conv2", cfg.view_channels, cfg.view_channels, 3)
        dense("view.proj", cfg.view_channels * half * half, cfg.vis_dim)

        conv("mask.conv1", cfg.mask_channels, 1, 3)
        conv("mask.conv2", cfg.mask_channels, cfg.mask_channels, 3)
        conv("mask.conv3", 2 * cfg.mask_channels, cfg.mask_channels, 3)
        dense("mask.proj", 2 * cfg.mask_channels * half * half, cfg.mask_embed_dim)

        self._add("action_embed", rng.standard_normal((cfg.action_count, cfg.action_embed_dim)) * 0.02)
        dense("input_proj", cfg.obs_dim, cfg.hidden)
        if cfg.pos_encoding == "learned":
            self._add("pos_table", rng.standard_normal((cfg.context_len, cfg.hidden)) * 0.02)

        for layer in range(cfg.layers):
            p = f"block{layer}"
            self._add(f"{p}.attn_gain", np.ones(cfg.hidden))
            for nm in ("wq", "wk", "wv", "wo"):
                std = 0.5 / np.sqrt(cfg.hidden)
                self._add(f"{p}.{nm}", rng.standard_normal((cfg.hidden, cfg.hidden)) * std)
            self._add(f"{p}.mlp_gain", np.ones(cfg.hidden))
            std = 0.5 / np.sqrt(cfg.hidden)
            self._add(f"{p}.w_gate", rng.standard_normal((cfg.hidden, cfg.mlp_hidden)) * std)
            self._add(f"{p}.w_up", rng.standard_normal((cfg.hidden, cfg.mlp_hidden)) * std)
            self._add(f"{p}.w_down", rng.standard_normal((cfg.mlp_hidden, cfg.hidden)) * 0.5 / np.sqrt(cfg.mlp_hidden))

        self._add("final_gain", np.ones(cfg.hidden))
        # Near-zero heads: the initial policy is close to uniform.
        dense("action_head", cfg.hidden, cfg.action_count, scale=0.01)
        dense("value_head", cfg.hidden, 1, scale=0.01)
        h0 = cfg.seg_h0
        dense("seg.proj", cfg.hidden, cfg.seg_channels * h0 * h0, scale=0.1)
        std = 0.5 / np.sqrt(cfg.seg_channels * 16)
        self._add("seg.deconv.w", rng.standard_normal((cfg.seg_channels, cfg.seg_channels // 2, 4, 4)) * std)
        self._add("seg.deconv.b", np.zeros(cfg.seg_channels // 2))
        conv("seg.out", 1, cfg.seg_channels // 2, 3, scale=0.1)

    def trainable(self):
        return list(self.tensors.values())

    def names(self):
        return list(self.tensors.keys())

    def param_count(self):
        return sum(t.data.size for t in self.tensors.values())

    def __getitem__(self, name):
        return self.tensors[name]


def build_codebook(cfg: PolicyConfig, dtype=np.float32):
    """Frozen category features: shared latents z_c with fixed projections.

    Returns (appearance_table, goal_table). The appearance table carries one
    row per category plus dedicated rows for Unknown/Free/Wall view cells in
    that order. The shared latents force the dot-product structure of the
    two spaces to correlate, which is checked here once at build time.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.embed_seed, 3]))
    n = cfg.category_count
    z = rng.standard_normal((n + 3, cfg.latent_dim))
    p_v = rng.standard_normal((cfg.latent_dim, cfg.cell_dim)) / np.sqrt(cfg.latent_dim)
    p_g = rng.standard_normal((cfg.latent_dim, cfg.goal_dim)) / np.sqrt(cfg.latent_dim)
    appearance = z @ p_v
    goal = z[:n] @ p_g

    norms = np.linalg.norm(appearance[:n], axis=1, keepdims=True)
    cos = (appearance[:n] @ appearance[:n].T) / (norms * norms.T)
    off_diag = cos[~np.eye(n, dtype=bool)]
    if (off_diag >= 1.0 - 1e-9).any():
        raise ValueError("degenerate codebook: duplicate category appearance")
    va, ga = [], []
    for a in range(n):
        for b in range(a + 1, n):
            va.append(float(appearance[a] @ appearance[b]))
            ga.append(float(goal[a] @ goal[b]))
    if np.corrcoef(va, ga)[0, 1] <= 0.0:
        raise ValueError("degenerate codebook: appearance/goal similarity uncorrelated")
    return appearance.astype(dtype), goal.astype(dtype)


def category_features(params: PolicyParams, category_id: int):
    """(appearance vector, goal vector) for one category id."""
    n = params.cfg.category_count
    if not 0 <= category_id < n:
        raise ValueError(f"unknown category id {category_id} (have {n})")
    return params.appearance_table[category_id], params.goal_table[category_id]


def _cell_rows(views, category_count):
    """Map view cell codes to appearance-table rows."""
    rows = np.where(views >= OBJECT_BASE, views - OBJECT_BASE, 0)
    rows = np.where(views == UNKNOWN, category_count, rows)
    rows = np.where(views == FREE, category_count + 1, rows)
    rows = np.where(views == WALL, category_count + 2, rows)
    return rows


def _dense(x, params, name):
    return ad.add(ad.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def encode_observations(params: PolicyParams, views, goals, prev_actions, masks):
    """Encode N observations into (N, obs_dim) embeddings.

    views: (N, K, K) int cell codes; goals: (N,) category ids;
    prev_actions: (N,) action ids; masks: (N, K, K) binary.
    """
    cfg = params.cfg
    n = views.shape[0]
    k = cfg.view_size
    rows = _cell_rows(views, cfg.category_count)
    cells = params.appearance_table[rows]  # (N, K, K, cell_dim), frozen
    x = Tensor(np.ascontiguousarray(cells.transpose(0, 3, 1, 2)))
    h = ad.silu(ad.conv2d(x, params["view.conv1.w"], params["view.conv1.b"], stride=1, pad=1))
    h = ad.silu(ad.conv2d(h, params["view.conv2.w"], params["view.conv2.b"], stride=2, pad=1))
    i_t = _dense(ad.reshape(h, (n, -1)), params, "view.proj")

    g_t = Tensor(params.goal_table[np.asarray(goals)])

    p_t = ad.embedding(params["action_embed"], np.asarray(prev_actions))

    m = Tensor(np.asarray(masks, dtype=params.dtype).reshape(n, 1, k, k))
    h = ad.silu(ad.conv2d(m, params["mask.conv1.w"], params["mask.conv1.b"], stride=1, pad=1))
    res = ad.silu(ad.conv2d(h, params["mask.conv2.w"], params["mask.conv2.b"], stride=1, pad=1))
    h = ad.add(h, res)
    h = ad.silu(ad.conv2d(h, params["mask.conv3.w"], params["mask.conv3.b"], stride=2, pad=1))
    m_t = _dense(ad.reshape(h, (n, -1)), params, "mask.proj")

    return ad.concat([i_t, g_t, p_t, m_t], axis=-1)


def encode_observation(params: PolicyParams, obs):
    """Single-observation convenience wrapper; returns a (obs_dim,) Tensor."""
    out = encode_observations(
        params,
        obs.ego_view[None],
        np.array([obs.goal_category]),
        np.array([obs.prev_action]),
        obs.goal_mask[None],
    )
    return ad.reshape(out, (params.cfg.obs_dim,))


def _heads_split(x, b, t, heads, hd):
    return ad.transpose(ad.reshape(x, (b, t, heads, hd)), (0, 2, 1, 3))


def forward_features(params: PolicyParams, obs_vecs: Tensor, positions, lengths=None):
    """Transformer trunk: (B, T, obs_dim) -> normalized features (B, T, hidden).

    positions: (B, T) int array of position ids (rotary angles or learned
    table rows). lengths: per-sequence valid lengths for key padding.
    """
    cfg = params.cfg
    b, t, _ = obs_vecs.data.shape
    if t > cfg.context_len:
        raise ValueError(f"window length {t} exceeds context_len {cfg.context_len}")
    positions = np.asarray(positions)
    x = _dense(obs_vecs, params, "input_proj")
    if cfg.pos_encoding == "learned":
        x = ad.add(x, ad.embedding(params["pos_table"], positions))

    extra_mask = None
    if lengths is not None:
        cols = np.arange(t)
        pad = cols[None, :] >= np.asarray(lengths)[:, None]  # (B, T) keys to drop
        extra_mask = np.where(pad[:, None, None, :], -1e9, 0.0).astype(params.dtype)

    hd = cfg.hidden // cfg.heads
    rot_pos = positions[:, None, :]  # broadcast over heads
    for layer in range(cfg.layers):
        p = f"block{layer}"
        nx = ad.rms_norm(x, params[f"{p}.attn_gain"])
        q = _heads_split(ad.matmul(nx, params[f"{p}.wq"]), b, t, cfg.heads, hd)
        kk = _heads_split(ad.matmul(nx, params[f"{p}.wk"]), b, t, cfg.heads, hd)
        v = _heads_split(ad.matmul(nx, params[f"{p}.wv"]), b, t, cfg.heads, hd)
        if cfg.pos_encoding == "rotary":
            q = ad.rotary(q, rot_pos)
            kk = ad.rotary(kk, rot_pos)
        att = ad.causal_attention(q, kk, v, extra_mask=extra_mask)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (b, t, cfg.hidden))
        x = ad.add(x, ad.matmul(att, params[f"{p}.wo"]))
        nx = ad.rms_norm(x, params[f"{p}.mlp_gain"])
        gated = ad.mul(ad.silu(ad.matmul(nx, params[f"{p}.w_gate"])),
                       ad.matmul(nx, params[f"{p}.w_up"]))
        x = ad.add(x, ad.matmul(gated, params[f"{p}.w_down"]))
    return ad.rms_norm(x, params["final_gain"])


def head_outputs(params: PolicyParams, feats: Tensor):
    """Action logits (B,T,A), values (B,T), mask logits (B,T,K,K)."""
    cfg = params.cfg
    b, t, _ = feats.data.shape
    logits = _dense(feats, params, "action_head")
    values = ad.reshape(_dense(feats, params, "value_head"), (b, t))
    h0 = cfg.seg_h0
    z = _dense(feats, params, "seg.proj")
    z = ad.reshape(z, (b * t, cfg.seg_channels, h0, h0))
    z = ad.silu(ad.conv2d_transpose(z, params["seg.deconv.w"], params["seg.deconv.b"], stride=2))
    z = ad.conv2d(z, params["seg.out.w"], params["seg.out.b"], stride=1, pad=1)
    k = cfg.view_size
    z = ad.reshape(z, (b * t, z.data.shape[2], z.data.shape[3]))
    z = z if z.data.shape[1] == k else _crop2d(z, k)
    return logits, values, ad.reshape(z, (b, t, k, k))


def _crop2d(z, k):
    out = z.data[:, :k, :k]
    shape = z.data.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, :k, :k] = g
        return [full]

    return ad._record("crop2d", out, (z,), bw)


def last_position_outputs(params: PolicyParams, feats: Tensor, last_idx):
    """Action logits and values at one position per sequence, numpy fast path.

    Skips the segmentation decoder; collection only needs action and value.
    """
    fd = feats.data[np.arange(feats.data.shape[0]), np.asarray(last_idx)]
    logits = fd @ params["action_head.w"].data + params["action_head.b"].data
    values = (fd @ params["value_head.w"].data + params["value_head.b"].data)[:, 0]
    return logits, values


def policy_forward(params: PolicyParams, window_vecs, positions=None):
    """Spec-level single-window forward: (T, obs_dim) -> one PolicyOutput per step."""
    wv = window_vecs if isinstance(window_vecs, Tensor) else Tensor(np.asarray(window_vecs))
    t = wv.data.shape[0]
    if positions is None:
        positions = np.arange(t)
    batched = ad.reshape(wv, (1, t, params.cfg.obs_dim))
    feats = forward_features(params, batched, np.asarray(positions)[None, :])
    logits, values, masks = head_outputs(params, feats)
    return [
        PolicyOutput(
            action_logits=logits.data[0, i].copy(),
            value=float(values.data[0, i]),
            mask_logits=masks.data[0, i].copy(),
        )
        for i in range(t)
    ]


def distribution_stats(logits_row):
    """(probs, logprobs, entropy) for one logits vector, numerically stable."""
    shifted = logits_row - logits_row.max()
    e = np.exp(shifted)
    probs = e / e.sum()
    logprobs = shifted - np.log(e.sum())
    entropy = float(-(probs * logprobs).sum())
    return probs, logprobs, entropy


def sample_action(logits_row, rng):
    probs, logprobs, entropy = distribution_stats(logits_row)
    u = rng.random()
    action = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    action = min(action, len(probs) - 1)
    return action, float(logprobs[action]), entropy


def act(params: PolicyParams, window_vecs, rng, positions=None):
    """Sample an action at the window's last step.

    Returns (action, logprob, value, entropy).
    """
    outs = policy_forward(params, window_vecs, positions)
    last = outs[-1]
    action, logprob, entropy = sample_action(last.action_logits, rng)
    return action, logprob, last.value, entropy


# --- checkpoint io ----------------------------------------------------------

def _write_array(buf, name, arr):
    nm = name.encode()
    buf.write(struct.pack("<H", len(nm)))
    buf.write(nm)
    buf.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_array(buf):
    (nlen,) = struct.unpack("<H", buf.read(2))
    name = buf.read(nlen).decode()
    (ndim,) = struct.unpack("<B", buf.read(1))
    shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(buf.read(4 * count), dtype="<f4").reshape(shape)
    return name, data


def save_checkpoint(path, params: PolicyParams, opt_state=None):
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    cfg_json = json.dumps(asdict(params.cfg), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    names = params.names()
    buf.write(struct.pack("<I", len(names)))
    for nm in names:
        _write_array(buf, nm, params.tensors[nm].data)
    if opt_state is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<Q", opt_state.step))
        for nm, m in zip(names, opt_state.m):
            _write_array(buf, f"opt.m.{nm}", m)
        for nm, v in zip(names, opt_state.v):
            _write_array(buf, f"opt.v.{nm}", v)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    """Returns (params, opt_state or None); shapes validated against config."""
    from .optim import OptimizerState

    with open(path, "rb") as f:
        buf = io.BytesIO(f.read())
    if buf.read(8) != CKPT_MAGIC:
        raise ValueError(f"{path}: not a navlab checkpoint")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", buf.read(4))
    cfg = PolicyConfig(**json.loads(buf.read(clen).decode()))
    params = PolicyParams(cfg)
    (count,) = struct.unpack("<I", buf.read(4))
    seen = set()
    for _ in range(count):
        name, data = _read_array(buf)
        if name not in params.tensors:
            raise ValueError(f"{path}: unexpected parameter {name!r}")
        want = params.tensors[name].data.shape
        if data.shape != want:
            raise ValueError(f"{path}: parameter {name!r} has shape {data.shape}, config implies {want}")
        params.tensors[name].data = data.astype(params.dtype).copy()
        seen.add(name)
    missing = set(params.names()) - seen
    if missing:
        raise ValueError(f"{path}: missing parameters {sorted(missing)}")
    (has_opt,) = struct.unpack("<B", buf.read(1))
    opt_state = None
    if has_opt:
        (step,) = struct.unpack("<Q", buf.read(8))
        opt_state = OptimizerState.for_params(params.trainable())
        opt_state.step = step
        names = params.names()
        for i, nm in enumerate(names):
            name, data = _read_array(buf)
            if name != f"opt.m.{nm}":
                raise ValueError(f"{path}: optimizer state out of order at {name!r}")
            opt_state.m[i] = data.astype(params.dtype).copy()
        for i, nm in enumerate(names):
            name, data = _read_array(buf)
            if name != f"opt.v.{nm}":
                raise ValueError(f"{path}: optimizer state out of order at {name!r}")
            opt_state.v[i] = data.astype(params.dtype).copy()
    return params, opt_state
