"""Shared decentralized policy: observation encoder, attention-based message
fusion across agents, and output heads."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import numerics as nx
from .numerics import Conv2d, Dense, GRUGate, LayerNorm, LSTMCell, MultiHeadAttention
from .obs import N_CHANNELS, N_SCALARS
from .world import Action, N_ACTIONS

log = logging.getLogger(__name__)

COMM_MODES = ("global", "local", "self_only", "none")


@dataclass
class NetConfig:
    fov: int = 3
    d_model: int = 256
    n_heads: int = 8
    d_k: int = 32
    ffn_dim: int = 1024
    n_blocks: int = 1
    n_actions: int = N_ACTIONS
    comm_mode: str = "global"
    comm_radius: float = 5.0
    conv_channels: Tuple[int, int, int] = (32, 64, 128)
    scalar_dim: int = 64
    positional: bool = True

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        if self.comm_mode not in COMM_MODES:
            raise ValueError(f"comm_mode must be one of {COMM_MODES}, got {self.comm_mode!r}")
        if self.d_model != self.n_heads * self.d_k:
            raise ValueError(f"d_model {self.d_model} != n_heads {self.n_heads} * d_k {self.d_k}")
        if self.n_blocks < 1:
            raise ValueError("need at least one computation block")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def small(cls, **overrides) -> "NetConfig":
        """Reduced network for desk-scale experiments."""
        base = dict(d_model=64, n_heads=4, d_k=16, ffn_dim=256, conv_channels=(16, 32, 64), scalar_dim=32)
        base.update(overrides)
        return cls(**base)


@dataclass
class NetOutput:
    logits: torch.Tensor  # (B, n, 5)
    ve: torch.Tensor  # (B, n)
    vi: torch.Tensor  # (B, n)
    block_logit: torch.Tensor  # (B, n)
    message: torch.Tensor  # (B, n, d)
    h: torch.Tensor
    c: torch.Tensor
    lstm_in: Optional[torch.Tensor] = field(default=None, repr=False)

    @property
    def value(self) -> torch.Tensor:
        return self.ve + self.vi

    @property
    def blocking_prob(self) -> torch.Tensor:
        return torch.sigmoid(self.block_logit)

    @property
    def probs(self) -> torch.Tensor:
        return nx.softmax(self.logits)


class CommBlock(nn.Module):
    """Pre-norm attention and feed-forward sublayers, each closed by a GRU gate."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.norm1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.d_k)
        self.gate1 = GRUGate(cfg.d_model)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ff1 = Dense(cfg.d_model, cfg.ffn_dim)
        self.ff2 = Dense(cfg.ffn_dim, cfg.d_model)
        self.gate2 = GRUGate(cfg.d_model)

    def forward(self, x, mask=None):
        x = self.gate1(x, self.attn(self.norm1(x), mask))
        return self.gate2(x, self.ff2(torch.relu(self.ff1(self.norm2(x)))))


def _pooled_extent(fov: int) -> Tuple[int, bool, bool]:
    # a 2x2 pool is applied only where it leaves an extent of at least 2
    s = fov
    pools = []
    for _ in range(2):
        pools.append(s >= 4)
        if s >= 4:
            s //= 2
    return s, pools[0], pools[1]


class PolicyNet(nn.Module):
    def __init__(self, cfg: NetConfig, seed: Optional[int] = None):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            if seed is not None:
                torch.manual_seed(seed)
            self._build(cfg)

    def _build(self, cfg: NetConfig):
        c1, c2, c3 = cfg.conv_channels
        d = cfg.d_model
        self.stage1 = nn.ModuleList([Conv2d(N_CHANNELS, c1), Conv2d(c1, c1), Conv2d(c1, c1)])
        self.stage2 = nn.ModuleList([Conv2d(c1, c2), Conv2d(c2, c2), Conv2d(c2, c2)])
        self.conv_out = Conv2d(c2, c3)
        extent, self.pool1, self.pool2 = _pooled_extent(cfg.fov)
        self.scalar_fc = Dense(N_SCALARS, cfg.scalar_dim)
        self.fc1 = Dense(c3 * extent * extent + cfg.scalar_dim, d)
        self.fc2 = Dense(d, d)
        self.lstm = LSTMCell(d, d)
        self.blocks = nn.ModuleList([CommBlock(cfg) for _ in range(cfg.n_blocks)])
        self.policy_head = Dense(3 * d, cfg.n_actions)
        self.ve_head = Dense(3 * d, 1)
        self.vi_head = Dense(3 * d, 1)
        self.block_head = Dense(3 * d, 1)
        self.message_head = Dense(3 * d, d)

    # -- pieces ------------------------------------------------------------

    def encode(self, maps, scalars, h, c):
        """Per-agent encoder. Leading dims are flattened; returns (lstm_in, h, c)."""
        lead = maps.shape[:-3]
        x = maps.reshape(-1, *maps.shape[-3:])
        for conv in self.stage1:
            x = torch.relu(conv(x))
        if self.pool1:
            x = nx.maxpool2d(x)
        for conv in self.stage2:
            x = torch.relu(conv(x))
        if self.pool2:
            x = nx.maxpool2d(x)
        x = torch.relu(self.conv_out(x)).flatten(1)
        s = torch.relu(self.scalar_fc(scalars.reshape(-1, scalars.shape[-1])))
        z = torch.relu(self.fc1(torch.cat([x, s], dim=-1)))
        z = torch.relu(self.fc2(z))
        d = self.cfg.d_model
        h_new, c_new = self.lstm(z, h.reshape(-1, d), c.reshape(-1, d))
        return z.reshape(*lead, d), h_new.reshape(*lead, d), c_new.reshape(*lead, d)

    def comm_mask(self, positions: Optional[torch.Tensor], n: int, batch_shape) -> Optional[torch.Tensor]:
        mode = self.cfg.comm_mode
        eye = torch.eye(n, dtype=torch.bool)
        if mode == "global":
            return None
        if mode == "self_only":
            return eye.expand(*batch_shape, n, n)
        if positions is None:
            raise ValueError("local communication needs agent positions")
        p = positions.to(torch.float64)
        dist = torch.cdist(p, p)
        return (dist <= self.cfg.comm_radius) | eye

    def communicate(self, messages, positions=None, agent_ids=None, mask=None):
        """Fuse previous-step messages (B, n, d) across agents."""
        *batch, n, d = messages.shape
        if self.cfg.comm_mode == "none":
            return torch.zeros_like(messages)
        x = messages
        if self.cfg.positional:
            if agent_ids is None:
                agent_ids = torch.arange(1, n + 1)
            x = x + nx.sinusoidal_embedding(agent_ids, d).to(messages.dtype)
        if mask is None:
            mask = self.comm_mask(positions, n, batch)
        for block in self.blocks:
            x = block(x, mask)
        return x

    def heads(self, fused, lstm_out, lstm_in) -> Tuple[torch.Tensor, ...]:
        z = torch.cat([fused, lstm_out, lstm_in], dim=-1)
        return (
            self.policy_head(z),
            self.ve_head(z).squeeze(-1),
            self.vi_head(z).squeeze(-1),
            self.block_head(z).squeeze(-1),
            self.message_head(z),
        )

    def forward(self, maps, scalars, h, c, messages, positions=None, agent_ids=None, mask=None) -> NetOutput:
        """One decision step for a batch of teams.

        maps (B, n, 8, f, f), scalars (B, n, 7), h/c/messages (B, n, d).
        ``messages`` are those emitted at the previous step.
        """
        lstm_in, h_new, c_new = self.encode(maps, scalars, h, c)
        fused = self.communicate(messages, positions, agent_ids, mask)
        logits, ve, vi, block, message = self.heads(fused, h_new, lstm_in)
        return NetOutput(logits, ve, vi, block, message, h_new, c_new, lstm_in)

    def initial_carry(self, batch: int, n: int, dtype=torch.float32):
        d = self.cfg.d_model
        z = torch.zeros(batch, n, d, dtype=dtype)
        return z, z.clone(), z.clone()


# ---------------------------------------------------------------------------
# action selection
# ---------------------------------------------------------------------------

def action_probs(logits: np.ndarray, forbidden: Optional[np.ndarray] = None) -> np.ndarray:
    """Softmax over the last axis with ``forbidden`` actions removed and the rest renormalized."""
    z = np.asarray(logits, dtype=np.float64)
    if forbidden is not None:
        z = np.where(forbidden, -np.inf, z)
    top = z.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(z - top)
    total = e.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return e / total


def act(
    logits: np.ndarray,
    forbidden: Optional[np.ndarray],
    rng: np.random.Generator,
    greedy: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """Sample actions for a batch of logits ``(..., 5)``.

    Returns ``(actions, fallback)``; rows with every action forbidden fall
    back to Stay and are flagged in ``fallback``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    lead = logits.shape[:-1]
    flat = logits.reshape(-1, logits.shape[-1])
    forb = None if forbidden is None else np.broadcast_to(forbidden, logits.shape).reshape(flat.shape)
    p = action_probs(flat, forb)
    fallback = ~np.isfinite(p).all(axis=-1)
    if greedy:
        z = flat if forb is None else np.where(forb, -np.inf, flat)
        actions = z.argmax(axis=-1)
    else:
        u = rng.random(len(flat))
        cdf = np.cumsum(np.nan_to_num(p), axis=-1)
        cdf[:, -1] = np.inf  # guard against rounding below u
        if forb is not None:
            # never land on a forbidden trailing action because of the guard
            last_ok = flat.shape[-1] - 1 - np.argmax(~forb[:, ::-1], axis=-1)
            cdf[np.arange(len(flat)), last_ok] = np.inf
        actions = (cdf > u[:, None]).argmax(axis=-1)
    actions = np.where(fallback, int(Action.STAY), actions)
    if fallback.any():
        log.warning("all actions masked for %d agent(s); forcing Stay", int(fallback.sum()))
    return actions.reshape(lead), fallback.reshape(lead)
