"""PPO + imitation training of the shared policy."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import numerics as nx
from .env import EnvConfig, MapfEnv
from .expert import prioritized_plan
from .policy import NetConfig, PolicyNet
from .runner import StepRecord, TeamRunner
from .tiebreak import TieBreakConfig

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "iteration", "env_steps", "episodes", "mean_reward", "SR", "EL",
    "loss_total", "loss_policy", "loss_value_e", "loss_value_i", "entropy",
    "loss_valid", "loss_block", "loss_imitation", "grad_norm", "expert_calls", "expert_failures",
]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.95
    gae_lambda: float = 0.95
    clip: float = 0.2
    lr: float = 1e-5
    epochs: int = 10
    minibatch: int = 1024  # agent-steps per minibatch
    workers: int = 16
    policy_coef: float = 10.0
    entropy_coef: float = 0.01
    valid_coef: float = 0.5
    block_coef: float = 0.5
    value_i_coef: float = 0.08
    value_e_coef: float = 0.08
    imitation_ratio: float = 0.10
    grad_clip_norm: float = 10.0
    n_agents: int = 8
    world_sizes: Tuple[int, ...] = (10, 25, 40)
    density: Tuple[float, float, float] = (0.0, 0.33, 0.5)  # triangular (low, peak, high)
    total_steps: int = 10_000_000
    seed: int = 1234
    checkpoint_every: int = 50  # iterations
    normalize_advantages: bool = True
    net: NetConfig = field(default_factory=NetConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    tiebreak: TieBreakConfig = field(default_factory=TieBreakConfig)

    def __post_init__(self):
        self.world_sizes = tuple(self.world_sizes)
        self.density = tuple(self.density)
        if not 0.0 <= self.imitation_ratio <= 1.0:
            raise ValueError("imitation_ratio must lie in [0, 1]")
        for name in ("gamma", "gae_lambda", "clip", "lr", "epochs", "minibatch", "workers", "n_agents"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.env.fov != self.net.fov:
            raise ValueError(f"env fov {self.env.fov} differs from network fov {self.net.fov}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "net" in d:
            d["net"] = NetConfig.from_dict(d["net"])
        if "env" in d:
            d["env"] = EnvConfig.from_dict(d["env"])
        if "tiebreak" in d:
            d["tiebreak"] = TieBreakConfig(**d["tiebreak"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# advantages
# ---------------------------------------------------------------------------

def compute_gae(
    rewards: Sequence[float],
    values: Sequence[float],
    dones: Sequence[float],
    gamma: float,
    lam: float,
    last_value: float = 0.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """GAE over one trajectory.

    ``dones[t]`` is 1 when the episode terminated after step t (no bootstrap);
    ``last_value`` bootstraps a trajectory cut off after its final step.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not rewards.shape == values.shape == dones.shape:
        raise ValueError(f"length mismatch: {rewards.shape}, {values.shape}, {dones.shape}")
    adv = np.zeros_like(rewards)
    running = 0.0
    next_value = last_value
    for t in range(len(rewards) - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


# ---------------------------------------------------------------------------
# batches and losses
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Per-(timestep, agent) training tensors, shaped (T, n, ...)."""

    maps: torch.Tensor
    scalars: torch.Tensor
    h: torch.Tensor
    c: torch.Tensor
    messages: torch.Tensor
    positions: torch.Tensor
    actions: torch.Tensor
    logp: torch.Tensor
    adv: torch.Tensor
    ret_e: torch.Tensor
    ret_i: torch.Tensor
    valid: torch.Tensor
    blocking: torch.Tensor

    def __len__(self):
        return self.actions.shape[0]

    def index(self, idx) -> "Batch":
        return Batch(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def to(self, dtype) -> "Batch":
        kw = {}
        for f in fields(self):
            t = getattr(self, f.name)
            kw[f.name] = t.to(dtype) if t.is_floating_point() else t
        return Batch(**kw)

    @classmethod
    def concat(cls, batches: List["Batch"]) -> "Batch":
        return cls(**{f.name: torch.cat([getattr(b, f.name) for b in batches]) for f in fields(cls)})


def _bce(p: torch.Tensor, target: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    return -(target * torch.log(p + eps) + (1 - target) * torch.log(1 - p + eps)).mean()


def _aux_terms(out, batch: Batch) -> Dict[str, torch.Tensor]:
    logp_all = nx.log_softmax(out.logits)
    probs = torch.exp(logp_all)
    return {
        "logp_all": logp_all,
        "value_e": ((out.ve - batch.ret_e) ** 2).mean(),
        "value_i": ((out.vi - batch.ret_i) ** 2).mean(),
        "valid": _bce(probs, batch.valid),
        "block": torch.nn.functional.binary_cross_entropy_with_logits(out.block_logit, batch.blocking),
        "entropy": -(probs * logp_all).sum(-1).mean(),
    }


def _forward(net: PolicyNet, batch: Batch):
    return net(batch.maps, batch.scalars, batch.h, batch.c, batch.messages, positions=batch.positions)


def ppo_loss(net: PolicyNet, batch: Batch, cfg: TrainConfig) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Clipped-surrogate PPO loss plus value, entropy, valid-action and blocking terms."""
    out = _forward(net, batch)
    aux = _aux_terms(out, batch)
    logp = aux["logp_all"].gather(-1, batch.actions.unsqueeze(-1)).squeeze(-1)
    ratio = torch.exp(logp - batch.logp)
    clipped = torch.clamp(ratio, 1 - cfg.clip, 1 + cfg.clip)
    surrogate = torch.min(ratio * batch.adv, clipped * batch.adv).mean()
    total = (
        -cfg.policy_coef * surrogate
        + cfg.value_e_coef * aux["value_e"]
        + cfg.value_i_coef * aux["value_i"]
        - cfg.entropy_coef * aux["entropy"]
        + cfg.valid_coef * aux["valid"]
        + cfg.block_coef * aux["block"]
    )
    diag = {
        "loss_policy": surrogate.item(),
        "loss_value_e": aux["value_e"].item(),
        "loss_value_i": aux["value_i"].item(),
        "entropy": aux["entropy"].item(),
        "loss_valid": aux["valid"].item(),
        "loss_block": aux["block"].item(),
        "clip_fraction": ((ratio - 1).abs() > cfg.clip).float().mean().item(),
    }
    return total, diag


def imitation_loss(net: PolicyNet, batch: Batch, cfg: TrainConfig) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Cross-entropy against expert actions (``batch.actions``) plus the auxiliary terms."""
    out = _forward(net, batch)
    aux = _aux_terms(out, batch)
    ce = -aux["logp_all"].gather(-1, batch.actions.unsqueeze(-1)).squeeze(-1).mean()
    total = (
        ce
        + cfg.value_e_coef * aux["value_e"]
        + cfg.value_i_coef * aux["value_i"]
        + cfg.valid_coef * aux["valid"]
        + cfg.block_coef * aux["block"]
    )
    return total, {"loss_imitation": ce.item()}


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

@dataclass
class Episode:
    records: List[StepRecord]
    success: bool
    length: int
    imitation: bool
    last_values: Optional[np.ndarray] = None  # (n, 2) bootstrap (ve, vi) for cut-off episodes
    total_reward: float = 0.0

    def to_batch(self, gamma: float, lam: float) -> Batch:
        recs = self.records
        T, n = len(recs), len(recs[0].actions)
        stack = lambda name: np.stack([getattr(r, name) for r in recs])  # noqa: E731
        re, ri = stack("re"), stack("ri")
        ve, vi = stack("ve"), stack("vi")
        dones = np.zeros(T)
        if self.success:
            dones[-1] = 1.0
        last = self.last_values if self.last_values is not None else np.zeros((n, 2))
        adv = np.empty((T, n))
        ret_e = np.empty((T, n))
        ret_i = np.empty((T, n))
        for i in range(n):
            adv[:, i], _ = compute_gae(re[:, i] + ri[:, i], ve[:, i] + vi[:, i], dones, gamma, lam, last[i].sum())
            _, ret_e[:, i] = compute_gae(re[:, i], ve[:, i], dones, gamma, lam, last[i, 0])
            _, ret_i[:, i] = compute_gae(ri[:, i], vi[:, i], dones, gamma, lam, last[i, 1])
        f32 = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float32))  # noqa: E731
        return Batch(
            maps=f32(stack("maps")), scalars=f32(stack("scalars")),
            h=f32(stack("h")), c=f32(stack("c")), messages=f32(stack("messages")),
            positions=torch.from_numpy(stack("positions")),
            actions=torch.from_numpy(stack("actions").astype(np.int64)),
            logp=f32(stack("logp")), adv=f32(adv), ret_e=f32(ret_e), ret_i=f32(ret_i),
            valid=f32(stack("valid")), blocking=f32(stack("blocking")),
        )


def collect_episodes(
    runner: TeamRunner,
    envs: List[MapfEnv],
    rngs: List[np.random.Generator],
    plans: List[Optional[object]],
    intrinsic_active: bool,
) -> List[Episode]:
    """Run one episode in every environment (already reset) in lockstep."""
    runner.begin(envs)
    records: List[List[StepRecord]] = [[] for _ in envs]
    active = [e for e, env in enumerate(envs) if not env.done]
    while active:
        forced = {e: plans[e].joint(envs[e].state.step) for e in active if plans[e] is not None}
        for e, rec in zip(active, runner.step(envs, rngs, active, intrinsic_active, forced)):
            records[e].append(rec)
        active = [e for e in active if not envs[e].done]
    cut = [e for e, env in enumerate(envs) if not env.success and records[e]]
    last = dict(zip(cut, runner.values(envs, cut))) if cut else {}
    return [
        Episode(records[e], env.success, env.state.step, plans[e] is not None, last.get(e),
                float(env.total_reward.mean()))
        for e, env in enumerate(envs)
        if records[e]
    ]


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

class Trainer:
    def __init__(self, cfg: TrainConfig, out_dir=None):
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        torch.manual_seed(cfg.seed)
        self.net = PolicyNet(cfg.net, seed=cfg.seed)
        self.optimizer = torch.optim.Adam(self.net.parameters(), lr=cfg.lr)
        seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.workers + 1)
        self.worker_rngs = [np.random.default_rng(s) for s in seeds[:-1]]
        self.rng = np.random.default_rng(seeds[-1])
        self.envs = [MapfEnv(cfg.env) for _ in range(cfg.workers)]
        self.runner = TeamRunner(self.net, cfg.tiebreak)
        self.env_steps = 0
        self.iteration = 0
        self.expert_calls = 0
        self.expert_failures = 0
        self.history: List[dict] = []

    @property
    def intrinsic_active(self) -> bool:
        return self.cfg.env.intrinsic and self.env_steps > self.cfg.env.explore.warmup_steps

    def _reset_worker(self, w: int):
        cfg, rng, env = self.cfg, self.worker_rngs[w], self.envs[w]
        imitate = rng.random() < cfg.imitation_ratio
        size = int(rng.choice(cfg.world_sizes))
        lo, peak, hi = cfg.density
        density = float(rng.triangular(lo, peak, hi)) if hi > lo else lo
        env.reset_random(size, density, cfg.n_agents, rng)
        if not imitate:
            return None, False
        self.expert_calls += 1
        plan = prioritized_plan(env.state.grid, env.state.positions, env.state.goals, rng)
        if plan is None:
            self.expert_failures += 1
            return None, True
        return plan, False

    def collect(self) -> List[Episode]:
        plans, skipped = [], []
        for w in range(self.cfg.workers):
            plan, skip = self._reset_worker(w)
            plans.append(plan)
            skipped.append(skip)
        live = [w for w in range(self.cfg.workers) if not skipped[w]]
        if not live:
            return []
        episodes = collect_episodes(
            self.runner,
            [self.envs[w] for w in live],
            [self.worker_rngs[w] for w in live],
            [plans[w] for w in live],
            self.intrinsic_active,
        )
        self.env_steps += sum(ep.length for ep in episodes)
        return episodes

    def _minibatches(self, n_steps: int):
        per = max(1, self.cfg.minibatch // self.cfg.n_agents)
        order = self.rng.permutation(n_steps)
        for start in range(0, n_steps, per):
            yield torch.from_numpy(order[start:start + per])

    def _apply(self, loss: torch.Tensor, diag: dict) -> Optional[float]:
        if not torch.isfinite(loss):
            log.warning("non-finite loss, update skipped: %s", diag)
            return None
        self.optimizer.zero_grad()
        loss.backward()
        norm = torch.nn.utils.clip_grad_norm_(self.net.parameters(), self.cfg.grad_clip_norm)
        self.optimizer.step()
        return float(norm)

    def update(self, episodes: List[Episode]) -> Dict[str, float]:
        cfg = self.cfg
        sums: Dict[str, List[float]] = {}

        def note(d):
            for k, v in d.items():
                sums.setdefault(k, []).append(v)

        rl = [ep.to_batch(cfg.gamma, cfg.gae_lambda) for ep in episodes if not ep.imitation]
        il = [ep.to_batch(cfg.gamma, cfg.gae_lambda) for ep in episodes if ep.imitation]
        if rl:
            batch = Batch.concat(rl)
            if cfg.normalize_advantages and batch.adv.numel() > 1:
                batch.adv = (batch.adv - batch.adv.mean()) / (batch.adv.std() + 1e-8)
            for _ in range(cfg.epochs):
                for idx in self._minibatches(len(batch)):
                    loss, diag = ppo_loss(self.net, batch.index(idx), cfg)
                    diag["loss_total"] = loss.item()
                    diag["grad_norm"] = self._apply(loss, diag)
                    note(diag)
        if il:
            batch = Batch.concat(il)
            for _ in range(cfg.epochs):
                for idx in self._minibatches(len(batch)):
                    loss, diag = imitation_loss(self.net, batch.index(idx), cfg)
                    diag["grad_norm"] = self._apply(loss, diag)
                    note(diag)
        return {k: float(np.mean([x for x in v if x is not None])) if any(x is not None for x in v) else math.nan
                for k, v in sums.items()}

    def iterate(self) -> dict:
        episodes = self.collect()
        losses = self.update(episodes)
        self.iteration += 1
        rl = [ep for ep in episodes if not ep.imitation]
        successes = [ep for ep in rl if ep.success]
        row = {
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            "episodes": len(episodes),
            "mean_reward": float(np.mean([ep.total_reward for ep in rl])) if rl else math.nan,
            "SR": len(successes) / len(rl) if rl else math.nan,
            "EL": float(np.mean([ep.length for ep in successes])) if successes else math.nan,
            "expert_calls": self.expert_calls,
            "expert_failures": self.expert_failures,
        }
        for k in METRIC_COLUMNS:
            if k not in row:
                row[k] = losses.get(k, math.nan)
        self.history.append(row)
        return row

    # -- persistence ------------------------------------------------------------

    def checkpoint_meta(self) -> dict:
        return {
            "net": self.cfg.net.to_dict(),
            "train": self.cfg.to_dict(),
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            "intrinsic_active": self.intrinsic_active,
        }

    def save(self, path) -> None:
        nx.save_checkpoint(path, dict(self.net.state_dict()), self.checkpoint_meta())

    def run(self, max_iterations: Optional[int] = None, progress: bool = False) -> List[dict]:
        """Train until ``total_steps`` environment steps (or ``max_iterations``)."""
        cfg = self.cfg
        writer = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            cfg.save(self.out_dir / "config.json")
            self.save(self.out_dir / "ckpt_000000.bin")
            fh = open(self.out_dir / "metrics.csv", "w", newline="")
            writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
            writer.writeheader()
        try:
            while self.env_steps < cfg.total_steps:
                if max_iterations is not None and self.iteration >= max_iterations:
                    break
                row = self.iterate()
                if writer is not None:
                    writer.writerow({k: _fmt(row[k]) for k in METRIC_COLUMNS})
                    fh.flush()
                    if self.iteration % cfg.checkpoint_every == 0:
                        self.save(self.out_dir / f"ckpt_{self.iteration:06d}.bin")
                if progress:
                    log.info("iter %d steps %d SR %.2f reward %.2f", row["iteration"], row["env_steps"],
                             row["SR"], row["mean_reward"])
        finally:
            if writer is not None:
                self.save(self.out_dir / "latest.bin")
                fh.close()
        return self.history


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def train_loop(cfg: TrainConfig, out_dir, max_iterations: Optional[int] = None, progress: bool = False) -> Trainer:
    trainer = Trainer(cfg, out_dir)
    trainer.run(max_iterations=max_iterations, progress=progress)
    return trainer


def load_policy(path) -> Tuple[PolicyNet, dict]:
    """Rebuild a network from a checkpoint file."""
    params, meta = nx.load_checkpoint(path)
    if "net" not in meta:
        raise nx.CheckpointError(f"{path}: checkpoint carries no network config")
    net = PolicyNet(NetConfig.from_dict(meta["net"]))
    own = net.state_dict()
    if set(own) != set(params) or any(own[k].shape != params[k].shape for k in own):
        raise nx.CheckpointError(f"{path}: parameters do not match the stored network config")
    net.load_state_dict({k: params[k].to(own[k].dtype) for k in own})
    return net, meta
