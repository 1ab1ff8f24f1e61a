"""Episode metrics (EL, MR, CO, SR), evaluation runs and suite reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

from .env import EnvConfig, MapfEnv
from .policy import PolicyNet
from .runner import TeamRunner
from .tiebreak import TieBreakConfig

EPISODE_COLUMNS = ["episode", "seed", "n", "m", "density", "success", "EL", "MR", "collisions", "CO"]
SUITE_COLUMNS = [
    "n", "m", "density", "episodes", "SR",
    "EL_mean", "EL_std", "MR_mean", "MR_std", "CO_mean", "CO_std",
]


def collision_ratio(collisions: int, length: int, n_agents: int) -> float:
    """Obstacle collisions per agent-step, in percent."""
    if length <= 0 or n_agents <= 0:
        return 0.0
    return 100.0 * collisions / (length * n_agents)


@dataclass
class EpisodeMetrics:
    n_agents: int
    length: int
    max_on_goal: int
    collisions: int
    success: bool

    @property
    def co(self) -> float:
        return collision_ratio(self.collisions, self.length, self.n_agents)

    @classmethod
    def from_env(cls, env: MapfEnv) -> "EpisodeMetrics":
        return cls(env.n_agents, env.state.step, env.max_on_goal, env.obstacle_collisions, env.success)

    @classmethod
    def from_trace(cls, positions: Sequence[np.ndarray], goals: np.ndarray, collisions: Sequence[int]) -> "EpisodeMetrics":
        """Metrics from a list of per-step position arrays (index 0 = start)
        and per-step obstacle collision counts."""
        goals = np.asarray(goals)
        on_goal = [int(np.all(np.asarray(p) == goals, axis=1).sum()) for p in positions]
        n = len(goals)
        return cls(n, len(positions) - 1, max(on_goal), int(sum(collisions)), on_goal[-1] == n)


def _stats(values: List[float]):
    if not values:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


@dataclass
class EvalReport:
    episodes: List[EpisodeMetrics] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)
    n: int = 0
    m: int = 0
    density: float = 0.0

    @property
    def success_rate(self) -> float:
        if not self.episodes:
            return float("nan")
        return 100.0 * sum(e.success for e in self.episodes) / len(self.episodes)

    @property
    def el(self):
        # failed episodes are left out of EL
        return _stats([e.length for e in self.episodes if e.success])

    @property
    def mr(self):
        return _stats([e.max_on_goal for e in self.episodes])

    @property
    def co(self):
        return _stats([e.co for e in self.episodes])

    def summary(self) -> dict:
        (el, el_sd), (mr, mr_sd), (co, co_sd) = self.el, self.mr, self.co
        return {
            "n": self.n, "m": self.m, "density": self.density, "episodes": len(self.episodes),
            "SR": self.success_rate, "EL_mean": el, "EL_std": el_sd,
            "MR_mean": mr, "MR_std": mr_sd, "CO_mean": co, "CO_std": co_sd,
        }

    def rows(self) -> List[dict]:
        return [
            {"episode": k, "seed": s, "n": self.n, "m": self.m, "density": self.density,
             "success": int(e.success), "EL": e.length, "MR": e.max_on_goal,
             "collisions": e.collisions, "CO": e.co}
            for k, (e, s) in enumerate(zip(self.episodes, self.seeds))
        ]

    def episodes_csv(self) -> str:
        return _to_csv(EPISODE_COLUMNS, self.rows())

    def to_json(self) -> str:
        return json.dumps({"summary": self.summary(), "episodes": self.rows()}, indent=2)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else f"{float(v):.6g}"
    return str(v)


def _to_csv(columns: Sequence[str], rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def suite_csv(reports: Sequence[EvalReport]) -> str:
    return _to_csv(SUITE_COLUMNS, [r.summary() for r in reports])


@dataclass
class SuiteEntry:
    n: int
    m: int
    density: float
    episodes: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n <= 0 or self.m < 3 or self.episodes < 0:
            raise ValueError(f"invalid suite entry {asdict(self)}")
        if not 0.0 <= self.density < 1.0:
            raise ValueError(f"density must lie in [0, 1), got {self.density}")


def evaluate(
    net: PolicyNet,
    entry: SuiteEntry,
    env_cfg: Optional[EnvConfig] = None,
    tiebreak: Optional[TieBreakConfig] = None,
    greedy: bool = False,
    batch: int = 16,
    intrinsic_active: bool = True,
    observer: Optional[Callable[[int, MapfEnv], None]] = None,
) -> EvalReport:
    """Run ``entry.episodes`` episodes; episode k draws everything from its own seed.

    ``observer(k, env)`` is called after every reset and every step of episode k.
    """
    env_cfg = env_cfg or EnvConfig(fov=net.cfg.fov)
    if env_cfg.fov != net.cfg.fov:
        raise ValueError(f"env fov {env_cfg.fov} differs from network fov {net.cfg.fov}")
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(entry.seed).spawn(entry.episodes)]
    report = EvalReport(n=entry.n, m=entry.m, density=entry.density)
    runner = TeamRunner(net, tiebreak, greedy=greedy)
    net.eval()
    for start in range(0, entry.episodes, batch):
        chunk = seeds[start:start + batch]
        rngs = [np.random.default_rng(s) for s in chunk]
        envs = [MapfEnv(env_cfg) for _ in chunk]
        for env, rng in zip(envs, rngs):
            env.reset_random(entry.m, entry.density, entry.n, rng)
        if observer is not None:
            for e, env in enumerate(envs):
                observer(start + e, env)
        runner.begin(envs)
        active = [e for e, env in enumerate(envs) if not env.done]
        while active:
            # exploration rewards only feed observations, never the metrics
            runner.step(envs, rngs, active, intrinsic_active=intrinsic_active)
            if observer is not None:
                for e in active:
                    observer(start + e, envs[e])
            active = [e for e in active if not envs[e].done]
        report.episodes.extend(EpisodeMetrics.from_env(env) for env in envs)
        report.seeds.extend(chunk)
    return report


def run_suite(
    net: PolicyNet,
    entries: Sequence[SuiteEntry],
    env_cfg: Optional[EnvConfig] = None,
    tiebreak: Optional[TieBreakConfig] = None,
    greedy: bool = False,
    intrinsic_active: bool = True,
) -> List[EvalReport]:
    return [evaluate(net, e, env_cfg, tiebreak, greedy, intrinsic_active=intrinsic_active) for e in entries]
