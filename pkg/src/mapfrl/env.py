"""Episode-level environment: world stepping plus observations, intrinsic
rewards, valid-action and blocking labels, and episode statistics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .explore import EpisodicBuffer, ExploreConfig
from .obs import ObservationBuilder, PrevInfo
from .world import (
    EPISODE_LIMIT,
    MOVES,
    REWARD_BLOCKING,
    REWARD_COLLISION,
    Action,
    Event,
    Grid,
    StepOutcome,
    WorldState,
    blocking_mask,
    generate_map,
    joint_step,
    sample_agents,
)


@dataclass
class EnvConfig:
    fov: int = 3
    max_steps: int = EPISODE_LIMIT
    blocking_penalty: bool = True
    blocking_labels: bool = True
    project_goals: bool = False
    intrinsic: bool = True  # False drops intrinsic rewards entirely
    explore: ExploreConfig = field(default_factory=ExploreConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        if "explore" in d and isinstance(d["explore"], dict):
            ex = dict(d["explore"])
            if "tau_range" in ex:
                ex["tau_range"] = tuple(ex["tau_range"])
            d["explore"] = ExploreConfig(**ex)
        return cls(**d)


@dataclass
class EnvStep:
    re: np.ndarray
    ri: np.ndarray
    outcome: StepOutcome
    done: bool


def triangular_density(rng: np.random.Generator, low=0.0, peak=0.33, high=0.5) -> float:
    return float(rng.triangular(low, peak, high))


class MapfEnv:
    def __init__(self, cfg: Optional[EnvConfig] = None):
        self.cfg = cfg or EnvConfig()
        self.state: Optional[WorldState] = None

    # -- episode setup -------------------------------------------------------

    def reset(self, grid: Grid, starts, goals, rng: np.random.Generator) -> None:
        state = WorldState(grid, starts, goals)
        state.validate()
        self.state = state
        n = state.n_agents
        self.builder = ObservationBuilder(state, self.cfg.fov, self.cfg.project_goals)
        self.buffers = [EpisodicBuffer.for_episode(self.cfg.explore, rng) for _ in range(n)]
        self.prev = PrevInfo.initial(n)
        self.prev_positions = state.positions.copy()
        self.blocking = self._blocking(state)
        self.max_on_goal = int(state.on_goal.sum())
        self.total_reward = np.zeros(n)
        self.events: List[List[Tuple[Event, ...]]] = []

    def reset_random(self, size: int, density: float, n: int, rng: np.random.Generator) -> None:
        for _ in range(100):
            grid = generate_map(size, density, rng)
            if len(grid.free_cells()) >= n:
                break
        starts, goals = sample_agents(grid, n, rng)
        self.reset(grid, starts, goals, rng)

    # -- queries ----------------------------------------------------------------

    @property
    def n_agents(self) -> int:
        return self.state.n_agents

    @property
    def done(self) -> bool:
        return self.success or self.state.step >= self.cfg.max_steps

    @property
    def success(self) -> bool:
        return bool(self.state.on_goal.all())

    def observe(self, positions: Optional[np.ndarray] = None, prev: Optional[PrevInfo] = None):
        """Maps (n, 8, f, f) and scalars (n, 7); hypothetical positions allowed."""
        pos = self.state.positions if positions is None else positions
        return self.builder.build(pos, self.prev if prev is None else prev)

    def valid_actions(self) -> np.ndarray:
        """(n, 5) mask: False for moves into obstacles/boundary or straight back."""
        st = self.state
        targets = st.positions[:, None, :] + MOVES[None, :, :]
        m = st.grid.size
        inside = np.all((targets >= 0) & (targets < m), axis=-1)
        clipped = np.clip(targets, 0, m - 1)
        free = inside & ~st.grid.obstacles[clipped[..., 0], clipped[..., 1]]
        back = np.all(targets == self.prev_positions[:, None, :], axis=-1)
        back[:, Action.STAY] = False
        valid = free & ~back
        valid[:, Action.STAY] = True
        return valid

    def _blocking(self, state: WorldState) -> np.ndarray:
        if not (self.cfg.blocking_labels or self.cfg.blocking_penalty):
            return np.zeros(state.n_agents, dtype=bool)
        return blocking_mask(state)

    # -- stepping ------------------------------------------------------------------

    def step(
        self,
        actions,
        rng: np.random.Generator,
        intrinsic_active: bool = True,
        halted: Optional[np.ndarray] = None,
    ) -> EnvStep:
        """Advance one step.  ``halted`` marks moves withdrawn by the stop rule,
        which stay in place and take the collision penalty."""
        before = self.state
        new, outcome = joint_step(before, actions, blocking_penalty=False)
        rewards = outcome.rewards
        if halted is not None and halted.any():
            for i in np.flatnonzero(halted):
                rewards[i] = REWARD_COLLISION
                outcome.events[i] = (Event.CONFLICT_STOP,)
        blocking = self._blocking(new)
        if self.cfg.blocking_penalty:
            for i in np.flatnonzero(blocking):
                rewards[i] += REWARD_BLOCKING
                outcome.events[i] = outcome.events[i] + (Event.BLOCKING,)
            outcome.blocking = blocking

        n = new.n_agents
        on_goal = new.on_goal
        ri = np.zeros(n)
        dmin = np.zeros(n)
        if self.cfg.intrinsic:
            for i, buf in enumerate(self.buffers):
                pos = new.positions[i]
                r, dmax, dmin[i] = buf.intrinsic_reward(pos, bool(on_goal[i]))
                buf.maybe_insert(pos, dmax, rng)
                ri[i] = r if intrinsic_active else 0.0
        self.prev = PrevInfo(rewards.copy(), ri, dmin, np.asarray(actions, dtype=np.int64).copy())
        self.prev_positions = before.positions.copy()
        self.state = new
        self.blocking = blocking
        self.max_on_goal = max(self.max_on_goal, int(on_goal.sum()))
        self.total_reward += rewards
        self.events.append(outcome.events)
        return EnvStep(rewards, ri, outcome, self.done)

    @property
    def obstacle_collisions(self) -> int:
        return int(self.state.collision_counts.sum())
