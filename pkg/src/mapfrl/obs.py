"""Per-agent partial observations: eight binary FOV channels plus a 7-scalar vector."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .world import Action, N_ACTIONS, WorldState

N_CHANNELS = 8
N_SCALARS = 7
CH_HEURISTIC = slice(0, 4)  # Up, Down, Left, Right
CH_OBSTACLE = 4
CH_AGENTS = 5
CH_OWN_GOAL = 6
CH_OTHER_GOALS = 7


@dataclass
class Observation:
    maps: np.ndarray  # (8, f, f) float32 in {0, 1}
    scalars: np.ndarray  # (7,) [dx, dy, d, re_prev, ri_prev, dmin_prev, a_prev / 5]


@dataclass
class PrevInfo:
    """Feedback from the previous step fed back into the observation vector."""

    re: np.ndarray
    ri: np.ndarray
    dmin: np.ndarray
    action: np.ndarray

    @classmethod
    def initial(cls, n: int) -> "PrevInfo":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), np.full(n, int(Action.STAY)))


def heuristic_field_maps(field: np.ndarray) -> np.ndarray:
    """Whole-world heuristic maps ``(4, m, m)`` for one distance field.

    ``out[a, r, c]`` is 1 iff cell (r, c) is reachable and the neighbour in
    direction ``a`` is reachable with strictly smaller distance.
    """
    m = field.shape[0]
    pad = np.full((m + 2, m + 2), -1, dtype=np.int64)
    pad[1:-1, 1:-1] = field
    out = np.zeros((4, m, m), dtype=np.uint8)
    shifts = ((0, 1), (2, 1), (1, 0), (1, 2))  # neighbour slice origin for U, D, L, R
    for a, (r0, c0) in enumerate(shifts):
        nb = pad[r0:r0 + m, c0:c0 + m]
        out[a] = (field >= 0) & (nb >= 0) & (nb < field)
    return out


def heuristic_maps(field: np.ndarray, center, fov: int) -> np.ndarray:
    """The four heuristic maps cropped to an ``fov``-wide window around ``center``."""
    full = heuristic_field_maps(field)
    r = fov // 2
    padded = np.pad(full, ((0, 0), (r, r), (r, r)))
    i, j = int(center[0]), int(center[1])
    return padded[:, i:i + fov, j:j + fov].astype(np.float32)


class ObservationBuilder:
    """Builds observations for every agent of one episode.

    Heuristic maps depend only on the static map and each agent's goal, so
    they are computed once per episode and cropped at each step.
    """

    def __init__(self, state: WorldState, fov: int = 3, project_goals: bool = False):
        if fov < 3 or fov % 2 == 0:
            raise ValueError(f"fov must be odd and >= 3, got {fov}")
        self.fov = fov
        self.project_goals = project_goals
        self.grid = state.grid
        self.goals = state.goals.copy()
        r = self.radius = fov // 2
        m = self.grid.size
        self.obstacles_pad = np.pad(self.grid.obstacles, r, constant_values=True).astype(np.float32)
        heur = np.stack([heuristic_field_maps(state.field(g)) for g in self.goals])
        self.heuristic_pad = np.pad(heur, ((0, 0), (0, 0), (r, r), (r, r))).astype(np.float32)
        self.m = m

    def build(self, positions: np.ndarray, prev: PrevInfo) -> tuple[np.ndarray, np.ndarray]:
        """Observations for all agents: maps ``(n, 8, f, f)`` and scalars ``(n, 7)``."""
        n, f, r, m = len(positions), self.fov, self.radius, self.m
        maps = np.zeros((n, N_CHANNELS, f, f), dtype=np.float32)
        ids = np.zeros((m + 2 * r, m + 2 * r), dtype=np.int64)
        ids[positions[:, 0] + r, positions[:, 1] + r] = np.arange(1, n + 1)
        for i in range(n):
            pr, pc = positions[i]
            maps[i, CH_HEURISTIC] = self.heuristic_pad[i, :, pr:pr + f, pc:pc + f]
            maps[i, CH_OBSTACLE] = self.obstacles_pad[pr:pr + f, pc:pc + f]
            window = ids[pr:pr + f, pc:pc + f]
            maps[i, CH_AGENTS] = (window > 0) & (window != i + 1)
            gr, gc = self.goals[i] - positions[i] + r
            if 0 <= gr < f and 0 <= gc < f:
                maps[i, CH_OWN_GOAL, gr, gc] = 1.0
            for j in window[(window > 0) & (window != i + 1)] - 1:
                gr, gc = self.goals[j] - positions[i] + r
                if self.project_goals:
                    gr, gc = min(max(gr, 0), f - 1), min(max(gc, 0), f - 1)
                if 0 <= gr < f and 0 <= gc < f:
                    maps[i, CH_OTHER_GOALS, gr, gc] = 1.0
        delta = (self.goals - positions).astype(np.float64) / m
        scalars = np.empty((n, N_SCALARS), dtype=np.float32)
        scalars[:, 0] = delta[:, 1]  # x runs along columns
        scalars[:, 1] = delta[:, 0]
        scalars[:, 2] = np.hypot(delta[:, 0], delta[:, 1])
        scalars[:, 3] = prev.re
        scalars[:, 4] = prev.ri
        scalars[:, 5] = prev.dmin
        scalars[:, 6] = np.asarray(prev.action) / N_ACTIONS
        return maps, scalars


def build_observation(
    state: WorldState,
    agent: int,
    fov: int = 3,
    prev: Optional[PrevInfo] = None,
    project_goals: bool = False,
) -> Observation:
    """Observation of a single agent (convenience wrapper over ObservationBuilder)."""
    prev = prev or PrevInfo.initial(state.n_agents)
    maps, scalars = ObservationBuilder(state, fov, project_goals).build(state.positions, prev)
    return Observation(maps[agent], scalars[agent])


def format_observation(obs: Observation) -> str:
    """Text dump of one observation for debugging."""
    names = ["up", "down", "left", "right", "obstacles", "agents", "goal", "other goals"]
    out = []
    for name, ch in zip(names, obs.maps):
        out.append(f"[{name}]")
        out.extend("".join("#" if v else "." for v in row) for row in ch)
    out.append("scalars: " + " ".join(f"{v:.3f}" for v in obs.scalars))
    return "\n".join(out)
