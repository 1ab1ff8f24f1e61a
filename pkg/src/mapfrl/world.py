"""Gridworld MAPF environment: maps, scenarios, joint stepping and rewards."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

Coord = Tuple[int, int]  # (row, col)

EPISODE_LIMIT = 256
BLOCKING_EXTENSION = 10

REWARD_MOVE = -0.3
REWARD_STAY_ON_GOAL = 0.0
REWARD_STAY_OFF_GOAL = -0.3
REWARD_COLLISION = -2.0
REWARD_BLOCKING = -1.0


class Action(enum.IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    STAY = 4


N_ACTIONS = len(Action)
# row/col offsets indexed by Action
MOVES = np.array([[-1, 0], [1, 0], [0, -1], [0, 1], [0, 0]], dtype=np.int64)
ACTION_CHARS = "UDLRS"
OPPOSITE = np.array([Action.DOWN, Action.UP, Action.RIGHT, Action.LEFT, Action.STAY])


class Event(enum.Enum):
    MOVED = "moved"
    STAYED_ON_GOAL = "stayed_on_goal"
    STAYED_OFF_GOAL = "stayed_off_goal"
    OBSTACLE_COLLISION = "obstacle_collision"
    AGENT_COLLISION = "agent_collision"
    BLOCKING = "blocking"
    # move withdrawn by the conflict-resolution layer before execution
    CONFLICT_STOP = "conflict_stop"


class WorldError(ValueError):
    pass


@dataclass(eq=False)
class Grid:
    """Square static map. ``obstacles[r, c]`` is True for blocked cells."""

    obstacles: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.obstacles, dtype=bool)
        if obs.ndim != 2 or obs.shape[0] != obs.shape[1]:
            raise WorldError(f"grid must be square, got shape {obs.shape}")
        self.obstacles = obs
        labels, count = ndimage.label(~obs)  # default structure is 4-connectivity
        self.component_id = labels - 1  # -1 on obstacles
        self.n_components = int(count)

    @property
    def size(self) -> int:
        return self.obstacles.shape[0]

    def in_bounds(self, r: int, c: int) -> bool:
        return 0 <= r < self.size and 0 <= c < self.size

    def is_free(self, r: int, c: int) -> bool:
        return self.in_bounds(r, c) and not self.obstacles[r, c]

    def free_cells(self) -> np.ndarray:
        return np.argwhere(~self.obstacles)

    def component_sizes(self) -> np.ndarray:
        return np.bincount(self.component_id[~self.obstacles], minlength=self.n_components)

    @cached_property
    def neighbors(self) -> List[List[int]]:
        """Free 4-neighbours of every cell, as flat indices."""
        m = self.size
        table: List[List[int]] = [[] for _ in range(m * m)]
        for r in range(m):
            for c in range(m):
                if self.obstacles[r, c]:
                    continue
                for dr, dc in MOVES[:4]:
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < m and 0 <= cc < m and not self.obstacles[rr, cc]:
                        table[r * m + c].append(rr * m + cc)
        return table


def bfs_distance(grid: Grid, goal: Coord, blocked: Optional[Coord] = None) -> np.ndarray:
    """Shortest 4-connected path length from every cell to ``goal``; -1 if unreachable."""
    m = grid.size
    dist = np.full(m * m, -1, dtype=np.int64)
    g = goal[0] * m + goal[1]
    b = -1 if blocked is None else blocked[0] * m + blocked[1]
    if grid.obstacles[goal] or g == b:
        return dist.reshape(m, m)
    nbrs = grid.neighbors
    dist[g] = 0
    queue = deque([g])
    while queue:
        u = queue.popleft()
        du = dist[u] + 1
        for v in nbrs[u]:
            if dist[v] < 0 and v != b:
                dist[v] = du
                queue.append(v)
    return dist.reshape(m, m)


def path_length(grid: Grid, src: Coord, dst: Coord, blocked: Optional[Coord] = None) -> int:
    """BFS path length from src to dst with early exit; -1 if unreachable."""
    m = grid.size
    s, t = src[0] * m + src[1], dst[0] * m + dst[1]
    b = -1 if blocked is None else blocked[0] * m + blocked[1]
    if s == b or t == b:
        return -1
    if s == t:
        return 0
    nbrs = grid.neighbors
    seen = {s: 0}
    queue = deque([s])
    while queue:
        u = queue.popleft()
        du = seen[u] + 1
        for v in nbrs[u]:
            if v not in seen and v != b:
                if v == t:
                    return du
                seen[v] = du
                queue.append(v)
    return -1


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def generate_map(
    size: int,
    density: float,
    rng: np.random.Generator,
    min_component: int = 1,
    max_retries: int = 100,
) -> Grid:
    """Random map where each cell is an obstacle with probability ``density``.

    Redraws until some free component holds at least ``min_component`` cells.
    """
    if size < 3:
        raise WorldError(f"size must be >= 3, got {size}")
    if not 0.0 <= density < 1.0:
        raise WorldError(f"density must lie in [0, 1), got {density}")
    for _ in range(max_retries):
        grid = Grid(rng.random((size, size)) < density)
        if grid.n_components and grid.component_sizes().max() >= min_component:
            return grid
    raise WorldError(
        f"no free component with {min_component} cells after {max_retries} draws "
        f"(size={size}, density={density})"
    )


def sample_agents(grid: Grid, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Distinct starts and distinct goals, each pair inside one free component.

    Starts are uniform over unused free cells; each goal is then uniform over
    the unused goal cells of its start's component.  Because a component with
    k assigned agents has k used starts and k used goals, a free start cell
    always has a free goal cell alongside it.
    """
    free = grid.free_cells()
    if n < 1:
        raise WorldError("need at least one agent")
    if len(free) < n:
        raise WorldError(f"world has {len(free)} free cells, cannot host {n} agents")
    comp = grid.component_id[free[:, 0], free[:, 1]]
    start_used = np.zeros(len(free), dtype=bool)
    goal_used = np.zeros(len(free), dtype=bool)
    starts = np.empty((n, 2), dtype=np.int64)
    goals = np.empty((n, 2), dtype=np.int64)
    for i in range(n):
        s = rng.choice(np.flatnonzero(~start_used))
        start_used[s] = True
        g = rng.choice(np.flatnonzero(~goal_used & (comp == comp[s])))
        goal_used[g] = True
        starts[i], goals[i] = free[s], free[g]
    return starts, goals


# ---------------------------------------------------------------------------
# state and stepping
# ---------------------------------------------------------------------------

@dataclass
class WorldState:
    grid: Grid
    positions: np.ndarray  # (n, 2) int
    goals: np.ndarray  # (n, 2) int
    step: int = 0
    collision_counts: np.ndarray = None  # obstacle/boundary collisions per agent
    # BFS fields keyed by goal; shared by every state of an episode
    fields: Dict[Coord, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1, 2)
        self.goals = np.asarray(self.goals, dtype=np.int64).reshape(-1, 2)
        if self.collision_counts is None:
            self.collision_counts = np.zeros(len(self.positions), dtype=np.int64)

    @property
    def n_agents(self) -> int:
        return len(self.positions)

    @property
    def on_goal(self) -> np.ndarray:
        return np.all(self.positions == self.goals, axis=1)

    def field(self, goal: Sequence[int]) -> np.ndarray:
        key = (int(goal[0]), int(goal[1]))
        f = self.fields.get(key)
        if f is None:
            f = self.fields[key] = bfs_distance(self.grid, key)
        return f

    def validate(self) -> None:
        g = self.grid
        for name, pts in (("positions", self.positions), ("goals", self.goals)):
            if len({tuple(p) for p in pts}) != len(pts):
                raise WorldError(f"{name} are not pairwise distinct")
            for p in pts:
                if not g.is_free(*p):
                    raise WorldError(f"{name} entry {tuple(p)} is not a free cell")
        for p, q in zip(self.positions, self.goals):
            if g.component_id[tuple(p)] != g.component_id[tuple(q)]:
                raise WorldError(f"start {tuple(p)} and goal {tuple(q)} are disconnected")

    def copy(self) -> "WorldState":
        return WorldState(
            self.grid, self.positions.copy(), self.goals.copy(), self.step,
            self.collision_counts.copy(), self.fields,
        )


@dataclass
class StepOutcome:
    rewards: np.ndarray
    events: List[Tuple[Event, ...]]
    all_on_goal: bool
    blocking: np.ndarray
    moved: np.ndarray


@dataclass
class MoveResolution:
    """Result of settling simultaneous moves.

    ``executed`` marks attempted moves that survive; ``conflicts`` lists agent
    pairs involved in vertex, swap or occupied-target conflicts.
    """

    executed: np.ndarray
    conflicts: List[Tuple[int, int]]
    iterations: int


def settle_moves(positions: np.ndarray, targets: np.ndarray, attempting: np.ndarray) -> MoveResolution:
    """Decide which attempted moves execute under simultaneous-move semantics.

    Agents targeting a common cell all stay, as do both agents of a swap.  A
    move into a cell whose occupant does not leave is then invalidated, and
    this is repeated until nothing changes (following chains and rotation
    cycles survive).
    """
    n = len(positions)
    pos = [tuple(p) for p in positions]
    tgt = [tuple(t) for t in targets]
    ok = np.asarray(attempting, dtype=bool).copy()
    conflicts: List[Tuple[int, int]] = []

    by_target: Dict[Coord, List[int]] = {}
    for i in range(n):
        if attempting[i]:
            by_target.setdefault(tgt[i], []).append(i)
    for members in by_target.values():
        if len(members) > 1:
            for a in range(len(members)):
                ok[members[a]] = False
                for b in range(a + 1, len(members)):
                    conflicts.append((members[a], members[b]))

    occupant = {p: i for i, p in enumerate(pos)}
    for i in range(n):
        if not attempting[i]:
            continue
        j = occupant.get(tgt[i])
        if j is not None and j > i and attempting[j] and tgt[j] == pos[i]:
            ok[i] = ok[j] = False
            conflicts.append((i, j))

    iterations = 0
    changed = True
    while changed:
        changed = False
        iterations += 1
        for i in range(n):
            if not ok[i]:
                continue
            j = occupant.get(tgt[i])
            if j is not None and not ok[j]:
                ok[i] = False
                changed = True
                conflicts.append((min(i, j), max(i, j)))
    return MoveResolution(ok, conflicts, iterations)


def proposed_targets(grid: Grid, positions: np.ndarray, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Targets of each action and a mask of moves hitting obstacles or the boundary."""
    actions = np.asarray(actions, dtype=np.int64)
    targets = positions + MOVES[actions]
    m = grid.size
    inside = np.all((targets >= 0) & (targets < m), axis=1)
    blocked = ~inside
    idx = np.flatnonzero(inside)
    blocked[idx] = grid.obstacles[targets[idx, 0], targets[idx, 1]]
    return targets, blocked


def next_positions(grid: Grid, positions: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Positions after a joint action, without rewards or bookkeeping."""
    targets, blocked = proposed_targets(grid, positions, actions)
    attempting = (np.asarray(actions) != Action.STAY) & ~blocked
    res = settle_moves(positions, targets, attempting)
    return np.where(res.executed[:, None], targets, positions)


def compute_blocking(state: WorldState, agent: int, extension: int = BLOCKING_EXTENSION) -> bool:
    """True if ``agent`` lengthens some off-goal agent's shortest path by more than ``extension``.

    Only ``agent``'s own cell is treated as blocked; other agents are free space.
    """
    p = (int(state.positions[agent, 0]), int(state.positions[agent, 1]))
    on_goal = state.on_goal
    for j in range(state.n_agents):
        if j == agent or on_goal[j]:
            continue
        goal = (int(state.goals[j, 0]), int(state.goals[j, 1]))
        pj = (int(state.positions[j, 0]), int(state.positions[j, 1]))
        dist = state.field(goal)
        base = dist[pj]
        if base < 0 or dist[p] < 0:
            continue
        # p cannot lie on any shortest path, so removing it changes nothing
        if dist[p] + abs(p[0] - pj[0]) + abs(p[1] - pj[1]) > base:
            continue
        length = path_length(state.grid, pj, goal, blocked=p)
        if length < 0 or length - base > extension:
            return True
    return False


def blocking_mask(state: WorldState, extension: int = BLOCKING_EXTENSION) -> np.ndarray:
    return np.array([compute_blocking(state, i, extension) for i in range(state.n_agents)], dtype=bool)


def joint_step(
    state: WorldState,
    joint: Sequence[int],
    blocking_penalty: bool = True,
) -> Tuple[WorldState, StepOutcome]:
    """Execute one simultaneous step and score it."""
    joint = np.asarray(joint, dtype=np.int64)
    n = state.n_agents
    if joint.shape != (n,):
        raise WorldError(f"joint action has length {joint.size}, expected {n}")
    if np.any((joint < 0) | (joint >= N_ACTIONS)):
        raise WorldError(f"invalid action in {joint.tolist()}")

    targets, hit_obstacle = proposed_targets(state.grid, state.positions, joint)
    stay = joint == Action.STAY
    hit_obstacle &= ~stay
    attempting = ~stay & ~hit_obstacle
    res = settle_moves(state.positions, targets, attempting)

    new = state.copy()
    new.positions = np.where(res.executed[:, None], targets, state.positions)
    new.step = state.step + 1
    new.collision_counts = state.collision_counts + hit_obstacle

    on_goal = new.on_goal
    rewards = np.empty(n)
    events: List[Tuple[Event, ...]] = []
    for i in range(n):
        if hit_obstacle[i]:
            ev, r = Event.OBSTACLE_COLLISION, REWARD_COLLISION
        elif attempting[i] and not res.executed[i]:
            ev, r = Event.AGENT_COLLISION, REWARD_COLLISION
        elif res.executed[i]:
            ev, r = Event.MOVED, REWARD_MOVE
        elif on_goal[i]:
            ev, r = Event.STAYED_ON_GOAL, REWARD_STAY_ON_GOAL
        else:
            ev, r = Event.STAYED_OFF_GOAL, REWARD_STAY_OFF_GOAL
        rewards[i] = r
        events.append((ev,))

    blocking = blocking_mask(new) if blocking_penalty else np.zeros(n, dtype=bool)
    for i in np.flatnonzero(blocking):
        rewards[i] += REWARD_BLOCKING
        events[i] = events[i] + (Event.BLOCKING,)
    outcome = StepOutcome(rewards, events, bool(on_goal.all()), blocking, res.executed)
    return new, outcome


def episode_done(state: WorldState, limit: int = EPISODE_LIMIT) -> bool:
    return bool(state.on_goal.all()) or state.step >= limit


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def format_map(grid: Grid) -> str:
    rows = ["".join("@" if x else "." for x in row) for row in grid.obstacles]
    return f"{grid.size}\n" + "\n".join(rows) + "\n"


def parse_map(text: str) -> Grid:
    lines = [ln.strip() for ln in text.strip().splitlines()]
    try:
        m = int(lines[0])
    except (IndexError, ValueError) as exc:
        raise WorldError("map file must start with its size") from exc
    rows = lines[1:1 + m]
    if len(rows) != m or any(len(r) != m for r in rows):
        raise WorldError(f"map body must be {m} lines of {m} characters")
    bad = set("".join(rows)) - set(".@")
    if bad:
        raise WorldError(f"unexpected map characters {sorted(bad)}")
    return Grid(np.array([[ch == "@" for ch in r] for r in rows], dtype=bool))


def write_map(path, grid: Grid) -> None:
    Path(path).write_text(format_map(grid))


def read_map(path) -> Grid:
    return parse_map(Path(path).read_text())


def format_scenario(starts: np.ndarray, goals: np.ndarray) -> str:
    lines = [str(len(starts))]
    for s, g in zip(starts, goals):
        lines.append(f"{s[0]} {s[1]} {g[0]} {g[1]}")
    return "\n".join(lines) + "\n"


def parse_scenario(text: str) -> Tuple[np.ndarray, np.ndarray]:
    lines = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
    n = int(lines[0][0])
    if len(lines) - 1 != n:
        raise WorldError(f"scenario declares {n} agents but lists {len(lines) - 1}")
    rows = np.array([[int(v) for v in ln] for ln in lines[1:]], dtype=np.int64).reshape(n, 4)
    return rows[:, :2].copy(), rows[:, 2:].copy()


def write_scenario(path, starts, goals) -> None:
    Path(path).write_text(format_scenario(starts, goals))


def read_scenario(path) -> Tuple[np.ndarray, np.ndarray]:
    return parse_scenario(Path(path).read_text())


def render(state: WorldState) -> str:
    """ASCII frame: '@' obstacle, 'A'.. agents, 'a'.. their goals ('#'/'*' past 26)."""
    letters = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    canvas = [["@" if x else "." for x in row] for row in state.grid.obstacles]
    for i, g in enumerate(state.goals):
        canvas[g[0]][g[1]] = letters[i].lower() if i < len(letters) else "*"
    for i, p in enumerate(state.positions):
        canvas[p[0]][p[1]] = letters[i] if i < len(letters) else "#"
    return "\n".join("".join(r) for r in canvas)
