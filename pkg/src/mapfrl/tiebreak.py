"""Pre-execution conflict anticipation and stochastic priority resolution."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .policy import act, action_probs
from .world import MOVES, Action, Grid, N_ACTIONS, proposed_targets, settle_moves

TIEBREAK_MODES = ("value", "random", "stop", "greedy")

# (g, n) hypothetical joint actions -> (g, n) summed value-head outputs
ValueFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class TieBreakConfig:
    mode: str = "value"
    mu: float = 0.1
    max_rounds: Optional[int] = None  # None: one round per agent

    def __post_init__(self):
        if self.mode not in TIEBREAK_MODES:
            raise ValueError(f"tiebreak mode must be one of {TIEBREAK_MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class ConflictGroup:
    members: tuple
    proposals: tuple


@dataclass
class Resolution:
    actions: np.ndarray
    halted: np.ndarray  # movers withdrawn by the stop rule
    rounds: int = 0
    groups: List[ConflictGroup] = field(default_factory=list)
    winners: List[int] = field(default_factory=list)


def anticipate(positions: np.ndarray, proposals: Sequence[int], grid: Optional[Grid] = None) -> List[ConflictGroup]:
    """Maximal groups of agents whose proposals would collide with each other.

    Moves into obstacles or off the map are left to the environment and
    count as staying here.
    """
    positions = np.asarray(positions, dtype=np.int64)
    proposals = np.asarray(proposals, dtype=np.int64)
    n = len(positions)
    if grid is not None:
        targets, blocked = proposed_targets(grid, positions, proposals)
    else:
        targets, blocked = positions + MOVES[proposals], np.zeros(n, dtype=bool)
    attempting = (proposals != Action.STAY) & ~blocked
    res = settle_moves(positions, targets, attempting)
    if not res.conflicts:
        return []
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in res.conflicts:
        parent[find(a)] = find(b)
    involved = sorted({a for pair in res.conflicts for a in pair})
    groups = {}
    for a in involved:
        groups.setdefault(find(a), []).append(a)
    out = [ConflictGroup(tuple(m), tuple(int(proposals[i]) for i in m)) for m in groups.values()]
    return sorted(out, key=lambda g: g.members)


def team_value_diff(values_now: Sequence[float], values_hypo: Sequence[float]) -> float:
    """Current team value minus the team value of a hypothetical next state."""
    values_now, values_hypo = np.asarray(values_now, float), np.asarray(values_hypo, float)
    if values_now.shape != values_hypo.shape:
        raise ValueError("value vectors differ in length")
    return float(np.sum(values_now - values_hypo))


def priority_probs(diff: Sequence[float], dist: Sequence[float], mu: float = 0.1) -> np.ndarray:
    """softmax(diff_i + mu * d_i / sum_k d_k); the distance term vanishes if all d are 0."""
    diff = np.asarray(diff, dtype=np.float64)
    dist = np.asarray(dist, dtype=np.float64)
    total = dist.sum()
    score = diff + mu * dist / total if total > 0 else diff.copy()
    score -= score.max()
    e = np.exp(score)
    return e / e.sum()


class TieBreaker:
    def __init__(self, cfg: Optional[TieBreakConfig] = None):
        self.cfg = cfg or TieBreakConfig()

    def resolve(
        self,
        grid: Grid,
        positions: np.ndarray,
        goals: np.ndarray,
        proposals: np.ndarray,
        logits: np.ndarray,
        rng: np.random.Generator,
        value_fn: Optional[ValueFn] = None,
        values_now: Optional[np.ndarray] = None,
    ) -> Resolution:
        """Rewrite ``proposals`` so that no inter-agent conflict remains.

        Each round, every conflict group samples a winner that keeps its
        proposal; the others re-sample with their conflicting actions masked.
        Groups still in conflict after ``max_rounds`` stop (the stop rule).
        """
        cfg = self.cfg
        n = len(positions)
        actions = np.asarray(proposals, dtype=np.int64).copy()
        halted = np.zeros(n, dtype=bool)
        forbidden = np.zeros((n, N_ACTIONS), dtype=bool)
        result = Resolution(actions, halted)
        if cfg.mode == "stop":
            self._stop(grid, positions, actions, halted, result)
            return result
        if cfg.mode in ("value", "greedy") and (value_fn is None or values_now is None):
            raise ValueError("value-based tie breaking needs value_fn and values_now")

        rounds = cfg.max_rounds if cfg.max_rounds is not None else n
        for _ in range(rounds):
            groups = anticipate(positions, actions, grid)
            if not groups:
                return result
            result.rounds += 1
            result.groups.extend(groups)
            for group in groups:
                members = list(group.members)
                probs = self._priorities(group, positions, goals, actions, forbidden, logits, value_fn, values_now)
                if cfg.mode == "greedy":
                    k = int(np.argmax(probs))
                else:
                    k = int(rng.choice(len(members), p=probs))
                result.winners.append(members[k])
                for j in members[:k] + members[k + 1:]:
                    forbidden[j, actions[j]] = True
                    a, _ = act(logits[j], forbidden[j], rng)
                    actions[j] = int(a)
        self._stop(grid, positions, actions, halted, result)
        return result

    def _priorities(self, group, positions, goals, actions, forbidden, logits, value_fn, values_now):
        members = list(group.members)
        g = len(members)
        if self.cfg.mode == "random":
            return np.full(g, 1.0 / g)
        # hypothetical k: member k keeps its move, the rest take their best
        # remaining action (argmax keeps the evaluation reproducible)
        hypo = np.repeat(actions[None, :], g, axis=0)
        for k, i in enumerate(members):
            for j in members:
                if j == i:
                    continue
                mask = forbidden[j].copy()
                mask[actions[j]] = True
                p = action_probs(logits[j], mask)
                hypo[k, j] = int(np.nanargmax(p)) if np.isfinite(p).all() else int(Action.STAY)
        values_hypo = np.asarray(value_fn(hypo), dtype=np.float64)
        diff = [team_value_diff(values_now, values_hypo[k]) for k in range(g)]
        dist = np.linalg.norm((positions[members] - goals[members]).astype(np.float64), axis=1)
        return priority_probs(diff, dist, self.cfg.mu)

    @staticmethod
    def _stop(grid, positions, actions, halted, result):
        # withdraw conflicting moves until the joint action is conflict-free;
        # halting an agent can expose a new conflict for its followers
        while True:
            groups = anticipate(positions, actions, grid)
            if not groups:
                return
            result.groups.extend(groups)
            for group in groups:
                for i in group.members:
                    if actions[i] != Action.STAY:
                        actions[i] = int(Action.STAY)
                        halted[i] = True
