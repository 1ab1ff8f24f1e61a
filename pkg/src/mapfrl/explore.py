"""Episodic novelty buffer and the two-valued intrinsic reward built on it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np


@dataclass
class ExploreConfig:
    capacity: int = 80
    rho: float = 3.0  # insertion threshold
    tau_range: Tuple[float, float] = (1.0, 3.0)  # reward threshold, drawn per episode
    phi: float = 0.2
    beta: float = 1.0
    aggregate: str = "max"  # novelty distance: "max" or "min" over stored cells
    warmup_steps: int = 1_000_000


@dataclass
class EpisodicBuffer:
    """Bounded set of cells visited by one agent during the current episode."""

    tau: float
    capacity: int = 80
    rho: float = 3.0
    phi: float = 0.2
    beta: float = 1.0
    aggregate: str = "max"
    entries: np.ndarray = field(default=None)
    size: int = 0

    def __post_init__(self):
        if self.aggregate not in ("max", "min"):
            raise ValueError(f"aggregate must be 'max' or 'min', got {self.aggregate!r}")
        if self.entries is None:
            self.entries = np.zeros((self.capacity, 2), dtype=np.float64)

    @classmethod
    def for_episode(cls, cfg: ExploreConfig, rng: np.random.Generator) -> "EpisodicBuffer":
        tau = float(rng.uniform(*cfg.tau_range))
        return cls(tau, cfg.capacity, cfg.rho, cfg.phi, cfg.beta, cfg.aggregate)

    def clear(self) -> None:
        self.size = 0

    def distances(self, pos) -> Tuple[float, float]:
        """(max, min) Euclidean distance from ``pos`` to stored cells; (inf, 0) when empty."""
        if self.size == 0:
            return math.inf, 0.0
        d = np.hypot(*(self.entries[: self.size] - np.asarray(pos, dtype=np.float64)).T)
        return float(d.max()), float(d.min())

    def intrinsic_reward(self, pos, on_goal: bool) -> Tuple[float, float, float]:
        """Returns ``(ri, dmax, dmin)``; ``dmax`` is the novelty distance used for insertion."""
        dmax, dmin = self.distances(pos)
        novelty = dmax if self.aggregate == "max" else (dmin if self.size else math.inf)
        if on_goal:
            return 0.0, novelty, dmin
        delta = 1.0 if novelty < self.tau else 0.0
        return self.phi * (self.beta - delta), novelty, dmin

    def maybe_insert(self, pos, dmax: float, rng: np.random.Generator) -> bool:
        """Store ``pos`` if it is at least ``rho`` away; overwrite a random slot when full."""
        if self.size and dmax < self.rho:
            return False
        if self.size < self.capacity:
            self.entries[self.size] = pos
            self.size += 1
        else:
            self.entries[rng.integers(self.capacity)] = pos
        return True
