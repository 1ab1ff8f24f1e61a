"""Multi-agent path finding simulator with a communicating PPO policy."""

from .env import EnvConfig, MapfEnv
from .policy import NetConfig, PolicyNet
from .tiebreak import TieBreakConfig, TieBreaker
from .world import Action, Grid, WorldState, joint_step

__all__ = [
    "Action", "EnvConfig", "Grid", "MapfEnv", "NetConfig", "PolicyNet",
    "TieBreakConfig", "TieBreaker", "WorldState", "joint_step",
]
__version__ = "0.1.0"
