"""Batched execution of the shared policy over several environments at once."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .env import MapfEnv
from .obs import PrevInfo
from .policy import PolicyNet, act
from .tiebreak import TieBreakConfig, TieBreaker
from .world import next_positions


@dataclass
class StepRecord:
    maps: np.ndarray
    scalars: np.ndarray
    h: np.ndarray
    c: np.ndarray
    messages: np.ndarray
    positions: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    ve: np.ndarray
    vi: np.ndarray
    re: np.ndarray
    ri: np.ndarray
    valid: np.ndarray
    blocking: np.ndarray


class TeamRunner:
    """Keeps LSTM state and last-step messages for a batch of teams of equal size."""

    def __init__(self, net: PolicyNet, tiebreak: Optional[TieBreakConfig] = None, greedy: bool = False):
        self.net = net
        self.tiebreaker = TieBreaker(tiebreak)
        self.greedy = greedy

    def begin(self, envs: Sequence[MapfEnv]) -> None:
        ns = {env.n_agents for env in envs}
        if len(ns) != 1:
            raise ValueError("all environments in a batch need the same team size")
        self.h, self.c, self.msg = self.net.initial_carry(len(envs), ns.pop())

    def _forward(self, envs, idx):
        obs = [envs[e].observe() for e in idx]
        maps = torch.from_numpy(np.stack([o[0] for o in obs]))
        scalars = torch.from_numpy(np.stack([o[1] for o in obs]))
        pos = torch.from_numpy(np.stack([envs[e].state.positions for e in idx]))
        sel = torch.as_tensor(idx)
        with torch.no_grad():
            out = self.net(maps, scalars, self.h[sel], self.c[sel], self.msg[sel], positions=pos)
        return obs, out

    def values(self, envs: Sequence[MapfEnv], idx: Sequence[int]) -> np.ndarray:
        """(len(idx), n) extrinsic and intrinsic values of the current states, without stepping."""
        _, out = self._forward(envs, list(idx))
        return np.stack([out.ve.numpy(), out.vi.numpy()], axis=-1)

    def step(
        self,
        envs: Sequence[MapfEnv],
        rngs: Sequence[np.random.Generator],
        idx: Sequence[int],
        intrinsic_active: bool = True,
        forced: Optional[Dict[int, np.ndarray]] = None,
    ) -> List[StepRecord]:
        """Advance the environments listed in ``idx`` by one step.

        ``forced`` maps an environment index to a joint action that replaces
        the policy's choice (expert demonstrations).
        """
        idx = list(idx)
        forced = forced or {}
        obs, out = self._forward(envs, idx)
        logits = out.logits.numpy().astype(np.float64)
        logp_all = logits - logits.max(-1, keepdims=True)
        logp_all -= np.log(np.exp(logp_all).sum(-1, keepdims=True))
        ve, vi = out.ve.numpy(), out.vi.numpy()
        sel = torch.as_tensor(idx)
        records = []
        for k, e in enumerate(idx):
            env, rng = envs[e], rngs[e]
            st = env.state
            valid = env.valid_actions()
            blocking = env.blocking.copy()
            halted = None
            if e in forced:
                actions = np.asarray(forced[e], dtype=np.int64)
            else:
                proposals, _ = act(logits[k], None, rng, greedy=self.greedy)
                value_fn = self._value_fn(env, out, k, self.msg[e])
                res = self.tiebreaker.resolve(
                    st.grid, st.positions, st.goals, proposals, logits[k], rng,
                    value_fn=value_fn, values_now=ve[k] + vi[k],
                )
                actions, halted = res.actions, res.halted
            rec = StepRecord(
                maps=obs[k][0], scalars=obs[k][1],
                h=self.h[e].numpy().copy(), c=self.c[e].numpy().copy(), messages=self.msg[e].numpy().copy(),
                positions=st.positions.copy(), actions=actions,
                logp=logp_all[k, np.arange(len(actions)), actions],
                ve=ve[k], vi=vi[k], re=None, ri=None, valid=valid, blocking=blocking,
            )
            result = env.step(actions, rng, intrinsic_active=intrinsic_active, halted=halted)
            rec.re, rec.ri = result.re, result.ri
            records.append(rec)
        self.h[sel], self.c[sel], self.msg[sel] = out.h, out.c, out.message
        return records

    def _value_fn(self, env: MapfEnv, out, k: int, messages: torch.Tensor):
        """Team values after hypothetical joint actions, reusing last-step messages."""

        def value_fn(hypo: np.ndarray) -> np.ndarray:
            st = env.state
            g = len(hypo)
            positions = np.stack([next_positions(st.grid, st.positions, a) for a in hypo])
            obs = [
                env.observe(positions[j], PrevInfo(env.prev.re, env.prev.ri, env.prev.dmin, hypo[j]))
                for j in range(g)
            ]
            maps = torch.from_numpy(np.stack([o[0] for o in obs]))
            scalars = torch.from_numpy(np.stack([o[1] for o in obs]))
            rep = lambda t: t[k].unsqueeze(0).expand(g, *t.shape[1:])  # noqa: E731
            with torch.no_grad():
                hyp = self.net(
                    maps, scalars, rep(out.h), rep(out.c),
                    messages.unsqueeze(0).expand(g, *messages.shape),
                    positions=torch.from_numpy(positions),
                )
            return (hyp.ve + hyp.vi).numpy()

        return value_fn
