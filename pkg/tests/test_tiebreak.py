import math

import numpy as np
import pytest

from mapfrl.tiebreak import (
    TieBreakConfig,
    TieBreaker,
    anticipate,
    priority_probs,
    team_value_diff,
)
from mapfrl.world import Action, Event, Grid, WorldState, generate_map, joint_step, sample_agents

U, D, L, R, S = (int(a) for a in Action)
EMPTY5 = Grid(np.zeros((5, 5), dtype=bool))


def vertex_conflict():
    # agents 0 and 1 both head for (2, 2); their goals are equally far away
    positions = np.array([[2, 1], [2, 3]])
    goals = np.array([[2, 4], [2, 0]])
    return positions, goals, np.array([R, L])


def fixed_value_fn(gap):
    """Hypothesis 0 (agent 0 keeps its move) is worth ``gap`` more to the team."""
    def fn(hypo):
        out = np.zeros((len(hypo), 2))
        out[1, :] = gap / 2  # values_now - values_hypo becomes smaller for hypothesis 1
        return out
    return fn


def winner_frequency(gap, trials=10_000, mode="value"):
    positions, goals, proposals = vertex_conflict()
    tb = TieBreaker(TieBreakConfig(mode=mode))
    logits = np.zeros((2, 5))
    wins = 0
    for seed in range(trials):
        res = tb.resolve(EMPTY5, positions, goals, proposals, logits, np.random.default_rng(seed),
                         value_fn=fixed_value_fn(gap), values_now=np.zeros(2))
        wins += res.winners[0] == 0
    return wins / trials


def test_priority_softmax_values():
    p = priority_probs([1.0, 0.0], [0.0, 0.0])
    assert p == pytest.approx([0.7311, 0.2689], abs=1e-4)


def test_priority_distance_term():
    p = priority_probs([0.0, 0.0], [3.0, 1.0], mu=0.1)
    expect = np.exp([0.075, 0.025]) / np.exp([0.075, 0.025]).sum()
    assert p == pytest.approx(expect, abs=1e-12)


def test_team_value_diff_sign():
    assert team_value_diff([1.0, 2.0], [0.5, 0.5]) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        team_value_diff([1.0], [1.0, 2.0])


def test_fixed_priorities_frequency():
    # diff_0 - diff_1 = ln 9, so the priorities are (0.9, 0.1)
    assert abs(winner_frequency(math.log(9.0)) - 0.9) <= 0.02


def test_symmetric_priorities_frequency():
    assert abs(winner_frequency(0.0) - 0.5) <= 0.02


def test_random_mode_is_uniform():
    assert abs(winner_frequency(math.log(9.0), trials=4000, mode="random") - 0.5) <= 0.03


def test_greedy_mode_takes_best():
    assert winner_frequency(math.log(9.0), trials=50, mode="greedy") == 1.0


def test_loser_resamples_without_conflicting_action():
    positions, goals, proposals = vertex_conflict()
    tb = TieBreaker(TieBreakConfig(mode="random"))
    for seed in range(200):
        res = tb.resolve(EMPTY5, positions, goals, proposals, np.zeros((2, 5)), np.random.default_rng(seed))
        loser = 1 - res.winners[0]
        assert res.actions[res.winners[0]] == proposals[res.winners[0]]
        assert res.actions[loser] != proposals[loser]


def test_value_mode_needs_value_fn():
    positions, goals, proposals = vertex_conflict()
    with pytest.raises(ValueError):
        TieBreaker().resolve(EMPTY5, positions, goals, proposals, np.zeros((2, 5)), np.random.default_rng(0))


def test_bad_mode():
    with pytest.raises(ValueError):
        TieBreakConfig(mode="coin")


# -- anticipation ----------------------------------------------------------------

def test_anticipate_vertex_and_swap():
    pos = np.array([[0, 0], [0, 2], [3, 0], [3, 1]])
    groups = anticipate(pos, [R, L, R, L], EMPTY5)
    assert [g.members for g in groups] == [(0, 1), (2, 3)]


def test_anticipate_following_and_rotation_are_clear():
    chain = np.array([[0, 0], [0, 1], [0, 2]])
    assert anticipate(chain, [R, R, R], EMPTY5) == []
    square = np.array([[0, 0], [0, 1], [1, 1], [1, 0]])
    assert anticipate(square, [R, D, L, U], EMPTY5) == []


def test_anticipate_includes_stayer():
    pos = np.array([[0, 0], [0, 1]])
    groups = anticipate(pos, [R, S], EMPTY5)
    assert [g.members for g in groups] == [(0, 1)]


def test_anticipate_ignores_obstacle_moves():
    pos = np.array([[0, 0], [0, 1]])
    # agent 1 walks off the map and stays; agent 0 bumps into it
    groups = anticipate(pos, [R, U], EMPTY5)
    assert [g.members for g in groups] == [(0, 1)]
    assert anticipate(np.array([[0, 0]]), [U], EMPTY5) == []


def test_stop_mode_halts_movers():
    positions, goals, proposals = vertex_conflict()
    res = TieBreaker(TieBreakConfig(mode="stop")).resolve(
        EMPTY5, positions, goals, proposals, np.zeros((2, 5)), np.random.default_rng(0))
    assert res.actions.tolist() == [S, S]
    assert res.halted.tolist() == [True, True]


def test_round_cap_falls_back_to_stop():
    positions, goals, proposals = vertex_conflict()
    res = TieBreaker(TieBreakConfig(mode="random", max_rounds=0)).resolve(
        EMPTY5, positions, goals, proposals, np.zeros((2, 5)), np.random.default_rng(0))
    assert res.halted.all()


@pytest.mark.parametrize("mode", ["value", "random", "stop", "greedy"])
def test_no_agent_collisions_after_resolution(mode):
    rng = np.random.default_rng(11)
    tb = TieBreaker(TieBreakConfig(mode=mode))
    collisions = 0
    steps = 500 if mode == "value" else 150
    for _ in range(steps):
        grid = generate_map(int(rng.integers(4, 8)), float(rng.uniform(0, 0.3)), rng)
        n = min(8, len(grid.free_cells()))
        starts, goals = sample_agents(grid, n, rng)
        logits = rng.normal(size=(n, 5)) * 2
        proposals = rng.integers(0, 5, size=n)

        def value_fn(hypo):
            return rng.normal(size=hypo.shape)

        res = tb.resolve(grid, starts, goals, proposals, logits, rng, value_fn=value_fn,
                         values_now=rng.normal(size=n))
        _, out = joint_step(WorldState(grid, starts, goals), res.actions, blocking_penalty=False)
        collisions += sum(Event.AGENT_COLLISION in ev for ev in out.events)
        assert not res.halted[res.actions != S].any()
    assert collisions == 0
