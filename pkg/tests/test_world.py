import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mapfrl.world import (
    Action,
    Event,
    Grid,
    REWARD_BLOCKING,
    REWARD_COLLISION,
    REWARD_MOVE,
    WorldError,
    WorldState,
    bfs_distance,
    compute_blocking,
    format_map,
    format_scenario,
    generate_map,
    joint_step,
    parse_map,
    parse_scenario,
    path_length,
    render,
    sample_agents,
    settle_moves,
)

from oracles import bfs_grid, brute_force_moves

U, D, L, R, S = (int(a) for a in Action)


def empty(m):
    return Grid(np.zeros((m, m), dtype=bool))


def state(m, positions, goals=None, obstacles=()):
    obs = np.zeros((m, m), dtype=bool)
    for r, c in obstacles:
        obs[r, c] = True
    positions = np.array(positions)
    goals = np.array(goals) if goals is not None else positions[::-1].copy()
    return WorldState(Grid(obs), positions, goals)


def random_instance(rng, m_max=5, n_max=3):
    m = int(rng.integers(3, m_max + 1))
    grid = generate_map(m, float(rng.uniform(0, 0.4)), rng)
    n = int(rng.integers(1, min(n_max, len(grid.free_cells())) + 1))
    starts, goals = sample_agents(grid, n, rng)
    return grid, starts, goals


# -- movement semantics -----------------------------------------------------

def test_single_move_and_reward():
    s = state(3, [(1, 1)], [(0, 0)])
    new, out = joint_step(s, [U])
    assert new.positions.tolist() == [[0, 1]]
    assert out.rewards[0] == REWARD_MOVE
    assert out.events[0] == (Event.MOVED,)


def test_boundary_is_obstacle_collision():
    s = state(3, [(0, 0)], [(2, 2)])
    new, out = joint_step(s, [U])
    assert new.positions.tolist() == [[0, 0]]
    assert out.rewards[0] == REWARD_COLLISION
    assert new.collision_counts.tolist() == [1]


def test_stay_rewards():
    s = state(3, [(0, 0), (1, 1)], [(0, 0), (2, 2)])
    _, out = joint_step(s, [S, S])
    assert out.rewards.tolist() == [0.0, -0.3]


def test_vertex_conflict_both_stay():
    s = state(3, [(0, 0), (0, 2)], [(2, 2), (2, 0)])
    new, out = joint_step(s, [R, L])
    assert new.positions.tolist() == [[0, 0], [0, 2]]
    assert [e[0] for e in out.events] == [Event.AGENT_COLLISION] * 2
    assert out.rewards.tolist() == [REWARD_COLLISION] * 2


def test_swap_conflict_both_stay():
    s = state(3, [(0, 0), (0, 1)], [(2, 2), (2, 0)])
    new, out = joint_step(s, [R, L])
    assert new.positions.tolist() == [[0, 0], [0, 1]]


def test_following_chain_is_legal():
    s = state(4, [(0, 0), (0, 1), (0, 2)], [(3, 3), (3, 2), (3, 1)])
    new, _ = joint_step(s, [R, R, R])
    assert new.positions.tolist() == [[0, 1], [0, 2], [0, 3]]


def test_rotation_cycle_is_legal():
    # 2x2 block rotating clockwise
    s = state(3, [(0, 0), (0, 1), (1, 1), (1, 0)], [(2, 2), (2, 1), (2, 0), (1, 2)])
    new, out = joint_step(s, [R, D, L, U])
    assert new.positions.tolist() == [[0, 1], [1, 1], [1, 0], [0, 0]]
    assert all(e == (Event.MOVED,) for e in out.events)


def test_blocked_chain_collapses():
    # head of the chain runs into a wall, so everybody behind it stays
    s = state(3, [(0, 0), (0, 1), (0, 2)], [(2, 2), (2, 1), (2, 0)])
    new, out = joint_step(s, [R, R, R])
    assert new.positions.tolist() == [[0, 0], [0, 1], [0, 2]]
    assert out.events[2] == (Event.OBSTACLE_COLLISION,)
    assert out.events[0] == out.events[1] == (Event.AGENT_COLLISION,)


def test_swap_symmetry():
    res = settle_moves(np.array([[0, 0], [0, 1]]), np.array([[0, 1], [0, 0]]), np.array([True, True]))
    pairs = {tuple(sorted(p)) for p in res.conflicts}
    assert pairs == {(0, 1)}


def test_joint_step_rejects_bad_actions():
    s = state(3, [(0, 0)], [(1, 1)])
    with pytest.raises(WorldError):
        joint_step(s, [7])
    with pytest.raises(WorldError):
        joint_step(s, [0, 0])


def test_conflict_oracle_exhaustive_small():
    rng = np.random.default_rng(7)
    for _ in range(40):
        grid, starts, goals = random_instance(rng)
        s = WorldState(grid, starts, goals)
        for joint in itertools.product(range(5), repeat=len(starts)):
            new, out = joint_step(s, joint, blocking_penalty=False)
            expected = brute_force_moves(grid.obstacles, starts, joint)
            assert np.array_equal(out.moved, expected), (starts.tolist(), joint)
            assert len({tuple(p) for p in new.positions}) == len(starts)


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_positions_stay_distinct_and_free(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(3, 9))
    grid = generate_map(m, float(rng.uniform(0, 0.4)), rng)
    n = int(rng.integers(1, min(8, len(grid.free_cells())) + 1))
    starts, goals = sample_agents(grid, n, rng)
    s = WorldState(grid, starts, goals)
    for _ in range(10):
        s, out = joint_step(s, rng.integers(0, 5, size=n), blocking_penalty=False)
        assert len({tuple(p) for p in s.positions}) == n
        assert all(grid.is_free(*p) for p in s.positions)
        # each agent moves at most one cell
        assert set(np.abs(s.positions - starts).sum(1).tolist()) <= {0, 1}
        starts = s.positions.copy()


# -- BFS, blocking ------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_bfs_matches_reference(seed):
    rng = np.random.default_rng(seed)
    grid = generate_map(int(rng.integers(3, 12)), 0.3, rng)
    cell = tuple(grid.free_cells()[0])
    assert np.array_equal(bfs_distance(grid, cell), bfs_grid(grid.obstacles, cell))


def test_path_length_with_blocked_cell():
    g = empty(3)
    assert path_length(g, (0, 0), (0, 2)) == 2
    assert path_length(g, (0, 0), (0, 2), blocked=(0, 1)) == 4


def corridor_state():
    # 1-wide corridor: agent 1 at the mouth blocks agent 0's only route
    obs = np.ones((15, 15), dtype=bool)
    obs[0, :] = False
    return WorldState(Grid(obs), np.array([[0, 0], [0, 5]]), np.array([[0, 14], [0, 6]]))


def test_blocking_unreachable_goal():
    s = corridor_state()
    assert compute_blocking(s, 1)
    assert not compute_blocking(s, 0)


def test_blocking_small_detour_is_fine():
    s = state(10, [(5, 0), (5, 5)], [(5, 9), (0, 0)])
    assert not compute_blocking(s, 1)


def test_blocking_pruning_agrees_with_full_bfs():
    rng = np.random.default_rng(3)
    for _ in range(30):
        grid = generate_map(12, 0.35, rng)
        starts, goals = sample_agents(grid, 6, rng)
        s = WorldState(grid, starts, goals)
        for i in range(6):
            p = tuple(starts[i])
            expect = False
            for j in range(6):
                if j == i or s.on_goal[j]:
                    continue
                base = path_length(grid, tuple(starts[j]), tuple(goals[j]))
                after = path_length(grid, tuple(starts[j]), tuple(goals[j]), blocked=p)
                if base >= 0 and (after < 0 or after - base > 10):
                    expect = True
            assert compute_blocking(s, i) == expect


def test_blocking_penalty_added():
    s = corridor_state()
    _, out = joint_step(s, [S, S])
    assert out.blocking.tolist() == [False, True]
    assert out.rewards[1] == -0.3 + REWARD_BLOCKING
    assert Event.BLOCKING in out.events[1]


# -- generation -------------------------------------------------------------------

def test_generate_map_pinned():
    g = generate_map(25, 0.33, np.random.default_rng(1234))
    assert int(g.obstacles.sum()) == 217


def test_sample_agents_pinned():
    g = generate_map(25, 0.33, np.random.default_rng(1234))
    starts, goals = sample_agents(g, 8, np.random.default_rng(1234))
    assert starts.tolist()[:3] == [[24, 11], [24, 17], [9, 24]]
    assert goals.tolist()[:3] == [[24, 6], [24, 17], [5, 3]]


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 12))
def test_sampled_agents_valid(seed, n):
    rng = np.random.default_rng(seed)
    grid = generate_map(8, 0.3, rng)
    if len(grid.free_cells()) < n:
        with pytest.raises(WorldError):
            sample_agents(grid, n, rng)
        return
    starts, goals = sample_agents(grid, n, rng)
    WorldState(grid, starts, goals).validate()


def test_generate_map_rejects_bad_args():
    rng = np.random.default_rng(0)
    with pytest.raises(WorldError):
        generate_map(2, 0.1, rng)
    with pytest.raises(WorldError):
        generate_map(5, 1.0, rng)
    with pytest.raises(WorldError):
        generate_map(5, 0.5, rng, min_component=26)


def test_empty_density_gives_empty_map():
    assert not generate_map(10, 0.0, np.random.default_rng(0)).obstacles.any()


# -- files and rendering --------------------------------------------------------------

def test_map_and_scenario_round_trip():
    rng = np.random.default_rng(5)
    g = generate_map(7, 0.3, rng)
    assert np.array_equal(parse_map(format_map(g)).obstacles, g.obstacles)
    starts, goals = sample_agents(g, 3, rng)
    s2, g2 = parse_scenario(format_scenario(starts, goals))
    assert np.array_equal(s2, starts) and np.array_equal(g2, goals)


def test_parse_map_errors():
    with pytest.raises(WorldError):
        parse_map("3\n...\n..\n...")
    with pytest.raises(WorldError):
        parse_map("2\n.x\n..")
    with pytest.raises(WorldError):
        parse_map("abc")


def test_scenario_count_mismatch():
    with pytest.raises(WorldError):
        parse_scenario("2\n0 0 1 1\n")


def test_render():
    s = state(3, [(0, 0)], [(2, 2)], obstacles=[(1, 1)])
    assert render(s) == "A..\n.@.\n..a"
