import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mapfrl.obs import (
    CH_AGENTS,
    CH_OBSTACLE,
    CH_OTHER_GOALS,
    CH_OWN_GOAL,
    N_CHANNELS,
    ObservationBuilder,
    PrevInfo,
    build_observation,
    format_observation,
)
from mapfrl.world import Grid, WorldState, generate_map, sample_agents

from oracles import bfs_grid

STEPS = [(-1, 0), (1, 0), (0, -1), (0, 1)]


def reference_maps(state, agent, fov):
    """Cell-by-cell construction of one agent's eight channels."""
    m = state.grid.size
    r = fov // 2
    obs = state.grid.obstacles
    dist = bfs_grid(obs, state.goals[agent])
    pos = [tuple(p) for p in state.positions]
    out = np.zeros((N_CHANNELS, fov, fov), dtype=np.float32)
    pr, pc = pos[agent]
    for i in range(fov):
        for j in range(fov):
            cell = (pr - r + i, pc - r + j)
            inside = 0 <= cell[0] < m and 0 <= cell[1] < m
            if not inside or obs[cell]:
                out[CH_OBSTACLE, i, j] = 1
            if not inside:
                continue
            for a, (dr, dc) in enumerate(STEPS):
                nb = (cell[0] + dr, cell[1] + dc)
                if dist[cell] >= 0 and 0 <= nb[0] < m and 0 <= nb[1] < m and 0 <= dist[nb] < dist[cell]:
                    out[a, i, j] = 1
            if cell in pos and pos.index(cell) != agent:
                out[CH_AGENTS, i, j] = 1
                other = pos.index(cell)
                gi, gj = state.goals[other][0] - pr + r, state.goals[other][1] - pc + r
                if 0 <= gi < fov and 0 <= gj < fov:
                    out[CH_OTHER_GOALS, gi, gj] = 1
            if tuple(state.goals[agent]) == cell:
                out[CH_OWN_GOAL, i, j] = 1
    return out


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), fov=st.sampled_from([3, 5, 9]))
def test_maps_match_reference(seed, fov):
    rng = np.random.default_rng(seed)
    grid = generate_map(int(rng.integers(4, 12)), float(rng.uniform(0, 0.35)), rng)
    n = int(rng.integers(1, min(6, len(grid.free_cells())) + 1))
    starts, goals = sample_agents(grid, n, rng)
    s = WorldState(grid, starts, goals)
    maps, scalars = ObservationBuilder(s, fov).build(s.positions, PrevInfo.initial(n))
    assert maps.shape == (n, N_CHANNELS, fov, fov) and scalars.shape == (n, 7)
    for i in range(n):
        assert np.array_equal(maps[i], reference_maps(s, i, fov)), i


def test_heuristic_center_matches_greedy_step():
    rng = np.random.default_rng(1)
    grid = generate_map(10, 0.25, rng)
    starts, goals = sample_agents(grid, 1, rng)
    s = WorldState(grid, starts, goals)
    dist = bfs_grid(grid.obstacles, goals[0])
    obs = build_observation(s, 0, 3)
    r, c = starts[0]
    for a, (dr, dc) in enumerate(STEPS):
        nb = (r + dr, c + dc)
        better = 0 <= nb[0] < 10 and 0 <= nb[1] < 10 and 0 <= dist[nb] < dist[r, c]
        assert obs.maps[a, 1, 1] == float(better)


def test_scalars():
    grid = Grid(np.zeros((10, 10), dtype=bool))
    s = WorldState(grid, np.array([[2, 3]]), np.array([[5, 7]]))
    prev = PrevInfo(np.array([-0.3]), np.array([0.2]), np.array([1.5]), np.array([2]))
    sc = build_observation(s, 0, 3, prev).scalars
    assert sc[0] == pytest.approx(0.4)  # column difference / m
    assert sc[1] == pytest.approx(0.3)
    assert sc[2] == pytest.approx(0.5)
    assert sc[3:].tolist() == pytest.approx([-0.3, 0.2, 1.5, 0.4])


def test_initial_prev_action_is_stay():
    p = PrevInfo.initial(3)
    assert p.action.tolist() == [4, 4, 4]
    assert not p.re.any() and not p.ri.any() and not p.dmin.any()


def test_goal_projection_clamps_to_border():
    grid = Grid(np.zeros((10, 10), dtype=bool))
    s = WorldState(grid, np.array([[5, 5], [5, 6]]), np.array([[0, 0], [9, 9]]))
    plain = build_observation(s, 0, 3)
    projected = build_observation(s, 0, 3, project_goals=True)
    assert plain.maps[CH_OTHER_GOALS].sum() == 0
    assert projected.maps[CH_OTHER_GOALS, 2, 2] == 1


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_agents_outside_fov_do_not_matter(seed):
    rng = np.random.default_rng(seed)
    grid = Grid(np.zeros((12, 12), dtype=bool))
    starts, goals = sample_agents(grid, 4, rng)
    s = WorldState(grid, starts, goals)
    builder = ObservationBuilder(s, 3)
    prev = PrevInfo.initial(4)
    base, _ = builder.build(s.positions, prev)
    # move agent 3 to a free cell far from agent 0
    far = [tuple(c) for c in grid.free_cells()
           if max(abs(c[0] - starts[0][0]), abs(c[1] - starts[0][1])) > 1 and
           all(tuple(c) != tuple(p) for p in starts)]
    moved = s.positions.copy()
    old = tuple(moved[3])
    moved[3] = far[int(rng.integers(len(far)))]
    if max(abs(old[0] - starts[0][0]), abs(old[1] - starts[0][1])) <= 1:
        return  # agent 3 started inside agent 0's window
    after, _ = builder.build(moved, prev)
    assert np.array_equal(base[0], after[0])


def test_bad_fov():
    s = WorldState(Grid(np.zeros((5, 5), dtype=bool)), np.array([[0, 0]]), np.array([[1, 1]]))
    with pytest.raises(ValueError):
        ObservationBuilder(s, 4)


def test_format_observation_mentions_channels():
    s = WorldState(Grid(np.zeros((5, 5), dtype=bool)), np.array([[0, 0]]), np.array([[1, 1]]))
    text = format_observation(build_observation(s, 0, 3))
    assert "[obstacles]" in text and "scalars:" in text
