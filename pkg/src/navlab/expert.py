"""Teacher policy: frontier exploration until the goal is sighted, then
shortest-path navigation on the ground-truth map.

The expert plans with A* (unit costs, Manhattan heuristic, row-major
tie-breaks) and emits one atomic action per step: the path is re-derived
every call so labels stay consistent when the learner drives the episode.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .gridworld import (
    FREE,
    HEADING_VECS,
    OBJECT_BASE,
    UNKNOWN,
    Action,
    GridMap,
    NavEnv,
    Pose,
    distance_field,
    geodesic_distance,
    view_world_coords,
)

# Row-major neighbor order: up, left, right, down.
_NEIGHBORS = ((0, -1), (-1, 0), (1, 0), (0, 1))


@dataclass
class ExplorationState:
    """What the agent has seen so far. known uses the map cell encoding,
    with UNKNOWN for never-observed cells; cells never revert to UNKNOWN."""

    known: np.ndarray
    goal_category: int
    goal_cells_seen: set = field(default_factory=set)
    agent_cell: tuple | None = None
    # Memoized goal distance field keyed by |goal_cells_seen| (monotone).
    _field_cache: tuple | None = field(default=None, repr=False, compare=False)

    @classmethod
    def for_map(cls, grid: GridMap, goal_category: int):
        return cls(
            known=np.full((grid.height, grid.width), UNKNOWN, dtype=np.int16),
            goal_category=goal_category,
        )

    @property
    def goal_found(self):
        return len(self.goal_cells_seen) > 0


def update_visibility(state: ExplorationState, pose: Pose, view: np.ndarray) -> ExplorationState:
    """Write every resolved view cell into the known map (in place)."""
    k = view.shape[0]
    coords = view_world_coords(pose, k).reshape(-1, 2)
    flat = view.reshape(-1)
    h, w = state.known.shape
    valid = (
        (flat != UNKNOWN)
        & (coords[:, 0] >= 0) & (coords[:, 0] < w)
        & (coords[:, 1] >= 0) & (coords[:, 1] < h)
    )
    xs, ys = coords[valid, 0], coords[valid, 1]
    state.known[ys, xs] = flat[valid]
    goal_val = OBJECT_BASE + state.goal_category
    for x, y in zip(xs[flat[valid] == goal_val], ys[flat[valid] == goal_val]):
        state.goal_cells_seen.add((int(x), int(y)))
    state.agent_cell = pose.cell
    return state


def frontier_cells(state: ExplorationState) -> list:
    """Known-free cells bordering unknown space, nearest (geodesic over
    known-free cells from the agent) first, then row-major. Frontiers not
    yet reachable through known-free cells sort after all reachable ones."""
    known = state.known
    free = known == FREE
    unknown = known == UNKNOWN
    h, w = known.shape
    adj_unknown = np.zeros_like(unknown)
    adj_unknown[1:, :] |= unknown[:-1, :]
    adj_unknown[:-1, :] |= unknown[1:, :]
    adj_unknown[:, 1:] |= unknown[:, :-1]
    adj_unknown[:, :-1] |= unknown[:, 1:]
    frontier = free & adj_unknown
    if state.agent_cell is None:
        dist = np.full((h, w), np.inf)
    else:
        dist = distance_field(free, [state.agent_cell])
    ys, xs = np.nonzero(frontier)
    cells = sorted(
        ((float(dist[y, x]), y * w + x, (int(x), int(y))) for x, y in zip(xs, ys)),
        key=lambda t: (t[0], t[1]),
    )
    return [c for _, _, c in cells]


def astar(traversable: np.ndarray, start, targets, stop_adjacent=True):
    """Minimum-length 4-connected path over traversable cells.

    With stop_adjacent the path ends on a traversable cell adjacent to a
    target (targets themselves need not be traversable); otherwise it ends
    on a target cell. Returns the list of cells to step onto (start
    excluded), or None when unreachable. Heuristic: Manhattan distance to
    the nearest target; neighbor expansion in row-major order.
    """
    h, w = traversable.shape
    sx, sy = start
    if not traversable[sy, sx]:
        raise ValueError(f"start {start} is not traversable")
    target_set = set((int(x), int(y)) for x, y in targets)
    if not target_set:
        return None
    txs = np.array([t[0] for t in target_set])
    tys = np.array([t[1] for t in target_set])

    def hcost(x, y):
        m = int(np.min(np.abs(txs - x) + np.abs(tys - y)))
        return max(0, m - 1) if stop_adjacent else m

    def is_goal(x, y):
        if stop_adjacent:
            return any((x + dx, y + dy) in target_set for dx, dy in _NEIGHBORS)
        return (x, y) in target_set

    came = {}
    g = {start: 0}
    counter = 0
    pq = [(hcost(sx, sy), counter, start)]
    closed = set()
    while pq:
        _, _, cell = heapq.heappop(pq)
        if cell in closed:
            continue
        closed.add(cell)
        x, y = cell
        if is_goal(x, y):
            path = []
            while cell != start:
                path.append(cell)
                cell = came[cell]
            return path[::-1]
        for dx, dy in _NEIGHBORS:
            nx, ny = x + dx, y + dy
            if not (0 <= nx < w and 0 <= ny < h) or not traversable[ny, nx]:
                continue
            ng = g[cell] + 1
            if ng < g.get((nx, ny), 1 << 30):
                g[(nx, ny)] = ng
                came[(nx, ny)] = cell
                counter += 1
                heapq.heappush(pq, (ng + hcost(nx, ny), counter, (nx, ny)))
    return None


def _turn_or_forward(pose: Pose, target_cell) -> int:
    dx = target_cell[0] - pose.x
    dy = target_cell[1] - pose.y
    want = {(0, -1): 0, (1, 0): 1, (0, 1): 2, (-1, 0): 3}[(dx, dy)]
    delta = (want - pose.heading) % 4
    if delta == 0:
        return int(Action.FORWARD)
    if delta == 1:
        return int(Action.TURN_RIGHT)
    return int(Action.TURN_LEFT)  # delta 3, and the 180-degree tie


def _goal_field(state: ExplorationState, grid: GridMap):
    """Distance-to-adjacent-of-goal field over ground-truth free cells.

    Memoized on the state (goal_cells_seen only grows, so the cell count
    keys the cache); observationally pure."""
    n = len(state.goal_cells_seen)
    if state._field_cache is not None and state._field_cache[0] == n:
        return state._field_cache[1]
    free = grid.cells == FREE
    seeds = []
    for tx, ty in state.goal_cells_seen:
        for dx, dy in _NEIGHBORS:
            nx, ny = tx + dx, ty + dy
            if 0 <= nx < grid.width and 0 <= ny < grid.height and free[ny, nx]:
                seeds.append((nx, ny))
    fld = distance_field(free, seeds)
    state._field_cache = (n, fld)
    return fld


def expert_action(state: ExplorationState, grid: GridMap, pose: Pose,
                  goal_category: int, success_radius: int) -> int:
    """Teacher label for the current state. Pure: mutates nothing.

    The goal phase walks the exact BFS distance field (an optimal path
    with row-major tie-breaks, the same contract astar promises)."""
    if state.goal_found:
        fld = _goal_field(state, grid)
        here = fld[pose.y, pose.x]
        if here + 1 <= success_radius:
            return int(Action.STOP)
        if np.isfinite(here) and here > 0:
            for dx, dy in _NEIGHBORS:
                nx, ny = pose.x + dx, pose.y + dy
                if 0 <= nx < grid.width and 0 <= ny < grid.height and fld[ny, nx] == here - 1:
                    return _turn_or_forward(pose, (nx, ny))
        # Adjacent but radius excludes success, or goal unreachable.
        return int(Action.TURN_LEFT)

    known_free = state.known == FREE
    unknown_cells = np.argwhere(state.known == UNKNOWN)
    if len(unknown_cells) == 0:
        return int(Action.STOP)
    targets = [(int(x), int(y)) for y, x in unknown_cells]
    path = astar(known_free, pose.cell, targets, stop_adjacent=True)
    if path:
        return _turn_or_forward(pose, path[0])
    if path is not None:
        # Standing on a frontier: turn to face the first adjacent unknown.
        # The cell directly ahead is always resolved by the last view, so
        # the unknown neighbor is never in front and a turn suffices.
        front = HEADING_VECS[pose.heading]
        for dx, dy in _NEIGHBORS:
            nx, ny = pose.x + dx, pose.y + dy
            if 0 <= nx < grid.width and 0 <= ny < grid.height and state.known[ny, nx] == UNKNOWN:
                if (dx, dy) == front:
                    return int(Action.TURN_LEFT)
                return _turn_or_forward(pose, (nx, ny))
    # No reachable frontier: the agent's known-free component is sealed.
    return int(Action.STOP)


def run_expert_episode(env: NavEnv, max_steps=None):
    """Drive one episode with the expert. Returns (success, steps, actions)."""
    state = ExplorationState.for_map(env.grid, env.spec.goal_category)
    update_visibility(state, env.pose, env.observe().ego_view)
    actions = []
    success = False
    while not env.done and (max_steps is None or env.steps < max_steps):
        a = expert_action(state, env.grid, env.pose, env.spec.goal_category,
                          env.spec.success_radius)
        res = env.step(a)
        actions.append(a)
        update_visibility(state, env.pose, res.observation.ego_view)
        success = res.info["success"]
    return success, env.steps, actions
