"""Procedurally generated occupancy-grid POMDP for object-goal navigation.

A map is a W x H grid of cells: Free, Wall, or Object(category). Object
cells are visible but block movement. The agent observes an egocentric
K x K window with ray-cast occlusion, a binary goal mask, the goal
category id, and its previous action. Reward is sparse: +1 for stopping
near a goal instance, plus a small penalty per collision.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

# Cell encoding shared by maps and ego views. Object of category c is
# stored as OBJECT_BASE + c; UNKNOWN only ever appears in ego views.
UNKNOWN = -1
FREE = 0
WALL = 1
OBJECT_BASE = 2

# Heading order is fixed; turning right increments mod 4.
HEADINGS = ("north", "east", "south", "west")
HEADING_VECS = {0: (0, -1), 1: (1, 0), 2: (0, 1), 3: (-1, 0)}


class Action(IntEnum):
    STOP = 0
    FORWARD = 1
    TURN_LEFT = 2
    TURN_RIGHT = 3
    LOOK_UP = 4    # pose-preserving no-op (6-action mode)
    LOOK_DOWN = 5  # pose-preserving no-op (6-action mode)


class MapGenerationError(Exception):
    """Raised when map parameters cannot be satisfied after bounded retries."""


@dataclass(frozen=True)
class MapParams:
    width: int = 16
    height: int = 16
    category_count: int = 8
    objects_per_category: int = 2
    seen_count: int = 6
    wall_density: float = 0.18

    def validate(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("map must be at least 8x8")
        if self.category_count < 2:
            raise ValueError("need at least 2 categories")
        if self.objects_per_category < 1:
            raise ValueError("need at least 1 object per category")
        if not 0 < self.seen_count < self.category_count:
            raise ValueError("seen/unseen split must be non-empty on both sides")
        if not 0.0 <= self.wall_density < 0.9:
            raise ValueError("wall_density out of range")


@dataclass(frozen=True)
class Pose:
    x: int
    y: int
    heading: int  # index into HEADINGS

    @property
    def cell(self):
        return (self.x, self.y)


@dataclass
class GridMap:
    width: int
    height: int
    cells: np.ndarray  # (H, W) int16, FREE/WALL/OBJECT_BASE+cat
    category_count: int
    seen_categories: frozenset
    unseen_categories: frozenset
    generation_seed: int

    def cell_at(self, x, y):
        if 0 <= x < self.width and 0 <= y < self.height:
            return int(self.cells[y, x])
        return WALL

    def is_free(self, x, y):
        return self.cell_at(x, y) == FREE

    def category_cells(self, category):
        ys, xs = np.nonzero(self.cells == OBJECT_BASE + category)
        return [(int(x), int(y)) for x, y in zip(xs, ys)]

    def free_cells(self):
        ys, xs = np.nonzero(self.cells == FREE)
        return [(int(x), int(y)) for x, y in zip(xs, ys)]


@dataclass
class Observation:
    ego_view: np.ndarray   # (K, K) int16, UNKNOWN/FREE/WALL/OBJECT_BASE+cat
    goal_category: int
    goal_mask: np.ndarray  # (K, K) uint8
    prev_action: int


@dataclass(frozen=True)
class EpisodeSpec:
    map_seed: int
    start_pose: Pose
    goal_category: int
    success_radius: int = 1
    horizon: int = 128
    collision_penalty: float = -0.01
    map_params: MapParams = field(default_factory=MapParams)
    view_size: int = 9


@dataclass
class StepResult:
    observation: Observation
    reward: float
    done: bool
    info: dict


def _connected_component(free_mask, seed_cell):
    """Boolean mask of the 4-connected free component containing seed_cell."""
    h, w = free_mask.shape
    comp = np.zeros_like(free_mask)
    sx, sy = seed_cell
    if not free_mask[sy, sx]:
        return comp
    stack = [(sx, sy)]
    comp[sy, sx] = True
    while stack:
        x, y = stack.pop()
        for dx, dy in ((0, -1), (-1, 0), (1, 0), (0, 1)):
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and free_mask[ny, nx] and not comp[ny, nx]:
                comp[ny, nx] = True
                stack.append((nx, ny))
    return comp


def _is_single_component(free_mask):
    ys, xs = np.nonzero(free_mask)
    if len(xs) == 0:
        return False
    comp = _connected_component(free_mask, (int(xs[0]), int(ys[0])))
    return bool(comp.sum() == free_mask.sum())


def generate_map(seed, params: MapParams = MapParams()) -> GridMap:
    """Generate a connected grid map with objects placed for every category.

    Deterministic in (seed, params). Raises MapGenerationError if a valid
    layout cannot be found within bounded retries.
    """
    params.validate()
    w, h = params.width, params.height
    for attempt in range(32):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), attempt]))
        cells = np.full((h, w), FREE, dtype=np.int16)
        cells[0, :] = WALL
        cells[-1, :] = WALL
        cells[:, 0] = WALL
        cells[:, -1] = WALL
        interior = rng.random((h - 2, w - 2)) < params.wall_density
        cells[1:-1, 1:-1][interior] = WALL

        # Keep only the largest free component; everything else becomes wall.
        free = cells == FREE
        best = None
        remaining = free.copy()
        while remaining.any():
            ys, xs = np.nonzero(remaining)
            comp = _connected_component(free, (int(xs[0]), int(ys[0])))
            remaining &= ~comp
            if best is None or comp.sum() > best.sum():
                best = comp
        if best is None:
            continue
        cells[free & ~best] = WALL
        free = best

        needed = params.category_count * params.objects_per_category
        if free.sum() < needed + max(8, needed):
            continue

        # Objects occupy former free cells; each placement must keep the
        # free region connected and leave every object with a free neighbour.
        placed = []
        placed_all = True
        for cat in range(params.category_count):
            for _ in range(params.objects_per_category):
                if not _place_object(cells, free, cat, placed, rng):
                    placed_all = False
                    break
            if not placed_all:
                break
        if not placed_all:
            continue

        seen = frozenset(range(params.seen_count))
        unseen = frozenset(range(params.seen_count, params.category_count))
        return GridMap(
            width=w,
            height=h,
            cells=cells,
            category_count=params.category_count,
            seen_categories=seen,
            unseen_categories=unseen,
            generation_seed=int(seed),
        )
    raise MapGenerationError(f"unsatisfiable map parameters after 32 attempts: {params}")


def _place_object(cells, free, category, placed, rng, tries=64):
    h, w = free.shape

    def has_free_neighbor(x, y):
        return any(
            0 <= x + dx < w and 0 <= y + dy < h and free[y + dy, x + dx]
            for dx, dy in ((0, -1), (-1, 0), (1, 0), (0, 1))
        )

    ys, xs = np.nonzero(free)
    if len(xs) == 0:
        return False
    order = rng.permutation(len(xs))[:tries]
    for i in order:
        x, y = int(xs[i]), int(ys[i])
        free[y, x] = False
        ok = (
            has_free_neighbor(x, y)
            and all(has_free_neighbor(px, py) for px, py in placed)
            and _is_single_component(free)
        )
        if ok:
            cells[y, x] = OBJECT_BASE + category
            placed.append((x, y))
            return True
        free[y, x] = True
    return False


# --- egocentric rendering -------------------------------------------------

_RAY_CACHE = {}


def _bresenham(x0, y0, x1, y1):
    """Integer line from (x0,y0) to (x1,y1), inclusive of both endpoints."""
    cells = []
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    while True:
        cells.append((x, y))
        if x == x1 and y == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy
    return cells


def _ray_tables(k):
    """Per view size K: ego offsets and the occluder index table per cell.

    rays[i, :] lists flat view indices strictly between the agent cell and
    view cell i along the Bresenham ray, padded with the agent's own index
    (never a wall blocker since the agent stands on a free cell).
    """
    if k in _RAY_CACHE:
        return _RAY_CACHE[k]
    cx, cy = k // 2, k - 1  # agent at bottom-center
    offsets = np.zeros((k * k, 2), dtype=np.int64)  # (forward, lateral)
    max_len = 0
    paths = []
    for r in range(k):
        for c in range(k):
            offsets[r * k + c] = (k - 1 - r, c - k // 2)
            line = _bresenham(cx, cy, c, r)
            inner = [yy * k + xx for xx, yy in line[1:-1]]
            paths.append(inner)
            max_len = max(max_len, len(inner))
    agent_idx = cy * k + cx
    rays = np.full((k * k, max(max_len, 1)), agent_idx, dtype=np.int64)
    for i, inner in enumerate(paths):
        rays[i, : len(inner)] = inner
    _RAY_CACHE[k] = (offsets, rays, agent_idx)
    return _RAY_CACHE[k]


def render_ego_view(grid: GridMap, pose: Pose, k: int) -> np.ndarray:
    """Egocentric K x K view: agent bottom-center, heading up.

    Out-of-map cells render as Wall; cells whose Bresenham ray from the
    agent passes through a Wall render as Unknown.
    """
    if k < 3 or k % 2 == 0:
        raise ValueError("view size must be odd and >= 3")
    offsets, rays, agent_idx = _ray_tables(k)
    fwd = np.array(HEADING_VECS[pose.heading])
    right = np.array(HEADING_VECS[(pose.heading + 1) % 4])
    world = np.array([pose.x, pose.y]) + offsets[:, :1] * fwd + offsets[:, 1:] * right
    xs, ys = world[:, 0], world[:, 1]
    inside = (xs >= 0) & (xs < grid.width) & (ys >= 0) & (ys < grid.height)
    flat = np.full(k * k, WALL, dtype=np.int16)
    flat[inside] = grid.cells[ys[inside], xs[inside]]
    blocked = (flat[rays] == WALL).any(axis=1)
    flat[blocked] = UNKNOWN
    return flat.reshape(k, k)


def gt_goal_mask(view: np.ndarray, goal_category: int) -> np.ndarray:
    """Binary mask: 1 where the view shows an object of the goal category."""
    return (view == OBJECT_BASE + goal_category).astype(np.uint8)


def view_world_coords(pose: Pose, k: int) -> np.ndarray:
    """World (x, y) of every view cell, shape (K, K, 2); may be out of map."""
    offsets, _, _ = _ray_tables(k)
    fwd = np.array(HEADING_VECS[pose.heading])
    right = np.array(HEADING_VECS[(pose.heading + 1) % 4])
    world = np.array([pose.x, pose.y]) + offsets[:, :1] * fwd + offsets[:, 1:] * right
    return world.reshape(k, k, 2)


# --- distances ------------------------------------------------------------

def distance_field(traversable: np.ndarray, seeds) -> np.ndarray:
    """BFS distance (4-connected, unit cost) over traversable cells from seeds.

    seeds is an iterable of (x, y). Non-traversable or unreachable cells
    get +inf. Vectorized wavefront expansion; deterministic.
    """
    h, w = traversable.shape
    dist = np.full((h, w), np.inf)
    frontier = np.zeros((h, w), dtype=bool)
    for x, y in seeds:
        if 0 <= x < w and 0 <= y < h and traversable[y, x]:
            dist[y, x] = 0.0
            frontier[y, x] = True
    d = 0.0
    unassigned = traversable & np.isinf(dist)
    while frontier.any():
        nxt = np.zeros_like(frontier)
        nxt[1:, :] = frontier[:-1, :]
        nxt[:-1, :] |= frontier[1:, :]
        nxt[:, 1:] |= frontier[:, :-1]
        nxt[:, :-1] |= frontier[:, 1:]
        nxt &= unassigned
        d += 1.0
        dist[nxt] = d
        unassigned &= ~nxt
        frontier = nxt
    return dist


def geodesic_distance(grid: GridMap, start, targets) -> float:
    """Shortest 4-connected path length through Free cells from start to any
    cell adjacent to the target set. Targets may be object cells (endpoints,
    not traversable). Returns math.inf when unreachable.
    """
    sx, sy = start
    if not grid.is_free(sx, sy):
        raise ValueError(f"start cell {start} is not free")
    free = grid.cells == FREE
    seeds = []
    for tx, ty in targets:
        for dx, dy in ((0, -1), (-1, 0), (1, 0), (0, 1)):
            nx, ny = tx + dx, ty + dy
            if 0 <= nx < grid.width and 0 <= ny < grid.height and free[ny, nx]:
                seeds.append((nx, ny))
    dist = distance_field(free, seeds)
    return float(dist[sy, sx])


def goal_distance(grid: GridMap, start, targets) -> float:
    """Distance to the nearest target cell itself, counting the final step
    into the (non-traversable) object cell. Used by the success test."""
    d = geodesic_distance(grid, start, targets)
    return d + 1.0 if math.isfinite(d) else d


# --- environment ----------------------------------------------------------

class NavEnv:
    """Single-episode environment handle. Not thread-safe; one per worker."""

    def __init__(self, spec: EpisodeSpec, grid: GridMap | None = None):
        self.spec = spec
        self.grid = grid if grid is not None else generate_map(spec.map_seed, spec.map_params)
        self.goal_cells = self.grid.category_cells(spec.goal_category)
        if not self.goal_cells:
            raise ValueError(f"goal category {spec.goal_category} absent from map")
        sp = spec.start_pose
        if not self.grid.is_free(sp.x, sp.y):
            raise ValueError(f"start pose {sp} is not on a free cell")
        self.pose = sp
        self.steps = 0
        self.collisions = 0
        self.path_length = 0
        self.done = False
        self.prev_action = int(Action.STOP)
        self.start_goal_distance = goal_distance(self.grid, sp.cell, self.goal_cells)
        self.shortest_path = geodesic_distance(self.grid, sp.cell, self.goal_cells)

    def observe(self) -> Observation:
        view = render_ego_view(self.grid, self.pose, self.spec.view_size)
        return Observation(
            ego_view=view,
            goal_category=self.spec.goal_category,
            goal_mask=gt_goal_mask(view, self.spec.goal_category),
            prev_action=self.prev_action,
        )

    def step(self, action) -> StepResult:
        if self.done:
            raise RuntimeError("step() on a finished episode")
        action = int(action)
        collided = False
        success = False
        if action == Action.FORWARD:
            dx, dy = HEADING_VECS[self.pose.heading]
            nx, ny = self.pose.x + dx, self.pose.y + dy
            if self.grid.is_free(nx, ny):
                self.pose = Pose(nx, ny, self.pose.heading)
                self.path_length += 1
            else:
                collided = True
                self.collisions += 1
        elif action == Action.TURN_LEFT:
            self.pose = Pose(self.pose.x, self.pose.y, (self.pose.heading - 1) % 4)
        elif action == Action.TURN_RIGHT:
            self.pose = Pose(self.pose.x, self.pose.y, (self.pose.heading + 1) % 4)
        elif action == Action.STOP:
            success = goal_distance(self.grid, self.pose.cell, self.goal_cells) <= self.spec.success_radius
            self.done = True
        # LOOK_UP / LOOK_DOWN (and STOP above) leave the pose unchanged.

        self.steps += 1
        if self.steps >= self.spec.horizon:
            self.done = True
        reward = (1.0 if success else 0.0) + (self.spec.collision_penalty if collided else 0.0)
        self.prev_action = action
        return StepResult(
            observation=self.observe(),
            reward=reward,
            done=self.done,
            info={
                "collided": collided,
                "success": success,
                "steps_taken": self.steps,
                "path_length_so_far": self.path_length,
            },
        )

    def final_goal_distance(self) -> float:
        return goal_distance(self.grid, self.pose.cell, self.goal_cells)


def reset(spec: EpisodeSpec, grid: GridMap | None = None):
    """Create an environment for spec and return (env, initial observation)."""
    env = NavEnv(spec, grid)
    return env, env.observe()


# --- ASCII import/export --------------------------------------------------

_OBJ_CHARS = "0123456789abcdefghijklmnopqrstuvwxyz"


def map_to_ascii(grid: GridMap) -> str:
    lines = [f"{grid.width} {grid.height} {grid.category_count}"]
    for y in range(grid.height):
        row = []
        for x in range(grid.width):
            c = grid.cell_at(x, y)
            if c == WALL:
                row.append("#")
            elif c == FREE:
                row.append(".")
            else:
                row.append(_OBJ_CHARS[c - OBJECT_BASE])
        lines.append("".join(row))
    lines.append("SEEN: " + " ".join(str(i) for i in sorted(grid.seen_categories)))
    lines.append("UNSEEN: " + " ".join(str(i) for i in sorted(grid.unseen_categories)))
    return "\n".join(lines) + "\n"


def map_from_ascii(text: str) -> GridMap:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    w, h, c = (int(v) for v in lines[0].split())
    cells = np.full((h, w), FREE, dtype=np.int16)
    for y in range(h):
        row = lines[1 + y]
        if len(row) != w:
            raise ValueError(f"row {y} has length {len(row)}, expected {w}")
        for x, ch in enumerate(row):
            if ch == "#":
                cells[y, x] = WALL
            elif ch == ".":
                cells[y, x] = FREE
            else:
                idx = _OBJ_CHARS.index(ch)
                if idx >= c:
                    raise ValueError(f"object char {ch!r} exceeds category count {c}")
                cells[y, x] = OBJECT_BASE + idx
    seen = frozenset()
    unseen = frozenset()
    for ln in lines[1 + h:]:
        key, _, rest = ln.partition(":")
        ids = frozenset(int(v) for v in rest.split())
        if key.strip() == "SEEN":
            seen = ids
        elif key.strip() == "UNSEEN":
            unseen = ids
    if seen & unseen:
        raise ValueError("SEEN and UNSEEN overlap")
    return GridMap(w, h, cells, c, seen, unseen, generation_seed=0)
