"""Grid-world MDPs: generation, tabular compilation and exact value iteration."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

EMPTY, OBSTACLE, FIRE, GOAL = ".", "#", "F", "G"
CELL_CODES = (EMPTY, OBSTACLE, FIRE, GOAL)

# Up, Down, Left, Right as (row, col) offsets.
ACTIONS = ((-1, 0), (1, 0), (0, -1), (0, 1))
ACTION_NAMES = ("up", "down", "left", "right")
N_ACTIONS = len(ACTIONS)
PERPENDICULAR = ((2, 3), (2, 3), (0, 1), (0, 1))

MAX_GENERATION_ATTEMPTS = 1000


class WorldKind(str, Enum):
    PLAIN = "plain"
    TRAPS = "traps"


class GenerationError(RuntimeError):
    """Raised when no valid layout is found within the attempt budget."""


@dataclass(frozen=True)
class GridWorldSpec:
    seed: int
    size: int
    cells: tuple[tuple[str, ...], ...]
    kind: WorldKind = WorldKind.PLAIN
    slip_prob: float = 0.8
    discount: float = 0.9
    reward_goal: float = 1.0
    reward_fire: float = -1.0
    reward_step: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", WorldKind(self.kind))
        object.__setattr__(self, "cells", tuple(tuple(row) for row in self.cells))
        validate_spec(self)

    def cell(self, state: int) -> str:
        return self.cells[state // self.size][state % self.size]

    def flat_cells(self) -> list[str]:
        return [c for row in self.cells for c in row]

    def to_json(self) -> str:
        doc = asdict(self)
        doc["kind"] = self.kind.value
        doc["cells"] = [list(row) for row in self.cells]
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GridWorldSpec":
        return cls(**json.loads(text))


def validate_spec(spec: GridWorldSpec) -> None:
    n = spec.size
    if n < 1:
        raise ValueError(f"size must be positive, got {n}")
    if len(spec.cells) != n or any(len(row) != n for row in spec.cells):
        raise ValueError(f"cells must be a {n}x{n} grid")
    flat = spec.flat_cells()
    bad = set(flat) - set(CELL_CODES)
    if bad:
        raise ValueError(f"unknown cell codes {sorted(bad)}")
    if flat.count(GOAL) != 1:
        raise ValueError(f"expected exactly one goal cell, found {flat.count(GOAL)}")
    if spec.kind is WorldKind.PLAIN and (OBSTACLE in flat or FIRE in flat):
        raise ValueError("plain worlds contain only empty cells and a goal")
    if not 0.0 < spec.discount < 1.0:
        raise ValueError(f"discount must lie in (0, 1), got {spec.discount}")
    if not 0.0 <= spec.slip_prob <= 1.0:
        raise ValueError(f"slip_prob must lie in [0, 1], got {spec.slip_prob}")


def reachable_from_goal(cells: Sequence[Sequence[str]]) -> np.ndarray:
    """Boolean N x N mask of cells connected to the goal through non-obstacle cells."""
    n = len(cells)
    seen = np.zeros((n, n), dtype=bool)
    start = next((r, c) for r in range(n) for c in range(n) if cells[r][c] == GOAL)
    seen[start] = True
    queue = deque([start])
    while queue:
        r, c = queue.popleft()
        for dr, dc in ACTIONS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < n and 0 <= cc < n and not seen[rr, cc] and cells[rr][cc] != OBSTACLE:
                seen[rr, cc] = True
                queue.append((rr, cc))
    return seen


def _world_rng(seed: int, size: int, kind: WorldKind) -> np.random.Generator:
    kind_code = 0 if kind is WorldKind.PLAIN else 1
    return np.random.default_rng(np.random.SeedSequence([seed, size, kind_code]))


def generate_grid_world(
    seed: int,
    size: int,
    kind: WorldKind | str = WorldKind.PLAIN,
    *,
    obstacle_density: float = 0.1,
    fire_density: float = 0.1,
    **overrides,
) -> GridWorldSpec:
    """Sample a grid-world layout; a pure function of ``(seed, size, kind)``.

    ``overrides`` are forwarded to :class:`GridWorldSpec` (slip_prob,
    discount, rewards).
    """
    kind = WorldKind(kind)
    if size < 2:
        raise ValueError(f"size must be at least 2, got {size}")
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    rng = _world_rng(seed, size, kind)
    n_cells = size * size

    if kind is WorldKind.PLAIN:
        cells = [EMPTY] * n_cells
        cells[int(rng.integers(n_cells))] = GOAL
        grid = [cells[r * size:(r + 1) * size] for r in range(size)]
        return GridWorldSpec(seed=seed, size=size, cells=grid, kind=kind, **overrides)

    n_obstacles = max(1, round(obstacle_density * n_cells))
    n_fire = max(1, round(fire_density * n_cells))
    if n_obstacles + n_fire + 2 > n_cells:
        raise GenerationError(
            f"{n_obstacles} obstacles and {n_fire} fire cells do not fit a {size}x{size} grid"
        )
    for _ in range(MAX_GENERATION_ATTEMPTS):
        order = rng.permutation(n_cells)
        cells = [EMPTY] * n_cells
        cells[order[0]] = GOAL
        for idx in order[1:1 + n_obstacles]:
            cells[idx] = OBSTACLE
        for idx in order[1 + n_obstacles:1 + n_obstacles + n_fire]:
            cells[idx] = FIRE
        grid = [cells[r * size:(r + 1) * size] for r in range(size)]
        reach = reachable_from_goal(grid)
        empty = np.array([[c == EMPTY for c in row] for row in grid])
        if (reach & empty).any():
            return GridWorldSpec(seed=seed, size=size, cells=grid, kind=kind, **overrides)
    raise GenerationError(
        f"no connected layout for size={size} after {MAX_GENERATION_ATTEMPTS} attempts"
    )


@dataclass
class MDP:
    """Tabular MDP with ``transition[s, a, s']`` and ``reward[s, a, s']``."""

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    terminal: np.ndarray
    obstacle: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.obstacle is None:
            self.obstacle = np.zeros(self.n_states, dtype=bool)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def expected_reward(self) -> np.ndarray:
        """Expected immediate reward, shape (S, A)."""
        return np.einsum("sat,sat->sa", self.transition, self.reward)

    def check(self, atol: float = 1e-12) -> None:
        t = self.transition
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError("transition probabilities outside [0, 1]")
        if np.max(np.abs(t.sum(axis=2) - 1.0)) > atol:
            raise ValueError("transition rows are not stochastic")
        for s in np.flatnonzero(self.terminal):
            if not np.all(t[s, :, s] == 1.0) or np.any(self.reward[s] != 0.0):
                raise ValueError(f"terminal state {s} is not absorbing with zero reward")


def compile_mdp(spec: GridWorldSpec) -> MDP:
    """Build the slippery tabular model of ``spec``.

    The intended move succeeds with ``slip_prob``; each perpendicular move
    takes half the remainder. Moves off the grid or into an obstacle stay
    in place. Rewards are attached to the entered cell and stored only on
    the support of the transition tensor.
    """
    n = spec.size
    n_states = n * n
    flat = spec.flat_cells()
    t = np.zeros((n_states, N_ACTIONS, n_states))
    r = np.zeros_like(t)
    terminal = np.array([c in (GOAL, FIRE) for c in flat])
    obstacle = np.array([c == OBSTACLE for c in flat])
    side = (1.0 - spec.slip_prob) / 2.0

    def step(s: int, move: int) -> int:
        row, col = divmod(s, n)
        dr, dc = ACTIONS[move]
        rr, cc = row + dr, col + dc
        if not (0 <= rr < n and 0 <= cc < n) or flat[rr * n + cc] == OBSTACLE:
            return s
        return rr * n + cc

    for s in range(n_states):
        if terminal[s] or obstacle[s]:
            t[s, :, s] = 1.0
            continue
        for a in range(N_ACTIONS):
            p, q = PERPENDICULAR[a]
            for move, prob in ((a, spec.slip_prob), (p, side), (q, side)):
                if prob > 0.0:
                    t[s, a, step(s, move)] += prob
            for s2 in np.flatnonzero(t[s, a]):
                kind = flat[s2]
                if kind == GOAL:
                    r[s, a, s2] = spec.reward_goal
                elif kind == FIRE:
                    r[s, a, s2] = spec.reward_fire
                else:
                    r[s, a, s2] = spec.reward_step
    return MDP(transition=t, reward=r, discount=spec.discount, terminal=terminal, obstacle=obstacle)


@dataclass
class ValueSolution:
    values: np.ndarray
    q_values: np.ndarray
    iterations: int
    residual: float
    tol: float

    @property
    def converged(self) -> bool:
        return self.residual <= self.tol


def q_backup(mdp: MDP, values: np.ndarray) -> np.ndarray:
    """Q(s, a) = sum_s' T(s, a, s') (R(s, a, s') + gamma V(s'))."""
    return mdp.expected_reward() + mdp.discount * (mdp.transition @ values)


def bellman_backup(mdp: MDP, values: np.ndarray) -> np.ndarray:
    return q_backup(mdp, values).max(axis=1)


def value_iteration(mdp: MDP, tol: float = 1e-8, max_iter: int = 10_000) -> ValueSolution:
    """Iterate the Bellman optimality backup from V = 0.

    Stops when the sup-norm change is at most ``tol``. Hitting ``max_iter``
    first is reported through ``ValueSolution.converged`` being False.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be positive")
    expected = mdp.expected_reward()
    values = np.zeros(mdp.n_states)
    residual = np.inf
    for it in range(1, max_iter + 1):
        q = expected + mdp.discount * (mdp.transition @ values)
        new_values = q.max(axis=1)
        residual = float(np.max(np.abs(new_values - values)))
        values = new_values
        if residual <= tol:
            break
    return ValueSolution(values=values, q_values=q, iterations=it, residual=residual, tol=tol)


@dataclass
class RankLabeling:
    ranks: np.ndarray
    bucket_count: int
    buckets: np.ndarray


def rank_states(solution: ValueSolution | np.ndarray, bucket_count: int) -> RankLabeling:
    """Rank states by descending value (ties by ascending index) and bucket the ranks."""
    values = solution.values if isinstance(solution, ValueSolution) else np.asarray(solution)
    n = len(values)
    if not 2 <= bucket_count <= n:
        raise ValueError(f"bucket_count must lie in [2, {n}], got {bucket_count}")
    order = np.lexsort((np.arange(n), -values))
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(n)
    buckets = ranks * bucket_count // n
    return RankLabeling(ranks=ranks, bucket_count=bucket_count, buckets=buckets)
