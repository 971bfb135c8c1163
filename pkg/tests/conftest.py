from collections import deque

import numpy as np

from consim.grid import GridSpec
from consim.world import World


def world_from_rows(rows, targets=None, res=0.1):
    """Rows are listed with ``iy = 0`` first; ``#`` marks an obstacle."""
    grid = np.array([[c == "#" for c in r] for r in rows], dtype=bool)
    spec = GridSpec(res, grid.shape[1], grid.shape[0])
    return World(spec, grid, targets or {})


def open_world(width, height, targets=None):
    """Free interior with a one-cell border of obstacles."""
    grid = np.zeros((height, width), dtype=bool)
    grid[0, :] = grid[-1, :] = True
    grid[:, 0] = grid[:, -1] = True
    return World(GridSpec(0.1, width, height), grid, targets or {})


def random_world(rng, width=20, height=20, density=0.25):
    grid = rng.random((height, width)) < density
    return World(GridSpec(0.1, width, height), grid, {})


def bfs_oracle(free, start):
    """Plain queue BFS over a boolean ``free[iy, ix]`` array; -1 = unreachable."""
    H, W = free.shape
    dist = np.full((H, W), -1, dtype=np.int64)
    if not free[start[1], start[0]]:
        return dist
    dist[start[1], start[0]] = 0
    q = deque([start])
    while q:
        x, y = q.popleft()
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nx, ny = x + dx, y + dy
            if 0 <= nx < W and 0 <= ny < H and free[ny, nx] and dist[ny, nx] < 0:
                dist[ny, nx] = dist[y, x] + 1
                q.append((nx, ny))
    return dist


# ---------------------------------------------------------------- acceptance report

def pytest_configure(config):
    config._acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
