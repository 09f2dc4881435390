"""Maze layout registry.

Layouts are tuples of row strings, top row first; ``#`` marks a wall cell.
The desk point-maze and the small ant-maze share the 8x8 maps. Every map keeps
the start cell (bottom-left) and the goal cell (top-right) free, so only the
obstacles change between source and target.
"""
from __future__ import annotations

from collections import deque
from typing import Iterable, Optional

import numpy as np

from ..errors import UnknownLayout

Layout = tuple[str, ...]

SMALL_MAPS: dict[str, Layout] = {
    "umaze": (
        "########",
        "#......#",
        "#......#",
        "#####..#",
        "#......#",
        "#......#",
        "#......#",
        "########",
    ),
    "empty": (
        "########",
        "#......#",
        "#......#",
        "#......#",
        "#......#",
        "#......#",
        "#......#",
        "########",
    ),
    "centerblock": (
        "########",
        "#......#",
        "#......#",
        "#..##..#",
        "#..##..#",
        "#......#",
        "#......#",
        "########",
    ),
    "lshape": (
        "########",
        "#......#",
        "#.#....#",
        "#.#....#",
        "#.#....#",
        "#.####.#",
        "#......#",
        "########",
    ),
    "zshape": (
        "########",
        "#......#",
        "#.####.#",
        "#....#.#",
        "#...#..#",
        "#.####.#",
        "#......#",
        "########",
    ),
    "reversel": (
        "########",
        "#......#",
        "#....#.#",
        "#....#.#",
        "#....#.#",
        "#.####.#",
        "#......#",
        "########",
    ),
    "reverseu": (
        "########",
        "#......#",
        "#.####.#",
        "#.#..#.#",
        "#.#..#.#",
        "#......#",
        "#......#",
        "########",
    ),
}

# base maps for the larger ant mazes
MEDIUM_BASE: Layout = (
    "########",
    "#..##..#",
    "#..#...#",
    "##...###",
    "#..#...#",
    "#.#..#.#",
    "#...#..#",
    "########",
)
LARGE_BASE: Layout = (
    "############",
    "#....#.....#",
    "#.##.#.#.#.#",
    "#......#...#",
    "#.####.###.#",
    "#..#.#.....#",
    "##.#.#.#.###",
    "#..#...#...#",
    "############",
)


def to_grid(layout: Layout) -> np.ndarray:
    """uint8 occupancy grid, 1 = wall."""
    return np.array([[c == "#" for c in row] for row in layout], dtype=np.uint8)


def start_cell(layout: Layout) -> tuple[int, int]:
    """Bottom-left free cell as (row, col)."""
    grid = to_grid(layout)
    for r in range(grid.shape[0] - 1, -1, -1):
        for c in range(grid.shape[1]):
            if not grid[r, c]:
                return r, c
    raise UnknownLayout("layout has no free cell")


def goal_cell(layout: Layout) -> tuple[int, int]:
    """Top-right free cell as (row, col)."""
    grid = to_grid(layout)
    for r in range(grid.shape[0]):
        for c in range(grid.shape[1] - 1, -1, -1):
            if not grid[r, c]:
                return r, c
    raise UnknownLayout("layout has no free cell")


def shortest_path(layout: Layout, src: tuple[int, int], dst: tuple[int, int]) -> Optional[list[tuple[int, int]]]:
    """4-connected BFS over free cells; None when unreachable."""
    grid = to_grid(layout)
    h, w = grid.shape
    prev = {src: None}
    queue = deque([src])
    while queue:
        cur = queue.popleft()
        if cur == dst:
            path = []
            while cur is not None:
                path.append(cur)
                cur = prev[cur]
            return path[::-1]
        r, c = cur
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < h and 0 <= nc < w and not grid[nr, nc] and (nr, nc) not in prev:
                prev[(nr, nc)] = cur
                queue.append((nr, nc))
    return None


def _toggle(layout: Layout, cells: Iterable[tuple[int, int]]) -> Layout:
    rows = [list(r) for r in layout]
    for r, c in cells:
        rows[r][c] = "." if rows[r][c] == "#" else "#"
    return tuple("".join(r) for r in rows)


def _variant(base: Layout, index: int, n_toggles: int) -> Layout:
    """Deterministic numbered variant: toggle interior cells while keeping the goal reachable."""
    rng = np.random.default_rng(1000 * len(base) + index)
    h, w = len(base), len(base[0])
    s, g = start_cell(base), goal_cell(base)
    layout = base
    done = 0
    while done < n_toggles:
        r, c = int(rng.integers(1, h - 1)), int(rng.integers(1, w - 1))
        if (r, c) in (s, g):
            continue
        cand = _toggle(layout, [(r, c)])
        if start_cell(cand) != s or goal_cell(cand) != g:
            continue
        if shortest_path(cand, s, g) is None:
            continue
        layout = cand
        done += 1
    return layout


def layout_for(size: str, level: str) -> Layout:
    if size == "small":
        if level not in SMALL_MAPS:
            raise UnknownLayout(f"unknown small layout {level!r}")
        return SMALL_MAPS[level]
    base = {"medium": MEDIUM_BASE, "large": LARGE_BASE}.get(size)
    if base is None or level not in ("1", "2", "3", "4", "5", "6"):
        raise UnknownLayout(f"unknown {size} layout {level!r}")
    return _variant(base, int(level), n_toggles=2 + int(level))
