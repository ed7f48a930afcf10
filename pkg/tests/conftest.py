import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from salf.scene import Scene, SceneBounds, SparseVoxelSet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_random_scene(seed: int, n_voxels: int, levels: int = 3,
                      extent: float = 8.0, a_range=(0.5, 4.0)) -> Scene:
    """Random multi-level voxel scene with no containment conflicts."""
    rng = np.random.default_rng(seed)
    bounds = SceneBounds([0, 0, 0], [extent] * 3, base_edge=1.0, max_levels=max(levels, 1) + 1)
    vset = SparseVoxelSet(bounds, budget=10 * n_voxels + 10)
    taken = set()
    level_arr, cells = [], []
    attempts = 0
    while len(level_arr) < n_voxels and attempts < n_voxels * 40:
        attempts += 1
        lvl = int(rng.integers(0, levels))
        n_cells = int(extent * 2**lvl)
        cell = tuple(int(c) for c in rng.integers(0, n_cells, 3))
        key = (lvl,) + cell
        if key in taken:
            continue
        conflict = False
        for coarser in range(lvl):
            parent = (coarser,) + tuple(c >> (lvl - coarser) for c in cell)
            if parent in taken:
                conflict = True
                break
        for finer in range(lvl + 1, levels):
            shift = finer - lvl
            base = tuple(c << shift for c in cell)
            # any stored descendant conflicts; check is cheap at these sizes
            if any(k[0] == finer and all(base[i] <= k[1 + i] < base[i] + 2**shift
                                         for i in range(3)) for k in taken):
                conflict = True
                break
        if conflict:
            continue
        taken.add(key)
        level_arr.append(lvl)
        cells.append(cell)
    vset.add_voxels(level_arr, cells, rng=rng,
                    a=rng.uniform(*a_range, size=len(level_arr)))
    return Scene(bounds=bounds, static=vset)


def random_rays(rng, n: int, lo, hi):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    origins = rng.uniform(lo - 1.0, hi + 1.0, size=(n, 3))
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return origins, dirs
