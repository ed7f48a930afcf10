"""Adaptive densification/pruning and the multi-scale scene initialization.

Pruning removes voxels whose center opacity over their own edge length falls
below a threshold.  Densification splits the highest color-field-gradient
voxels (accumulated since the previous round) into eight children one level
finer, inheriting every field parameter verbatim; the number of splits per
round is floor((M + N_prune - N) / (8 * 5)), which spends the budget
gradually.  The initializer builds the multi-scale static grid: an inner
point-pruned region at the base resolution plus four increasingly coarse
shells at 2x/4x/8x/16x the inner extents.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .scene import (DENSITY_SDF, INIT_A_EMPTY, INIT_A_OCCUPIED, INIT_B, Scene,
                    SceneBounds, SparseVoxelSet, sdf_to_density)

SPLIT_DENOMINATOR = 8 * 5
PRUNE_OPACITY = 0.005

_CHILD_OFFSETS = np.array(
    [[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=np.int64
)


@dataclass
class DensifyConfig:
    budget: int = 2_500_000
    prune_opacity: float = PRUNE_OPACITY
    interval: int = 400
    stop_fraction: float = 0.8


def center_opacity(vset: SparseVoxelSet, mode: str = DENSITY_SDF) -> np.ndarray:
    """Opacity at the voxel center over its own edge length."""
    s = vset.w_s[:, 3]
    if mode == DENSITY_SDF:
        sigma = sdf_to_density(s, np.exp(vset.log_a), np.exp(vset.log_b))
    else:
        sigma = np.exp(s)
    return -np.expm1(-sigma * vset.edges())


def split_count(budget: int, n: int, n_prune: int) -> int:
    return max(0, (budget + n_prune - n) // SPLIT_DENOMINATOR)


def densify_and_prune(vset: SparseVoxelSet, grad_norms: np.ndarray, cfg: DensifyConfig,
                      mode: str = DENSITY_SDF):
    """One prune+split round; returns (new set, kept old indices, n_split).

    Split candidates are ranked by accumulated gradient norm (ties by index);
    voxels already at the finest level are skipped in favor of the next
    candidate.  Children inherit all field parameters verbatim.
    """
    n = vset.n
    opacity = center_opacity(vset, mode)
    prune = opacity < cfg.prune_opacity
    n_prune = int(prune.sum())

    want = split_count(cfg.budget, n, n_prune)
    eligible = ~prune & (vset.level.astype(np.int64) < vset.bounds.max_levels - 1)
    order = np.lexsort((np.arange(n), -grad_norms))
    candidates = order[eligible[order]]
    split_idx = candidates[:want]
    split = np.zeros(n, dtype=bool)
    split[split_idx] = True

    keep_idx = np.flatnonzero(~prune & ~split)
    split_idx = np.sort(split_idx)

    new = SparseVoxelSet(vset.bounds, budget=cfg.budget)
    child_level = vset.level[split_idx].astype(np.int64) + 1
    child_ijk = (vset.ijk[split_idx].astype(np.int64)[:, None, :] * 2
                 + _CHILD_OFFSETS[None, :, :]).reshape(-1, 3)
    new.level = np.concatenate([vset.level[keep_idx],
                                np.repeat(child_level, 8).astype(np.uint8)])
    new.ijk = np.concatenate([vset.ijk[keep_idx], child_ijk.astype(np.int32)])
    for name in ("w_s", "w_c", "w_sh", "log_a", "log_b", "rotation"):
        arr = getattr(vset, name)
        setattr(new, name, np.concatenate([arr[keep_idx],
                                           np.repeat(arr[split_idx], 8, axis=0)]))
    new._lookup = {
        (int(l), int(i), int(j), int(k)): pos
        for pos, (l, (i, j, k)) in enumerate(zip(new.level, new.ijk))
    }
    if new.n > cfg.budget:
        raise RuntimeError(f"densification exceeded the budget: {new.n} > {cfg.budget}")
    return new, keep_idx, int(split_idx.size)


# -- multi-scale initialization ------------------------------------------------


@dataclass
class InitConfig:
    base_edge: float = 1.0  # inner-region voxel edge
    margin_up: float = 10.0
    margin_down: float = 5.0
    margin_lateral: float = 40.0
    max_levels: int = 10
    budget: int = 2_500_000
    seed: int = 0


_INNER_LEVEL = 4  # inner base cells sit four levels below the coarsest shell


def _cells_with_points(points: np.ndarray, origin: np.ndarray, edge: float) -> set:
    if points.shape[0] == 0:
        return set()
    cells = np.floor((points - origin) / edge).astype(np.int64)
    return {tuple(c) for c in cells}


def init_multiscale(points: np.ndarray, traj_positions: np.ndarray,
                    box_extents, cfg: InitConfig):
    """Multi-scale static scene from a trajectory region and a point cloud.

    Returns (scene, summary).  The inner region is the union of the
    per-pose trajectory boxes expanded by the configured margins, snapped so
    all shells tile exactly; inner voxels survive only where points fall
    (all of them, with a warning, when the cloud is empty) and are
    subdivided one level.  Point-occupied voxels start opaque (a = 2.0),
    the rest nearly transparent (a = 0.1).
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[1] != 3:
        points = points.reshape(0, 3)
    traj_positions = np.atleast_2d(np.asarray(traj_positions, dtype=np.float64))
    if traj_positions.shape[0] == 0:
        raise ValueError("at least one trajectory pose is required")
    half = np.asarray(box_extents, dtype=np.float64) / 2.0
    s_in = cfg.base_edge

    lo = traj_positions.min(axis=0) - half
    hi = traj_positions.max(axis=0) + half
    lo -= np.array([cfg.margin_lateral, cfg.margin_lateral, cfg.margin_down])
    hi += np.array([cfg.margin_lateral, cfg.margin_lateral, cfg.margin_up])

    # Snap inner dims to multiples of 4 * s_in so every shell grid tiles exactly.
    quant = 4.0 * s_in
    dims = hi - lo
    snapped = np.ceil(dims / quant - 1e-9) * quant
    pad = (snapped - dims) / 2.0
    inner_lo = lo - pad
    inner_hi = inner_lo + snapped
    d = snapped

    aabb_min = inner_lo - 7.5 * d  # min corner of the 16x box
    aabb_max = aabb_min + 16.0 * d
    bounds = SceneBounds(aabb_min, aabb_max, base_edge=16.0 * s_in,
                         max_levels=cfg.max_levels)
    if cfg.max_levels <= _INNER_LEVEL + 1:
        raise ValueError("max_levels too small for the multi-scale layout")

    boxes = [(inner_lo, inner_hi)]
    for l in range(1, 5):
        c = (inner_lo + inner_hi) / 2.0
        boxes.append((c - 2.0 ** (l - 1) * d, c + 2.0 ** (l - 1) * d))

    rng = np.random.default_rng(cfg.seed)
    vset = SparseVoxelSet(bounds, budget=cfg.budget)
    summary = {"shell_counts": [], "inner_kept": 0, "inner_children": 0}

    def add_cells(level: int, cells: np.ndarray, occupied_keys: set):
        if cells.shape[0] == 0:
            return
        occ = np.array([tuple(c) in occupied_keys for c in cells]) if occupied_keys \
            else np.zeros(cells.shape[0], dtype=bool)
        a = np.where(occ, INIT_A_OCCUPIED, INIT_A_EMPTY)
        vset.add_voxels(np.full(cells.shape[0], level), cells, rng=rng, a=a, b=INIT_B)

    # Outer shells: levels 3 (2x) down to 0 (16x).
    for l in range(1, 5):
        level = _INNER_LEVEL - l
        edge = bounds.level_edge(level)
        blo, bhi = boxes[l]
        plo, phi = boxes[l - 1]
        i0 = np.round((blo - aabb_min) / edge).astype(np.int64)
        i1 = np.round((bhi - aabb_min) / edge).astype(np.int64)
        gi, gj, gk = np.meshgrid(*[np.arange(i0[k], i1[k]) for k in range(3)],
                                 indexing="ij")
        cells = np.stack([gi.ravel(), gj.ravel(), gk.ravel()], axis=1)
        centers = aabb_min + (cells + 0.5) * edge
        inside_prev = np.all((centers > plo) & (centers < phi), axis=1)
        cells = cells[~inside_prev]
        occupied = _cells_with_points(points, aabb_min, edge)
        add_cells(level, cells, occupied)
        summary["shell_counts"].append(int(cells.shape[0]))

    # Inner region at the base resolution.
    edge_in = bounds.level_edge(_INNER_LEVEL)
    i0 = np.round((inner_lo - aabb_min) / edge_in).astype(np.int64)
    i1 = np.round((inner_hi - aabb_min) / edge_in).astype(np.int64)
    gi, gj, gk = np.meshgrid(*[np.arange(i0[k], i1[k]) for k in range(3)], indexing="ij")
    inner_cells = np.stack([gi.ravel(), gj.ravel(), gk.ravel()], axis=1)

    in_box = np.all((points >= inner_lo) & (points <= inner_hi), axis=1) \
        if points.shape[0] else np.zeros(0, dtype=bool)
    inner_points = points[in_box]
    occupied_in = _cells_with_points(inner_points, aabb_min, edge_in)
    if inner_points.shape[0] == 0:
        warnings.warn("empty point cloud: keeping the inner region dense", stacklevel=2)
        add_cells(_INNER_LEVEL, inner_cells, set())
        summary["inner_kept"] = int(inner_cells.shape[0])
    else:
        keep = np.array([tuple(c) in occupied_in for c in inner_cells])
        kept = inner_cells[keep]
        summary["inner_kept"] = int(kept.shape[0])
        # Subdivide point-containing voxels one level.
        child_cells = (kept[:, None, :] * 2
                       + np.array([[x, y, z] for z in (0, 1) for y in (0, 1)
                                   for x in (0, 1)])[None, :, :]).reshape(-1, 3)
        occupied_child = _cells_with_points(inner_points, aabb_min,
                                            bounds.level_edge(_INNER_LEVEL + 1))
        add_cells(_INNER_LEVEL + 1, child_cells, occupied_child)
        summary["inner_children"] = int(child_cells.shape[0])

    scene = Scene(bounds=bounds, static=vset, density_mode=DENSITY_SDF,
                  inner_aabb=np.stack([inner_lo, inner_hi]))
    summary["voxel_count"] = vset.n
    summary["inner_aabb"] = [inner_lo.tolist(), inner_hi.tolist()]
    return scene, summary
