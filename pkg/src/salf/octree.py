"""Linear octree buffer over a sparse voxel set, with point queries and ray marching.

The buffer is a flat array of nodes ``(id_or_offset, is_leaf)`` with the root
at index 0.  ``is_leaf`` is 1 for a leaf holding a voxel index, 0 for an
internal node whose ``id_or_offset`` points at a contiguous block of 8
children, and -1 (paired with id -1) for empty space.  Regions without any
voxel collapse to a single empty node at the shallowest possible level.

The root cube has its minimum corner at the scene's aabb_min and an edge of
``base_edge * 2**m``, the smallest power-of-two multiple covering the bounds,
so that every grid level nests exactly and the 0.5-threshold octant descent
lands on voxel cubes.

Marching advances a cursor node by node, skipping each empty region with a
single ray-box exit test and nudging the cursor ``EPS_ADVANCE`` past every
exit so the next query lands strictly inside the following node.  Recorded
segment endpoints are recomputed exactly from the ray and the leaf cube, so
they carry no accumulated nudge error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import SceneBounds, SparseVoxelSet

EPS_ADVANCE = 1e-4  # meters; cursor nudge past each node exit
MIN_EDGE_FACTOR = 64  # smallest stored voxel edge must be >= 64 * EPS_ADVANCE
_MAX_ROUNDS = 200_000


@dataclass
class OctreeBuffer:
    nodes_id: np.ndarray  # (M,) int64: voxel index, child-block offset, or -1
    nodes_leaf: np.ndarray  # (M,) int8: 1 leaf, 0 internal, -1 empty
    root_min: np.ndarray  # (3,)
    root_edge: float
    max_depth: int

    @property
    def n_nodes(self) -> int:
        return self.nodes_id.shape[0]


def compute_child_index(p_local: np.ndarray) -> np.ndarray:
    """Octant index of unit-cube point(s): bit per axis at 0.5, x + 2(y + 2z)."""
    p_local = np.asarray(p_local, dtype=np.float64)
    bits = (p_local >= 0.5).astype(np.int64)
    return bits[..., 0] + 2 * (bits[..., 1] + 2 * bits[..., 2])


def build_octree(voxels: SparseVoxelSet, bounds: SceneBounds | None = None) -> OctreeBuffer:
    """Depth-first linear octree over the voxel set.

    Raises on duplicate cells, on voxels outside the bounds, and on stored
    voxels thinner than the marching nudge can tolerate.
    """
    if bounds is None:
        bounds = voxels.bounds
    extent = bounds.aabb_max - bounds.aabb_min
    m = max(0, int(np.ceil(np.log2(max(extent.max(), 1e-300) / bounds.base_edge) - 1e-12)))
    root_edge = bounds.base_edge * 2.0**m

    n = voxels.n
    if n == 0:
        return OctreeBuffer(
            nodes_id=np.array([-1], dtype=np.int64),
            nodes_leaf=np.array([-1], dtype=np.int8),
            root_min=bounds.aabb_min.copy(),
            root_edge=root_edge,
            max_depth=m,
        )

    level = voxels.level.astype(np.int64)
    cells = voxels.ijk.astype(np.int64)
    depth = m + level
    edges = voxels.edges()
    if edges.min() < MIN_EDGE_FACTOR * EPS_ADVANCE:
        raise ValueError(
            f"voxel edge {edges.min():.3g} m below the marching floor "
            f"{MIN_EDGE_FACTOR * EPS_ADVANCE:.3g} m"
        )
    keys = (level << 54) ^ (cells[:, 0] << 36) ^ (cells[:, 1] << 18) ^ cells[:, 2]
    if len(np.unique(keys)) != n:
        raise ValueError("duplicate voxel cells in the set")
    centers = voxels.centers()
    if np.any(centers < bounds.aabb_min) or np.any(centers > bounds.aabb_max):
        raise ValueError("voxel outside scene bounds")

    nodes_id = [np.int64(-1)]
    nodes_leaf = [np.int8(-1)]
    stack: list[tuple[int, int, np.ndarray]] = [(0, 0, np.arange(n))]
    while stack:
        node_i, node_depth, sel = stack.pop()
        if sel.size == 0:
            nodes_id[node_i] = np.int64(-1)
            nodes_leaf[node_i] = np.int8(-1)
            continue
        at_depth = depth[sel] == node_depth
        if np.any(at_depth):
            if sel.size > 1:
                raise ValueError("stored voxel contains another stored voxel")
            nodes_id[node_i] = np.int64(sel[0])
            nodes_leaf[node_i] = np.int8(1)
            continue
        offset = len(nodes_id)
        nodes_id[node_i] = np.int64(offset)
        nodes_leaf[node_i] = np.int8(0)
        nodes_id.extend([np.int64(-1)] * 8)
        nodes_leaf.extend([np.int8(-1)] * 8)
        shift = depth[sel] - node_depth - 1
        bits = (cells[sel] >> shift[:, None]) & 1
        child = bits[:, 0] + 2 * bits[:, 1] + 4 * bits[:, 2]
        for c in range(8):
            stack.append((offset + c, node_depth + 1, sel[child == c]))

    return OctreeBuffer(
        nodes_id=np.array(nodes_id, dtype=np.int64),
        nodes_leaf=np.array(nodes_leaf, dtype=np.int8),
        root_min=bounds.aabb_min.copy(),
        root_edge=root_edge,
        max_depth=m + int(level.max()),
    )


def dump_table(buffer: OctreeBuffer) -> str:
    """Plain-text node table (index, is_leaf, id_or_offset) for golden files."""
    lines = ["index is_leaf id_or_offset"]
    for i in range(buffer.n_nodes):
        lines.append(f"{i} {int(buffer.nodes_leaf[i])} {int(buffer.nodes_id[i])}")
    return "\n".join(lines) + "\n"


def query_batch(buffer: OctreeBuffer, p: np.ndarray):
    """Descend to the node containing each point.

    Returns (is_leaf, voxel_id, node_min, node_edge) arrays; voxel_id is -1
    for empty nodes.  Points outside the root cube raise.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    u = (p - buffer.root_min) / buffer.root_edge
    if np.any(u < -1e-9) or np.any(u > 1.0 + 1e-9):
        raise ValueError("query point outside the octree root cube")
    u = np.clip(u, 0.0, 1.0)
    n = p.shape[0]
    node = np.zeros(n, dtype=np.int64)
    corner = np.broadcast_to(buffer.root_min, (n, 3)).copy()
    edge = np.full(n, buffer.root_edge)
    alive = np.arange(n)
    while alive.size:
        flags = buffer.nodes_leaf[node[alive]]
        desc = flags == 0
        alive = alive[desc]
        if alive.size == 0:
            break
        bits = u[alive] >= 0.5
        child = bits[:, 0] + 2 * bits[:, 1] + 4 * bits[:, 2]
        node[alive] = buffer.nodes_id[node[alive]] + child
        edge[alive] *= 0.5
        corner[alive] += bits * edge[alive, None]
        u[alive] = 2.0 * u[alive] - bits
    flags = buffer.nodes_leaf[node]
    vid = np.where(flags == 1, buffer.nodes_id[node], -1)
    return flags, vid, corner, edge


def query(buffer: OctreeBuffer, p: np.ndarray) -> int:
    """Voxel index containing point p, or -1 for empty space."""
    flags, vid, _, _ = query_batch(buffer, np.asarray(p, dtype=np.float64)[None, :])
    return int(vid[0])


def ray_box_range(origin, direction, box_min, box_max):
    """Slab intersection parameters (t_in, t_out) of ray(s) against box(es).

    No positivity clipping; t_in > t_out means a miss.  Zero direction
    components are handled per axis (parallel rays never exit through the
    degenerate faces).
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t0 = (box_min - origin) * inv
        t1 = (box_max - origin) * inv
    near = np.minimum(t0, t1)
    far = np.maximum(t0, t1)
    zero = direction == 0.0
    inside = (origin >= box_min) & (origin <= box_max)
    near = np.where(zero, np.where(inside, -np.inf, np.inf), near)
    far = np.where(zero, np.where(inside, np.inf, -np.inf), far)
    return near.max(axis=-1), far.min(axis=-1)


def ray_box_exit(pos, direction, box_min, box_max):
    """Smallest t >= 0 with pos + t*dir on the box boundary; pos must be inside."""
    pos = np.asarray(pos, dtype=np.float64)
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    tol = 1e-9 * np.max(box_max - box_min)
    if np.any(pos < box_min - tol) or np.any(pos > box_max + tol):
        raise ValueError("position outside the box")
    _, far = ray_box_range(pos, direction, box_min, box_max)
    return float(max(far, 0.0)) if np.isscalar(far) or far.ndim == 0 else np.maximum(far, 0.0)


def _exit_batch(pos, direction, box_min, box_max):
    _, far = ray_box_range(pos, direction, box_min, box_max)
    return np.maximum(far, 0.0)


class BatchMarch:
    """Lockstep octree traversal of a ray batch (Alg.-style cursor advance).

    Each ``step()`` visits one node per active ray and returns the rays that
    landed in a leaf this round, with exact segment parameters.  The caller
    composites and may ``stop()`` saturated rays.
    """

    def __init__(self, buffer: OctreeBuffer, origins: np.ndarray, dirs: np.ndarray,
                 t_max=np.inf):
        self.buffer = buffer
        self.o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        self.d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        norms = np.linalg.norm(self.d, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("ray directions must be unit norm")
        n = self.o.shape[0]
        self.t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,)).copy()
        root_max = buffer.root_min + buffer.root_edge
        t_in, t_out = ray_box_range(self.o, self.d, buffer.root_min, root_max)
        self.t_cur = np.maximum(t_in, 0.0)
        self.t_out = np.minimum(t_out, self.t_max)
        self.active = np.flatnonzero((t_out > self.t_cur) & (self.t_cur < self.t_max)
                                     & np.isfinite(self.t_cur))
        self._rounds = 0

    def active_any(self) -> bool:
        return self.active.size > 0

    def stop(self, ray_ids: np.ndarray) -> None:
        """Deactivate the given rays (early termination hook)."""
        if len(ray_ids):
            self.active = np.setdiff1d(self.active, ray_ids, assume_unique=False)

    def step(self):
        """Advance every active ray one node; returns (ray_ids, voxel_ids, t0, t1)."""
        self._rounds += 1
        if self._rounds > _MAX_ROUNDS:
            raise RuntimeError("octree marching failed to terminate")
        idx = self.active
        p = self.o[idx] + self.t_cur[idx, None] * self.d[idx]
        flags, vid, corner, edge = query_batch(self.buffer, p)
        exit_rel = _exit_batch(p, self.d[idx], corner, corner + edge[:, None])
        self.t_cur[idx] += exit_rel + EPS_ADVANCE

        hits = flags == 1
        if np.any(hits):
            hit_idx = idx[hits]
            t_in, t_out = ray_box_range(self.o[hit_idx], self.d[hit_idx],
                                        corner[hits], corner[hits] + edge[hits, None])
            t0 = np.maximum(t_in, 0.0)
            t1 = np.minimum(t_out, self.t_max[hit_idx])
            keep = t1 > t0 + 1e-12
            out = (hit_idx[keep], vid[hits][keep], t0[keep], t1[keep])
        else:
            out = (idx[:0], vid[:0], np.zeros(0), np.zeros(0))

        done = self.t_cur[idx] >= np.minimum(self.t_out[idx], self.t_max[idx])
        self.active = idx[~done]
        return out


def march_batch(buffer: OctreeBuffer, origins, dirs, t_max=np.inf):
    """Collect all (ray, voxel, t0, t1) segments, per-ray sorted by entry."""
    m = BatchMarch(buffer, origins, dirs, t_max)
    rays, vids, t0s, t1s = [], [], [], []
    while m.active_any():
        r, v, t0, t1 = m.step()
        if r.size:
            rays.append(r)
            vids.append(v)
            t0s.append(t0)
            t1s.append(t1)
    if not rays:
        return (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                np.zeros(0), np.zeros(0))
    ray = np.concatenate(rays)
    vid = np.concatenate(vids)
    t0 = np.concatenate(t0s)
    t1 = np.concatenate(t1s)
    order = np.lexsort((t0, ray))
    return ray[order], vid[order], t0[order], t1[order]


def march(buffer: OctreeBuffer, origin, direction, t_max=np.inf):
    """Single-ray marching; returns a list of (voxel_id, t_entry, t_exit)."""
    ray, vid, t0, t1 = march_batch(buffer, np.asarray(origin)[None, :],
                                   np.asarray(direction)[None, :], t_max)
    return list(zip(vid.tolist(), t0.tolist(), t1.tolist()))
