"""Training losses and their analytic gradients.

Rendered-output losses (color, depth) return gradients with respect to the
per-ray render outputs, which the backward pass then pushes through the
compositing chain.  Regularizers (eikonal, smoothness, LiDAR opacity, empty
space) act on voxel parameters directly and return dense parameter-gradient
arrays for the static set.
"""

from __future__ import annotations

import numpy as np

from .octree import OctreeBuffer, query_batch
from .scene import (DENSITY_SDF, SparseVoxelSet, eval_color, eval_sdf, sdf_to_density,
                    sh_basis)

LIDAR_OPACITY_DELTA = 0.2  # meters of traversal used by the opacity regularizer
EMPTY_QUANTILE = 0.2


def loss_color(records, gt_colors: np.ndarray, ray_mask: np.ndarray):
    """Mean absolute color error over selected rays; returns (value, dL/dC)."""
    d_out = np.zeros_like(records.out_color)
    idx = np.flatnonzero(ray_mask)
    if idx.size == 0:
        return 0.0, d_out
    diff = records.out_color[idx] - gt_colors
    count = diff.size
    d_out[idx] = np.sign(diff) / count
    return float(np.abs(diff).mean()), d_out


def loss_depth(records, gt_ranges: np.ndarray, ray_mask: np.ndarray):
    """Mean absolute range error over rays with valid predicted and gt returns."""
    d_depth = np.zeros(records.n_rays)
    idx = np.flatnonzero(ray_mask)
    if idx.size == 0:
        return 0.0, d_depth
    valid = np.isfinite(records.depth[idx]) & np.isfinite(gt_ranges)
    idx = idx[valid]
    if idx.size == 0:
        return 0.0, d_depth
    diff = records.depth[idx] - gt_ranges[valid]
    d_depth[idx] = np.sign(diff) / idx.size
    return float(np.abs(diff).mean()), d_depth


def loss_eikonal(vset: SparseVoxelSet, sample_idx: np.ndarray):
    """Mean | ||W_s[:3]|| - 1 | over sampled voxels."""
    g_ws = np.zeros_like(vset.w_s)
    if sample_idx.size == 0:
        return 0.0, {"w_s": g_ws}
    w = vset.w_s[sample_idx, :3]
    norm = np.linalg.norm(w, axis=1)
    val = np.abs(norm - 1.0)
    safe = norm > 1e-12
    grad = np.zeros_like(w)
    grad[safe] = (np.sign(norm - 1.0) / sample_idx.size)[safe, None] * (w[safe] / norm[safe, None])
    np.add.at(g_ws[:, :3], sample_idx, grad)
    return float(val.mean()), {"w_s": g_ws}


_FACES = [(0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)]


def _face_pairs(vset: SparseVoxelSet, buffer: OctreeBuffer, sample_idx: np.ndarray):
    """Adjacent (fine voxel, same-or-coarser neighbor, axis, sign) quadruples."""
    pairs = set()
    centers = vset.centers(sample_idx)
    edges = vset.edges(sample_idx)
    root_max = buffer.root_min + buffer.root_edge
    for axis, sign in _FACES:
        probe = centers.copy()
        probe[:, axis] += sign * (0.5 * edges + 1e-6 * edges)
        inside = np.all((probe >= buffer.root_min) & (probe <= root_max), axis=1)
        if not np.any(inside):
            continue
        _flags, vid, _c, _e = query_batch(buffer, probe[inside])
        rows = np.flatnonzero(inside)
        for r, neighbor in zip(rows, vid):
            if neighbor < 0:
                continue
            fine = int(sample_idx[r])
            if neighbor == fine:
                continue
            if vset.level[neighbor] > vset.level[fine]:
                continue  # only same-or-coarser neighbors; finer side owns the pair
            if vset.level[neighbor] == vset.level[fine]:
                key = (min(fine, int(neighbor)), max(fine, int(neighbor)), axis)
            else:
                key = (fine, int(neighbor), axis)
            if key in pairs:
                continue
            pairs.add(key)
            yield fine, int(neighbor), axis, sign


def loss_smooth(vset: SparseVoxelSet, buffer: OctreeBuffer, sample_idx: np.ndarray):
    """Field continuity across shared faces of the multi-scale grid.

    For each sampled voxel and each same-or-coarser face neighbor, the SDF
    and the color (view direction fixed to the face normal) are evaluated at
    the four corners of the finer voxel's face from both sides, each in its
    own local frame.  The loss is mean |SDF difference| plus mean |color
    difference|.
    """
    grads = {"w_s": np.zeros_like(vset.w_s), "w_c": np.zeros_like(vset.w_c),
             "w_sh": np.zeros_like(vset.w_sh)}
    quads = list(_face_pairs(vset, buffer, sample_idx))
    if not quads:
        return 0.0, grads

    fine = np.array([q[0] for q in quads])
    coarse = np.array([q[1] for q in quads])
    axis = np.array([q[2] for q in quads])
    sign = np.array([q[3] for q in quads], dtype=np.float64)

    # Four face corners of the finer voxel, in its local frame.
    n_p = len(quads)
    x_f = np.zeros((n_p, 4, 3))
    other = np.array([[1, 2], [0, 2], [0, 1]])[axis]  # the two in-face axes
    corners = np.array([[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]])
    rows = np.arange(n_p)
    x_f[rows[:, None], np.arange(4)[None, :], axis[:, None]] = sign[:, None]
    for k in range(2):
        x_f[rows[:, None], np.arange(4)[None, :], other[:, k][:, None]] = corners[None, :, k]

    fine_rep = np.repeat(fine, 4)
    coarse_rep = np.repeat(coarse, 4)
    x_f_flat = x_f.reshape(-1, 3)
    world = vset.local_to_world(x_f_flat, fine_rep)
    x_c_flat = vset.world_to_local(world, coarse_rep)

    normal = np.zeros((n_p, 3))
    normal[rows, axis] = sign
    normal_rep = np.repeat(normal, 4, axis=0)

    s_f = eval_sdf(x_f_flat, vset.w_s[fine_rep])
    s_c = eval_sdf(x_c_flat, vset.w_s[coarse_rep])
    c_f = eval_color(x_f_flat, normal_rep, vset.w_c[fine_rep], vset.w_sh[fine_rep])
    c_c = eval_color(x_c_flat, normal_rep, vset.w_c[coarse_rep], vset.w_sh[coarse_rep])

    ds = s_f - s_c
    dc = c_f - c_c
    n_s = ds.size
    n_c = dc.size
    val = float(np.abs(ds).mean() + np.abs(dc).mean())

    # SDF side: d|ds|/dW_s = sign(ds) * [x, 1] on the fine side, minus on the coarse.
    gs = np.sign(ds) / n_s
    xh_f = np.concatenate([x_f_flat, np.ones((x_f_flat.shape[0], 1))], axis=1)
    xh_c = np.concatenate([x_c_flat, np.ones((x_c_flat.shape[0], 1))], axis=1)
    np.add.at(grads["w_s"], fine_rep, gs[:, None] * xh_f)
    np.add.at(grads["w_s"], coarse_rep, -gs[:, None] * xh_c)

    gc = np.sign(dc) / n_c
    gamma = sh_basis(normal_rep)
    for side, xs, idx_rep, sgn in ((c_f, x_f_flat, fine_rep, 1.0), (c_c, x_c_flat, coarse_rep, -1.0)):
        gz = sgn * gc * side * (1.0 - side)
        np.add.at(grads["w_c"], idx_rep, np.einsum("ni,nj->nij", gz, xs))
        np.add.at(grads["w_sh"], idx_rep, np.einsum("ni,nj->nij", gz, gamma))
    return val, grads


def loss_opacity_lidar(vset: SparseVoxelSet, buffer: OctreeBuffer, points: np.ndarray,
                       mode: str = DENSITY_SDF):
    """Drive opacity at LiDAR points toward 1 over a 20 cm traversal."""
    grads = {"w_s": np.zeros_like(vset.w_s), "log_a": np.zeros_like(vset.log_a),
             "log_b": np.zeros_like(vset.log_b)}
    if points.shape[0] == 0:
        return 0.0, grads
    root_max = buffer.root_min + buffer.root_edge
    inside = np.all((points >= buffer.root_min) & (points <= root_max), axis=1)
    points = points[inside]
    if points.shape[0] == 0:
        return 0.0, grads
    _flags, vid, _c, _e = query_batch(buffer, points)
    sel = vid >= 0
    vid = vid[sel]
    if vid.size == 0:
        return 0.0, grads
    pts = points[sel]
    x = vset.world_to_local(pts, vid)
    s = eval_sdf(x, vset.w_s[vid])
    if mode == DENSITY_SDF:
        a = np.exp(vset.log_a[vid])
        b = np.exp(vset.log_b[vid])
        sigma = sdf_to_density(s, a, b)
    else:
        sigma = np.exp(s)
    alpha = -np.expm1(-sigma * LIDAR_OPACITY_DELTA)
    val = float(np.mean(1.0 - alpha))

    n = vid.size
    # d(1 - alpha)/dsigma = -delta * exp(-sigma delta)
    g_sigma = (-LIDAR_OPACITY_DELTA * np.exp(-sigma * LIDAR_OPACITY_DELTA)) / n
    xh = np.concatenate([x, np.ones((n, 1))], axis=1)
    if mode == DENSITY_SDF:
        e = np.exp(-np.abs(s) / b)
        ds = np.where(s == 0.0, 0.0, g_sigma * (a / (2.0 * b)) * e)
        np.add.at(grads["w_s"], vid, ds[:, None] * xh)
        np.add.at(grads["log_a"], vid, g_sigma * sigma)
        np.add.at(grads["log_b"], vid, g_sigma * (-(a / (2.0 * b)) * s * e))
    else:
        np.add.at(grads["w_s"], vid, (g_sigma * sigma)[:, None] * xh)
    return val, grads


def empty_quantile_count(n: int) -> int:
    return max(1, int(np.ceil(EMPTY_QUANTILE * n)))


def loss_empty(vset: SparseVoxelSet, outer_idx: np.ndarray, mode: str = DENSITY_SDF):
    """Push the lowest 20% of outer-voxel opacities toward zero.

    Opacity uses the voxel's own edge as the traversal distance and the
    density at its center.
    """
    grads = {"w_s": np.zeros_like(vset.w_s), "log_a": np.zeros_like(vset.log_a),
             "log_b": np.zeros_like(vset.log_b)}
    if outer_idx.size == 0:
        return 0.0, grads
    s = vset.w_s[outer_idx, 3]  # center: x = 0, so the SDF is the bias term
    edge = vset.edges(outer_idx)
    if mode == DENSITY_SDF:
        a = np.exp(vset.log_a[outer_idx])
        b = np.exp(vset.log_b[outer_idx])
        sigma = sdf_to_density(s, a, b)
    else:
        sigma = np.exp(s)
    alpha = -np.expm1(-sigma * edge)
    k = empty_quantile_count(outer_idx.size)
    order = np.argsort(alpha, kind="stable")[:k]
    val = float(alpha[order].mean())

    sel = outer_idx[order]
    g_alpha = np.full(k, 1.0 / k)
    g_sigma = g_alpha * edge[order] * np.exp(-sigma[order] * edge[order])
    if mode == DENSITY_SDF:
        a_s, b_s, s_s = a[order], b[order], s[order]
        e = np.exp(-np.abs(s_s) / b_s)
        ds = np.where(s_s == 0.0, 0.0, g_sigma * (a_s / (2.0 * b_s)) * e)
        np.add.at(grads["w_s"], (sel, 3), ds)
        np.add.at(grads["log_a"], sel, g_sigma * sigma[order])
        np.add.at(grads["log_b"], sel, g_sigma * (-(a_s / (2.0 * b_s)) * s_s * e))
    else:
        np.add.at(grads["w_s"], (sel, 3), g_sigma * sigma[order])
    return val, grads
