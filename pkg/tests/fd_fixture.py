"""Shared fixture for gradient checking: a small scene, mixed supervision,
a deterministic total-loss forward, and its analytic gradient."""

from __future__ import annotations

import numpy as np

from salf.backward import PARAM_NAMES, backward_records
from salf.losses import (loss_color, loss_depth, loss_eikonal, loss_empty,
                         loss_opacity_lidar, loss_smooth)
from salf.render_ray import build_scene_octrees, integrate_rays
from salf.scene import Scene, SceneBounds, SparseVoxelSet
from salf.trainer import LossWeights


def build_fixture(n_voxels: int = 10, n_rays: int = 50, seed: int = 5):
    """Scene + supervision tuple for finite-difference checks.

    Opacities are kept moderate so neither the 0.99 early-termination rule
    nor the 0.5 depth-validity threshold flips under the probe step.
    """
    rng = np.random.default_rng(seed)
    bounds = SceneBounds([0, 0, 0], [4, 4, 4], base_edge=1.0, max_levels=3)
    vset = SparseVoxelSet(bounds, budget=100)
    cells = []
    taken = set()
    while len(cells) < n_voxels:
        c = tuple(int(v) for v in rng.integers(0, 4, 3))
        if c not in taken:
            taken.add(c)
            cells.append(c)
    vset.add_voxels([0] * n_voxels, cells, rng=rng, a=rng.uniform(1.0, 2.5, n_voxels))
    scene = Scene(bounds=bounds, static=vset,
                  inner_aabb=np.array([[0.0, 0.0, 0.0], [4.0, 4.0, 2.0]]))

    n_cam = n_rays - n_rays // 3
    origins = rng.uniform(-0.5, 4.5, size=(n_rays, 3))
    dirs = rng.normal(size=(n_rays, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    cam_mask = np.zeros(n_rays, dtype=bool)
    cam_mask[:n_cam] = True
    gt_colors = rng.uniform(0, 1, size=(n_cam, 3))
    gt_ranges = rng.uniform(0.5, 4.0, size=n_rays - n_cam)
    points = rng.uniform(0.2, 3.8, size=(12, 3))
    background = np.array([0.15, 0.1, 0.2])
    weights = LossWeights()
    return dict(scene=scene, origins=origins, dirs=dirs, cam_mask=cam_mask,
                gt_colors=gt_colors, gt_ranges=gt_ranges, points=points,
                background=background, weights=weights)


def total_loss(fx: dict) -> float:
    """Weighted training objective over the whole fixture (no sampling)."""
    scene = fx["scene"]
    octrees = build_scene_octrees(scene)
    rec = integrate_rays(scene, octrees, fx["origins"], fx["dirs"],
                         background=fx["background"])
    w: LossWeights = fx["weights"]
    all_idx = np.arange(scene.static.n)
    outer = np.flatnonzero(scene.outer_voxel_mask())
    l_c, _ = loss_color(rec, fx["gt_colors"], fx["cam_mask"])
    l_d, _ = loss_depth(rec, fx["gt_ranges"], ~fx["cam_mask"])
    l_e, _ = loss_eikonal(scene.static, all_idx)
    l_s, _ = loss_smooth(scene.static, octrees.static, all_idx)
    l_o, _ = loss_opacity_lidar(scene.static, octrees.static, fx["points"])
    l_m, _ = loss_empty(scene.static, outer)
    return (w.color * l_c + w.depth * l_d + w.eikonal * l_e + w.smooth * l_s
            + w.opacity * l_o + w.empty * l_m)


def analytic_gradients(fx: dict) -> dict:
    scene = fx["scene"]
    octrees = build_scene_octrees(scene)
    rec = integrate_rays(scene, octrees, fx["origins"], fx["dirs"],
                         background=fx["background"])
    w: LossWeights = fx["weights"]
    all_idx = np.arange(scene.static.n)
    outer = np.flatnonzero(scene.outer_voxel_mask())
    _, d_color = loss_color(rec, fx["gt_colors"], fx["cam_mask"])
    _, d_depth = loss_depth(rec, fx["gt_ranges"], ~fx["cam_mask"])
    grads = backward_records(rec, scene, w.color * d_color, w.depth * d_depth)["static"]
    for weight, (_, g) in (
        (w.eikonal, loss_eikonal(scene.static, all_idx)),
        (w.smooth, loss_smooth(scene.static, octrees.static, all_idx)),
        (w.opacity, loss_opacity_lidar(scene.static, octrees.static, fx["points"])),
        (w.empty, loss_empty(scene.static, outer)),
    ):
        for k, v in g.items():
            grads[k] += weight * v
    return grads, rec


def kink_voxels(rec) -> set:
    """Voxels whose SDF passes within 1e-6 of zero at any sampled midpoint."""
    near = np.abs(rec.s_field) < 1e-6
    return set(rec.vid[near].tolist())
