"""Rendering benchmarks: ray-caster vs rasterizer FPS across resolutions, and
octree marching against a brute-force intersect-all baseline."""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from .octree import OctreeBuffer, march_batch, ray_box_range
from .render_raster import flatten_scene, rasterize
from .render_ray import build_scene_octrees, render_rays_image
from .scene import Scene, SparseVoxelSet
from .sensors import CameraModel, camera_rays


def brute_force_segments(vset: SparseVoxelSet, origins: np.ndarray, dirs: np.ndarray,
                         t_max=np.inf, chunk: int = 262_144):
    """Intersect every ray against every voxel cube and sort by entry.

    Reference path for benchmarking; the test-suite oracle is implemented
    independently in the tests.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    n_rays = origins.shape[0]
    n_vox = vset.n
    centers = vset.centers()
    half = vset.edges()[:, None] / 2.0
    bmin = centers - half
    bmax = centers + half

    out = []
    vox_per_chunk = max(1, chunk // max(n_rays, 1))
    for lo in range(0, n_vox, vox_per_chunk):
        hi = min(lo + vox_per_chunk, n_vox)
        t_in, t_out = ray_box_range(origins[:, None, :], dirs[:, None, :],
                                    bmin[None, lo:hi], bmax[None, lo:hi])
        t0 = np.maximum(t_in, 0.0)
        t1 = np.minimum(t_out, t_max)
        ray_idx, vox_idx = np.nonzero(t1 > t0 + 1e-12)
        out.append((ray_idx, vox_idx + lo, t0[ray_idx, vox_idx], t1[ray_idx, vox_idx]))
    ray = np.concatenate([o[0] for o in out]) if out else np.zeros(0, dtype=np.int64)
    vid = np.concatenate([o[1] for o in out]) if out else np.zeros(0, dtype=np.int64)
    t0 = np.concatenate([o[2] for o in out]) if out else np.zeros(0)
    t1 = np.concatenate([o[3] for o in out]) if out else np.zeros(0)
    order = np.lexsort((t0, ray))
    return ray[order], vid[order], t0[order], t1[order]


def scale_camera(cam: CameraModel, resolution: int) -> CameraModel:
    """Square camera at the given resolution with the original field of view."""
    scale = resolution / cam.width
    return replace(
        cam, width=resolution, height=resolution,
        fx=cam.fx * scale, fy=cam.fy * scale,
        cx=resolution / 2.0, cy=resolution / 2.0,
    )


def run_bench(scene: Scene, cam: CameraModel, resolutions: list[int],
              march_resolution: int = 512, march_rays: int | None = None) -> dict:
    """FPS per renderer per resolution plus the marching-vs-brute-force timing."""
    octrees = build_scene_octrees(scene)
    flat = flatten_scene(scene)
    rows = []
    for res in resolutions:
        c = scale_camera(cam, res)
        t0 = time.perf_counter()
        render_rays_image(scene, octrees, camera_rays(c))
        t_ray = time.perf_counter() - t0
        t0 = time.perf_counter()
        rasterize(flat, c)
        t_raster = time.perf_counter() - t0
        rows.append({
            "resolution": res,
            "ray_seconds": t_ray, "ray_fps": 1.0 / t_ray,
            "raster_seconds": t_raster, "raster_fps": 1.0 / t_raster,
        })

    c = scale_camera(cam, march_resolution)
    batch = camera_rays(c)
    origins, dirs = batch.origins, batch.dirs
    if march_rays is not None and march_rays < batch.n:
        stride = batch.n // march_rays
        origins, dirs = origins[::stride], dirs[::stride]
    t0 = time.perf_counter()
    march_batch(octrees.static, origins, dirs)
    t_march = time.perf_counter() - t0
    t0 = time.perf_counter()
    brute_force_segments(scene.static, origins, dirs)
    t_brute = time.perf_counter() - t0

    return {
        "rows": rows,
        "march": {
            "resolution": march_resolution,
            "n_rays": int(origins.shape[0]),
            "octree_seconds": t_march,
            "brute_force_seconds": t_brute,
            "speedup": t_brute / t_march,
        },
    }


def format_bench(result: dict) -> str:
    lines = ["resolution  ray_fps  raster_fps"]
    for row in result["rows"]:
        lines.append(f"{row['resolution']:>10}  {row['ray_fps']:7.3f}  {row['raster_fps']:10.3f}")
    m = result["march"]
    lines.append(
        f"octree march vs brute force @ {m['resolution']} ({m['n_rays']} rays): "
        f"{m['octree_seconds']:.3f}s vs {m['brute_force_seconds']:.3f}s "
        f"({m['speedup']:.1f}x)"
    )
    return "\n".join(lines)
