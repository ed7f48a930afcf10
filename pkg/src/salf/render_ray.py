"""Volume integration along rays over the composed scene, plus secondary effects.

Per ray, marching yields ordered ray-voxel segments; density and color are
sampled at each segment midpoint and composited front-to-back:

    C = sum_i T_i alpha_i c_i + T_final * background,   T_i = prod_j<i (1 - alpha_j)

A segment is included while the accumulated opacity before it is below the
early-termination threshold (default 0.99); afterwards the transmittance is
frozen, which bounds the omitted contribution by 1 - threshold per channel.
Expected depth is the weight-normalized mean of included segment midpoints,
valid when the weights sum above 0.5 (NaN otherwise).

Dynamic actors are handled by transforming each ray into the actor's
canonical frame at the ray timestamp, marching the actor's own octree there,
and merge-sorting actor segments with static ones by entry distance.  The
RenderRecords structure retains everything the backward pass needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .octree import BatchMarch, OctreeBuffer, build_octree, march_batch, ray_box_range
from .rotations import IDENTITY_QUAT, quat_to_matrix
from .scene import (ALPHA_MAX, DENSITY_RAW, DENSITY_SDF, Scene, SparseVoxelSet,
                    eval_color, eval_sdf, sdf_to_density, segment_opacity)

STOP_THRESHOLD = 0.99
DEPTH_WEIGHT_MIN = 0.5
_ALPHA_CLAMP = ALPHA_MAX

STATIC_OWNER = -1


@dataclass
class SceneOctrees:
    static: OctreeBuffer
    actors: list[OctreeBuffer]


def build_scene_octrees(scene: Scene) -> SceneOctrees:
    return SceneOctrees(
        static=build_octree(scene.static),
        actors=[build_octree(a.voxels) for a in scene.actors],
    )


@dataclass
class RenderRecords:
    """Flat per-segment state (sorted by ray, then entry) plus per-ray outputs."""

    n_rays: int
    ray: np.ndarray
    owner: np.ndarray  # STATIC_OWNER or actor list index
    vid: np.ndarray  # voxel index within the owner's set
    t0: np.ndarray
    t1: np.ndarray
    x: np.ndarray  # (S, 3) midpoint local coordinates
    omega: np.ndarray  # (S, 3) view direction in the owner/voxel frame
    s_field: np.ndarray  # SDF value (sdf mode) or log-density exponent (raw mode)
    sigma: np.ndarray
    alpha: np.ndarray
    color: np.ndarray  # (S, 3)
    t_before: np.ndarray  # transmittance ahead of each segment
    included: np.ndarray  # bool; False once early termination froze the ray
    out_color: np.ndarray  # (R, 3)
    opacity: np.ndarray  # (R,)
    depth: np.ndarray  # (R,), NaN = no return
    weight_sum: np.ndarray  # (R,)
    t_final: np.ndarray  # (R,)
    background: np.ndarray
    density_mode: str
    group_start: np.ndarray  # (R + 1,) segment offsets per ray

    @property
    def n_segments(self) -> int:
        return self.ray.shape[0]

    def ray_segments(self, i: int) -> slice:
        return slice(int(self.group_start[i]), int(self.group_start[i + 1]))


def _composite(ray: np.ndarray, alpha: np.ndarray, color: np.ndarray, t_mid: np.ndarray,
               n_rays: int, background: np.ndarray, stop_threshold: float):
    """Front-to-back compositing of per-ray sorted segments (shared by renderers)."""
    t_keep = 1.0 - stop_threshold
    a = np.clip(alpha, 0.0, _ALPHA_CLAMP)
    s = np.log1p(-a)
    csum = np.cumsum(s)
    counts = np.bincount(ray, minlength=n_rays)
    starts = np.concatenate([[0], np.cumsum(counts)])
    prefix = np.concatenate([[0.0], csum])
    base = np.repeat(prefix[starts[:-1]], counts)
    t_before = np.exp((csum - s) - base)
    included = t_before > t_keep
    w = np.where(included, t_before * a, 0.0)

    out_color = np.stack(
        [np.bincount(ray, weights=w * color[:, c], minlength=n_rays) for c in range(3)],
        axis=1,
    ).astype(np.float64)
    log_t_final = np.bincount(ray, weights=np.where(included, s, 0.0),
                              minlength=n_rays).astype(np.float64)
    t_final = np.exp(log_t_final)
    out_color += t_final[:, None] * background
    weight_sum = np.bincount(ray, weights=w, minlength=n_rays).astype(np.float64)
    depth_num = np.bincount(ray, weights=w * t_mid, minlength=n_rays).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(weight_sum > DEPTH_WEIGHT_MIN, depth_num / weight_sum, np.nan)
    opacity = 1.0 - t_final
    return t_before, included, w, out_color, opacity, depth, weight_sum, t_final, starts


def _evaluate_geometry(vset: SparseVoxelSet, mode: str, origins, dirs, rays, vids, t0, t1):
    """Midpoint local coordinates, view direction, field value, density, opacity."""
    t_mid = 0.5 * (t0 + t1)
    pts = origins[rays] + t_mid[:, None] * dirs[rays]
    x = vset.world_to_local(pts, vids)
    omega = dirs[rays]
    rot = vset.rotation[vids]
    if not np.allclose(rot, IDENTITY_QUAT):
        omega = np.einsum("nji,nj->ni", quat_to_matrix(rot), omega)
        omega /= np.linalg.norm(omega, axis=1, keepdims=True)
    s_field = eval_sdf(x, vset.w_s[vids])
    if mode == DENSITY_SDF:
        sigma = sdf_to_density(s_field, np.exp(vset.log_a[vids]), np.exp(vset.log_b[vids]))
    else:
        sigma = np.exp(s_field)
    alpha = segment_opacity(sigma, t1 - t0)
    return x, omega, s_field, sigma, alpha


def _march_static(scene: Scene, buffer: OctreeBuffer, origins, dirs, t_max,
                  stop_threshold: float, allow_early_stop: bool):
    """March the static octree, optionally stopping saturated rays early.

    Density (which drives the stop rule) is evaluated per round; color is
    deferred to one batched evaluation by the caller.
    """
    n = origins.shape[0]
    m = BatchMarch(buffer, origins, dirs, t_max)
    t_run = np.ones(n)
    chunks: list[tuple] = []
    while m.active_any():
        rays, vids, t0, t1 = m.step()
        if rays.size == 0:
            continue
        x, omega, s_field, sigma, alpha = _evaluate_geometry(
            scene.static, scene.density_mode, origins, dirs, rays, vids, t0, t1)
        chunks.append((rays, vids, t0, t1, x, omega, s_field, sigma, alpha))
        if allow_early_stop:
            t_run[rays] *= 1.0 - np.clip(alpha, 0.0, _ALPHA_CLAMP)
            saturated = rays[t_run[rays] <= 1.0 - stop_threshold]
            m.stop(saturated)
    return chunks


def integrate_rays(scene: Scene, octrees: SceneOctrees, origins, dirs, t_stamps=None, *,
                   t_max=np.inf, background=(0.0, 0.0, 0.0),
                   stop_threshold: float = STOP_THRESHOLD) -> RenderRecords:
    """Render a ray batch against the composed scene (static plus actors)."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = origins.shape[0]
    if t_stamps is None:
        t_stamps = np.zeros(n)
    t_stamps = np.broadcast_to(np.asarray(t_stamps, dtype=np.float64), (n,))
    background = np.asarray(background, dtype=np.float64)

    live_actors = [(i, a) for i, a in enumerate(scene.actors) if a.voxels.n > 0]
    chunks = _march_static(scene, octrees.static, origins, dirs, t_max,
                           stop_threshold, allow_early_stop=not live_actors)
    owners = [np.full(c[0].shape[0], STATIC_OWNER, dtype=np.int32) for c in chunks]

    for a_idx, actor in live_actors:
        pos, quat = actor.pose_at(t_stamps)
        rmat = quat_to_matrix(quat)
        o_a = np.einsum("nji,nj->ni", rmat, origins - pos)
        d_a = np.einsum("nji,nj->ni", rmat, dirs)
        half = actor.extents / 2.0
        t_in, t_out = ray_box_range(o_a, d_a, -half, half)
        hit = (t_out > np.maximum(t_in, 0.0)) & (np.maximum(t_in, 0.0) < t_max)
        hit_ids = np.flatnonzero(hit)
        if hit_ids.size == 0:
            continue
        sub_rays, vids, t0, t1 = march_batch(octrees.actors[a_idx], o_a[hit_ids],
                                             d_a[hit_ids], t_max)
        if sub_rays.size == 0:
            continue
        rays = hit_ids[sub_rays]
        x, omega, s_field, sigma, alpha = _evaluate_geometry(
            actor.voxels, scene.density_mode, o_a, d_a, rays, vids, t0, t1)
        chunks.append((rays, vids, t0, t1, x, omega, s_field, sigma, alpha))
        owners.append(np.full(rays.shape[0], a_idx, dtype=np.int32))

    if chunks:
        ray = np.concatenate([c[0] for c in chunks])
        vid = np.concatenate([c[1] for c in chunks])
        t0 = np.concatenate([c[2] for c in chunks])
        t1 = np.concatenate([c[3] for c in chunks])
        x = np.concatenate([c[4] for c in chunks])
        omega = np.concatenate([c[5] for c in chunks])
        s_field = np.concatenate([c[6] for c in chunks])
        sigma = np.concatenate([c[7] for c in chunks])
        alpha = np.concatenate([c[8] for c in chunks])
        owner = np.concatenate(owners)
        order = np.lexsort((vid, owner, t0, ray))
        ray, vid, t0, t1, owner = ray[order], vid[order], t0[order], t1[order], owner[order]
        x, omega, s_field = x[order], omega[order], s_field[order]
        sigma, alpha = sigma[order], alpha[order]
        # one batched color evaluation over all segments, per owner
        color = np.empty((ray.shape[0], 3))
        for code in np.unique(owner):
            sel = owner == code
            vset = scene.static if code == STATIC_OWNER else scene.actors[code].voxels
            color[sel] = eval_color(x[sel], omega[sel], vset.w_c[vid[sel]],
                                    vset.w_sh[vid[sel]])
    else:
        ray = np.zeros(0, dtype=np.int64)
        vid = np.zeros(0, dtype=np.int64)
        owner = np.zeros(0, dtype=np.int32)
        t0 = t1 = s_field = sigma = alpha = np.zeros(0)
        x = omega = np.zeros((0, 3))
        color = np.zeros((0, 3))

    t_mid = 0.5 * (t0 + t1)
    (t_before, included, _w, out_color, opacity, depth, weight_sum, t_final,
     starts) = _composite(ray, alpha, color, t_mid, n, background, stop_threshold)

    return RenderRecords(
        n_rays=n, ray=ray, owner=owner, vid=vid, t0=t0, t1=t1, x=x, omega=omega,
        s_field=s_field, sigma=sigma, alpha=alpha, color=color, t_before=t_before,
        included=included, out_color=out_color, opacity=opacity, depth=depth,
        weight_sum=weight_sum, t_final=t_final, background=background,
        density_mode=scene.density_mode, group_start=starts,
    )


def render_depth(records: RenderRecords) -> np.ndarray:
    """Expected depth per ray (weight-normalized midpoint mean); NaN = no return."""
    return records.depth


def compose_actor_traversal(scene: Scene, octrees: SceneOctrees, origin, direction,
                            t_stamp: float = 0.0):
    """Per-ray traversal plan: (owner, t_enter, t_exit) intervals sorted by entry.

    The static interval covers the root-cube crossing; each intersected actor
    bounding box contributes its own window.  Within overlaps the integrator
    merge-sorts actual segments by entry distance.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    plan = []
    root_max = octrees.static.root_min + octrees.static.root_edge
    t_in, t_out = ray_box_range(origin, direction, octrees.static.root_min, root_max)
    if t_out > max(t_in, 0.0):
        plan.append(("static", float(max(t_in, 0.0)), float(t_out)))
    for actor in scene.actors:
        pos, quat = actor.pose_at(np.asarray(t_stamp))
        rmat = quat_to_matrix(quat)
        o_a = rmat.T @ (origin - pos)
        d_a = rmat.T @ direction
        half = actor.extents / 2.0
        a_in, a_out = ray_box_range(o_a, d_a, -half, half)
        if a_out > max(a_in, 0.0):
            plan.append((f"actor:{actor.actor_id}", float(max(a_in, 0.0)), float(a_out)))
    plan.sort(key=lambda item: item[1])
    return plan


def render_rays_image(scene: Scene, octrees: SceneOctrees, batch, *,
                      background=(0.0, 0.0, 0.0), chunk: int = 65536,
                      stop_threshold: float = STOP_THRESHOLD):
    """Render a RayBatch to (H, W) color/opacity/depth arrays via ray casting."""
    h, w = batch.shape
    color = np.zeros((h * w, 3))
    color[:] = np.asarray(background, dtype=np.float64)
    opacity = np.zeros(h * w)
    depth = np.full(h * w, np.nan)
    valid_idx = np.flatnonzero(batch.valid)
    for lo in range(0, valid_idx.size, chunk):
        sel = valid_idx[lo:lo + chunk]
        rec = integrate_rays(scene, octrees, batch.origins[sel], batch.dirs[sel],
                             batch.t_stamps[sel], background=background,
                             stop_threshold=stop_threshold)
        flat = batch.keys[sel, 0] * w + batch.keys[sel, 1]
        color[flat] = rec.out_color
        opacity[flat] = rec.opacity
        depth[flat] = rec.depth
    return color.reshape(h, w, 3), opacity.reshape(h, w), depth.reshape(h, w)


def render_lidar_ranges(scene: Scene, octrees: SceneOctrees, batch, *,
                        chunk: int = 65536) -> np.ndarray:
    """Expected range per LiDAR ray, shaped (beams, steps); NaN = no return."""
    ranges = np.full(batch.n, np.nan)
    for lo in range(0, batch.n, chunk):
        sel = slice(lo, min(lo + chunk, batch.n))
        rec = integrate_rays(scene, octrees, batch.origins[sel], batch.dirs[sel],
                             batch.t_stamps[sel])
        ranges[sel] = rec.depth
    return ranges.reshape(batch.shape)


# -- secondary-ray effects (injected analytic spheres) -----------------------


@dataclass
class InjectedSphere:
    center: np.ndarray
    radius: float
    material: str  # mirror | glass | opaque
    ior: float = 1.5
    albedo: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.material not in ("mirror", "glass", "opaque"):
            raise ValueError(f"unknown material {self.material!r}")
        if self.material == "glass" and self.ior < 1.0:
            raise ValueError("index of refraction must be >= 1")


_T_MIN_HIT = 1e-6
SHADOW_FACTOR = 0.5


def _sphere_hits(origins, dirs, spheres):
    """Nearest positive ray-sphere intersection: (t, sphere index), inf/-1 on miss."""
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    best_s = np.full(n, -1, dtype=np.int64)
    for si, sp in enumerate(spheres):
        oc = origins - sp.center
        b = np.einsum("ni,ni->n", oc, dirs)
        c = np.einsum("ni,ni->n", oc, oc) - sp.radius**2
        disc = b * b - c
        ok = disc >= 0.0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t_near = -b - sq
        t_far = -b + sq
        t = np.where(t_near > _T_MIN_HIT, t_near, t_far)  # inside: take the exit
        hit = ok & (t > _T_MIN_HIT)
        closer = hit & (t < best_t)
        best_t = np.where(closer, t, best_t)
        best_s = np.where(closer, si, best_s)
    return best_t, best_s


def _schlick(cos_i: np.ndarray, n1: float, n2: float) -> np.ndarray:
    if n1 == n2:  # no index mismatch, no Fresnel reflection
        return np.zeros_like(cos_i)
    f0 = ((n1 - n2) / (n1 + n2)) ** 2
    return f0 + (1.0 - f0) * (1.0 - np.clip(cos_i, 0.0, 1.0)) ** 5


def trace_effects(scene: Scene, octrees: SceneOctrees, origins, dirs, t_stamps,
                  spheres: list[InjectedSphere], sun_dir, max_bounces: int = 2, *,
                  background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Ray-traced composition of the volume with injected analytic spheres.

    The nearest sphere hit wins against the volumetric expected depth.
    Mirrors reflect; glass splits into Schlick-weighted reflected and
    Snell-refracted rays; recursion is capped at max_bounces, after which
    rays fall back to plain volume rendering.  Volume surface points that a
    sphere occludes from the sun are darkened by a fixed factor.
    """
    if max_bounces < 1:
        raise ValueError("max_bounces must be at least 1")
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = origins.shape[0]
    t_stamps = np.broadcast_to(np.asarray(t_stamps, dtype=np.float64), (n,))
    sun_dir = np.asarray(sun_dir, dtype=np.float64)
    sun_dir = sun_dir / np.linalg.norm(sun_dir)
    out = np.zeros((n, 3))

    pix = np.arange(n)
    o, d, ts = origins, dirs, t_stamps
    weight = np.ones(n)
    budget = np.full(n, max_bounces, dtype=np.int64)

    while pix.size:
        if spheres:
            hit_t, hit_s = _sphere_hits(o, d, spheres)
        else:
            hit_t = np.full(pix.size, np.inf)
            hit_s = np.full(pix.size, -1, dtype=np.int64)
        rec = integrate_rays(scene, octrees, o, d, ts, background=background)
        vol_depth = rec.depth
        sphere_wins = (budget > 0) & (hit_s >= 0) & (np.isnan(vol_depth) | (hit_t < vol_depth))

        # Volume-winning rays: composite color, then sun-shadow the surface point.
        v = ~sphere_wins
        if np.any(v):
            col = rec.out_color[v].copy()
            has_surf = v & ~np.isnan(vol_depth)
            if spheres and np.any(has_surf):
                surf = o[has_surf] + vol_depth[has_surf, None] * d[has_surf]
                sh_t, sh_s = _sphere_hits(surf, np.broadcast_to(sun_dir, surf.shape), spheres)
                occluded = sh_s >= 0
                scale = np.ones(int(v.sum()))
                scale[~np.isnan(vol_depth[v])] = np.where(occluded, SHADOW_FACTOR, 1.0)
                col *= scale[:, None]
            np.add.at(out, pix[v], weight[v, None] * col)

        if not np.any(sphere_wins):
            break

        # Build the next wave from sphere interactions.
        next_pix, next_o, next_d, next_ts, next_w, next_b = [], [], [], [], [], []
        sw = np.flatnonzero(sphere_wins)
        hit_p = o[sw] + hit_t[sw, None] * d[sw]
        for si, sp in enumerate(spheres):
            mask = hit_s[sw] == si
            if not np.any(mask):
                continue
            rows = sw[mask]
            p = hit_p[mask]
            normal = (p - sp.center) / sp.radius
            din = d[rows]
            if sp.material == "opaque":
                np.add.at(out, pix[rows], weight[rows, None] * sp.albedo)
                continue
            if sp.material == "mirror":
                refl = din - 2.0 * np.einsum("ni,ni->n", din, normal)[:, None] * normal
                next_pix.append(pix[rows])
                next_o.append(p + 1e-6 * refl)
                next_d.append(refl)
                next_ts.append(ts[rows])
                next_w.append(weight[rows])
                next_b.append(budget[rows] - 1)
                continue
            # Glass: orient the normal against the incident ray, swap media inside.
            cos_i = -np.einsum("ni,ni->n", din, normal)
            entering = cos_i > 0.0
            n_o = np.where(entering[:, None], normal, -normal)
            cos_i = np.abs(cos_i)
            n1 = np.where(entering, 1.0, sp.ior)
            n2 = np.where(entering, sp.ior, 1.0)
            eta = n1 / n2
            k = 1.0 - eta**2 * (1.0 - cos_i**2)
            tir = k < 0.0
            fres = np.where(
                tir, 1.0,
                np.zeros_like(cos_i) if sp.ior == 1.0
                else ((1.0 - sp.ior) / (1.0 + sp.ior)) ** 2
                + (1.0 - ((1.0 - sp.ior) / (1.0 + sp.ior)) ** 2) * (1.0 - cos_i) ** 5,
            )
            refl = din + 2.0 * cos_i[:, None] * n_o
            refl_w = weight[rows] * fres
            keep = refl_w > 1e-4
            if np.any(keep):
                next_pix.append(pix[rows][keep])
                next_o.append(p[keep] + 1e-6 * refl[keep])
                next_d.append(refl[keep])
                next_ts.append(ts[rows][keep])
                next_w.append(refl_w[keep])
                next_b.append(budget[rows][keep] - 1)
            refr = (eta[:, None] * din
                    + (eta * cos_i - np.sqrt(np.maximum(k, 0.0)))[:, None] * n_o)
            refr_w = weight[rows] * (1.0 - fres)
            keep = (~tir) & (refr_w > 1e-4)
            if np.any(keep):
                rn = refr[keep] / np.linalg.norm(refr[keep], axis=1, keepdims=True)
                next_pix.append(pix[rows][keep])
                next_o.append(p[keep] + 1e-6 * rn)
                next_d.append(rn)
                next_ts.append(ts[rows][keep])
                next_w.append(refr_w[keep])
                next_b.append(budget[rows][keep] - 1)

        if not next_pix:
            break
        pix = np.concatenate(next_pix)
        o = np.concatenate(next_o)
        d = np.concatenate(next_d)
        ts = np.concatenate(next_ts)
        weight = np.concatenate(next_w)
        budget = np.concatenate(next_b)

    return out
