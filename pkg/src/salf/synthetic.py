"""Synthetic desk-scale scenes and their analytic ground-truth oracle.

The oracle is a closed-form ray tracer over flat-colored primitives
(axis-aligned boxes, spheres, a rectangular ground plane): nearest hit wins,
the hit primitive's albedo is returned as-is, misses composite to the
background.  It deliberately never touches the voxel scene, octree, or
renderer code paths, so trained renders can be validated against it.

``generate_dataset`` emits everything training and evaluation need: posed
ground-truth images and depth maps, LiDAR sweeps with ranges and per-sweep
point clouds, the aggregate point cloud, a trajectory file for scene
initialization, and the named sensor rigs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import sensor_to_dict
from .imaging import write_ply, write_ppm
from .sensors import CameraModel, LidarModel, PINHOLE, gen_camera_rays, gen_lidar_rays


@dataclass
class SyntheticSceneSpec:
    seed: int = 42
    background: tuple = (0.0, 0.0, 0.0)
    boxes: list = field(default_factory=list)  # {min, max, color}
    spheres: list = field(default_factory=list)  # {center, radius, color}
    ground: dict | None = None  # {z, x_range, y_range, color}
    camera: dict = field(default_factory=dict)  # width, height, fov_deg
    n_train_views: int = 32
    n_eval_views: int = 8
    view_radius: float = 6.0
    view_height: float = 2.0
    look_at: tuple = (0.0, 0.0, 0.5)
    lidar: dict = field(default_factory=dict)  # beams, steps, elevation range
    n_sweeps: int = 4
    sweep_radius: float = 1.5
    sweep_height: float = 1.2

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown synthetic spec fields: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "background": list(self.background),
            "boxes": self.boxes, "spheres": self.spheres, "ground": self.ground,
            "camera": self.camera,
            "n_train_views": self.n_train_views, "n_eval_views": self.n_eval_views,
            "view_radius": self.view_radius, "view_height": self.view_height,
            "look_at": list(self.look_at),
            "lidar": self.lidar, "n_sweeps": self.n_sweeps,
            "sweep_radius": self.sweep_radius, "sweep_height": self.sweep_height,
        }

    def validate_inside(self, lo, hi) -> None:
        for b in self.boxes:
            if np.any(np.array(b["min"]) < lo) or np.any(np.array(b["max"]) > hi):
                raise ValueError("box primitive outside the scene bounds")
        for s in self.spheres:
            c, r = np.array(s["center"]), s["radius"]
            if np.any(c - r < lo) or np.any(c + r > hi):
                raise ValueError("sphere primitive outside the scene bounds")


def standard_scene_spec(seed: int = 42) -> SyntheticSceneSpec:
    """The frozen desk-scale scene used throughout the acceptance suite."""
    return SyntheticSceneSpec(
        seed=seed,
        boxes=[
            {"min": [-1.2, -1.4, 0.0], "max": [-0.2, -0.4, 1.0], "color": [0.85, 0.15, 0.1]},
            {"min": [0.3, -0.3, 0.0], "max": [1.3, 0.9, 0.7], "color": [0.1, 0.6, 0.85]},
            {"min": [-0.9, 0.5, 0.0], "max": [-0.1, 1.3, 1.4], "color": [0.9, 0.75, 0.1]},
        ],
        spheres=[
            {"center": [0.9, -1.0, 0.35], "radius": 0.35, "color": [0.2, 0.8, 0.25]},
        ],
        ground={"z": 0.0, "x_range": [-2.5, 2.5], "y_range": [-2.5, 2.5],
                "color": [0.45, 0.42, 0.4]},
        camera={"width": 128, "height": 128, "fov_deg": 55.0},
        n_train_views=32, n_eval_views=8,
        view_radius=4.2, view_height=2.2, look_at=(0.0, 0.0, 0.4),
        lidar={"beams": 24, "steps": 720, "elevation_min": -0.9, "elevation_max": 0.25},
        n_sweeps=4, sweep_radius=1.6, sweep_height=1.3,
    )


# -- analytic oracle ----------------------------------------------------------


def _hit_boxes(origins, dirs, bmin, bmax):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (bmin - origins) * inv
        t1 = (bmax - origins) * inv
    near = np.minimum(t0, t1)
    far = np.maximum(t0, t1)
    zero = dirs == 0.0
    inside = (origins >= bmin) & (origins <= bmax)
    near = np.where(zero, np.where(inside, -np.inf, np.inf), near)
    far = np.where(zero, np.where(inside, np.inf, -np.inf), far)
    t_in = near.max(axis=-1)
    t_out = far.min(axis=-1)
    t = np.where(t_in > 1e-9, t_in, t_out)
    return np.where((t_out >= t_in) & (t > 1e-9), t, np.inf)


def trace_oracle(spec: SyntheticSceneSpec, origins: np.ndarray, dirs: np.ndarray):
    """Nearest-hit flat shading: returns (color (N,3), range (N,), hit (N,))."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    color = np.tile(np.asarray(spec.background, dtype=np.float64), (n, 1))

    def consider(t, albedo):
        closer = t < best_t
        best_t[closer] = t[closer]
        color[closer] = albedo

    for b in spec.boxes:
        t = _hit_boxes(origins, dirs, np.array(b["min"]), np.array(b["max"]))
        consider(t, np.array(b["color"], dtype=np.float64))
    for s in spec.spheres:
        oc = origins - np.array(s["center"], dtype=np.float64)
        bq = np.einsum("ni,ni->n", oc, dirs)
        cq = np.einsum("ni,ni->n", oc, oc) - s["radius"] ** 2
        disc = bq * bq - cq
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t_near = -bq - sq
        t_far = -bq + sq
        t = np.where(t_near > 1e-9, t_near, t_far)
        t = np.where(ok & (t > 1e-9), t, np.inf)
        consider(t, np.array(s["color"], dtype=np.float64))
    if spec.ground is not None:
        g = spec.ground
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (g["z"] - origins[:, 2]) / dz
        p = origins + t[:, None] * dirs
        ok = ((dz != 0.0) & (t > 1e-9)
              & (p[:, 0] >= g["x_range"][0]) & (p[:, 0] <= g["x_range"][1])
              & (p[:, 1] >= g["y_range"][0]) & (p[:, 1] <= g["y_range"][1]))
        consider(np.where(ok, t, np.inf), np.array(g["color"], dtype=np.float64))

    hit = np.isfinite(best_t)
    return color, np.where(hit, best_t, np.nan), hit


# -- rig construction ---------------------------------------------------------


def look_at_quaternion(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world quaternion: +z toward target, +y down, +x right."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking straight up/down: pick an arbitrary right
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(fwd, right)
    rmat = np.stack([right, down, fwd], axis=1)
    return _matrix_to_quat(rmat)


def _matrix_to_quat(m: np.ndarray) -> np.ndarray:
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        return np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                         (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    i = int(np.argmax(np.diag(m)))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = np.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 1e-12)) * 2
    q = np.zeros(4)
    q[0] = (m[k, j] - m[j, k]) / s
    q[1 + i] = 0.25 * s
    q[1 + j] = (m[j, i] + m[i, j]) / s
    q[1 + k] = (m[k, i] + m[i, k]) / s
    return q / np.linalg.norm(q)


def _make_camera(spec: SyntheticSceneSpec, position, target) -> CameraModel:
    cam = spec.camera
    width = int(cam.get("width", 128))
    height = int(cam.get("height", 128))
    fov = float(cam.get("fov_deg", 55.0)) * np.pi / 180.0
    f = 0.5 * width / np.tan(0.5 * fov)
    return CameraModel(
        kind=PINHOLE, width=width, height=height,
        fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
        position=np.asarray(position, dtype=np.float64),
        quaternion=look_at_quaternion(position, target),
    )


def view_cameras(spec: SyntheticSceneSpec):
    """Train and eval camera rings (eval views sit between train azimuths)."""
    target = np.asarray(spec.look_at, dtype=np.float64)
    train, evals = [], []
    n_t = spec.n_train_views
    for i in range(n_t):
        ang = 2.0 * np.pi * i / n_t
        pos = np.array([spec.view_radius * np.cos(ang), spec.view_radius * np.sin(ang),
                        spec.view_height])
        train.append(_make_camera(spec, pos, target))
    for i in range(spec.n_eval_views):
        ang = 2.0 * np.pi * (i + 0.5) / max(spec.n_eval_views, 1)
        pos = np.array([spec.view_radius * np.cos(ang), spec.view_radius * np.sin(ang),
                        spec.view_height * 1.1])
        evals.append(_make_camera(spec, pos, target))
    return train, evals


def sweep_lidars(spec: SyntheticSceneSpec):
    cfg = spec.lidar
    beams = int(cfg.get("beams", 16))
    elevations = np.linspace(float(cfg.get("elevation_min", -0.8)),
                             float(cfg.get("elevation_max", 0.2)), beams)
    out = []
    for i in range(spec.n_sweeps):
        ang = 2.0 * np.pi * i / max(spec.n_sweeps, 1)
        pos = np.array([spec.sweep_radius * np.cos(ang), spec.sweep_radius * np.sin(ang),
                        spec.sweep_height])
        out.append(LidarModel(
            beam_elevations=elevations,
            steps=int(cfg.get("steps", 720)),
            scan_period=float(cfg.get("scan_period", 0.1)),
            position=pos,
        ))
    return out


def generate_dataset(spec: SyntheticSceneSpec, out_dir) -> dict:
    """Render the oracle dataset to a directory; returns a summary."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    (out / "lidar").mkdir(exist_ok=True)

    train_cams, eval_cams = view_cameras(spec)
    views = []
    sensors = {}
    for split, cams in (("train", train_cams), ("eval", eval_cams)):
        for i, cam in enumerate(cams):
            name = f"{split}_{i:03d}"
            batch = gen_camera_rays(cam)
            color, rng, _hit = trace_oracle(spec, batch.origins, batch.dirs)
            img = color.reshape(cam.height, cam.width, 3)
            depth = rng.reshape(cam.height, cam.width)
            write_ppm(out / "images" / f"{name}.ppm", img)
            np.save(out / "depth" / f"{name}.npy", depth.astype(np.float32))
            views.append({"name": name, "split": split,
                          "image": f"images/{name}.ppm", "depth": f"depth/{name}.npy",
                          "sensor": f"cam_{name}"})
            sensors[f"cam_{name}"] = sensor_to_dict(cam)

    sweeps = []
    all_points = []
    for i, lidar in enumerate(sweep_lidars(spec)):
        name = f"sweep_{i:03d}"
        batch = gen_lidar_rays(lidar)
        _color, rng, hit = trace_oracle(spec, batch.origins, batch.dirs)
        ranges = np.where(hit, rng, np.nan).reshape(batch.shape)
        np.save(out / "lidar" / f"{name}.npy", ranges.astype(np.float32))
        pts = batch.origins[hit] + rng[hit, None] * batch.dirs[hit]
        write_ply(out / "lidar" / f"{name}.ply", pts)
        all_points.append(pts)
        sweeps.append({"name": name, "ranges": f"lidar/{name}.npy",
                       "points": f"lidar/{name}.ply", "sensor": f"lidar_{name}"})
        sensors[f"lidar_{name}"] = sensor_to_dict(lidar)

    points = np.concatenate(all_points) if all_points else np.zeros((0, 3))
    write_ply(out / "points.ply", points)

    # Trajectory for scene initialization: the sweep mounts, stamped in order.
    lidars = sweep_lidars(spec)
    trajectory = {
        "box_extents": [0.6, 0.6, 0.6],
        "poses": [
            {"t": float(i), "position": l.position.tolist(),
             "quaternion": l.quaternion.tolist()}
            for i, l in enumerate(lidars)
        ],
    }
    (out / "trajectory.json").write_text(
        json.dumps(trajectory, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    dataset = {
        "spec": spec.to_dict(),
        "background": list(spec.background),
        "views": views,
        "sweeps": sweeps,
    }
    (out / "dataset.json").write_text(
        json.dumps(dataset, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "sensors.json").write_text(
        json.dumps({"sensors": sensors}, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    return {
        "out_dir": str(out),
        "n_train_views": len(train_cams),
        "n_eval_views": len(eval_cams),
        "n_sweeps": len(sweeps),
        "n_points": int(points.shape[0]),
    }
