"""Training loop: batched ray rendering, losses, analytic backward, Adam,
and scheduled densification/pruning.

Given a fixed seed the whole run is deterministic: batch sampling comes from
one generator, and every reduction (scatter-adds, compositing scans) is
ordered numpy work.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backward import backward_records
from .container import sensor_from_dict
from .densify import DensifyConfig, densify_and_prune
from .imaging import read_ppm
from .losses import (loss_color, loss_depth, loss_eikonal, loss_empty,
                     loss_opacity_lidar, loss_smooth)
from .optim import AdamConfig, AdamState, adam_step, scene_params
from .render_ray import build_scene_octrees, integrate_rays
from .scene import Scene
from .sensors import gen_camera_rays, gen_lidar_rays


@dataclass
class LossWeights:
    color: float = 1.0
    depth: float = 10.0
    eikonal: float = 0.1
    smooth: float = 3.0
    opacity: float = 10.0
    empty: float = 0.1


@dataclass
class TrainConfig:
    steps: int = 3200
    batch_rays: int = 4096
    batch_lidar: int = 1024
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    adam: AdamConfig = field(default_factory=AdamConfig)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    log_every: int = 25

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        adam = AdamConfig(**d.pop("adam", {}))
        densify = DensifyConfig(**d.pop("densify", {}))
        weights = LossWeights(**d.pop("weights", {}))
        known = set(cls.__dataclass_fields__) - {"adam", "densify", "weights"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown training config fields: {sorted(extra)}")
        if "background" in d:
            d["background"] = tuple(d["background"])
        return cls(adam=adam, densify=densify, weights=weights, **d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RayDataset:
    """Flattened supervision: camera rays with colors, LiDAR rays with ranges,
    and the aggregate point cloud."""

    cam_origins: np.ndarray
    cam_dirs: np.ndarray
    cam_colors: np.ndarray
    lidar_origins: np.ndarray
    lidar_dirs: np.ndarray
    lidar_ranges: np.ndarray
    points: np.ndarray
    eval_views: list = field(default_factory=list)  # (camera, gt image) pairs
    eval_sweeps: list = field(default_factory=list)  # (lidar, gt ranges) pairs

    @classmethod
    def from_dir(cls, path) -> "RayDataset":
        path = Path(path)
        meta = json.loads((path / "dataset.json").read_text(encoding="utf-8"))
        sensors = json.loads((path / "sensors.json").read_text(encoding="utf-8"))["sensors"]
        cam_o, cam_d, cam_rgb = [], [], []
        eval_views = []
        for view in meta["views"]:
            cam = sensor_from_dict(sensors[view["sensor"]])
            img = read_ppm(path / view["image"])
            if view["split"] == "train":
                batch = gen_camera_rays(cam)
                cam_o.append(batch.origins)
                cam_d.append(batch.dirs)
                cam_rgb.append(img.reshape(-1, 3))
            else:
                eval_views.append((cam, img))
        lid_o, lid_d, lid_rng = [], [], []
        eval_sweeps = []
        points = []
        for sweep in meta["sweeps"]:
            lidar = sensor_from_dict(sensors[sweep["sensor"]])
            ranges = np.load(path / sweep["ranges"]).astype(np.float64)
            batch = gen_lidar_rays(lidar)
            lid_o.append(batch.origins)
            lid_d.append(batch.dirs)
            lid_rng.append(ranges.ravel())
            eval_sweeps.append((lidar, ranges))
            hit = np.isfinite(ranges.ravel())
            points.append(batch.origins[hit] + ranges.ravel()[hit, None] * batch.dirs[hit])

        def cat(parts, width):
            return np.concatenate(parts) if parts else np.zeros((0, width) if width else 0)

        return cls(
            cam_origins=cat(cam_o, 3), cam_dirs=cat(cam_d, 3), cam_colors=cat(cam_rgb, 3),
            lidar_origins=cat(lid_o, 3), lidar_dirs=cat(lid_d, 3),
            lidar_ranges=cat(lid_rng, 0),
            points=cat(points, 3),
            eval_views=eval_views, eval_sweeps=eval_sweeps,
        )


def train_loop(scene: Scene, dataset: RayDataset, cfg: TrainConfig,
               log_file=None) -> list[dict]:
    """Optimize the scene in place; returns the per-log-step metric records."""
    rng = np.random.default_rng(cfg.seed)
    octrees = build_scene_octrees(scene)
    owners = [("static", scene.static)] + [(a.actor_id, a.voxels) for a in scene.actors]
    states = {name: AdamState.for_params(scene_params(v)) for name, v in owners}
    grad_acc = np.zeros(scene.static.n)
    outer_idx = np.flatnonzero(scene.outer_voxel_mask())
    bg = np.asarray(cfg.background, dtype=np.float64)

    n_cam = dataset.cam_origins.shape[0]
    n_lid = dataset.lidar_origins.shape[0]
    n_pts = dataset.points.shape[0]
    if n_cam == 0:
        raise ValueError("dataset has no training camera rays")
    densify_stop = int(cfg.densify.stop_fraction * cfg.steps)

    metrics: list[dict] = []
    log_fh = open(log_file, "w", encoding="utf-8") if log_file else None
    try:
        for step in range(cfg.steps):
            ci = rng.integers(0, n_cam, cfg.batch_rays)
            li = rng.integers(0, n_lid, cfg.batch_lidar) if n_lid else np.zeros(0, dtype=np.int64)
            origins = np.concatenate([dataset.cam_origins[ci], dataset.lidar_origins[li]])
            dirs = np.concatenate([dataset.cam_dirs[ci], dataset.lidar_dirs[li]])
            cam_mask = np.zeros(origins.shape[0], dtype=bool)
            cam_mask[:ci.size] = True

            records = integrate_rays(scene, octrees, origins, dirs, background=bg)

            w = cfg.weights
            l_color, d_color = loss_color(records, dataset.cam_colors[ci], cam_mask)
            l_depth, d_depth = loss_depth(records, dataset.lidar_ranges[li], ~cam_mask)
            grads = backward_records(records, scene, w.color * d_color, w.depth * d_depth)

            sg = grads["static"]
            n_vox = scene.static.n
            vox_sample = rng.integers(0, n_vox, min(n_vox, cfg.batch_rays))
            l_eik, g = loss_eikonal(scene.static, vox_sample)
            sg["w_s"] += w.eikonal * g["w_s"]
            l_smooth, g = loss_smooth(scene.static, octrees.static, np.unique(vox_sample))
            for k, v in g.items():
                sg[k] += w.smooth * v
            if n_pts:
                pi = rng.integers(0, n_pts, min(n_pts, cfg.batch_rays))
                l_opac, g = loss_opacity_lidar(scene.static, octrees.static,
                                               dataset.points[pi], scene.density_mode)
                for k, v in g.items():
                    sg[k] += w.opacity * v
            else:
                l_opac = 0.0
            if outer_idx.size:
                oi = outer_idx[rng.integers(0, outer_idx.size,
                                            min(outer_idx.size, cfg.batch_rays))]
                l_empty, g = loss_empty(scene.static, np.unique(oi), scene.density_mode)
                for k, v in g.items():
                    sg[k] += w.empty * v
            else:
                l_empty = 0.0

            total = (w.color * l_color + w.depth * l_depth + w.eikonal * l_eik
                     + w.smooth * l_smooth + w.opacity * l_opac + w.empty * l_empty)
            if not np.isfinite(total):
                raise RuntimeError(f"training diverged at step {step}: loss={total}")

            grad_acc += np.linalg.norm(sg["w_c"].reshape(n_vox, -1), axis=1)
            lr = 0.0
            for name, vset in owners:
                lr = adam_step(scene_params(vset), grads[name], states[name], cfg.adam)

            if (cfg.densify.interval > 0 and step + 1 < densify_stop
                    and (step + 1) % cfg.densify.interval == 0):
                new_set, keep_idx, n_split = densify_and_prune(
                    scene.static, grad_acc, cfg.densify, scene.density_mode)
                scene.static = new_set
                states["static"].remap(keep_idx, n_split)
                octrees = build_scene_octrees(scene)
                grad_acc = np.zeros(scene.static.n)
                outer_idx = np.flatnonzero(scene.outer_voxel_mask())
                owners[0] = ("static", scene.static)

            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                rec = {
                    "step": step, "lr": lr, "loss_total": float(total),
                    "loss_color": float(l_color), "loss_depth": float(l_depth),
                    "loss_eikonal": float(l_eik), "loss_smooth": float(l_smooth),
                    "loss_opacity": float(l_opac), "loss_empty": float(l_empty),
                    "voxels": int(scene.static.n),
                }
                metrics.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    return metrics
