"""High-level operations behind the service endpoints and the CLI.

Every function takes and returns plain JSON-compatible values plus
filesystem paths (the service operates on server-side paths), so the HTTP
layer stays a thin veneer.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .bench import format_bench, run_bench
from .container import load_scene, load_sensors, save_scene, sensor_from_dict
from .densify import InitConfig, init_multiscale
from .imaging import (image_metrics, median_range_error, psnr, read_image, read_ply,
                      ssim, write_image, write_ply)
from .render_raster import rasterize_scene
from .render_ray import (InjectedSphere, build_scene_octrees, render_lidar_ranges,
                         render_rays_image, trace_effects)
from .sensors import CameraModel, LidarModel, camera_rays, gen_lidar_rays
from .synthetic import SyntheticSceneSpec, generate_dataset, standard_scene_spec
from .trainer import RayDataset, TrainConfig, train_loop


def _finite(x: float) -> float | None:
    return float(x) if np.isfinite(x) else None


def make_synthetic(spec: dict | str | Path, out_dir) -> dict:
    """Generate a synthetic dataset; `spec` is a dict, a JSON path, or 'standard'."""
    if isinstance(spec, (str, Path)) and str(spec) == "standard":
        parsed = standard_scene_spec()
    elif isinstance(spec, dict):
        parsed = SyntheticSceneSpec.from_dict(spec)
    else:
        parsed = SyntheticSceneSpec.from_dict(
            json.loads(Path(spec).read_text(encoding="utf-8")))
    return generate_dataset(parsed, out_dir)


def init_scene(points_path, trajectory_path, out_dir, *, base_edge: float = 1.0,
               margin_up: float = 10.0, margin_down: float = 5.0,
               margin_lateral: float = 40.0, max_levels: int = 10,
               budget: int = 2_500_000, seed: int = 0,
               sensors_path=None) -> dict:
    points = read_ply(points_path)
    traj = json.loads(Path(trajectory_path).read_text(encoding="utf-8"))
    positions = np.array([p["position"] for p in traj["poses"]], dtype=np.float64)
    extents = np.array(traj.get("box_extents", [1.0, 1.0, 1.0]), dtype=np.float64)
    cfg = InitConfig(base_edge=base_edge, margin_up=margin_up, margin_down=margin_down,
                     margin_lateral=margin_lateral, max_levels=max_levels,
                     budget=budget, seed=seed)
    scene, summary = init_multiscale(points, positions, extents, cfg)
    sensors = None
    if sensors_path is not None:
        sensors = json.loads(Path(sensors_path).read_text(encoding="utf-8"))["sensors"]
    save_scene(scene, out_dir, sensors=sensors)
    summary["out_dir"] = str(out_dir)
    return summary


def train(scene_dir, data_dir, config: dict | str | Path | None, out_dir,
          log_path=None) -> dict:
    scene = load_scene(scene_dir)
    dataset = RayDataset.from_dir(data_dir)
    if config is None:
        cfg = TrainConfig()
    elif isinstance(config, dict):
        cfg = TrainConfig.from_dict(config)
    else:
        cfg = TrainConfig.from_dict(json.loads(Path(config).read_text(encoding="utf-8")))
    t0 = time.perf_counter()
    metrics = train_loop(scene, dataset, cfg, log_file=log_path)
    elapsed = time.perf_counter() - t0

    sensors_file = Path(scene_dir) / "sensors.json"
    sensors = None
    if sensors_file.exists():
        sensors = json.loads(sensors_file.read_text(encoding="utf-8"))["sensors"]
    save_scene(scene, out_dir, sensors=sensors)

    summary = {
        "out_dir": str(out_dir),
        "steps": cfg.steps,
        "elapsed_seconds": elapsed,
        "voxels": scene.static.n,
        "final": metrics[-1] if metrics else None,
    }
    if dataset.eval_views:
        summary["eval"] = evaluate_scene(scene, dataset)
    return summary


def evaluate_scene(scene, dataset: RayDataset) -> dict:
    """Held-out PSNR/SSIM and median LiDAR range error."""
    octrees = build_scene_octrees(scene)
    psnrs, ssims = [], []
    for cam, gt in dataset.eval_views:
        color, _op, _d = render_rays_image(scene, octrees, camera_rays(cam))
        psnrs.append(psnr(color, gt))
        ssims.append(ssim(color, gt))
    out = {"psnr_db": float(np.mean(psnrs)), "ssim": float(np.mean(ssims))}
    errs = []
    for lidar, gt_ranges in dataset.eval_sweeps:
        ranges = render_lidar_ranges(scene, octrees, gen_lidar_rays(lidar))
        errs.append(median_range_error(ranges, gt_ranges))
    if errs:
        out["lidar_median_error_m"] = float(np.median(errs))
    return out


def _named_sensor(scene_dir, name: str):
    sensors = load_sensors(scene_dir)
    if name not in sensors:
        raise KeyError(f"sensor {name!r} not found; available: {sorted(sensors)}")
    return sensors[name]


def render(scene_dir, sensor: str, mode: str, time_s: float, out_path) -> dict:
    scene = load_scene(scene_dir)
    cam = _named_sensor(scene_dir, sensor)
    if not isinstance(cam, CameraModel):
        raise ValueError(f"sensor {sensor!r} is not a camera")
    t0 = time.perf_counter()
    if mode == "ray":
        octrees = build_scene_octrees(scene)
        color, opacity, _depth = render_rays_image(scene, octrees, camera_rays(cam, time_s))
    elif mode == "raster":
        fb = rasterize_scene(scene, cam, time_s)
        color, opacity = fb.color, fb.opacity
    else:
        raise ValueError(f"unknown render mode {mode!r} (expected 'ray' or 'raster')")
    elapsed = time.perf_counter() - t0
    write_image(out_path, color)
    return {"out": str(out_path), "mode": mode, "elapsed_seconds": elapsed,
            "mean_opacity": float(opacity.mean())}


def lidar_sweep(scene_dir, sensor: str, time_s: float, out_path) -> dict:
    scene = load_scene(scene_dir)
    lidar = _named_sensor(scene_dir, sensor)
    if not isinstance(lidar, LidarModel):
        raise ValueError(f"sensor {sensor!r} is not a LiDAR")
    octrees = build_scene_octrees(scene)
    batch = gen_lidar_rays(lidar, time_s)
    ranges = render_lidar_ranges(scene, octrees, batch).ravel()
    hit = np.isfinite(ranges)
    points = batch.origins[hit] + ranges[hit, None] * batch.dirs[hit]
    write_ply(out_path, points)
    return {"out": str(out_path), "n_rays": int(batch.n), "n_returns": int(hit.sum())}


def diff_images(a_path, b_path) -> dict:
    a = read_image(a_path)
    b = read_image(b_path)
    m = image_metrics(a, b)
    return {"mean_l1": m["mean_l1"], "psnr_db": _finite(m["psnr_db"]), "ssim": m["ssim"]}


def bench(scene_dir, resolutions: list[int], sensor: str | None = None,
          march_rays: int | None = None) -> dict:
    scene = load_scene(scene_dir)
    sensors = load_sensors(scene_dir)
    cam = None
    if sensor is not None:
        cam = sensors.get(sensor)
    else:
        for model in sensors.values():
            if isinstance(model, CameraModel) and model.kind == "pinhole":
                cam = model
                break
    if not isinstance(cam, CameraModel):
        raise ValueError("no pinhole camera available for benchmarking")
    result = run_bench(scene, cam, resolutions, march_rays=march_rays)
    result["text"] = format_bench(result)
    return result


def fx(scene_dir, spheres_path, sun: tuple, out_path, sensor: str | None = None,
       time_s: float = 0.0, max_bounces: int = 3) -> dict:
    scene = load_scene(scene_dir)
    sensors = load_sensors(scene_dir)
    if sensor is None:
        sensor = next((n for n, m in sensors.items()
                       if isinstance(m, CameraModel) and m.kind == "pinhole"), None)
        if sensor is None:
            raise ValueError("no pinhole camera available for the effects demo")
    cam = sensors[sensor]
    spec = json.loads(Path(spheres_path).read_text(encoding="utf-8"))
    spheres = [
        InjectedSphere(
            center=np.array(s["center"], dtype=np.float64), radius=float(s["radius"]),
            material=s["material"], ior=float(s.get("ior", 1.5)),
            albedo=np.array(s.get("albedo", [0.5, 0.5, 0.5]), dtype=np.float64),
        )
        for s in spec["spheres"]
    ]
    octrees = build_scene_octrees(scene)
    batch = camera_rays(cam, time_s)
    color = trace_effects(scene, octrees, batch.origins, batch.dirs, batch.t_stamps,
                          spheres, np.asarray(sun, dtype=np.float64), max_bounces)
    img = color.reshape(cam.height, cam.width, 3)
    write_image(out_path, np.clip(img, 0.0, 1.0))
    return {"out": str(out_path), "n_spheres": len(spheres), "max_bounces": max_bounces}
