"""Scene container serialization.

A scene is a directory:
  meta.json      format version "salf.v1", bounds, density mode, counts
  voxels.bin     little-endian fixed-layout records for the static set
  actors.json    actor ids, extents, trajectories, per-actor counts
  actor_<id>.bin per-actor voxel records in the same layout
  sensors.json   named camera/LiDAR rigs (optional)

Voxel record layout (121 bytes): u8 level, 3 x i32 ijk, f32 W_s[4],
f32 W_c[3x3], f32 W_sh[3x4], f32 log_a, f32 log_b.  Load/save round-trips
byte-identically; corrupt or truncated files raise with the offending field.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .scene import Actor, Scene, SceneBounds, SparseVoxelSet, make_actor_bounds
from .sensors import EQUIRECT, FISHEYE, PINHOLE, CameraModel, LidarModel

FORMAT_VERSION = "salf.v1"

VOXEL_DTYPE = np.dtype([
    ("level", "u1"),
    ("ijk", "<i4", (3,)),
    ("w_s", "<f4", (4,)),
    ("w_c", "<f4", (3, 3)),
    ("w_sh", "<f4", (3, 4)),
    ("log_a", "<f4"),
    ("log_b", "<f4"),
])


class ContainerError(ValueError):
    pass


def _dump_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _voxels_to_records(vset: SparseVoxelSet) -> np.ndarray:
    rec = np.zeros(vset.n, dtype=VOXEL_DTYPE)
    rec["level"] = vset.level
    rec["ijk"] = vset.ijk
    rec["w_s"] = vset.w_s
    rec["w_c"] = vset.w_c
    rec["w_sh"] = vset.w_sh
    rec["log_a"] = vset.log_a
    rec["log_b"] = vset.log_b
    return rec


def _records_to_voxels(rec: np.ndarray, bounds: SceneBounds, budget: int,
                       name: str) -> SparseVoxelSet:
    for fld in ("w_s", "w_c", "w_sh", "log_a", "log_b"):
        if not np.all(np.isfinite(rec[fld].astype(np.float64))):
            raise ContainerError(f"{name}: non-finite values in field {fld!r}")
    vset = SparseVoxelSet(bounds, budget=budget)
    if rec.size:
        vset.level = rec["level"].astype(np.uint8)
        vset.ijk = rec["ijk"].astype(np.int32)
        vset.w_s = rec["w_s"].astype(np.float64)
        vset.w_c = rec["w_c"].astype(np.float64)
        vset.w_sh = rec["w_sh"].astype(np.float64)
        vset.log_a = rec["log_a"].astype(np.float64)
        vset.log_b = rec["log_b"].astype(np.float64)
        from .rotations import IDENTITY_QUAT
        vset.rotation = np.broadcast_to(IDENTITY_QUAT, (rec.size, 4)).copy()
        vset._lookup = {
            (int(l), int(i), int(j), int(k)): n
            for n, (l, (i, j, k)) in enumerate(zip(vset.level, vset.ijk))
        }
        if len(vset._lookup) != rec.size:
            raise ContainerError(f"{name}: duplicate voxel cells")
    return vset


def _write_voxels(path: Path, vset: SparseVoxelSet) -> None:
    rec = _voxels_to_records(vset)
    for fld in ("w_s", "w_c", "w_sh", "log_a", "log_b"):
        if not np.all(np.isfinite(rec[fld].astype(np.float64))):
            raise ContainerError(f"{path.name}: non-finite values in field {fld!r}")
    path.write_bytes(rec.tobytes())


def _read_voxels(path: Path, count: int, bounds: SceneBounds, budget: int) -> SparseVoxelSet:
    data = path.read_bytes()
    expected = count * VOXEL_DTYPE.itemsize
    if len(data) != expected:
        raise ContainerError(
            f"{path.name}: size mismatch, expected {expected} bytes for "
            f"{count} voxels, got {len(data)}"
        )
    rec = np.frombuffer(data, dtype=VOXEL_DTYPE)
    return _records_to_voxels(rec, bounds, budget, path.name)


def save_scene(scene: Scene, path, sensors: dict | None = None) -> None:
    """Write the scene container; byte-deterministic for fixed inputs."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT_VERSION,
        "bounds": scene.bounds.to_dict(),
        "density_mode": scene.density_mode,
        "voxel_count": scene.static.n,
        "actor_count": len(scene.actors),
        "budget": scene.static.budget,
        "inner_aabb": None if scene.inner_aabb is None
        else [scene.inner_aabb[0].tolist(), scene.inner_aabb[1].tolist()],
    }
    _dump_json(path / "meta.json", meta)
    _write_voxels(path / "voxels.bin", scene.static)

    actors_meta = []
    for actor in scene.actors:
        actors_meta.append({
            "id": actor.actor_id,
            "extents": actor.extents.tolist(),
            "base_edge": actor.voxels.bounds.base_edge,
            "max_levels": actor.voxels.bounds.max_levels,
            "voxel_count": actor.voxels.n,
            "trajectory": [
                {"t": float(t), "position": p.tolist(), "quaternion": q.tolist()}
                for t, p, q in zip(actor.times, actor.positions, actor.quaternions)
            ],
        })
        _write_voxels(path / f"actor_{actor.actor_id}.bin", actor.voxels)
    _dump_json(path / "actors.json", {"actors": actors_meta})
    if sensors is not None:
        _dump_json(path / "sensors.json", {"sensors": sensors})


def load_scene(path) -> Scene:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise ContainerError(f"{path}: missing meta.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("format") != FORMAT_VERSION:
        raise ContainerError(f"unknown container version {meta.get('format')!r}")
    bounds = SceneBounds.from_dict(meta["bounds"])
    budget = int(meta.get("budget", 2_500_000))
    static = _read_voxels(path / "voxels.bin", int(meta["voxel_count"]), bounds, budget)

    actors = []
    actors_meta = json.loads((path / "actors.json").read_text(encoding="utf-8"))["actors"]
    if len(actors_meta) != int(meta["actor_count"]):
        raise ContainerError("actor_count in meta.json disagrees with actors.json")
    for am in actors_meta:
        a_bounds = make_actor_bounds(np.array(am["extents"]), float(am["base_edge"]),
                                     int(am["max_levels"]))
        vset = _read_voxels(path / f"actor_{am['id']}.bin", int(am["voxel_count"]),
                            a_bounds, budget)
        traj = am["trajectory"]
        actors.append(Actor(
            actor_id=str(am["id"]),
            extents=np.array(am["extents"], dtype=np.float64),
            voxels=vset,
            times=np.array([p["t"] for p in traj]),
            positions=np.array([p["position"] for p in traj]),
            quaternions=np.array([p["quaternion"] for p in traj]),
        ))

    inner = meta.get("inner_aabb")
    return Scene(
        bounds=bounds, static=static, actors=actors,
        density_mode=meta["density_mode"],
        inner_aabb=None if inner is None else np.array(inner, dtype=np.float64),
    )


# -- sensor rig serialization -------------------------------------------------


def sensor_to_dict(model) -> dict:
    if isinstance(model, CameraModel):
        return {
            "type": "camera",
            "kind": model.kind,
            "width": model.width,
            "height": model.height,
            "fx": model.fx, "fy": model.fy, "cx": model.cx, "cy": model.cy,
            "distortion": list(model.distortion),
            "position": model.position.tolist(),
            "quaternion": model.quaternion.tolist(),
            "readout_duration": model.readout_duration,
            "linear_velocity": model.linear_velocity.tolist(),
            "angular_velocity": model.angular_velocity.tolist(),
        }
    if isinstance(model, LidarModel):
        return {
            "type": "lidar",
            "beam_elevations": model.beam_elevations.tolist(),
            "azimuth_start": model.azimuth_start,
            "azimuth_end": model.azimuth_end,
            "steps": model.steps,
            "scan_period": model.scan_period,
            "position": model.position.tolist(),
            "quaternion": model.quaternion.tolist(),
            "linear_velocity": model.linear_velocity.tolist(),
            "angular_velocity": model.angular_velocity.tolist(),
        }
    raise TypeError(f"unknown sensor model {type(model)!r}")


def sensor_from_dict(d: dict):
    if d["type"] == "camera":
        if d["kind"] not in (PINHOLE, FISHEYE, EQUIRECT):
            raise ContainerError(f"unknown camera kind {d['kind']!r}")
        return CameraModel(
            kind=d["kind"], width=int(d["width"]), height=int(d["height"]),
            fx=float(d.get("fx", 0.0)), fy=float(d.get("fy", 0.0)),
            cx=float(d.get("cx", 0.0)), cy=float(d.get("cy", 0.0)),
            distortion=tuple(d.get("distortion", (0.0, 0.0, 0.0, 0.0))),
            position=np.array(d["position"], dtype=np.float64),
            quaternion=np.array(d["quaternion"], dtype=np.float64),
            readout_duration=float(d.get("readout_duration", 0.0)),
            linear_velocity=np.array(d.get("linear_velocity", [0, 0, 0]), dtype=np.float64),
            angular_velocity=np.array(d.get("angular_velocity", [0, 0, 0]), dtype=np.float64),
        )
    if d["type"] == "lidar":
        return LidarModel(
            beam_elevations=np.array(d["beam_elevations"], dtype=np.float64),
            azimuth_start=float(d.get("azimuth_start", 0.0)),
            azimuth_end=float(d.get("azimuth_end", 2.0 * np.pi)),
            steps=int(d["steps"]),
            scan_period=float(d["scan_period"]),
            position=np.array(d["position"], dtype=np.float64),
            quaternion=np.array(d["quaternion"], dtype=np.float64),
            linear_velocity=np.array(d.get("linear_velocity", [0, 0, 0]), dtype=np.float64),
            angular_velocity=np.array(d.get("angular_velocity", [0, 0, 0]), dtype=np.float64),
        )
    raise ContainerError(f"unknown sensor type {d.get('type')!r}")


def load_sensors(path) -> dict:
    """Named sensor models from a scene container (empty dict when absent)."""
    p = Path(path) / "sensors.json"
    if not p.exists():
        return {}
    raw = json.loads(p.read_text(encoding="utf-8"))["sensors"]
    return {name: sensor_from_dict(d) for name, d in raw.items()}
