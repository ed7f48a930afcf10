"""Ray generation for cameras (pinhole, equidistant fisheye, equirectangular)
and spinning LiDAR, with optional rolling shutter under first-order ego motion.

Conventions, pinned by tests:
  - camera frame: +z forward, +x right, +y down; pixel centers at
    half-integer coordinates, so pixel (u, v) maps through (u + 0.5, v + 0.5);
  - fisheye: equidistant model theta_d = theta (1 + k1 th^2 + ... + k4 th^8),
    inverted by bisection;
  - equirectangular: u spans a full 360 degree azimuth turn, v spans 180
    degrees of elevation, image center looks along +z;
  - LiDAR: azimuth counter-clockwise from +x with z up in the sensor frame;
  - motion model: constant linear/angular velocity over one exposure/sweep,
    orientation advanced about the sensor origin.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .rotations import IDENTITY_QUAT, axis_angle_matrix, quat_to_matrix

PINHOLE = "pinhole"
FISHEYE = "fisheye_equidistant"
EQUIRECT = "equirect"


@dataclass
class RayBatch:
    """Flat batch of rays with timestamps and (row, col) keys."""

    origins: np.ndarray  # (N, 3)
    dirs: np.ndarray  # (N, 3) unit
    t_stamps: np.ndarray  # (N,)
    keys: np.ndarray  # (N, 2) int: (row, col) or (beam, azimuth step)
    valid: np.ndarray  # (N,) bool
    shape: tuple[int, int]  # (rows, cols)

    @property
    def n(self) -> int:
        return self.origins.shape[0]


@dataclass
class CameraModel:
    kind: str
    width: int
    height: int
    fx: float = 0.0
    fy: float = 0.0
    cx: float = 0.0
    cy: float = 0.0
    distortion: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    quaternion: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    readout_duration: float = 0.0  # 0 = global shutter; rolling is row-major top-to-bottom
    linear_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.kind not in (PINHOLE, FISHEYE, EQUIRECT):
            raise ValueError(f"unknown camera kind {self.kind!r}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be at least 1")
        if self.readout_duration < 0:
            raise ValueError("readout_duration must be non-negative")
        self.position = np.asarray(self.position, dtype=np.float64)
        self.quaternion = np.asarray(self.quaternion, dtype=np.float64)
        self.linear_velocity = np.asarray(self.linear_velocity, dtype=np.float64)
        self.angular_velocity = np.asarray(self.angular_velocity, dtype=np.float64)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)


@dataclass
class LidarModel:
    beam_elevations: np.ndarray  # radians
    azimuth_start: float = 0.0
    azimuth_end: float = 2.0 * np.pi
    steps: int = 360
    scan_period: float = 0.1
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    quaternion: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    linear_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.scan_period <= 0:
            raise ValueError("scan_period must be positive")
        self.beam_elevations = np.atleast_1d(np.asarray(self.beam_elevations, dtype=np.float64))
        self.position = np.asarray(self.position, dtype=np.float64)
        self.quaternion = np.asarray(self.quaternion, dtype=np.float64)
        self.linear_velocity = np.asarray(self.linear_velocity, dtype=np.float64)
        self.angular_velocity = np.asarray(self.angular_velocity, dtype=np.float64)


def _fisheye_forward(theta: np.ndarray, k: tuple[float, float, float, float]) -> np.ndarray:
    t2 = theta * theta
    return theta * (1.0 + t2 * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * k[3]))))


def invert_fisheye(theta_d: np.ndarray, k: tuple[float, float, float, float],
                   theta_max: float = np.pi, iters: int = 88):
    """Solve theta_d = theta (1 + k1 th^2 + ...) by bisection on [0, theta_max].

    Returns (theta, valid); pixels beyond the image circle are invalid.
    """
    theta_d = np.asarray(theta_d, dtype=np.float64)
    valid = (theta_d >= 0) & (theta_d <= _fisheye_forward(np.float64(theta_max), k))
    lo = np.zeros_like(theta_d)
    hi = np.full_like(theta_d, theta_max)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        high = _fisheye_forward(mid, k) >= theta_d
        hi = np.where(high, mid, hi)
        lo = np.where(high, lo, mid)
    return 0.5 * (lo + hi), valid


def _pixel_grid(cam: CameraModel):
    v, u = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    return u.ravel() + 0.5, v.ravel() + 0.5


def gen_camera_rays(cam: CameraModel, t0: float = 0.0) -> RayBatch:
    """Global-shutter ray batch for the camera, one ray per pixel (row-major)."""
    u, v = _pixel_grid(cam)
    n = u.shape[0]
    valid = np.ones(n, dtype=bool)
    if cam.kind == PINHOLE:
        d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones(n)], axis=1)
    elif cam.kind == FISHEYE:
        xn = (u - cam.cx) / cam.fx
        yn = (v - cam.cy) / cam.fy
        theta_d = np.hypot(xn, yn)
        phi = np.arctan2(yn, xn)
        theta, valid = invert_fisheye(theta_d, cam.distortion)
        sin_t = np.sin(theta)
        d_cam = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), np.cos(theta)], axis=1)
    elif cam.kind == EQUIRECT:
        az = 2.0 * np.pi * (u - cam.width / 2.0) / cam.width
        el = -np.pi * (v - cam.height / 2.0) / cam.height
        d_cam = np.stack([np.sin(az) * np.cos(el), -np.sin(el), np.cos(az) * np.cos(el)], axis=1)
    else:  # pragma: no cover - guarded in __post_init__
        raise ValueError(cam.kind)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    dirs = d_cam @ cam.rotation_matrix().T
    rows = np.repeat(np.arange(cam.height), cam.width)
    cols = np.tile(np.arange(cam.width), cam.height)
    return RayBatch(
        origins=np.broadcast_to(cam.position, (n, 3)).copy(),
        dirs=dirs,
        t_stamps=np.full(n, float(t0)),
        keys=np.stack([rows, cols], axis=1).astype(np.int64),
        valid=valid,
        shape=(cam.height, cam.width),
    )


def apply_rolling_shutter(batch: RayBatch, cam: CameraModel) -> RayBatch:
    """Per-row capture times plus first-order rigid motion of the sensor.

    Row v fires at t0 + readout * v / (height - 1); the origin advances with
    the linear velocity and the orientation rotates about the sensor origin
    with the angular velocity.  Zero readout returns the batch unchanged.
    """
    if cam.readout_duration == 0.0:
        return batch
    t0 = batch.t_stamps[0]
    rows = batch.keys[:, 0].astype(np.float64)
    frac = rows / (cam.height - 1) if cam.height > 1 else np.zeros_like(rows)
    dt = cam.readout_duration * frac
    origins = batch.origins + dt[:, None] * cam.linear_velocity
    dirs = batch.dirs
    if np.any(cam.angular_velocity != 0.0):
        rot = axis_angle_matrix(dt[:, None] * cam.angular_velocity)
        dirs = np.einsum("nij,nj->ni", rot, dirs)
    return replace(batch, origins=origins, dirs=dirs, t_stamps=t0 + dt)


def camera_rays(cam: CameraModel, t0: float = 0.0) -> RayBatch:
    """Rays for rendering: global-shutter generation plus the configured shutter."""
    batch = gen_camera_rays(cam, t0)
    if cam.readout_duration > 0.0:
        batch = apply_rolling_shutter(batch, cam)
    return batch


def gen_lidar_rays(lidar: LidarModel, t0: float = 0.0) -> RayBatch:
    """Spinning-LiDAR batch (beams x azimuth steps), each step timestamped.

    Azimuth step j fires at t0 + scan_period * j / steps; the mount pose is
    advanced by the ego velocities to each firing time.
    """
    n_beams = lidar.beam_elevations.shape[0]
    steps = lidar.steps
    j = np.arange(steps, dtype=np.float64)
    az = lidar.azimuth_start + (lidar.azimuth_end - lidar.azimuth_start) * j / steps
    dt = lidar.scan_period * j / steps

    el = lidar.beam_elevations[:, None]
    azg = az[None, :]
    d_sensor = np.stack(
        [np.cos(el) * np.cos(azg), np.cos(el) * np.sin(azg),
         np.broadcast_to(np.sin(el), (n_beams, steps))],
        axis=2,
    ).reshape(-1, 3)

    r0 = quat_to_matrix(lidar.quaternion)
    dt_flat = np.tile(dt, n_beams)
    if np.any(lidar.angular_velocity != 0.0):
        rot = axis_angle_matrix(dt_flat[:, None] * lidar.angular_velocity)
        rmats = np.einsum("nij,jk->nik", rot, r0)
        dirs = np.einsum("nij,nj->ni", rmats, d_sensor)
    else:
        dirs = d_sensor @ r0.T
    origins = lidar.position + dt_flat[:, None] * lidar.linear_velocity

    beams = np.repeat(np.arange(n_beams), steps)
    step_idx = np.tile(np.arange(steps), n_beams)
    return RayBatch(
        origins=origins,
        dirs=dirs,
        t_stamps=t0 + dt_flat,
        keys=np.stack([beams, step_idx], axis=1).astype(np.int64),
        valid=np.ones(n_beams * steps, dtype=bool),
        shape=(n_beams, steps),
    )


def pinhole_project(cam: CameraModel, points_world: np.ndarray):
    """Project world points; returns pixel-center coordinates (u, v) and camera z.

    Shared by the rasterizer and the ray-generation round-trip tests.
    """
    points_world = np.atleast_2d(np.asarray(points_world, dtype=np.float64))
    p_cam = (points_world - cam.position) @ cam.rotation_matrix()
    z = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * p_cam[:, 0] / z + cam.cx
        v = cam.fy * p_cam[:, 1] / z + cam.cy
    return u, v, z
