"""Pydantic request/response models for the scene service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str


class MakeSyntheticRequest(BaseModel):
    spec_path: str | None = None  # JSON file, or "standard" for the frozen scene
    spec: dict | None = None  # inline spec (overrides spec_path)
    out_dir: str


class MakeSyntheticResponse(BaseModel):
    out_dir: str
    n_train_views: int
    n_eval_views: int
    n_sweeps: int
    n_points: int


class InitSceneRequest(BaseModel):
    points_path: str
    trajectory_path: str
    out_dir: str
    sensors_path: str | None = None
    base_edge: float = 1.0
    margin_up: float = 10.0
    margin_down: float = 5.0
    margin_lateral: float = 40.0
    max_levels: int = 10
    budget: int = 2_500_000
    seed: int = 0


class InitSceneResponse(BaseModel):
    out_dir: str
    voxel_count: int
    inner_kept: int
    inner_children: int
    shell_counts: list[int]
    inner_aabb: list


class TrainRequest(BaseModel):
    scene_dir: str
    data_dir: str
    out_dir: str
    config_path: str | None = None
    config: dict | None = None  # inline config (overrides config_path)
    log_path: str | None = None


class TrainResponse(BaseModel):
    out_dir: str
    steps: int
    elapsed_seconds: float
    voxels: int
    final: dict | None = None
    eval: dict | None = None


class RenderRequest(BaseModel):
    scene_dir: str
    sensor: str
    mode: str = Field("ray", pattern="^(ray|raster)$")
    time: float = 0.0
    out_path: str


class RenderResponse(BaseModel):
    out: str
    mode: str
    elapsed_seconds: float
    mean_opacity: float


class LidarRequest(BaseModel):
    scene_dir: str
    sensor: str
    time: float = 0.0
    out_path: str


class LidarResponse(BaseModel):
    out: str
    n_rays: int
    n_returns: int


class DiffRequest(BaseModel):
    a_path: str
    b_path: str


class DiffResponse(BaseModel):
    mean_l1: float
    psnr_db: float | None  # None encodes identical images (infinite PSNR)
    ssim: float


class BenchRequest(BaseModel):
    scene_dir: str
    resolutions: list[int]
    sensor: str | None = None
    march_rays: int | None = None


class BenchResponse(BaseModel):
    rows: list[dict]
    march: dict
    text: str


class FxRequest(BaseModel):
    scene_dir: str
    spheres_path: str
    sun: list[float]
    out_path: str
    sensor: str | None = None
    time: float = 0.0
    max_bounces: int = 3


class FxResponse(BaseModel):
    out: str
    n_spheres: int
    max_bounces: int
