"""FastAPI service wrapping the scene workflows.

The service operates on server-side filesystem paths, which keeps it usable
both as a long-running render server and as the in-process backend of the
CLI.  Domain errors surface as 400s with the underlying message.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__, workflows
from . import schemas


def create_app() -> FastAPI:
    app = FastAPI(title="salf scene service", version=__version__)

    def run(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(version=__version__)

    @app.post("/synthetic", response_model=schemas.MakeSyntheticResponse)
    def synthetic(req: schemas.MakeSyntheticRequest):
        spec = req.spec if req.spec is not None else req.spec_path
        if spec is None:
            raise HTTPException(status_code=400, detail="spec or spec_path required")
        return run(workflows.make_synthetic, spec, req.out_dir)

    @app.post("/scenes/init", response_model=schemas.InitSceneResponse)
    def init_scene(req: schemas.InitSceneRequest):
        return run(
            workflows.init_scene, req.points_path, req.trajectory_path, req.out_dir,
            base_edge=req.base_edge, margin_up=req.margin_up,
            margin_down=req.margin_down, margin_lateral=req.margin_lateral,
            max_levels=req.max_levels, budget=req.budget, seed=req.seed,
            sensors_path=req.sensors_path,
        )

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest):
        config = req.config if req.config is not None else req.config_path
        return run(workflows.train, req.scene_dir, req.data_dir, config, req.out_dir,
                   log_path=req.log_path)

    @app.post("/render", response_model=schemas.RenderResponse)
    def render(req: schemas.RenderRequest):
        return run(workflows.render, req.scene_dir, req.sensor, req.mode, req.time,
                   req.out_path)

    @app.post("/lidar", response_model=schemas.LidarResponse)
    def lidar(req: schemas.LidarRequest):
        return run(workflows.lidar_sweep, req.scene_dir, req.sensor, req.time,
                   req.out_path)

    @app.post("/diff", response_model=schemas.DiffResponse)
    def diff(req: schemas.DiffRequest):
        return run(workflows.diff_images, req.a_path, req.b_path)

    @app.post("/bench", response_model=schemas.BenchResponse)
    def bench(req: schemas.BenchRequest):
        return run(workflows.bench, req.scene_dir, req.resolutions, req.sensor,
                   req.march_rays)

    @app.post("/fx", response_model=schemas.FxResponse)
    def fx(req: schemas.FxRequest):
        return run(workflows.fx, req.scene_dir, req.spheres_path, tuple(req.sun),
                   req.out_path, sensor=req.sensor, time_s=req.time,
                   max_bounces=req.max_bounces)

    return app
