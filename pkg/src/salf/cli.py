"""`salf` command line: a thin client of the scene service.

Every subcommand builds a request model and posts it to the service API.
By default the service runs in-process (no network); point --server at a
running `salf serve` instance to drive a remote one.
"""

from __future__ import annotations

import json
import sys

import click


def _client(server: str | None):
    if server:
        import httpx
        return httpx.Client(base_url=server, timeout=None)
    from starlette.testclient import TestClient
    from .service.app import create_app
    return TestClient(create_app())


def _call(ctx, path: str, payload: dict) -> dict:
    with _client(ctx.obj["server"]) as client:
        resp = client.post(path, json=payload)
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except Exception:
            detail = resp.text
        click.echo(f"error: {detail}", err=True)
        sys.exit(1)
    return resp.json()


def _emit(data: dict) -> None:
    click.echo(json.dumps(data, indent=2, sort_keys=True))


@click.group()
@click.option("--server", default=None, envvar="SALF_SERVER",
              help="Base URL of a running salf service (default: in-process).")
@click.pass_context
def main(ctx, server):
    """Sparse local-field scenes: synthesize, train, render, benchmark."""
    ctx.ensure_object(dict)
    ctx.obj["server"] = server


@main.command("make-synthetic")
@click.option("--spec", required=True,
              help="Synthetic scene spec JSON path, or 'standard'.")
@click.option("--out", required=True, help="Output dataset directory.")
@click.pass_context
def make_synthetic(ctx, spec, out):
    """Generate a synthetic dataset with analytic ground truth."""
    _emit(_call(ctx, "/synthetic", {"spec_path": spec, "out_dir": out}))


@main.command("init")
@click.option("--points", required=True, help="Aggregated point cloud (PLY).")
@click.option("--trajectory", required=True, help="Trajectory JSON file.")
@click.option("--out", required=True, help="Output scene container directory.")
@click.option("--sensors", default=None, help="sensors.json to copy into the scene.")
@click.option("--base-edge", default=1.0, show_default=True,
              help="Inner-region voxel edge in meters.")
@click.option("--margin-up", default=10.0, show_default=True)
@click.option("--margin-down", default=5.0, show_default=True)
@click.option("--margin-lateral", default=40.0, show_default=True)
@click.option("--max-levels", default=10, show_default=True)
@click.option("--budget", default=2_500_000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.pass_context
def init(ctx, points, trajectory, out, sensors, base_edge, margin_up, margin_down,
         margin_lateral, max_levels, budget, seed):
    """Initialize a multi-scale scene from points plus a trajectory."""
    _emit(_call(ctx, "/scenes/init", {
        "points_path": points, "trajectory_path": trajectory, "out_dir": out,
        "sensors_path": sensors, "base_edge": base_edge, "margin_up": margin_up,
        "margin_down": margin_down, "margin_lateral": margin_lateral,
        "max_levels": max_levels, "budget": budget, "seed": seed,
    }))


@main.command("train")
@click.option("--scene", required=True, help="Input scene container.")
@click.option("--data", required=True, help="Dataset directory.")
@click.option("--config", default=None, help="Training config JSON file.")
@click.option("--out", required=True, help="Output scene container.")
@click.option("--log", default=None, help="Metrics log path (JSON lines).")
@click.pass_context
def train(ctx, scene, data, config, out, log):
    """Optimize the scene from posed images and LiDAR depth."""
    _emit(_call(ctx, "/train", {
        "scene_dir": scene, "data_dir": data, "config_path": config,
        "out_dir": out, "log_path": log,
    }))


@main.command("render")
@click.option("--scene", required=True)
@click.option("--sensor", required=True, help="Named camera from the scene's rigs.")
@click.option("--mode", type=click.Choice(["ray", "raster"]), default="ray",
              show_default=True)
@click.option("--time", "time_s", default=0.0, show_default=True)
@click.option("--out", required=True, help="Output image (.ppm or .png).")
@click.pass_context
def render(ctx, scene, sensor, mode, time_s, out):
    """Render one camera frame by ray casting or rasterization."""
    _emit(_call(ctx, "/render", {
        "scene_dir": scene, "sensor": sensor, "mode": mode, "time": time_s,
        "out_path": out,
    }))


@main.command("lidar")
@click.option("--scene", required=True)
@click.option("--sensor", required=True, help="Named LiDAR from the scene's rigs.")
@click.option("--time", "time_s", default=0.0, show_default=True)
@click.option("--out", required=True, help="Output point cloud (.ply).")
@click.pass_context
def lidar(ctx, scene, sensor, time_s, out):
    """Simulate one LiDAR sweep and write the returned points."""
    _emit(_call(ctx, "/lidar", {
        "scene_dir": scene, "sensor": sensor, "time": time_s, "out_path": out,
    }))


@main.command("diff")
@click.option("--a", "a_path", required=True)
@click.option("--b", "b_path", required=True)
@click.pass_context
def diff(ctx, a_path, b_path):
    """Mean L1, PSNR, and SSIM between two images."""
    data = _call(ctx, "/diff", {"a_path": a_path, "b_path": b_path})
    if data.get("psnr_db") is None:
        data["psnr_db"] = "inf"
    _emit(data)


@main.command("bench")
@click.option("--scene", required=True)
@click.option("--resolutions", default="256,512,1024", show_default=True,
              help="Comma-separated square resolutions.")
@click.option("--sensor", default=None, help="Pinhole camera to benchmark with.")
@click.option("--march-rays", default=None, type=int,
              help="Subsample the marching benchmark to this many rays.")
@click.pass_context
def bench_cmd(ctx, scene, resolutions, sensor, march_rays):
    """FPS table for both renderers plus octree vs brute-force timings."""
    res = [int(r) for r in resolutions.split(",") if r]
    data = _call(ctx, "/bench", {
        "scene_dir": scene, "resolutions": res, "sensor": sensor,
        "march_rays": march_rays,
    })
    click.echo(data["text"])


@main.command("fx")
@click.option("--scene", required=True)
@click.option("--spheres", required=True, help="Injected spheres JSON file.")
@click.option("--sun", required=True, help="Sun direction 'dx,dy,dz'.")
@click.option("--out", required=True, help="Output image.")
@click.option("--sensor", default=None)
@click.option("--time", "time_s", default=0.0, show_default=True)
@click.option("--max-bounces", default=3, show_default=True)
@click.pass_context
def fx(ctx, scene, spheres, sun, out, sensor, time_s, max_bounces):
    """Secondary-ray demo: reflection, refraction, and sun shadows."""
    sun_vec = [float(v) for v in sun.split(",")]
    _emit(_call(ctx, "/fx", {
        "scene_dir": scene, "spheres_path": spheres, "sun": sun_vec,
        "out_path": out, "sensor": sensor, "time": time_s,
        "max_bounces": max_bounces,
    }))


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8732, show_default=True)
def serve(host, port):
    """Run the scene service over HTTP."""
    import uvicorn
    from .service.app import create_app
    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
