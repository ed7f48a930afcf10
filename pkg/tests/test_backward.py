import numpy as np
import pytest

from fd_fixture import analytic_gradients, build_fixture, kink_voxels, total_loss
from oracles import finite_difference
from salf.backward import backward_records
from salf.render_ray import build_scene_octrees, integrate_rays
from salf.scene import Scene, SceneBounds, SparseVoxelSet


def rel_err(a, f):
    return abs(a - f) / max(abs(a), abs(f), 1e-6)


class TestFiniteDifferences:
    def test_spot_check_all_classes(self):
        fx = build_fixture(n_voxels=5, n_rays=20, seed=6)
        grads, rec = analytic_gradients(fx)
        skip = kink_voxels(rec)
        params = fx["scene"].static.param_arrays()
        rng = np.random.default_rng(7)
        checked = 0
        for name in ("w_s", "w_c", "w_sh", "log_a", "log_b"):
            arr = params[name]
            flat = arr.reshape(arr.shape[0], -1)
            for _ in range(6):
                v = int(rng.integers(0, arr.shape[0]))
                if v in skip:
                    continue
                j = int(rng.integers(0, flat.shape[1]))
                idx = (v,) + np.unravel_index(j, arr.shape[1:])
                fd = finite_difference(lambda: total_loss(fx), arr, idx)
                ana = grads[name][idx]
                assert rel_err(ana, fd) < 1e-3, (name, idx, ana, fd)
                checked += 1
        assert checked >= 25

    def test_zero_loss_zero_gradients(self):
        fx = build_fixture(n_voxels=5, n_rays=15, seed=8)
        scene = fx["scene"]
        octrees = build_scene_octrees(scene)
        rec = integrate_rays(scene, octrees, fx["origins"], fx["dirs"],
                             background=fx["background"])
        d_color = np.zeros_like(rec.out_color)
        d_depth = np.zeros(rec.n_rays)
        grads = backward_records(rec, scene, d_color, d_depth)["static"]
        for g in grads.values():
            assert np.all(g == 0.0)

    def test_background_only_rays_zero_gradient(self):
        bounds = SceneBounds([0, 0, 0], [2, 2, 2], 1.0, 2)
        vset = SparseVoxelSet(bounds, budget=4)
        vset.add_voxels([0], [[0, 0, 0]], rng=np.random.default_rng(1))
        scene = Scene(bounds=bounds, static=vset)
        octrees = build_scene_octrees(scene)
        # ray passes well clear of the voxel
        rec = integrate_rays(scene, octrees, [[-1.0, 1.5, 1.5]], [[1.0, 0, 0]])
        grads = backward_records(rec, scene, np.ones((1, 3)), np.ones(1))["static"]
        for g in grads.values():
            assert np.all(g == 0.0)

    def test_actor_segments_get_gradients(self):
        from salf.scene import Actor, make_actor_bounds
        bounds = SceneBounds([0, 0, 0], [4, 4, 4], 1.0, 3)
        static = SparseVoxelSet(bounds, budget=10)
        static.add_voxels([0], [[0, 1, 1]], rng=np.random.default_rng(2), a=2.0)
        a_bounds = make_actor_bounds([2.0, 2, 2], 1.0)
        av = SparseVoxelSet(a_bounds, budget=10)
        av.add_voxels([0], [[0, 0, 0]], rng=np.random.default_rng(3), a=2.0)
        actor = Actor("x", np.array([2.0, 2, 2]), av, times=np.array([0.0]),
                      positions=np.array([[2.0, 2, 2]]),
                      quaternions=np.array([[1.0, 0, 0, 0]]))
        scene = Scene(bounds=bounds, static=static, actors=[actor])
        octrees = build_scene_octrees(scene)
        # off-center ray so midpoint local coordinates are nonzero
        rec = integrate_rays(scene, octrees, [[-1.0, 1.3, 1.7]], [[1.0, 0, 0]],
                             t_stamps=[0.0])
        assert set(rec.owner.tolist()) == {-1, 0}
        grads = backward_records(rec, scene, np.full((1, 3), 0.1), np.zeros(1))
        assert np.any(grads["static"]["w_c"] != 0)
        assert np.any(grads["x"]["w_c"] != 0)
