import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_random_scene, random_rays
from oracles import composite_reference
from salf.render_ray import (InjectedSphere, _composite, build_scene_octrees,
                             compose_actor_traversal, integrate_rays, render_depth,
                             trace_effects)
from salf.scene import Actor, Scene, SceneBounds, SparseVoxelSet, make_actor_bounds


def single_voxel_scene(a=50.0, rng=None):
    bounds = SceneBounds([0, 0, 0], [2, 2, 2], base_edge=1.0, max_levels=2)
    v = SparseVoxelSet(bounds, budget=10)
    v.add_voxels([0], [[0, 0, 0]], rng=rng or np.random.default_rng(5), a=a)
    return Scene(bounds=bounds, static=v)


class TestComposite:
    def test_single_segment(self):
        ray = np.array([0])
        out = _composite(ray, np.array([0.8]), np.array([[1.0, 0, 0]]),
                         np.array([2.0]), 1, np.zeros(3), 0.99)
        color = out[3]
        assert np.allclose(color, [0.8, 0, 0])

    def test_two_segments_by_hand(self):
        ray = np.array([0, 0])
        out = _composite(ray, np.array([0.5, 0.5]),
                         np.array([[1.0, 0, 0], [0.0, 1, 0]]),
                         np.array([1.0, 2.0]), 1, np.zeros(3), 0.99)
        assert np.allclose(out[3], [0.5, 0.25, 0.0])

    def test_background_through_residual(self):
        ray = np.array([0])
        out = _composite(ray, np.array([0.25]), np.array([[0.0, 0, 0]]),
                         np.array([1.0]), 1, np.array([1.0, 1.0, 1.0]), 0.99)
        assert np.allclose(out[3], 0.75)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0.0, 0.999999), min_size=0, max_size=12),
           st.integers(0, 4))
    def test_matches_scalar_reference(self, alphas, seed):
        rng = np.random.default_rng(seed)
        n = len(alphas)
        alphas = np.array(alphas)
        colors = rng.uniform(0, 1, (n, 3))
        t_mids = np.sort(rng.uniform(0.1, 10.0, n))
        bg = rng.uniform(0, 1, 3)
        ray = np.zeros(n, dtype=np.int64)
        t_before, included, w, color, opacity, depth, wsum, t_fin, _ = _composite(
            ray, alphas, colors, t_mids, 1, bg, 0.99)
        ref_color, ref_op, ref_depth, ref_w = composite_reference(
            alphas, colors, t_mids, bg, 0.99)
        assert np.allclose(color[0], ref_color, atol=1e-9)
        assert np.allclose(opacity[0], ref_op, atol=1e-9)
        assert np.allclose(wsum[0], ref_w, atol=1e-9)
        if np.isnan(ref_depth):
            assert np.isnan(depth[0])
        else:
            assert depth[0] == pytest.approx(ref_depth, abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=20), st.integers(0, 4))
    def test_invariants(self, alphas, seed):
        rng = np.random.default_rng(seed)
        n = len(alphas)
        alphas = np.array(alphas)
        colors = rng.uniform(0, 1, (n, 3))
        t_mids = np.sort(rng.uniform(0.1, 10.0, n))
        ray = np.zeros(n, dtype=np.int64)
        t_before, included, w, color, opacity, depth, wsum, t_fin, _ = _composite(
            ray, alphas, colors, t_mids, 1, np.zeros(3), 0.99)
        # transmittance chain is non-increasing, weights non-negative
        assert np.all(np.diff(t_before) <= 1e-12)
        assert np.all(w >= 0)
        assert wsum[0] + t_fin[0] == pytest.approx(1.0, abs=1e-6)
        assert 0.0 <= opacity[0] <= 1.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 1000))
    def test_early_termination_bound(self, seed):
        rng = np.random.default_rng(seed)
        n = 30
        alphas = rng.uniform(0, 0.9, n)
        colors = rng.uniform(0, 1, (n, 3))
        t_mids = np.sort(rng.uniform(0.1, 10.0, n))
        ray = np.zeros(n, dtype=np.int64)
        bg = rng.uniform(0, 1, 3)
        early = _composite(ray, alphas, colors, t_mids, 1, bg, 0.99)[3]
        full = _composite(ray, alphas, colors, t_mids, 1, bg, 1.0 - 1e-15)[3]
        assert np.max(np.abs(early - full)) <= 0.01 + 1e-9


class TestIntegrate:
    def test_empty_scene(self):
        bounds = SceneBounds([0, 0, 0], [2, 2, 2], base_edge=1.0, max_levels=2)
        scene = Scene(bounds=bounds, static=SparseVoxelSet(bounds, budget=10))
        oc = build_scene_octrees(scene)
        rec = integrate_rays(scene, oc, [[-1, 1, 1]], [[1.0, 0, 0]],
                             background=(0.2, 0.3, 0.4))
        assert np.allclose(rec.out_color, [0.2, 0.3, 0.4])
        assert rec.opacity[0] == 0.0
        assert np.isnan(render_depth(rec)[0])

    def test_records_chain_consistency(self):
        scene = make_random_scene(41, 200)
        oc = build_scene_octrees(scene)
        rng = np.random.default_rng(42)
        origins, dirs = random_rays(rng, 200, [0, 0, 0], [8, 8, 8])
        rec = integrate_rays(scene, oc, origins, dirs)
        # T_1 = 1 for each ray's first segment; weights sum + residual = 1
        firsts = rec.group_start[:-1][np.diff(rec.group_start) > 0]
        assert np.allclose(rec.t_before[firsts], 1.0)
        assert np.allclose(rec.weight_sum + rec.t_final, 1.0, atol=1e-6)
        w = np.where(rec.included, rec.t_before * rec.alpha, 0.0)
        assert np.all(w >= 0)

    def test_depth_single_opaque_segment(self):
        scene = single_voxel_scene(a=1000.0)
        oc = build_scene_octrees(scene)
        rec = integrate_rays(scene, oc, [[-1.0, 0.5, 0.5]], [[1.0, 0, 0]])
        # the lone voxel spans [1, 2] along the ray; the midpoint is 1.5
        assert rec.depth[0] == pytest.approx(1.5, abs=1e-9)

    def test_time_invariance_static_scene(self):
        scene = make_random_scene(43, 100)
        oc = build_scene_octrees(scene)
        rng = np.random.default_rng(44)
        origins, dirs = random_rays(rng, 50, [0, 0, 0], [8, 8, 8])
        a = integrate_rays(scene, oc, origins, dirs, t_stamps=np.zeros(50))
        b = integrate_rays(scene, oc, origins, dirs, t_stamps=np.full(50, 7.5))
        assert np.array_equal(a.out_color, b.out_color)

    def test_stop_threshold_consistency_with_merged_path(self):
        # early-stopped static marching must match the march-everything path
        scene = make_random_scene(45, 300, a_range=(2.0, 8.0))
        oc = build_scene_octrees(scene)
        rng = np.random.default_rng(46)
        origins, dirs = random_rays(rng, 100, [0, 0, 0], [8, 8, 8])
        fused = integrate_rays(scene, oc, origins, dirs)
        # force the merged path by attaching an empty actor
        bounds_a = make_actor_bounds([0.5, 0.5, 0.5], 0.25)
        empty = Actor("ghost", np.array([0.5, 0.5, 0.5]),
                      SparseVoxelSet(bounds_a, budget=1),
                      times=np.array([0.0]), positions=np.zeros((1, 3)),
                      quaternions=np.array([[1.0, 0, 0, 0]]))
        scene_a = Scene(bounds=scene.bounds, static=scene.static, actors=[empty])
        oc_a = build_scene_octrees(scene_a)
        merged = integrate_rays(scene_a, oc_a, origins, dirs, t_stamps=np.zeros(100))
        assert np.allclose(fused.out_color, merged.out_color, atol=1e-12)
        assert np.allclose(fused.opacity, merged.opacity, atol=1e-12)


def grid_aligned_actor(scene_bounds, shift, t_end=2.0):
    """Actor whose canonical voxels land exactly on the static grid when shifted."""
    bounds_a = make_actor_bounds([2.0, 2.0, 2.0], 1.0, max_levels=2)
    v = SparseVoxelSet(bounds_a, budget=10)
    v.add_voxels([0, 0], [[0, 0, 0], [1, 1, 1]], rng=np.random.default_rng(7), a=30.0)
    return Actor("cart", np.array([2.0, 2, 2]), v,
                 times=np.array([0.0, t_end]),
                 positions=np.array([shift, np.asarray(shift) + [1.0, 0, 0]]),
                 quaternions=np.tile([1.0, 0, 0, 0], (2, 1)))


class TestActors:
    def test_plan_no_actors(self):
        scene = single_voxel_scene()
        oc = build_scene_octrees(scene)
        plan = compose_actor_traversal(scene, oc, np.array([-1.0, 0.5, 0.5]),
                                       np.array([1.0, 0, 0]))
        assert len(plan) == 1 and plan[0][0] == "static"

    def plan_scene(self):
        bounds = SceneBounds([0, 0, 0], [4, 4, 4], base_edge=1.0, max_levels=3)
        static = SparseVoxelSet(bounds, budget=10)
        static.add_voxels([0], [[0, 0, 0]], rng=np.random.default_rng(5))
        scene = Scene(bounds=bounds, static=static)
        scene.actors.append(grid_aligned_actor(bounds, [2.0, 2.0, 2.0]))
        return scene, build_scene_octrees(scene)

    def test_plan_misses_actor_box(self):
        scene, oc = self.plan_scene()
        plan = compose_actor_traversal(scene, oc, np.array([-1.0, 0.5, 3.5]),
                                       np.array([1.0, 0, 0]), t_stamp=0.0)
        assert [p[0] for p in plan] == ["static"]

    def test_plan_sorted_by_entry(self):
        scene, oc = self.plan_scene()
        plan = compose_actor_traversal(scene, oc, np.array([-4.0, 1.5, 1.5]),
                                       np.array([1.0, 0, 0]), t_stamp=0.0)
        assert [p[0] for p in plan] == ["static", "actor:cart"]
        assert plan[0][1] <= plan[1][1]

    def test_interleaved_matches_flattened(self):
        # translation-only actor aligned to the static grid at t = 0:
        # merging its voxels into the static set must render identically
        bounds = SceneBounds([0, 0, 0], [4, 4, 4], base_edge=1.0, max_levels=3)
        static = SparseVoxelSet(bounds, budget=100)
        rng = np.random.default_rng(8)
        static.add_voxels([0, 0], [[0, 1, 1], [3, 1, 1]], rng=rng, a=5.0)
        actor = grid_aligned_actor(bounds, [2.0, 2.0, 2.0])
        scene = Scene(bounds=bounds, static=static, actors=[actor])
        oc = build_scene_octrees(scene)

        flat_static = SparseVoxelSet(bounds, budget=100)
        flat_static.add_voxels([0, 0], [[0, 1, 1], [3, 1, 1]], rng=np.random.default_rng(8),
                               a=5.0)
        # actor canonical cells (0,0,0), (1,1,1) shifted by (2,2,2) - half extents
        n0 = flat_static.n
        new = flat_static.add_voxels([0, 0], [[1, 1, 1], [2, 2, 2]],
                                     rng=np.random.default_rng(99))
        for name in ("w_s", "w_c", "w_sh", "log_a", "log_b"):
            getattr(flat_static, name)[new] = getattr(actor.voxels, name)
        flat_scene = Scene(bounds=bounds, static=flat_static)
        oc_flat = build_scene_octrees(flat_scene)

        rng2 = np.random.default_rng(9)
        origins, dirs = random_rays(rng2, 400, [0, 0, 0], [4, 4, 4])
        rec_a = integrate_rays(scene, oc, origins, dirs, t_stamps=np.zeros(400))
        rec_f = integrate_rays(flat_scene, oc_flat, origins, dirs)
        assert np.max(np.abs(rec_a.out_color - rec_f.out_color)) < 1e-5

    def test_actor_window_segments_time_dependent(self):
        scene = single_voxel_scene(a=0.0001)
        actor = grid_aligned_actor(scene.bounds, [1.0, 1.0, 1.0], t_end=2.0)
        scene.actors.append(actor)
        oc = build_scene_octrees(scene)
        ray_o = [[-2.0, 1.0, 1.0]]
        ray_d = [[1.0, 0, 0]]
        rec0 = integrate_rays(scene, oc, ray_o, ray_d, t_stamps=[0.0])
        rec1 = integrate_rays(scene, oc, ray_o, ray_d, t_stamps=[2.0])
        d0, d1 = rec0.depth[0], rec1.depth[0]
        assert d1 - d0 == pytest.approx(1.0, abs=0.2)  # the actor moved 1 m along +x


class TestEffects:
    def setup_scene(self):
        scene = single_voxel_scene(a=80.0)
        oc = build_scene_octrees(scene)
        return scene, oc

    def test_no_spheres_identical_to_integrate(self):
        scene, oc = self.setup_scene()
        rng = np.random.default_rng(11)
        origins, dirs = random_rays(rng, 40, [0, 0, 0], [2, 2, 2])
        plain = integrate_rays(scene, oc, origins, dirs)
        traced = trace_effects(scene, oc, origins, dirs, np.zeros(40), [],
                               [0, 0, 1.0], max_bounces=2)
        assert np.allclose(traced, plain.out_color)

    def test_mirror_head_on_reversal(self):
        scene, oc = self.setup_scene()
        sphere = InjectedSphere(center=[5.0, 0.5, 0.5], radius=0.5, material="mirror")
        origin = np.array([[3.0, 0.5, 0.5]])
        direction = np.array([[1.0, 0, 0]])
        traced = trace_effects(scene, oc, origin, direction, np.zeros(1), [sphere],
                               [0, 0, 1.0], max_bounces=2)
        hit = np.array([[4.5, 0.5, 0.5]])
        rev = integrate_rays(scene, oc, hit, -direction)
        assert np.allclose(traced[0], rev.out_color[0], atol=1e-6)

    def test_glass_ior_one_passthrough(self):
        scene, oc = self.setup_scene()
        sphere = InjectedSphere(center=[3.0, 1.0, 1.0], radius=0.8, material="glass",
                                ior=1.0)
        rng = np.random.default_rng(12)
        origins = np.tile([4.5, 1.0, 1.0], (30, 1))
        dirs = rng.normal(size=(30, 3))
        dirs[:, 0] = -np.abs(dirs[:, 0]) - 1.0  # point back toward the scene
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        plain = integrate_rays(scene, oc, origins, dirs)
        traced = trace_effects(scene, oc, origins, dirs, np.zeros(30), [sphere],
                               [0, 0, 1.0], max_bounces=3)
        assert np.max(np.abs(traced - plain.out_color)) < 1e-6

    def test_opaque_sphere_albedo(self):
        scene, oc = self.setup_scene()
        sphere = InjectedSphere(center=[5.0, 0.5, 0.5], radius=0.5, material="opaque",
                                albedo=[0.9, 0.1, 0.2])
        traced = trace_effects(scene, oc, [[3.0, 0.5, 0.5]], [[1.0, 0, 0]],
                               np.zeros(1), [sphere], [0, 0, 1.0], max_bounces=1)
        assert np.allclose(traced[0], [0.9, 0.1, 0.2])

    def test_shadow_darkens_surface(self):
        scene, oc = self.setup_scene()
        # ray hits the voxel top-down; a sphere sits between the surface and the sun
        sun = np.array([0.0, 0.0, 1.0])
        sphere = InjectedSphere(center=[0.5, 0.5, 4.0], radius=0.4, material="opaque")
        origin = np.array([[0.5, 0.5, 1.9]])
        direction = np.array([[0.0, 0.0, -1.0]])
        lit = trace_effects(scene, oc, origin, direction, np.zeros(1), [], sun, 2)
        shadowed = trace_effects(scene, oc, origin, direction, np.zeros(1), [sphere],
                                 sun, 2)
        assert np.allclose(shadowed[0], 0.5 * lit[0])

    def test_max_bounces_validated(self):
        scene, oc = self.setup_scene()
        with pytest.raises(ValueError):
            trace_effects(scene, oc, [[0.5, 0.5, 0.5]], [[1.0, 0, 0]], np.zeros(1),
                          [], [0, 0, 1.0], max_bounces=0)

    def test_sphere_validation(self):
        with pytest.raises(ValueError):
            InjectedSphere(center=[0, 0, 0], radius=-1.0, material="mirror")
        with pytest.raises(ValueError):
            InjectedSphere(center=[0, 0, 0], radius=1.0, material="glass", ior=0.5)
        with pytest.raises(ValueError):
            InjectedSphere(center=[0, 0, 0], radius=1.0, material="wood")
