import numpy as np
import pytest

from tracklift import synthetic as syn
from tracklift.geometry import reprojection_error
from tracklift.errors import DataError


class TestGenerator:
    def test_noiseless_self_consistency(self):
        scene, tracks = syn.generate_synthetic_scene(syn.SceneConfig(), seed=0)
        clouds = scene.clouds()
        worst = 0.0
        for i in range(tracks.n_frames):
            pose = scene.poses[i]
            for j in range(tracks.n_tracks):
                if tracks.o[i, j]:
                    worst = max(worst, float(reprojection_error(
                        clouds[i, j], pose, tracks.xy[i, j])))
        assert worst < 1e-6

    def test_static_scene_clouds_identical(self):
        cfg = syn.SceneConfig(dynamic_fraction=0.0)
        scene, _ = syn.generate_synthetic_scene(cfg, seed=1)
        clouds = scene.clouds()
        assert np.abs(clouds - clouds[0]).max() == 0.0

    def test_determinism(self):
        cfg = syn.SceneConfig(noise_std=0.01, occlusion_rate=0.1)
        s1, t1 = syn.generate_synthetic_scene(cfg, seed=42)
        s2, t2 = syn.generate_synthetic_scene(cfg, seed=42)
        assert t1.xy.tobytes() == t2.xy.tobytes()
        assert t1.o.tobytes() == t2.o.tobytes()
        assert s1.bases.tobytes() == s2.bases.tobytes()

    def test_seed_changes_output(self):
        cfg = syn.SceneConfig()
        _, t1 = syn.generate_synthetic_scene(cfg, seed=1)
        _, t2 = syn.generate_synthetic_scene(cfg, seed=2)
        assert t1.xy.tobytes() != t2.xy.tobytes()

    def test_static_points_have_zero_deviation(self):
        scene, _ = syn.generate_synthetic_scene(syn.SceneConfig(), seed=3)
        static = ~scene.dynamic_mask
        assert np.all(scene.bases[1:, static, :] == 0.0)
        assert np.any(scene.bases[1:, scene.dynamic_mask, :] != 0.0)

    def test_all_depths_positive(self):
        for kind in syn.TRAJECTORY_KINDS:
            scene, _ = syn.generate_synthetic_scene(
                syn.SceneConfig(trajectory_kind=kind, n_frames=24), seed=4)
            assert scene.depths().min() > 0.0

    def test_poses_valid(self):
        scene, _ = syn.generate_synthetic_scene(syn.SceneConfig(), seed=5)
        scene.poses.validate()

    def test_occlusion_produces_gaps_with_temporal_structure(self):
        cfg = syn.SceneConfig(occlusion_rate=0.25)
        _, tracks = syn.generate_synthetic_scene(cfg, seed=6)
        frac = 1.0 - tracks.o.mean()
        assert 0.05 < frac < 0.5
        assert tracks.o.any(axis=0).all()

    def test_config_validation(self):
        with pytest.raises(DataError):
            syn.SceneConfig(n_frames=1)
        with pytest.raises(DataError):
            syn.SceneConfig(trajectory_kind="spiral")
        with pytest.raises(DataError):
            syn.SceneConfig(dynamic_fraction=1.5)


class TestAssemble:
    def test_matches_triple_loop(self):
        rng = np.random.default_rng(7)
        k, p, n = 4, 6, 5
        bases = rng.normal(size=(k, p, 3))
        coeffs = rng.normal(size=(n, k - 1))
        fast = syn.assemble_clouds_np(bases, coeffs)
        slow = np.zeros((n, p, 3))
        for i in range(n):
            for j in range(p):
                for c in range(3):
                    val = bases[0, j, c]
                    for kk in range(1, k):
                        val += coeffs[i, kk - 1] * bases[kk, j, c]
                    slow[i, j, c] = val
        assert np.abs(fast - slow).max() < 1e-6


class TestSidecar:
    def test_json_roundtrip(self, tmp_path):
        scene, _ = syn.generate_synthetic_scene(syn.SceneConfig(n_frames=8, n_tracks=10), seed=8)
        path = tmp_path / "scene.json"
        syn.write_scene_json(path, scene)
        back = syn.read_scene_json(path)
        assert np.array_equal(back.poses.rotations, scene.poses.rotations)
        assert np.array_equal(back.poses.centers, scene.poses.centers)
        assert np.array_equal(back.bases, scene.bases)
        assert np.array_equal(back.coeffs, scene.coeffs)
        assert np.array_equal(back.dynamic_mask, scene.dynamic_mask)
        assert back.intrinsics == scene.intrinsics

    def test_bad_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(DataError):
            syn.read_scene_json(p)
