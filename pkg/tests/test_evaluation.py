import numpy as np
import pytest

from tracklift import evaluation as ev
from tracklift.errors import DataError
from tracklift.geometry import CameraTrajectory, rotation_from_6d
from tracklift.synthetic import SceneConfig, generate_synthetic_scene


def random_trajectory(rng, n=8):
    rotations = np.stack([rotation_from_6d(rng.normal(size=6)) for _ in range(n)])
    centers = rng.normal(size=(n, 3)) * 3.0
    return CameraTrajectory(rotations, centers)


def random_similarity(rng):
    R = rotation_from_6d(rng.normal(size=6))
    s = float(rng.uniform(0.3, 3.0))
    t = rng.normal(size=3) * 5.0
    return s, R, t


def transform_trajectory(traj, s, R, t):
    rotations = np.einsum("ab,nbc->nac", R, traj.rotations)
    centers = s * traj.centers @ R.T + t
    return CameraTrajectory(rotations, centers)


class TestAlignment:
    def test_identity(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(10, 3))
        sim = ev.align_similarity(pts, pts)
        assert np.isclose(sim.scale, 1.0, atol=1e-12)
        assert np.allclose(sim.rotation, np.eye(3), atol=1e-10)
        assert np.allclose(sim.translation, 0.0, atol=1e-10)

    def test_recovers_inverse_scale(self):
        rng = np.random.default_rng(1)
        gt = rng.normal(size=(12, 3))
        sim = ev.align_similarity(0.5 * gt, gt)
        assert abs(sim.scale - 2.0) < 1e-9

    def test_apply_then_recover(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            gt = rng.normal(size=(9, 3)) * 2.0
            s, R, t = random_similarity(rng)
            est = (gt - t) @ R / s  # inverse transform
            sim = ev.align_similarity(est, gt)
            resid = sim.apply(est) - gt
            assert np.abs(resid).max() < 1e-9

    def test_exact_minimizer_under_perturbation(self):
        rng = np.random.default_rng(3)
        gt = rng.normal(size=(10, 3))
        est = gt + rng.normal(size=(10, 3)) * 0.1
        sim = ev.align_similarity(est, gt)
        best = ((sim.apply(est) - gt) ** 2).sum()
        for _ in range(100):
            ds = 1.0 + rng.normal() * 1e-3
            dv = np.concatenate([[1, 0, 0], [0, 1, 0]]) + rng.normal(size=6) * 1e-3
            dR = rotation_from_6d(dv)
            dt = rng.normal(size=3) * 1e-3
            perturbed = (sim.scale * ds) * est @ (dR @ sim.rotation).T \
                + sim.translation + dt
            assert ((perturbed - gt) ** 2).sum() >= best - 1e-12

    def test_matches_independent_optimizer(self):
        from scipy.optimize import minimize
        from scipy.spatial.transform import Rotation
        rng = np.random.default_rng(4)
        gt = rng.normal(size=(8, 3))
        est = gt + rng.normal(size=(8, 3)) * 0.2

        def objective(x):
            s = np.exp(x[0])
            R = Rotation.from_rotvec(x[1:4]).as_matrix()
            t = x[4:7]
            return ((s * est @ R.T + t - gt) ** 2).sum()

        best = np.inf
        for trial in range(5):
            x0 = np.concatenate([[rng.normal() * 0.1],
                                 rng.normal(size=3) * 0.5, rng.normal(size=3)])
            res = minimize(objective, x0, method="Nelder-Mead",
                           options={"maxiter": 20000, "xatol": 1e-12, "fatol": 1e-14})
            best = min(best, res.fun)
        sim = ev.align_similarity(est, gt)
        closed_form = ((sim.apply(est) - gt) ** 2).sum()
        assert closed_form <= best + 1e-6

    def test_collinear_points_rejected(self):
        pts = np.outer(np.arange(5.0), np.array([1.0, 0, 0]))
        with pytest.raises(DataError, match="collinear|rank"):
            ev.align_similarity(pts, pts)


class TestATE:
    def test_identical(self):
        rng = np.random.default_rng(5)
        traj = random_trajectory(rng)
        assert ev.ate(traj, traj) < 1e-12

    def test_constant_offset_absorbed(self):
        rng = np.random.default_rng(6)
        traj = random_trajectory(rng)
        shifted = CameraTrajectory(traj.rotations, traj.centers + np.array([1.0, 2, 3]))
        assert ev.ate(shifted, traj) < 1e-9

    def test_similarity_invariance(self):
        rng = np.random.default_rng(7)
        gt = random_trajectory(rng)
        est = random_trajectory(rng)
        base = ev.ate(est, gt)
        for _ in range(5):
            s, R, t = random_similarity(rng)
            moved = transform_trajectory(est, s, R, t)
            assert abs(ev.ate(moved, gt) - base) < 1e-9

    def test_single_center_perturbation_matches_recomputation(self):
        rng = np.random.default_rng(8)
        gt = random_trajectory(rng, n=10)
        est_centers = gt.centers.copy()
        est_centers[4] += np.array([0.05, -0.02, 0.03])
        est = CameraTrajectory(gt.rotations, est_centers)
        got = ev.ate(est, gt)
        # independent recomputation of the same definition
        sim = ev.align_similarity(est.centers, gt.centers)
        aligned = sim.apply(est.centers)
        expected = np.sqrt(((aligned - gt.centers) ** 2).sum(axis=1).mean())
        assert np.isclose(got, expected, atol=1e-12)
        assert got > 0


class TestRPE:
    def test_identical(self):
        rng = np.random.default_rng(9)
        traj = random_trajectory(rng)
        t_err, r_err = ev.rpe(traj, traj)
        assert t_err < 1e-12 and r_err < 1e-6

    def test_global_rotation_cancels(self):
        rng = np.random.default_rng(10)
        gt = random_trajectory(rng)
        s, R, t = random_similarity(rng)
        moved = transform_trajectory(gt, 1.0, R, np.zeros(3))
        t_err, r_err = ev.rpe(moved, gt)
        assert r_err < 1e-6
        assert t_err < 1e-9

    def test_single_rotation_perturbation_hand_computed(self):
        # 4 frames, perturb frame 2's rotation by theta: two gaps are hit,
        # so the mean rotation error is 2 * theta / 3
        rng = np.random.default_rng(11)
        gt = random_trajectory(rng, n=4)
        theta = np.deg2rad(2.0)
        K = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 0]])  # z-axis
        dR = np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)
        rotations = gt.rotations.copy()
        rotations[2] = rotations[2] @ dR
        est = CameraTrajectory(rotations, gt.centers)
        _, r_err = ev.rpe(est, gt)
        assert np.isclose(r_err, np.degrees(2 * theta / 3), atol=1e-9)

    def test_similarity_invariance(self):
        rng = np.random.default_rng(12)
        gt = random_trajectory(rng)
        est = random_trajectory(rng)
        base = ev.rpe(est, gt)
        s, R, t = random_similarity(rng)
        moved = transform_trajectory(est, s, R, t)
        got = ev.rpe(moved, gt)
        assert abs(got[0] - base[0]) < 1e-9
        assert abs(got[1] - base[1]) < 1e-9


class TestDepthMetrics:
    def test_exact_estimate(self):
        rng = np.random.default_rng(13)
        gt = rng.uniform(2.0, 10.0, size=(5, 6))
        valid = np.ones_like(gt, dtype=bool)
        dyn = np.zeros(6, dtype=bool)
        dyn[:2] = True
        m = ev.depth_metrics(gt, gt, valid, dyn)
        assert m["abs_rel"]["all"] == 0.0
        for k in (1, 2, 3):
            assert m[f"delta_{k}"]["all"] == 1.0
            assert m[f"delta_{k}"]["dynamic"] == 1.0

    def test_global_scale_absorbed(self):
        rng = np.random.default_rng(14)
        gt = rng.uniform(2.0, 10.0, size=(4, 5))
        valid = np.ones_like(gt, dtype=bool)
        dyn = np.zeros(5, dtype=bool)
        m = ev.depth_metrics(2.0 * gt, gt, valid, dyn)
        assert m["abs_rel"]["all"] < 1e-12
        assert m["delta_1"]["all"] == 1.0

    def test_one_bad_sample_of_ten(self):
        gt = np.full((1, 10), 4.0)
        est = gt.copy()
        est[0, 3] = 8.0  # ratio 2 after unit scale (median stays 1)
        valid = np.ones_like(gt, dtype=bool)
        dyn = np.zeros(10, dtype=bool)
        m = ev.depth_metrics(est, gt, valid, dyn)
        assert np.isclose(m["delta_1"]["all"], 0.9)
        assert np.isclose(m["abs_rel"]["all"], (abs(8.0 - 4.0) / 4.0) / 10)

    def test_delta_monotonicity(self):
        rng = np.random.default_rng(15)
        gt = rng.uniform(1.0, 10.0, size=(6, 8))
        est = gt * rng.uniform(0.5, 2.0, size=gt.shape)
        valid = rng.random(gt.shape) < 0.8
        valid[0] = True
        dyn = rng.random(8) < 0.4
        m = ev.depth_metrics(est, gt, valid, dyn)
        for group in ("dynamic", "all"):
            assert m["delta_1"][group] <= m["delta_2"][group] <= m["delta_3"][group]

    def test_nonpositive_gt_excluded(self):
        gt = np.array([[5.0, -1.0, 6.0]])
        est = np.array([[5.0, 99.0, 6.0]])
        valid = np.ones_like(gt, dtype=bool)
        m = ev.depth_metrics(est, gt, valid, np.zeros(3, dtype=bool))
        assert m["abs_rel"]["all"] == 0.0

    def test_all_excluded_errors(self):
        gt = np.array([[-1.0, -2.0]])
        with pytest.raises(DataError, match="depth"):
            ev.depth_metrics(np.ones_like(gt), gt, np.ones_like(gt, dtype=bool),
                             np.zeros(2, dtype=bool))


class TestReport:
    def test_schema_keys(self, tmp_path):
        import json
        scene, _ = generate_synthetic_scene(SceneConfig(n_frames=8, n_tracks=12),
                                            seed=0)
        depths = scene.depths()
        valid = np.ones_like(depths, dtype=bool)
        report = ev.evaluate_sequence(scene.poses, scene.poses, depths, depths,
                                      valid, scene.dynamic_mask)
        path = tmp_path / "report.json"
        report.save(path)
        doc = json.loads(path.read_text())
        assert set(doc) == {"ate", "rpe_trans", "rpe_rot_deg", "abs_rel",
                            "delta_1.25", "delta_1.25^2", "delta_1.25^3"}
        for key in ("abs_rel", "delta_1.25", "delta_1.25^2", "delta_1.25^3"):
            assert set(doc[key]) == {"dynamic", "all"}
        assert doc["ate"] < 1e-9
        assert doc["abs_rel"]["all"] == 0.0
