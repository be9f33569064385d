import numpy as np
import pytest

from tracklift import tracks as tr
from tracklift.errors import DataError


def make_tracks(rng, n=12, p=8, intr=None):
    xy = rng.normal(size=(n, p, 2)) * 0.2
    o = np.ones((n, p), dtype=np.uint8)
    return tr.PointTrackTensor(xy, o, intr)


class TestModel:
    def test_flags_must_be_binary(self):
        with pytest.raises(DataError, match="0 or 1"):
            tr.PointTrackTensor(np.zeros((2, 2, 2)), np.full((2, 2), 2))

    def test_track_without_observation_rejected(self):
        o = np.ones((3, 2), dtype=np.uint8)
        o[:, 1] = 0
        with pytest.raises(DataError, match="track 1"):
            tr.PointTrackTensor(np.zeros((3, 2, 2)), o)

    def test_unobserved_entries_zero_filled(self):
        xy = np.ones((2, 2, 2))
        o = np.array([[1, 0], [1, 1]], dtype=np.uint8)
        t = tr.PointTrackTensor(xy, o)
        assert np.all(t.xy[0, 1] == 0)
        assert np.all(t.xy[1, 1] == 1)

    def test_nonfinite_observed_rejected(self):
        xy = np.zeros((2, 2, 2))
        xy[0, 0, 0] = np.nan
        with pytest.raises(DataError, match="non-finite"):
            tr.PointTrackTensor(xy, np.ones((2, 2)))


class TestT4DFormat:
    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        xy = rng.normal(size=(2, 2, 2)).astype(np.float32)
        o = np.array([[1, 1], [0, 1]], dtype=np.uint8)
        t = tr.PointTrackTensor(xy, o)
        path = tmp_path / "t.t4d"
        tr.save_tracks(path, t)
        back = tr.load_tracks(path)
        assert back.xy.tobytes() == t.xy.astype(np.float32).tobytes()
        assert back.o.tobytes() == t.o.tobytes()
        tr.save_tracks(tmp_path / "t2.t4d", back)
        assert (tmp_path / "t.t4d").read_bytes() == (tmp_path / "t2.t4d").read_bytes()

    def test_roundtrip_with_intrinsics(self, tmp_path):
        rng = np.random.default_rng(1)
        t = make_tracks(rng, intr=tr.Intrinsics(500.0, 480.0, 320.0, 240.0))
        tr.save_tracks(tmp_path / "t.t4d", t)
        back = tr.load_tracks(tmp_path / "t.t4d")
        assert back.intrinsics == t.intrinsics

    def test_wrong_magic(self, tmp_path):
        p = tmp_path / "bad.t4d"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DataError, match="magic"):
            tr.load_tracks(p)

    def test_truncated_payload(self, tmp_path):
        rng = np.random.default_rng(2)
        t = make_tracks(rng)
        p = tmp_path / "t.t4d"
        tr.save_tracks(p, t)
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(DataError, match="size mismatch"):
            tr.load_tracks(p)

    def test_file_size_formula(self, tmp_path):
        # fixed header (magic + N + P + flags + reserved = 20 bytes)
        # plus N*P*2 f32 plus N*P u8
        rng = np.random.default_rng(3)
        t = make_tracks(rng, n=50, p=225)
        p = tmp_path / "t.t4d"
        tr.save_tracks(p, t)
        assert p.stat().st_size == 20 + 50 * 225 * 2 * 4 + 50 * 225

    def test_random_roundtrip_property(self, tmp_path):
        rng = np.random.default_rng(4)
        for i in range(20):
            n = int(rng.integers(2, 30))
            p = int(rng.integers(1, 40))
            xy = rng.normal(size=(n, p, 2)).astype(np.float32)
            o = (rng.random((n, p)) < 0.8).astype(np.uint8)
            o[0] = 1  # keep every track observed at least once
            t = tr.PointTrackTensor(xy, o)
            path = tmp_path / f"r{i}.t4d"
            tr.save_tracks(path, t)
            back = tr.load_tracks(path)
            assert np.array_equal(back.o, t.o)
            assert np.array_equal(back.xy, t.xy.astype(np.float32))


class TestIntrinsics:
    def test_principal_point_maps_to_origin(self):
        intr = tr.Intrinsics(500.0, 500.0, 250.0, 250.0)
        xy = np.full((2, 1, 2), 250.0)
        t = tr.PointTrackTensor(xy, np.ones((2, 1)))
        norm = tr.normalize_by_intrinsics(t, intr)
        assert np.allclose(norm.xy, 0.0)

    def test_direct_arithmetic(self):
        intr = tr.Intrinsics(500.0, 500.0, 250.0, 250.0)
        xy = np.zeros((2, 1, 2))
        xy[:, 0] = [750.0, 250.0]
        t = tr.PointTrackTensor(xy, np.ones((2, 1)))
        norm = tr.normalize_by_intrinsics(t, intr)
        assert np.allclose(norm.xy[:, 0], [1.0, 0.0])

    def test_roundtrip(self):
        rng = np.random.default_rng(5)
        intr = tr.Intrinsics(430.0, 515.0, 310.0, 251.0)
        t = make_tracks(rng)
        px = tr.denormalize_by_intrinsics(t, intr)
        back = tr.normalize_by_intrinsics(px, intr)
        assert np.abs(back.xy - t.xy).max() < 1e-6

    def test_nonpositive_focal(self):
        with pytest.raises(DataError, match="focal"):
            tr.Intrinsics(0.0, 500.0, 0.0, 0.0)


class TestWindowSampling:
    def _staggered(self, n=60, p=30):
        # track j first observed at frame j (then onwards)
        o = np.zeros((n, p), dtype=np.uint8)
        for j in range(p):
            o[j:, j] = 1
        xy = np.zeros((n, p, 2))
        return tr.PointTrackTensor(xy, o)

    def test_first_seen_too_early_excluded(self):
        t = self._staggered()
        window = 20
        start = 30
        # track first observed at start - window is outside [start - window/2, ...]
        idx = tr.eligible_tracks(t, start, window)
        assert (start - window) not in idx
        assert (start - window // 2) in idx

    def test_exactly_ten_observations_excluded(self):
        n, p = 40, 2
        o = np.zeros((n, p), dtype=np.uint8)
        o[0:10, 0] = 1   # exactly 10 inside window [0, 20)
        o[0:11, 1] = 1   # 11 inside
        t = tr.PointTrackTensor(np.zeros((n, p, 2)), o)
        idx = tr.eligible_tracks(t, 0, 20)
        assert 0 not in idx
        assert 1 in idx

    def test_sampling_against_bruteforce(self):
        rng = np.random.default_rng(6)
        n, p = 80, 300
        o = np.zeros((n, p), dtype=np.uint8)
        for j in range(p):
            first = int(rng.integers(0, n - 15))
            o[first:, j] = 1
        t = tr.PointTrackTensor(rng.normal(size=(n, p, 2)), o)
        for _ in range(20):
            w = tr.sample_training_window(t, (20, 30), 100, rng)
            n_w = w.tracks.n_frames
            assert 20 <= n_w <= 30
            # brute-force eligibility recomputation
            for j in w.track_indices:
                col = t.o[:, j]
                first = int(np.argmax(col))
                assert w.frame_start - n_w / 2 <= first <= w.frame_start + 3 * n_w / 2
                assert col[w.frame_start:w.frame_start + n_w].sum() > 10
            assert w.tracks.n_tracks == min(100, len(
                tr.eligible_tracks(t, w.frame_start, n_w)))

    def test_no_eligible_tracks_errors(self):
        o = np.zeros((30, 3), dtype=np.uint8)
        o[0:5, :] = 1  # nothing observed more than 10 times
        t = tr.PointTrackTensor(np.zeros((30, 3, 2)), o)
        with pytest.raises(DataError, match="window"):
            tr.sample_training_window(t, (20, 20), 10, np.random.default_rng(0))

    def test_short_flag(self):
        rng = np.random.default_rng(7)
        t = make_tracks(rng, n=30, p=5)
        w = tr.sample_training_window(t, (20, 22), 100, rng)
        assert w.short
        assert w.tracks.n_tracks == 5
