import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from failurenet import data
from failurenet.data import (
    PoseWindow,
    featurize,
    featurize_batch,
    featurize_values,
    make_windows,
    read_dataset,
    read_metadata,
    resample_poses,
    split_dataset,
    windows_from_log,
    write_dataset,
    write_metadata,
)
from failurenet.sim import FailureConfig, FailureMode, TrajectoryLog, run_scenario
from failurenet.track import build_default_map, wrap_angle

from oracles import count_windows_brute


def synthetic_log(duration=20.0, dt=0.02, mode=FailureMode.NOMINAL):
    """A smooth analytic trajectory, not tied to the simulator."""
    t = np.arange(0.0, duration, dt)
    x = np.sin(0.3 * t)
    y = np.cos(0.3 * t)
    theta = np.array([wrap_angle(0.3 * ti + math.pi / 2) for ti in t])
    samples = np.stack([t, x, y, theta, np.full_like(t, 0.3), np.zeros_like(t)], axis=1)
    return TrajectoryLog(vehicle_id="veh0", mode=mode, dt=dt, samples=samples)


def window_of(poses, label=0, mode="nominal", source="log0", rate=2.0):
    poses = np.asarray(poses, dtype=float)
    return PoseWindow(
        times=np.arange(len(poses)) / rate,
        poses=poses,
        label=label,
        mode=mode,
        source=source,
    )


class TestResample:
    def test_integer_decimation_is_exact(self):
        log = synthetic_log()
        times, poses = resample_poses(log, 2.0)  # 50 Hz -> 2 Hz, k=25
        assert np.array_equal(times, log.samples[::25, 0])
        assert np.array_equal(poses, log.samples[::25, 1:4])

    def test_non_divisible_rate_needs_interpolate(self):
        log = synthetic_log()
        with pytest.raises(ValueError):
            resample_poses(log, 3.0)

    def test_interpolation_error_bound(self):
        # linear interpolation on a grid of step h obeys |err| <= h^2 max|f''| / 8
        log = synthetic_log()
        times, poses = resample_poses(log, 3.0, interpolate=True)
        bound = log.dt**2 * (0.3**2) / 8.0  # |x''| = 0.09 sin/cos amplitude
        assert np.max(np.abs(poses[:, 0] - np.sin(0.3 * times))) <= bound + 1e-12
        assert np.max(np.abs(poses[:, 1] - np.cos(0.3 * times))) <= bound + 1e-12

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            resample_poses(synthetic_log(), 0.0)


class TestMakeWindows:
    def test_window_count_stride_one(self):
        t = np.arange(100) * 0.5
        poses = np.zeros((100, 3))
        poses[:, 0] = np.arange(100)  # stay far from any mask
        ws = make_windows(t, poses, length=10, stride=1, mode="nominal", source="s")
        assert len(ws) == 91

    def test_window_count_with_stride(self):
        t = np.arange(100) * 0.5
        poses = np.zeros((100, 3))
        ws = make_windows(t, poses, length=10, stride=5, mode="speeding", source="s")
        assert len(ws) == 19

    def test_labels_follow_mode(self):
        t = np.arange(12) * 0.5
        poses = np.zeros((12, 3))
        assert make_windows(t, poses, 10, 1, FailureMode.NOMINAL, "s")[0].label == 0
        for mode in ("periodic", "lane_shift", "speeding", "reckless"):
            ws = make_windows(t, poses, 10, 1, mode, "s")
            assert all(w.label == 1 for w in ws)
            assert all(w.mode == mode for w in ws)

    def test_windows_are_views_of_consecutive_poses(self):
        t = np.arange(30) * 0.5
        poses = np.random.default_rng(0).normal(size=(30, 3))
        ws = make_windows(t, poses, length=10, stride=3, mode="nominal", source="s")
        for k, w in enumerate(ws):
            start = 3 * k
            assert np.array_equal(w.poses, poses[start : start + 10])
            assert np.array_equal(w.times, t[start : start + 10])

    def test_mask_filter_matches_brute_force(self):
        tmap = build_default_map()
        log = run_scenario(tmap, FailureConfig(), duration=120.0, seed=12, route_name="through_ew")
        times, poses = resample_poses(log, 2.0)
        for stride in (1, 3):
            ws = make_windows(times, poses, 10, stride, "nominal", "s", track_map=tmap)
            expected = count_windows_brute(times, poses, 10, stride, tmap.intersection_center, tmap.mask_radius)
            assert len(ws) == expected
        # and every kept window's final pose clears the disc
        for w in make_windows(times, poses, 10, 1, "nominal", "s", track_map=tmap):
            assert math.hypot(w.poses[-1, 0], w.poses[-1, 1]) > tmap.mask_radius

    def test_rejects_degenerate_length_and_stride(self):
        t = np.arange(10) * 0.5
        poses = np.zeros((10, 3))
        with pytest.raises(ValueError):
            make_windows(t, poses, length=1, stride=1, mode="nominal", source="s")
        with pytest.raises(ValueError):
            make_windows(t, poses, length=10, stride=0, mode="nominal", source="s")

    def test_windows_from_log_matches_manual_pipeline(self):
        tmap = build_default_map()
        log = run_scenario(tmap, FailureConfig(mode=FailureMode.SPEEDING), duration=60.0, seed=1)
        ws = windows_from_log(log, 2.0, 10, 1, source="lg", track_map=tmap)
        times, poses = resample_poses(log, 2.0)
        manual = make_windows(times, poses, 10, 1, log.mode, "lg", tmap)
        assert len(ws) == len(manual)
        assert all(np.array_equal(a.poses, b.poses) for a, b in zip(ws, manual))
        assert all(w.label == 1 and w.mode == "speeding" for w in ws)


class TestFeaturize:
    def test_egocentric_zeroes_first_pose(self):
        poses = np.array([[3.0, -2.0, 0.7], [3.1, -1.9, 0.8], [3.2, -1.7, 0.9]])
        out = featurize_values(poses, "egocentric")
        assert np.allclose(out[0], 0.0, atol=1e-15)

    def test_global_is_identity_copy(self):
        poses = np.random.default_rng(1).normal(size=(10, 3))
        out = featurize_values(poses, "global")
        assert np.array_equal(out, poses)
        assert out is not poses

    def test_rejects_unknown_mode(self):
        with pytest.raises(ValueError):
            featurize_values(np.zeros((5, 3)), "polar")

    def test_featurize_wraps_window(self):
        w = window_of(np.random.default_rng(2).normal(size=(10, 3)))
        seq = featurize(w)
        assert seq.mode == "egocentric"
        assert seq.values.shape == (10, 3)

    def test_featurize_batch_stacks(self):
        ws = [window_of(np.random.default_rng(i).normal(size=(10, 3))) for i in range(4)]
        batch = featurize_batch(ws, "global")
        assert batch.shape == (4, 10, 3)
        assert np.array_equal(batch[2], ws[2].poses)

    def test_featurize_batch_rejects_empty(self):
        with pytest.raises(ValueError):
            featurize_batch([], "global")

    @given(
        angle=st.floats(-math.pi, math.pi),
        dx=st.floats(-5, 5),
        dy=st.floats(-5, 5),
        seed=st.integers(0, 2**16),
    )
    @settings(max_examples=80, deadline=None)
    def test_egocentric_invariant_under_rigid_motion(self, angle, dx, dy, seed):
        rng = np.random.default_rng(seed)
        poses = rng.uniform(-1, 1, size=(10, 3))
        c, s = math.cos(angle), math.sin(angle)
        moved = np.empty_like(poses)
        moved[:, 0] = c * poses[:, 0] - s * poses[:, 1] + dx
        moved[:, 1] = s * poses[:, 0] + c * poses[:, 1] + dy
        moved[:, 2] = [wrap_angle(a + angle) for a in poses[:, 2]]
        a = featurize_values(poses, "egocentric")
        b = featurize_values(moved, "egocentric")
        assert np.allclose(a, b, atol=1e-9)


class TestPoseWindow:
    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            PoseWindow(times=np.arange(5), poses=np.zeros((4, 3)), label=0, mode="nominal", source="s")
        with pytest.raises(ValueError):
            PoseWindow(times=np.arange(4), poses=np.zeros((4, 2)), label=0, mode="nominal", source="s")

    def test_rejects_bad_label(self):
        with pytest.raises(ValueError):
            PoseWindow(times=np.arange(4), poses=np.zeros((4, 3)), label=2, mode="nominal", source="s")


class TestSplit:
    def _windows(self, spec):
        """spec: list of (source, mode, n_windows)."""
        out = []
        for src, mode, n in spec:
            label = 0 if mode == "nominal" else 1
            for _ in range(n):
                out.append(window_of(np.zeros((10, 3)), label=label, mode=mode, source=src))
        return out

    def test_no_source_leaks_across_sides(self):
        ws = self._windows(
            [(f"nom{i}", "nominal", 7) for i in range(5)]
            + [(f"spd{i}", "speeding", 9) for i in range(5)]
        )
        split = split_dataset(ws, ratio=0.8, seed=0)
        train_srcs = {w.source for w in split.train}
        val_srcs = {w.source for w in split.val}
        assert not (train_srcs & val_srcs)
        assert len(split.train) + len(split.val) == len(ws)

    def test_ratio_respected_per_mode(self):
        ws = self._windows([(f"s{i}", "nominal", 3) for i in range(10)])
        split = split_dataset(ws, ratio=0.8, seed=1)
        assert len({w.source for w in split.train}) == 8
        assert len({w.source for w in split.val}) == 2

    def test_each_mode_keeps_a_val_log_when_possible(self):
        ws = self._windows([("a", "nominal", 4), ("b", "nominal", 4), ("c", "periodic", 4), ("d", "periodic", 4)])
        split = split_dataset(ws, ratio=0.99, seed=2)
        assert {w.mode for w in split.val} == {"nominal", "periodic"}

    def test_single_log_mode_warns(self):
        ws = self._windows([("only", "reckless", 6), ("a", "nominal", 5), ("b", "nominal", 5)])
        split = split_dataset(ws, ratio=0.5, seed=3)
        assert any("single log" in w for w in split.warnings)
        assert all(w.mode != "reckless" for w in split.val)

    def test_deterministic_given_seed(self):
        ws = self._windows([(f"s{i}", "nominal", 2) for i in range(8)])
        a = split_dataset(ws, ratio=0.75, seed=9)
        b = split_dataset(ws, ratio=0.75, seed=9)
        assert [w.source for w in a.train] == [w.source for w in b.train]
        assert [w.source for w in a.val] == [w.source for w in b.val]

    def test_rejects_bad_inputs(self):
        ws = self._windows([("a", "nominal", 2)])
        with pytest.raises(ValueError):
            split_dataset(ws, ratio=1.0, seed=0)
        with pytest.raises(ValueError):
            split_dataset([], ratio=0.8, seed=0)


class TestDatasetIO:
    def test_round_trip_with_source_table(self, tmp_path):
        rng = np.random.default_rng(5)
        ws = [
            window_of(rng.normal(size=(10, 3)), label=1, mode="periodic", source="p0")
            for _ in range(3)
        ] + [
            window_of(rng.normal(size=(10, 3)), label=0, mode="nominal", source="n0")
            for _ in range(2)
        ]
        path = write_dataset(tmp_path / "d.txt", ws)
        sources = [
            {"id": "p0", "mode": "periodic", "start": 0, "count": 3},
            {"id": "n0", "mode": "nominal", "start": 3, "count": 2},
        ]
        back = read_dataset(path, rate=2.0, sources=sources)
        assert len(back) == 5
        for orig, rt in zip(ws, back):
            assert rt.label == orig.label
            assert rt.mode == orig.mode
            assert rt.source == orig.source
            assert np.allclose(rt.poses, orig.poses, rtol=1e-8, atol=1e-12)
            assert np.allclose(rt.times, orig.times)

    def test_read_without_sources_marks_unknown(self, tmp_path):
        ws = [window_of(np.zeros((10, 3)), source="whatever")]
        path = write_dataset(tmp_path / "d.txt", ws)
        back = read_dataset(path, rate=2.0)
        assert back[0].source == "unknown"

    def test_rejects_malformed_lines(self, tmp_path):
        p = tmp_path / "d.txt"
        p.write_text("1,periodic,3\n")
        with pytest.raises(ValueError):
            read_dataset(p, rate=2.0)
        p.write_text("1,periodic,3,0:0:0;1:1:1\n")
        with pytest.raises(ValueError):
            read_dataset(p, rate=2.0)

    def test_metadata_round_trip(self, tmp_path):
        meta = {"rate": 2.0, "window_len": 10, "modes": ["nominal", "speeding"], "seed": 3}
        path = write_metadata(tmp_path / "meta.json", meta)
        assert read_metadata(path) == meta
