import numpy as np
import pytest

from failurenet import nn
from failurenet.baselines import (
    KalmanConfig,
    ThresholdRule,
    fft_threshold_detect,
    fft_yaw_power,
    fit_kalman_threshold,
    fit_threshold,
    init_mlp_variant,
    kalman_detect,
    kalman_residuals,
    load_variant,
    mlp_variant_detect,
    read_rules,
    save_variant,
    speed_threshold_detect,
    train_mlp_variant,
    variant_features,
    variant_input_dim,
    window_speeds,
    write_rules,
)
from failurenet.data import PoseWindow, featurize_values
from failurenet.nn import TrainConfig

from oracles import brute_force_threshold, dft_power_naive, kalman_textbook


def straight_window(speed=0.3, length=10, dt=0.5, heading=0.0, start=(0.0, 0.0), label=0, mode="nominal"):
    times = np.arange(length) * dt
    d = speed * times
    x = start[0] + d * np.cos(heading)
    y = start[1] + d * np.sin(heading)
    theta = np.full(length, heading)
    return PoseWindow(times=times, poses=np.stack([x, y, theta], axis=1), label=label, mode=mode, source="s")


def arc_window(radius=0.7, speed=0.3, length=10, dt=0.5):
    times = np.arange(length) * dt
    ang = speed * times / radius
    poses = np.stack([radius * np.sin(ang), radius * (1 - np.cos(ang)), ang], axis=1)
    return PoseWindow(times=times, poses=poses, label=0, mode="nominal", source="a")


class TestWindowSpeeds:
    def test_straight_line_recovers_commanded_speed(self):
        speeds = window_speeds(straight_window(speed=0.3, heading=0.8))
        assert speeds.shape == (9,)
        assert np.allclose(speeds, 0.3, atol=1e-12)

    def test_arc_gives_chord_speed(self):
        r, v, dt = 0.7, 0.3, 0.5
        speeds = window_speeds(arc_window(radius=r, speed=v, dt=dt))
        # chord of the turned angle per step, not the arc length
        expected = 2 * r * np.sin(v * dt / (2 * r)) / dt
        assert np.allclose(speeds, expected, atol=1e-12)
        assert np.all(speeds < v)

    def test_speed_rule_fires_at_and_above_cut(self):
        rule = ThresholdRule(kind="max", threshold=0.4, feature="speed")
        assert speed_threshold_detect(straight_window(speed=0.3), rule) == 0
        assert speed_threshold_detect(straight_window(speed=0.5), rule) == 1
        exact = ThresholdRule(kind="max", threshold=0.3, feature="speed")
        assert speed_threshold_detect(straight_window(speed=0.3), exact) == 1


class TestFftYawPower:
    def test_matches_naive_dft_on_random_yaw(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            L = int(rng.integers(4, 25))
            yaw = rng.uniform(-0.5, 0.5, size=L)
            w = PoseWindow(
                times=np.arange(L) * 0.5,
                poses=np.stack([np.linspace(0, 1, L), np.zeros(L), yaw], axis=1),
                label=0,
                mode="nominal",
                source="f",
            )
            got = fft_yaw_power(w)
            want = dft_power_naive(yaw, 2, L // 2)
            assert got.shape == want.shape
            assert np.max(np.abs(got - want)) < 1e-9

    def test_pure_tone_lands_in_its_bin(self):
        L = 16
        k = 3
        yaw = 0.2 * np.sin(2 * np.pi * k * np.arange(L) / L)
        w = PoseWindow(
            times=np.arange(L) * 0.5,
            poses=np.stack([np.zeros(L), np.zeros(L), yaw], axis=1),
            label=0, mode="periodic", source="f",
        )
        power = fft_yaw_power(w)  # modes 2..8
        assert np.argmax(power) == k - 2
        assert power[k - 2] == pytest.approx((0.2 * L / 2) ** 2, rel=1e-9)
        others = np.delete(power, k - 2)
        assert np.all(others < 1e-18)

    def test_constant_and_first_mode_are_excluded(self):
        L = 12
        yaw = 1.3 + 0.4 * np.sin(2 * np.pi * np.arange(L) / L)
        w = PoseWindow(
            times=np.arange(L) * 0.5,
            poses=np.stack([np.zeros(L), np.zeros(L), yaw], axis=1),
            label=0, mode="nominal", source="f",
        )
        assert np.all(fft_yaw_power(w) < 1e-18)

    def test_wrapped_heading_is_unwrapped_before_transform(self):
        # constant turn rate crosses the pi boundary; powers must match the
        # explicit unwrapped ramp
        L = 10
        ramp = 2.5 + 0.8 * np.arange(L)
        wrapped = np.mod(ramp + np.pi, 2 * np.pi) - np.pi
        w = PoseWindow(
            times=np.arange(L) * 0.5,
            poses=np.stack([np.zeros(L), np.zeros(L), wrapped], axis=1),
            label=0, mode="nominal", source="f",
        )
        want = dft_power_naive(np.unwrap(wrapped), 2, L // 2)
        assert np.allclose(fft_yaw_power(w), want, atol=1e-9)

    def test_too_short_window_rejected(self):
        with pytest.raises(ValueError):
            fft_yaw_power(straight_window(length=3))

    def test_fft_rule_detects_oscillation(self):
        L = 10
        t = np.arange(L) * 0.5
        yaw = 0.3 * np.sin(2 * np.pi * 3 * np.arange(L) / L)  # bin-3 oscillation
        w = PoseWindow(
            times=t,
            poses=np.stack([0.3 * t, np.zeros(L), yaw], axis=1),
            label=1, mode="periodic", source="f",
        )
        rule = ThresholdRule(kind="max", threshold=0.5, feature="fft_power")
        assert fft_threshold_detect(w, rule) == 1
        assert fft_threshold_detect(straight_window(), rule) == 0


class TestFitThreshold:
    def test_matches_brute_force_on_random_problems(self):
        rng = np.random.default_rng(1)
        for trial in range(100):
            n = int(rng.integers(3, 120)) if trial % 10 else int(rng.integers(300, 501))
            scores = [rng.uniform(0, 1, size=int(rng.integers(1, 12))) for _ in range(n)]
            labels = rng.integers(0, 2, size=n)
            rule = fit_threshold(scores, labels, "speed")
            acc, kind, thr, preds = brute_force_threshold(scores, labels)
            assert rule.accuracy == acc
            assert rule.kind == kind
            assert rule.threshold == thr
            got = np.array(
                [int(_stat(s, rule.kind) >= rule.threshold) for s in scores], dtype=np.int64
            )
            assert np.array_equal(got, preds)

    def test_separable_scores_fit_perfectly(self):
        slow = [np.full(5, 0.3) for _ in range(20)]
        fast = [np.full(5, 0.5) for _ in range(20)]
        rule = fit_threshold(slow + fast, np.array([0] * 20 + [1] * 20), "speed")
        assert rule.accuracy == 1.0
        assert 0.3 < rule.threshold <= 0.5

    def test_degenerate_labels_reach_perfect_accuracy(self):
        scores = [np.array([v]) for v in (0.1, 0.2, 0.3)]
        all_safe = fit_threshold(scores, np.zeros(3, dtype=int), "speed")
        assert all_safe.accuracy == 1.0
        assert all_safe.threshold > 0.3
        all_unsafe = fit_threshold(scores, np.ones(3, dtype=int), "speed")
        assert all_unsafe.accuracy == 1.0
        assert all_unsafe.threshold <= 0.1

    def test_tie_prefers_first_kind(self):
        # both kinds separate perfectly: avg must win because it is listed first
        scores = [np.array([0.1, 0.1]), np.array([0.9, 0.9])]
        rule = fit_threshold(scores, np.array([0, 1]), "speed")
        assert rule.kind == "avg"

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            fit_threshold([np.array([1.0])], np.array([0, 1]), "speed")
        with pytest.raises(ValueError):
            fit_threshold([], np.array([], dtype=int), "speed")

    def test_rule_validation(self):
        with pytest.raises(ValueError):
            ThresholdRule(kind="median", threshold=0.1, feature="speed")
        with pytest.raises(ValueError):
            ThresholdRule(kind="avg", threshold=float("nan"), feature="speed")
        with pytest.raises(ValueError):
            ThresholdRule(kind="avg", threshold=0.1, feature="altitude")


def _stat(values, kind):
    return float(np.mean(values)) if kind == "avg" else float(np.max(values))


class TestKalman:
    def test_matches_textbook_filter(self):
        rng = np.random.default_rng(2)
        cfg = KalmanConfig()
        for _ in range(20):
            L = int(rng.integers(6, 15))
            times = np.arange(L) * 0.5
            poses = np.cumsum(rng.normal(scale=0.1, size=(L, 3)), axis=0)
            w = PoseWindow(times=times, poses=poses, label=0, mode="nominal", source="k")
            got = kalman_residuals(w, cfg)
            want, _, _ = kalman_textbook(times, poses, cfg.q, cfg.r, cfg.p0_rate)
            assert got.shape == want[cfg.warmup :].shape
            assert np.max(np.abs(got - want[cfg.warmup :])) < 1e-9

    def test_constant_velocity_track_has_small_residuals(self):
        res = kalman_residuals(straight_window(speed=0.3), KalmanConfig())
        assert res.shape == (7,)
        assert np.all(res < 1e-3)

    def test_position_jump_shows_up_at_its_step(self):
        w = straight_window(speed=0.3)
        w.poses[6:, 1] += 0.5
        res = kalman_residuals(w, KalmanConfig())
        assert np.argmax(res) == 6 - 1 - KalmanConfig().warmup
        assert np.max(res) > 0.3

    def test_detect_fires_only_on_disturbed_window(self):
        cfg = KalmanConfig(delta=0.2)
        assert kalman_detect(straight_window(speed=0.3), cfg) == 0
        w = straight_window(speed=0.3)
        w.poses[5:, 0] += 0.6
        assert kalman_detect(w, cfg) == 1

    def test_residuals_invariant_to_rigid_motion(self):
        rng = np.random.default_rng(3)
        poses = np.cumsum(rng.normal(scale=0.08, size=(10, 3)), axis=0)
        times = np.arange(10) * 0.5
        w = PoseWindow(times=times, poses=poses, label=0, mode="nominal", source="k")
        ang, tx, ty = 0.7, 1.1, -0.4
        rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        moved = poses.copy()
        moved[:, :2] = poses[:, :2] @ rot.T + np.array([tx, ty])
        moved[:, 2] = poses[:, 2] + ang
        w2 = PoseWindow(times=times, poses=moved, label=0, mode="nominal", source="k")
        cfg = KalmanConfig()
        assert np.allclose(kalman_residuals(w, cfg), kalman_residuals(w2, cfg), atol=1e-10)

    def test_covariance_blowup_is_an_error(self):
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(ValueError, match="positive definiteness"):
                kalman_residuals(straight_window(), KalmanConfig(q=1e300))

    def test_fit_threshold_separates_clean_from_jumpy(self):
        clean = [straight_window(speed=0.3, heading=h) for h in np.linspace(0, 1.2, 8)]
        jumpy = []
        for i in range(8):
            w = straight_window(speed=0.3, heading=0.2 * i)
            w.poses[4 + (i % 3):, 0] += 0.5
            jumpy.append(w)
        labels = np.array([0] * 8 + [1] * 8)
        fitted = fit_kalman_threshold(clean + jumpy, labels, KalmanConfig())
        preds = [kalman_detect(w, fitted) for w in clean + jumpy]
        assert np.mean(np.array(preds) == labels) == 1.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            KalmanConfig(q=0.0)
        with pytest.raises(ValueError):
            KalmanConfig(r=-1.0)
        with pytest.raises(ValueError):
            KalmanConfig(delta=0.0)
        with pytest.raises(ValueError):
            KalmanConfig(warmup=0)


class TestVariants:
    def test_input_dims(self):
        assert variant_input_dim("none", 10) == 30
        assert variant_input_dim("speed", 10) == 9
        assert variant_input_dim("fft", 10) == 4
        with pytest.raises(ValueError):
            variant_input_dim("wavelet", 10)

    def test_features_agree_with_their_sources(self):
        w = arc_window()
        assert np.array_equal(
            variant_features(w, "none", "egocentric"),
            featurize_values(w.poses, "egocentric").reshape(-1),
        )
        assert np.array_equal(variant_features(w, "speed"), window_speeds(w))
        assert np.array_equal(variant_features(w, "fft"), fft_yaw_power(w))

    def test_detect_rejects_mismatched_model(self):
        model = init_mlp_variant("none", window_len=10, hidden=(8,), seed=0)
        with pytest.raises(ValueError):
            mlp_variant_detect(straight_window(), "speed", model)

    def test_zeroed_model_scores_half(self):
        model = init_mlp_variant("speed", window_len=10, hidden=(8,), seed=0)
        for p in model.parameters():
            p.data[:] = 0.0
        assert mlp_variant_detect(straight_window(), "speed", model) == 0.5

    def test_speed_prefilter_learns_speeding(self):
        rng = np.random.default_rng(4)
        def noisy(speed, i):
            w = straight_window(speed=speed, heading=0.1 * (i % 7), mode="speeding" if speed > 0.4 else "nominal",
                                label=int(speed > 0.4))
            w.poses[:, :2] += rng.normal(scale=0.003, size=(10, 2))
            return w
        train = [noisy(0.3, i) for i in range(24)] + [noisy(0.5, i) for i in range(24)]
        val = [noisy(0.3, i) for i in range(8)] + [noisy(0.5, i) for i in range(8)]
        cfg = TrainConfig(lr=0.01, max_epochs=40, patience=40, batch_size=16, seed=0)
        result = train_mlp_variant(train, val, "speed", cfg, hidden=(8,))
        assert result.val_accuracy == 1.0
        assert result.pre_filter == "speed"

    def test_single_class_rejected(self):
        train = [straight_window(label=1, mode="speeding") for _ in range(6)]
        with pytest.raises(ValueError):
            train_mlp_variant(train, train, "speed", TrainConfig(max_epochs=1))

    def test_variant_round_trip(self, tmp_path):
        model = init_mlp_variant("fft", window_len=10, hidden=(16, 4), seed=5)
        path = save_variant(tmp_path / "fft.ckpt", model, "fft", 10, feature_mode="egocentric")
        back, meta = load_variant(path)
        assert meta["pre_filter"] == "fft"
        assert meta["window_len"] == 10
        assert meta["dims"] == [4, 16, 4, 1]
        for a, b in zip(model.parameters(), back.parameters()):
            assert np.array_equal(a.data, b.data)
        w = arc_window()
        assert mlp_variant_detect(w, "fft", model) == mlp_variant_detect(w, "fft", back)


class TestRulePersistence:
    def test_round_trip_preserves_exact_values(self, tmp_path):
        rules = {
            "speed": ThresholdRule(kind="max", threshold=0.4137 + 1e-13, feature="speed", accuracy=0.9625),
            "fft": ThresholdRule(kind="avg", threshold=1.0 / 3.0, feature="fft_power", accuracy=0.55),
        }
        path = write_rules(tmp_path / "rules.txt", rules)
        back = read_rules(path)
        assert set(back) == {"speed", "fft"}
        for name in rules:
            assert back[name].kind == rules[name].kind
            assert back[name].threshold == rules[name].threshold
            assert back[name].feature == rules[name].feature
            assert back[name].accuracy == rules[name].accuracy

    def test_empty_rules_round_trip(self, tmp_path):
        path = write_rules(tmp_path / "rules.txt", {})
        assert read_rules(path) == {}

    def test_bad_header_rejected(self, tmp_path):
        p = tmp_path / "rules.txt"
        p.write_text("some other file\nspeed speed max 0.4 0.9\n")
        with pytest.raises(ValueError):
            read_rules(p)

    def test_malformed_line_rejected(self, tmp_path):
        p = tmp_path / "rules.txt"
        p.write_text("failurenet-rules v1\nspeed speed max\n")
        with pytest.raises(ValueError):
            read_rules(p)
