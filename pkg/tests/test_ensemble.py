import numpy as np
import pytest

from opensed.dataset import Event, EventList, rasterize_labels
from opensed.ensemble import (Posteriorgram, decode_events, frame_confidence,
                              fuse_average, fuse_calibrated, load_posteriorgram,
                              median_filter, median_filter_tracks,
                              save_posteriorgram)


def rand_post(rng, t=20, c=3):
    sed = rng.random((t, c))
    sod = rng.random((t, 4))
    sod /= sod.sum(axis=1, keepdims=True)
    return Posteriorgram(sed, sod, 0.016)


class TestConfidence:
    def test_uniform_row(self):
        conf = frame_confidence(np.full((1, 4), 0.25))
        assert conf[0] == pytest.approx(0.75)

    def test_full_uncertainty(self):
        sod = np.array([[0.0, 0.0, 0.0, 1.0]])
        assert frame_confidence(sod)[0] == 0.0

    def test_antitone_in_uncertainty(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a = rng.random(4)
            a /= a.sum()
            b = a.copy()
            # move mass into the uncertainty slot
            b[3] += 0.9 * (1 - b[3])
            b /= b.sum()
            assert frame_confidence(b[None])[0] < frame_confidence(a[None])[0] \
                or b[3] == a[3]


class TestFuseCalibrated:
    def test_two_member_hand_case(self):
        p1 = Posteriorgram(np.full((1, 1), 1.0), np.full((1, 4), 0.25), 0.016)
        p2 = Posteriorgram(np.full((1, 1), 0.0), np.full((1, 4), 0.25), 0.016)
        fused = fuse_calibrated([p1, p2], [np.array([0.8]), np.array([0.2])])
        assert fused[0, 0] == pytest.approx(0.8, abs=1e-12)

    def test_equal_confidence_is_mean(self):
        rng = np.random.default_rng(1)
        members = [rand_post(rng) for _ in range(4)]
        confs = [np.full(20, 0.6)] * 4
        fused = fuse_calibrated(members, confs)
        mean = np.mean([m.sed for m in members], axis=0)
        assert np.allclose(fused, mean, atol=1e-12)

    def test_three_member_hand_case(self):
        members = [Posteriorgram(np.full((1, 1), v), np.full((1, 4), 0.25), 0.016)
                   for v in (0.6, 0.2, 0.4)]
        confs = [np.array([w]) for w in (1.0, 1.0, 2.0)]
        fused = fuse_calibrated(members, confs)
        assert fused[0, 0] == pytest.approx(0.4, abs=1e-12)

    def test_convex_combination_bounds(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            members = [rand_post(rng, t=5) for _ in range(3)]
            confs = [rng.random(5) for _ in range(3)]
            fused = fuse_calibrated(members, confs)
            stack = np.stack([m.sed for m in members])
            assert np.all(fused >= stack.min(axis=0) - 1e-12)
            assert np.all(fused <= stack.max(axis=0) + 1e-12)

    def test_confidence_scale_invariance(self):
        rng = np.random.default_rng(3)
        members = [rand_post(rng) for _ in range(3)]
        confs = [rng.random(20) + 0.1 for _ in range(3)]
        a = fuse_calibrated(members, confs)
        b = fuse_calibrated(members, [7.5 * c for c in confs])
        assert np.allclose(a, b, atol=1e-12)

    def test_single_member_identity(self):
        rng = np.random.default_rng(4)
        m = rand_post(rng)
        fused = fuse_calibrated([m], [rng.random(20) + 0.01])
        assert np.allclose(fused, m.sed, atol=1e-12)

    def test_zero_confidence_falls_back_to_mean(self):
        rng = np.random.default_rng(5)
        members = [rand_post(rng, t=3) for _ in range(2)]
        confs = [np.zeros(3), np.zeros(3)]
        fused = fuse_calibrated(members, confs)
        assert np.allclose(fused, np.mean([m.sed for m in members], axis=0))

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(6)
        with pytest.raises(ValueError, match="mismatch"):
            fuse_calibrated([rand_post(rng, t=5), rand_post(rng, t=6)],
                            [np.ones(5), np.ones(6)])


class TestFuseAverage:
    def test_identical_members_idempotent(self):
        rng = np.random.default_rng(7)
        m = rand_post(rng)
        fused = fuse_average([m] * 5, np.full(5, 0.2))
        assert np.allclose(fused, m.sed, atol=1e-12)

    def test_single_member_identity(self):
        rng = np.random.default_rng(8)
        m = rand_post(rng)
        assert np.allclose(fuse_average([m]), m.sed, atol=1e-12)

    def test_equals_calibrated_with_constant_confidence(self):
        rng = np.random.default_rng(9)
        members = [rand_post(rng) for _ in range(4)]
        avg = fuse_average(members)
        cal = fuse_calibrated(members, [np.full(20, 0.5)] * 4)
        assert np.allclose(avg, cal, atol=1e-12)

    def test_all_zero_weights_rejected(self):
        rng = np.random.default_rng(10)
        with pytest.raises(ValueError, match="zero"):
            fuse_average([rand_post(rng)], np.zeros(1))


class TestMedianFilter:
    def test_constant_track_unchanged(self):
        track = np.full(10, 0.3)
        assert np.array_equal(median_filter(track, 7), track)

    def test_isolated_spike_removed(self):
        out = median_filter(np.array([0, 0, 1, 0, 0], dtype=float), 3)
        assert out.tolist() == [0, 0, 0, 0, 0]

    def test_matches_sort_based_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            n = int(rng.integers(1, 40))
            track = rng.random(n)
            out = median_filter(track, 7)
            for t in range(n):
                window = sorted(track[max(0, t - 3):min(n, t + 4)])
                k = len(window)
                med = window[k // 2] if k % 2 else 0.5 * (window[k // 2 - 1]
                                                          + window[k // 2])
                assert out[t] == pytest.approx(med, abs=0.0)

    def test_even_window_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            median_filter(np.zeros(5), 4)

    def test_monotone_track_fixed_in_interior(self):
        # boundary windows are even-length, so only interior frames are
        # guaranteed to survive a monotone track unchanged
        rng = np.random.default_rng(12)
        track = np.sort(rng.random(30))
        assert np.array_equal(median_filter(track, 7)[3:-3], track[3:-3])

    def test_binary_stays_binary_in_interior(self):
        rng = np.random.default_rng(16)
        track = (rng.random(50) > 0.5).astype(float)
        out = median_filter(track, 7)[3:-3]
        assert set(np.unique(out)) <= {0.0, 1.0}

    def test_per_class_application(self):
        rng = np.random.default_rng(13)
        grid = rng.random((30, 4))
        out = median_filter_tracks(grid, 7)
        for c in range(4):
            assert np.array_equal(out[:, c], median_filter(grid[:, c], 7))


class TestDecodeEvents:
    CMAP = {"a": 0, "b": 1}

    def test_simple_run(self):
        fused = np.array([[0.9, 0.0], [0.9, 0.0], [0.1, 0.0]])
        ev = decode_events(fused, 0.016, self.CMAP)
        assert len(ev.events) == 1
        e = ev.events[0]
        assert (e.onset, e.label) == (0.0, "a")
        assert e.offset == pytest.approx(0.032)

    def test_all_below_threshold(self):
        assert decode_events(np.full((5, 2), 0.2), 0.016, self.CMAP).events == []

    def test_round_trip_with_rasterize(self):
        rng = np.random.default_rng(14)
        for _ in range(30):
            mask = (rng.random((25, 2)) > 0.6).astype(float)
            ev = decode_events(mask * 0.9 + 0.05, 0.016, self.CMAP)
            back = rasterize_labels(ev, 25, 0.016, self.CMAP)
            assert np.array_equal(back, mask)

    def test_bad_threshold_rejected(self):
        with pytest.raises(ValueError, match="threshold"):
            decode_events(np.zeros((3, 2)), 0.016, self.CMAP, threshold=1.5)


def test_posteriorgram_file_round_trip(tmp_path):
    rng = np.random.default_rng(15)
    post = rand_post(rng, t=13, c=5)
    path = tmp_path / "clip.post"
    save_posteriorgram(path, post)
    back = load_posteriorgram(path)
    assert np.array_equal(back.sed, post.sed)
    assert np.array_equal(back.sod, post.sod)
    assert back.hop_seconds == post.hop_seconds


def test_posteriorgram_validation():
    with pytest.raises(ValueError):
        Posteriorgram(np.zeros((3, 2)), np.zeros((4, 4)), 0.016)
    with pytest.raises(ValueError):
        Posteriorgram(np.zeros((3, 2)), np.zeros((3, 5)), 0.016)
