import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentdrive import drivesim as ds
from latentdrive.drivesim import Action, Termination

from oracles import bicycle_rollout, five_action_sequences


def open_road():
    """Long straight road wide enough that no open-loop input can leave it."""
    return ds.TrackSpec(0, np.array([[0.0, 0.0], [5000.0, 0.0]]), 1000.0, 5000.0)


PALETTE = ds.WeatherPalette(1, (90, 90, 90), (240, 240, 240), (40, 140, 50), 0.0)


def test_generate_track_is_deterministic():
    a, b = ds.generate_track(7, "train"), ds.generate_track(7, "train")
    assert a.same_as(b)
    assert a.centerline.tobytes() == b.centerline.tobytes()


def test_generate_track_depends_on_seed():
    a, b = ds.generate_track(7, "train"), ds.generate_track(8, "train")
    assert not np.array_equal(a.centerline, b.centerline)


def test_generated_tracks_satisfy_invariants():
    for seed in range(1000):
        for diff in ("train", "test"):
            t = ds.generate_track(seed, diff)
            assert len(t.centerline) >= 2 and t.lane_half_width > 0
            assert t.length >= t.goal_arc_length


def _piece_curvatures(track):
    """Curvature of chords strictly inside a constant-curvature piece."""
    d = np.diff(track.centerline, axis=0)
    heading = np.unwrap(np.arctan2(d[:, 1], d[:, 0]))
    rate = np.diff(heading) / ds.WAYPOINT_SPACING
    # junction chords average two pieces; keep runs where neighbours agree
    inner = np.isclose(rate[1:-1], rate[:-2], atol=1e-9) & np.isclose(rate[1:-1], rate[2:], atol=1e-9)
    return np.abs(rate[1:-1][inner])


def test_train_and_test_curvatures_are_disjoint():
    train = np.concatenate([_piece_curvatures(ds.generate_track(s, "train")) for s in range(50)])
    test = np.concatenate([_piece_curvatures(ds.generate_track(s, "test")) for s in range(50)])
    test = test[test > 1e-9]  # straight lead-in
    assert train.max() <= ds.CURVATURE_RANGE["train"][1] + 1e-9
    assert test.min() >= ds.CURVATURE_RANGE["test"][0] - 1e-9


def test_unknown_difficulty_rejected():
    with pytest.raises(ds.ConfigError):
        ds.generate_track(1, "hard")


def test_track_invariants_enforced():
    with pytest.raises(ds.SimError):
        ds.TrackSpec(0, np.array([[0.0, 0.0]]), 3.0, 0.0)
    with pytest.raises(ds.SimError):
        ds.TrackSpec(0, np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]]), 3.0, 0.5)
    with pytest.raises(ds.SimError):
        ds.TrackSpec(0, np.array([[0.0, 0.0], [10.0, 0.0]]), 3.0, 11.0)


def test_palettes_distinguishable():
    for seed in list(range(100)) + list(range(1000, 1100)):
        p = ds.generate_palette(seed)  # the constructor enforces the invariants
        assert p.noise_std >= 0


def test_reset_at_zero():
    track = ds.generate_track(3)
    state, frame = ds.reset(track, ds.generate_palette(0), 0.0)
    assert state.arc_progress == 0 and state.elapsed_steps == 0 and state.speed == 0
    assert state.metrics == ds.StepMetrics(0.0, 0.0, 0.0, 0.0)
    assert state.status is Termination.RUNNING


def test_reset_on_straight_track_geometry():
    track = ds.TrackSpec(0, np.array([[1.0, 2.0], [1.0 + 30 * 0.6, 2.0 + 30 * 0.8]]), 3.0, 30.0)
    state, _ = ds.reset(track, PALETTE, 10.0)
    # 10 m from the first waypoint along the unit tangent (0.6, 0.8)
    assert state.position == pytest.approx((7.0, 10.0), abs=1e-12)
    assert state.heading == pytest.approx(math.atan2(0.8, 0.6))


def test_reset_frame_is_rasterized_state():
    track, pal = ds.generate_track(5), ds.generate_palette(5)
    state, frame = ds.reset(track, pal, 12.5)
    assert np.array_equal(frame.pixels, ds.rasterize(state, track, pal, 64).pixels)


def test_reset_rejects_bad_offset():
    track = ds.generate_track(3)
    with pytest.raises(ds.SimError):
        ds.reset(track, PALETTE, track.goal_arc_length)
    with pytest.raises(ds.SimError):
        ds.reset(track, PALETTE, -1.0)


def test_no_actuation_keeps_vehicle_still():
    track = ds.straight_track()
    state, _ = ds.reset(track, PALETTE, 0.0)
    state, _, _, term = ds.step(state, Action(0.0, 0.0), track, PALETTE)
    assert state.speed == 0.0 and term is Termination.RUNNING


def test_full_throttle_on_straight_track_reaches_goal():
    track = ds.straight_track(300.0, goal=250.0)
    state, _ = ds.reset(track, PALETTE, 0.0)
    prev = state.arc_progress
    oracle = bicycle_rollout([(0.0, 1.0)] * 200)
    for t in range(1000):
        state = ds.advance(state, Action(0.0, 1.0), track)
        assert state.arc_progress > prev
        assert state.arc_progress == pytest.approx(oracle[t][0], abs=1e-9)
        prev = state.arc_progress
        if state.status is not Termination.RUNNING:
            break
    assert state.status is Termination.SUCCESS
    # first oracle index at which x >= 250
    assert t == next(i for i, s in enumerate(oracle) if s[0] >= 250.0)


def test_full_lock_from_rest_collides():
    track = ds.straight_track()
    state, _ = ds.reset(track, PALETTE, 0.0)
    oracle = bicycle_rollout([(1.0, 1.0)] * 1000)
    limit = track.lane_half_width + ds.DEFAULT_SIM.shoulder_margin
    expected = next(i for i, s in enumerate(oracle) if abs(s[1]) > limit)
    for t in range(1000):
        state = ds.advance(state, Action(1.0, 1.0), track)
        if state.status is not Termination.RUNNING:
            break
    assert state.status is Termination.COLLISION and t == expected


def test_timeout_fires_at_budget():
    cfg = ds.SimConfig(step_budget=5)
    track = ds.straight_track()
    state, _ = ds.reset(track, PALETTE, 0.0, cfg)
    for _ in range(5):
        state = ds.advance(state, Action(0.0, 0.0), track, cfg)
    assert state.status is Termination.TIMEOUT and state.elapsed_steps == 5


def test_stepping_after_termination_is_rejected():
    cfg = ds.SimConfig(step_budget=1)
    track = ds.straight_track()
    state, _ = ds.reset(track, PALETTE, 0.0, cfg)
    state, *_ = ds.step(state, Action(0.0, 0.0), track, PALETTE, cfg)
    with pytest.raises(ds.EpisodeOver):
        ds.step(state, Action(0.0, 0.0), track, PALETTE, cfg)


def test_non_finite_action_rejected():
    track = ds.straight_track()
    state, _ = ds.reset(track, PALETTE, 0.0)
    with pytest.raises(ds.SimError):
        ds.step(state, Action(float("nan"), 0.0), track, PALETTE)
    with pytest.raises(ds.SimError):
        ds.step(state, Action(0.0, float("inf")), track, PALETTE)


@pytest.mark.parametrize("k", range(5))
def test_dynamics_match_independent_integrator(k):
    actions = five_action_sequences()[k]
    track = open_road()
    state, _ = ds.reset(track, PALETTE, 0.0)
    for (steer, pedal), ref in zip(actions, bicycle_rollout(actions)):
        state = ds.advance(state, Action(steer, pedal), track)
        got = (*state.position, state.heading, state.speed)
        assert max(abs(a - b) for a, b in zip(got, ref)) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.integers(0, 30))
def test_action_clamping(steer, pedal, warmup):
    track = ds.generate_track(11)
    state, _ = ds.reset(track, PALETTE, 5.0)
    for _ in range(warmup):
        state = ds.advance(state, Action(0.0, 0.6), track)
    raw = ds.advance(state, Action(steer, pedal), track)
    clamped = ds.advance(state, Action(steer, pedal).clamped(), track)
    assert raw == clamped


def test_reward_zero_deltas():
    m = ds.StepMetrics(0.3, 40.0, 1.0, 2.0)
    assert ds.compute_reward(m, m) == 0.0


def test_reward_progress_only():
    k = ds.RewardCoefficients(1, 0, 0, 0)
    assert ds.compute_reward(ds.StepMetrics(d=0.01), ds.StepMetrics(), k) == pytest.approx(0.01)


def test_reward_four_terms():
    k = ds.RewardCoefficients(1, 0.05, 2, 2)
    prev = ds.StepMetrics(0.1, 20.0, 0.5, 0.0)
    curr = ds.StepMetrics(0.102, 30.0, 0.6, 0.0)
    # 0.002 + 0.05 * 10 - 2 * 0.1
    assert ds.compute_reward(curr, prev, k) == pytest.approx(0.302)


def test_negative_coefficients_rejected():
    with pytest.raises(ds.ConfigError):
        ds.RewardCoefficients(1, -1, 0, 0)


def _episode(track, pal, offset, policy, cfg=ds.DEFAULT_SIM):
    state, frame = ds.reset(track, pal, offset, cfg)
    frames, metrics, terms = [frame.pixels], [state.metrics], []
    while state.status is Termination.RUNNING:
        state, frame, m, term = ds.step(state, policy(state), track, pal, cfg)
        frames.append(frame.pixels)
        metrics.append(m)
        terms.append(term)
    return frames, metrics, terms


def _wobbly(state):
    return Action(0.4 * math.sin(0.2 * state.elapsed_steps) - 0.3 * state.lateral_offset, 0.7)


def test_episode_determinism():
    track, pal = ds.generate_track(21), ds.generate_palette(4)
    a, b = _episode(track, pal, 3.0, _wobbly), _episode(track, pal, 3.0, _wobbly)
    assert len(a[0]) == len(b[0])
    assert all(np.array_equal(x, y) for x, y in zip(a[0], b[0]))
    assert a[1] == b[1] and a[2] == b[2]


def test_exactly_one_termination_and_monotone_metrics():
    track, pal = ds.generate_track(22), ds.generate_palette(4)
    _, metrics, terms = _episode(track, pal, 0.0, _wobbly)
    assert all(t is Termination.RUNNING for t in terms[:-1])
    assert terms[-1] is not Termination.RUNNING
    for prev, curr in zip(metrics, metrics[1:]):
        assert curr.d >= prev.d and curr.s >= prev.s and curr.o >= prev.o


def test_reward_telescopes():
    track, pal = ds.generate_track(23), ds.generate_palette(4)
    k = ds.RewardCoefficients()
    _, metrics, _ = _episode(track, pal, 0.0, lambda s: Action(0.25 * math.sin(0.1 * s.elapsed_steps), 0.8))
    total = math.fsum(ds.compute_reward(c, p, k) for p, c in zip(metrics, metrics[1:]))
    first, last = metrics[0], metrics[-1]
    direct = (k.k1 * (last.d - first.d) + k.k2 * (last.v - first.v)
              - k.k3 * (last.s - first.s) - k.k4 * (last.o - first.o))
    assert total == pytest.approx(direct, abs=1e-9)


def test_offroad_and_divider_metrics_accrue_on_their_sides():
    track = ds.straight_track(lane_half_width=3.0)
    left = ds.VehicleState((10.0, 3.2), 0.0, 1.0, 10.0, 1)
    right = ds.VehicleState((10.0, -3.2), 0.0, 1.0, 10.0, 1)
    lm = ds.advance(left, Action(0.0, 0.0), track).metrics
    rm = ds.advance(right, Action(0.0, 0.0), track).metrics
    assert lm.o == pytest.approx(0.1) and lm.s == 0.0
    assert rm.s == pytest.approx(0.1) and rm.o == 0.0


def test_rasterize_symmetry_on_straight_track():
    track = ds.straight_track()
    state, _ = ds.reset(track, PALETTE, 20.0)
    for size in ds.FRAME_SIZES:
        px = ds.rasterize(state, track, PALETTE, size).pixels
        mirrored = px[:, ::-1]
        lane = np.array(PALETTE.lane_color, dtype=np.uint8)
        ignore = np.all(px == lane, axis=-1) | np.all(mirrored == lane, axis=-1)
        assert np.array_equal(px[~ignore], mirrored[~ignore])
        assert np.any(np.all(px == np.array(PALETTE.road_color, dtype=np.uint8), axis=-1))


def test_rasterize_deterministic_including_noise():
    track, pal = ds.generate_track(9), ds.WeatherPalette(2, (90, 90, 90), (240, 240, 240), (40, 140, 50), 0.05)
    state, _ = ds.reset(track, pal, 30.0)
    a, b = ds.rasterize(state, track, pal, 64), ds.rasterize(state, track, pal, 64)
    assert a.tobytes() == b.tobytes()


def test_rasterize_offroad_vehicle():
    track = ds.straight_track()
    state = ds.VehicleState((50.0, 40.0), 0.0, 0.0, 50.0, 0)
    px = ds.rasterize(state, track, PALETTE, 64).pixels
    frac = np.mean(np.all(px == np.array(PALETTE.offroad_color, dtype=np.uint8), axis=-1))
    assert frac >= 0.9


def test_rasterize_rejects_unsupported_size():
    track = ds.straight_track()
    state, _ = ds.reset(track, PALETTE, 0.0)
    with pytest.raises(ds.ConfigError):
        ds.rasterize(state, track, PALETTE, 48)


def test_frame_buffer_length():
    track, pal = ds.generate_track(1), ds.generate_palette(1)
    state, _ = ds.reset(track, pal, 0.0)
    for size in ds.FRAME_SIZES:
        f = ds.rasterize(state, track, pal, size)
        assert len(f.tobytes()) == f.width * f.height * 3


def test_text_roundtrips():
    track, pal = ds.generate_track(42, "test"), ds.generate_palette(1042)
    assert ds.track_from_text(ds.track_to_text(track)).same_as(track)
    assert ds.palette_from_text(ds.palette_to_text(pal)) == pal


def test_frame_dump_header(tmp_path):
    track, pal = ds.generate_track(1), ds.generate_palette(1)
    state, frame = ds.reset(track, pal, 0.0)
    path = tmp_path / "frames.rgb"
    ds.write_frames(path, [frame, frame])
    raw = path.read_bytes()
    assert raw[:8] == (64).to_bytes(4, "little") + (64).to_bytes(4, "little")
    assert len(raw) == 8 + 2 * 64 * 64 * 3
    back = ds.read_frames(path)
    assert len(back) == 2 and np.array_equal(back[1].pixels, frame.pixels)
