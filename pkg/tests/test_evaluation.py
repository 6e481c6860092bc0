import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from retinatrack import evaluation as ev
from retinatrack import phantom as ph
from retinatrack.gaze import INVALID, GazeEstimate


def est(y, p):
    return GazeEstimate(y, p, 10, 10.0, True)


def test_angular_error_examples():
    assert ev.angular_error(est(0.3, -0.2), ph.GazeAngle(0.3, -0.2)) == 0.0
    assert ev.angular_error(est(1, 0), ph.GazeAngle(0, 0)) == 1.0
    assert ev.angular_error(est(1, 1), ph.GazeAngle(0, 0)) == pytest.approx(math.sqrt(2))


def test_invalid_estimates_excluded_with_count():
    with pytest.raises(ev.InvalidEstimateError):
        ev.angular_error(INVALID, ph.GazeAngle(0, 0))
    errs, bad = ev.angular_errors([est(1, 0), INVALID, est(0, 0)], [ph.GazeAngle(0, 0)] * 3)
    assert errs.tolist() == [1.0, 0.0] and bad == 1


def test_stats_constant():
    s = ev.percentile_stats([0.2] * 10)
    assert (s.mean, s.e50, s.e75, s.e95) == pytest.approx((0.2,) * 4) and s.std == pytest.approx(0.0, abs=1e-15)
    assert s.count == 10


def test_stats_linear_interpolation():
    s = ev.percentile_stats([0.1, 0.2, 0.3, 0.4])
    assert s.e50 == pytest.approx(0.25)
    # rank (n - 1) p: 2.25 -> 0.325, 2.85 -> 0.385
    assert s.e75 == pytest.approx(0.325) and s.e95 == pytest.approx(0.385)
    assert s.std == pytest.approx(math.sqrt(0.0125))


def test_stats_empty():
    with pytest.raises(ev.EmptyInputError):
        ev.percentile_stats([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=60))
def test_percentiles_ordered(xs):
    s = ev.percentile_stats(xs)
    assert s.e50 <= s.e75 <= s.e95 <= max(xs)


def stats_with(mean, e95):
    return ev.ErrorStats(mean, 0.0, mean, mean, e95, 10)


def test_coverage_examples():
    one = [stats_with(0.1, 0.2)]
    assert ev.coverage_curve(one, [0.3]).e95_coverage.tolist() == [1.0]
    assert ev.coverage_curve(one, [0.0]).mean_coverage.tolist() == [0.0]
    two = [stats_with(0.1, 0.5), stats_with(0.3, 0.6)]
    assert ev.coverage_curve(two, [0.2]).mean_coverage.tolist() == [0.5]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=20))
def test_coverage_monotone(pairs):
    t = ev.coverage_curve([stats_with(a, b) for a, b in pairs], np.linspace(0, 1, 21))
    assert np.all(np.diff(t.mean_coverage) >= 0) and np.all(np.diff(t.e95_coverage) >= 0)


def test_robustness_zero_noise():
    rows = ev.robustness_noise_sim(noise_stds=(0.0,), trials=30)
    # zero up to floating-point rounding of the solve
    assert rows[0].max_node_error_mean < 1e-12 and rows[0].max_node_error_std < 1e-12


def test_robustness_needs_trials():
    with pytest.raises(ValueError):
        ev.robustness_noise_sim(trials=10)


def test_robustness_against_monte_carlo_oracle(cal):
    """Unit-weight solution equals the lstsq projection; compare a few trials by hand."""
    from ba_oracle import lstsq_oracle
    g = ev.grid_graph()
    truth = ev.grid_truth(cal=cal)
    mu0 = ev.exact_measurements(g, truth)
    r = np.random.default_rng(0)
    got = ev.robustness_noise_sim(noise_stds=(2.0,), trials=30, seed=0)[0]
    errs = []
    for _ in range(30):
        mu = mu0 + r.normal(0.0, 2.0, mu0.shape)
        n = lstsq_oracle(25, g.edges, mu, np.ones(40), 12)
        d = n - truth
        errs.append(np.max(np.hypot(d[:, 0] / cal.ppd_x, d[:, 1] / cal.ppd_y)))
    assert got.max_node_error_mean == pytest.approx(np.mean(errs), rel=1e-9)


def test_edge_removal_noise_free(cal):
    g = ev.grid_graph()
    mu = ev.exact_measurements(g, ev.grid_truth(cal=cal))
    rows = ev.edge_removal_sim(g, mu, cal)
    assert len(rows) == 40 and all(r.connected for r in rows)
    assert max(r.max_shift_deg for r in rows) < 1e-12


def test_edge_removal_reports_disconnection(cal):
    g = ev.grid_graph(1, 3)
    mu = ev.exact_measurements(g, ev.grid_truth(1, 3, cal=cal))
    rows = ev.edge_removal_sim(g, mu, cal)
    assert [r.connected for r in rows] == [False, False]


def test_blend_single_frame():
    img = np.random.default_rng(0).random((207, 253))
    out, origin = ev.blend_frames([ph.Frame(img)], np.array([[0.0, 0.0]]))
    cx, cy = -origin.astype(int)
    np.testing.assert_allclose(out[cy - 103:cy + 104, cx - 126:cx + 127], img, atol=1e-12)


def test_blend_identical_constants():
    frames = [ph.Frame(np.full((207, 253), 0.37))] * 2
    out, _ = ev.blend_frames(frames, np.array([[0.0, 0.0], [100.45, -20.3]]))
    np.testing.assert_allclose(out, 0.37, atol=1e-12)


def test_blend_skips_unplaced_frames():
    frames = [ph.Frame(np.full((20, 30), 0.2)), ph.Frame(np.full((20, 30), 0.9))]
    out, _ = ev.blend_frames(frames, np.array([[0.0, 0.0], [np.nan, np.nan]]))
    np.testing.assert_allclose(out, 0.2)


def test_blended_baseline_tracks(clean_build, clean_scan, retina, cal):
    bm = ev.blended_map_baseline(clean_scan.frames, clean_build.space.node_positions, cal)
    e = bm.track(ph.render_frame(retina, ph.GazeAngle(1.3, -2.2), cal))
    assert e.valid and abs(e.yaw - 1.3) < 0.02 and abs(e.pitch + 2.2) < 0.02


def test_bench_accounting(clean_build, clean_scan):
    frames = clean_scan.frames[:5]
    r1 = ev.bench_stages(frames, clean_build.space, min_frames=40)
    r2 = ev.bench_stages(frames, clean_build.space, min_frames=40)
    assert r1.n_frames == 40 and set(r1.stage_ms) == set(ev.BENCH_STAGES)
    assert abs(sum(r1.stage_ms.values()) - r1.total_ms) <= 0.1 * r1.total_ms
    for k in ev.BENCH_STAGES:
        a, b = r1.stage_ms[k], r2.stage_ms[k]
        if max(a, b) >= 1.0:  # sub-millisecond stages are dominated by timer jitter
            assert abs(a - b) / max(a, b) < 0.3, k
    assert r1.fps >= 10.0


def test_bench_empty():
    with pytest.raises(ev.EmptyInputError):
        ev.bench_stages([], None)
