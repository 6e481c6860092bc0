"""Error statistics, coverage curves, the blended-map baseline and simulation studies."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import phantom as ph
from .canonical import (BundleProblem, CanonicalFeatureSpace, EdgeMeasurement, GridGraph,
                        build_space, bundle_adjust, is_connected)
from .features import extract
from .gaze import GazeEstimate, TrackerConfig, estimate_gaze, match_to_space, track_frame
from .matching import Translation2D, mutual_nn, score_matches
from .phantom import Calibration, Frame, GazeAngle

PERCENTILES = (50, 75, 95)
BENCH_STAGES = ("enhancement", "detection", "nms_description", "matching", "scoring", "gaze")


class InvalidEstimateError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class ErrorStats:
    mean: float
    std: float
    e50: float
    e75: float
    e95: float
    count: int
    n_invalid: int = 0


@dataclass(frozen=True)
class RobustnessRow:
    noise_std: float
    max_node_error_mean: float
    max_node_error_std: float


@dataclass(frozen=True)
class CoverageTable:
    thresholds: np.ndarray
    mean_coverage: np.ndarray
    e95_coverage: np.ndarray

    def rows(self):
        return list(zip(self.thresholds.tolist(), self.mean_coverage.tolist(),
                        self.e95_coverage.tolist()))


def angular_error(est: GazeEstimate, truth: GazeAngle) -> float:
    """Euclidean norm of the (yaw, pitch) error in degrees."""
    if not est.valid:
        raise InvalidEstimateError("estimate is invalid")
    return float(np.hypot(est.yaw - truth.yaw, est.pitch - truth.pitch))


def angular_errors(estimates: Sequence[GazeEstimate], truths: Sequence[GazeAngle]):
    """Errors for the valid estimates, plus the number of invalid ones excluded."""
    errs = [angular_error(e, t) for e, t in zip(estimates, truths) if e.valid]
    return np.array(errs, dtype=float), sum(1 for e in estimates if not e.valid)


def percentile_stats(errors, n_invalid: int = 0) -> ErrorStats:
    """Mean, population std and linearly interpolated E50/E75/E95."""
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise EmptyInputError("no errors to summarise")
    p50, p75, p95 = np.percentile(e, PERCENTILES, method="linear")
    return ErrorStats(float(e.mean()), float(e.std()), float(p50), float(p75), float(p95),
                      int(e.size), int(n_invalid))


def coverage_curve(per_trial: Sequence[ErrorStats], thresholds) -> CoverageTable:
    """Fraction of trials whose mean (and, separately, E95) is at most each threshold."""
    if len(per_trial) == 0:
        raise EmptyInputError("no trials")
    th = np.asarray(thresholds, dtype=float)
    means = np.array([s.mean for s in per_trial])
    e95 = np.array([s.e95 for s in per_trial])
    return CoverageTable(th, (means[None, :] <= th[:, None]).mean(axis=1),
                         (e95[None, :] <= th[:, None]).mean(axis=1))


# ---------------------------------------------------------------------------
# pose-graph simulations

def grid_graph(rows: int = 5, cols: int = 5) -> GridGraph:
    return GridGraph(rows * cols, ph.grid_edges(rows, cols), (rows // 2) * cols + cols // 2)


def grid_truth(rows: int = 5, cols: int = 5, spacing_deg: float = 2.5,
               cal: Calibration = Calibration()) -> np.ndarray:
    """Exact node positions (px) of a grid scan, central node at the origin."""
    return np.array([ph.gaze_to_offset(g, cal) for g in ph.grid_gazes(rows, cols, spacing_deg)])


def _measurements(graph: GridGraph, mu: np.ndarray, weights=None) -> list[EdgeMeasurement]:
    w = np.ones(len(mu)) if weights is None else np.asarray(weights, dtype=float)
    return [EdgeMeasurement(k, Translation2D(float(m[0]), float(m[1])), float(wk))
            for k, (m, wk) in enumerate(zip(mu, w))]


def exact_measurements(graph: GridGraph, truth: np.ndarray) -> np.ndarray:
    a, b = np.array(graph.edges).T
    return truth[b] - truth[a]


def max_node_error_deg(n: np.ndarray, truth: np.ndarray, cal: Calibration) -> float:
    d = n - truth
    return float(np.max(np.hypot(d[:, 0] / cal.ppd_x, d[:, 1] / cal.ppd_y)))


def robustness_noise_sim(rows: int = 5, cols: int = 5, cal: Calibration = Calibration(),
                         noise_stds=(1.0, 2.0, 5.0, 10.0), trials: int = 200, seed: int = 0,
                         spacing_deg: float = 2.5) -> list[RobustnessRow]:
    """Max node error of unit-weight bundle adjustment under i.i.d. per-axis edge noise."""
    if trials < 30:
        raise ValueError("need at least 30 trials")
    graph = grid_graph(rows, cols)
    truth = grid_truth(rows, cols, spacing_deg, cal)
    mu0 = exact_measurements(graph, truth)
    rng = np.random.default_rng(seed)
    out = []
    for s in noise_stds:
        errs = np.empty(trials)
        for t in range(trials):
            mu = mu0 + rng.normal(0.0, s, mu0.shape) if s > 0 else mu0
            n = bundle_adjust(BundleProblem(graph, _measurements(graph, mu)))
            errs[t] = max_node_error_deg(n, truth, cal)
        out.append(RobustnessRow(float(s), float(errs.mean()), float(errs.std())))
    return out


@dataclass(frozen=True)
class EdgeRemovalRow:
    edge_index: int
    edge: tuple[int, int]
    connected: bool
    max_shift_deg: float


def edge_removal_sim(graph: GridGraph, mu: np.ndarray, cal: Calibration = Calibration(),
                     weights=None) -> list[EdgeRemovalRow]:
    """Drop each edge in turn, re-solve, and report the largest node shift (deg)."""
    mu = np.asarray(mu, dtype=float)
    w = np.ones(len(mu)) if weights is None else np.asarray(weights, dtype=float)
    base = bundle_adjust(BundleProblem(graph, _measurements(graph, mu, w)))
    out = []
    for k, e in enumerate(graph.edges):
        keep = [j for j in range(len(graph.edges)) if j != k]
        connected = is_connected(graph.node_count, [graph.edges[j] for j in keep])
        if not connected:
            out.append(EdgeRemovalRow(k, e, False, float("nan")))
            continue
        meas = [EdgeMeasurement(j, Translation2D(*mu[j]), float(w[j])) for j in keep]
        n = bundle_adjust(BundleProblem(graph, meas))
        out.append(EdgeRemovalRow(k, e, True, max_node_error_deg(n, base, cal)))
    return out


def noisy_grid_measurements(rows=5, cols=5, noise_std=0.5, seed=0, spacing_deg=2.5,
                            cal: Calibration = Calibration()):
    graph = grid_graph(rows, cols)
    mu = exact_measurements(graph, grid_truth(rows, cols, spacing_deg, cal))
    if noise_std > 0:
        mu = mu + np.random.default_rng(seed).normal(0.0, noise_std, mu.shape)
    return graph, mu


# ---------------------------------------------------------------------------
# explicit reference map baseline

def _feather(h: int, w: int) -> np.ndarray:
    i, j = np.arange(h), np.arange(w)
    return np.minimum.outer(np.minimum(i + 1, h - i), np.minimum(j + 1, w - j)).astype(float)


@dataclass(eq=False)
class BlendedMap:
    image: np.ndarray
    origin: np.ndarray
    space: CanonicalFeatureSpace

    def track(self, frame: Frame, cfg: TrackerConfig = TrackerConfig()) -> GazeEstimate:
        return track_frame(frame, self.space, cfg)


def blend_frames(frames: Sequence[Frame], node_positions: np.ndarray):
    """Feather-blend frames placed at ``node_positions`` (their centers, canonical px).

    Returns ``(image, origin)`` where ``origin`` is the canonical coordinate of
    image pixel (0, 0).  Sub-pixel placement uses bilinear resampling;
    uncovered pixels get the mean of the covered ones.
    """
    n = np.asarray(node_positions, dtype=float)
    placed = np.isfinite(n).all(axis=1)
    frames = [f for f, k in zip(frames, placed) if k]
    n = n[placed]
    fh, fw = frames[0].intensity.shape
    c = np.array([fw // 2, fh // 2], dtype=float)
    lo = np.floor((n - c).min(axis=0)).astype(int) - 1
    hi = np.ceil((n - c).max(axis=0)).astype(int) + np.array([fw, fh]) + 1
    W, H = hi - lo + 1
    acc = np.zeros((H, W))
    wsum = np.zeros((H, W))
    feather = np.pad(_feather(fh, fw), 1)
    for f, p in zip(frames, n):
        off = p - c - lo
        base = np.floor(off).astype(int)
        frac = off - base
        img = np.pad(f.intensity, 1, mode="edge")
        if frac.any():
            img = ndimage.shift(img, (frac[1], frac[0]), order=1, mode="nearest")
            wt = ndimage.shift(feather, (frac[1], frac[0]), order=1, mode="constant")
        else:
            wt = feather
        x0, y0 = base[0] - 1, base[1] - 1
        acc[y0:y0 + fh + 2, x0:x0 + fw + 2] += img * wt
        wsum[y0:y0 + fh + 2, x0:x0 + fw + 2] += wt
    covered = wsum > 0
    out = np.zeros((H, W))
    out[covered] = acc[covered] / wsum[covered]
    out[~covered] = out[covered].mean() if covered.any() else 0.0
    return out, lo.astype(float)


def blended_map_baseline(frames: Sequence[Frame], node_positions: np.ndarray,
                         cal: Calibration = Calibration(), use_enhancement: bool = False) -> BlendedMap:
    """Explicit reference map: blend the scan, then detect features on the map itself."""
    image, origin = blend_frames(frames, node_positions)
    fs = extract(image, use_enhancement=use_enhancement)
    space = CanonicalFeatureSpace(fs.xy + origin, fs.desc, np.asarray(node_positions, dtype=float),
                                  0, cal.ppd_x, cal.ppd_y)
    return BlendedMap(image, origin, space)


# ---------------------------------------------------------------------------
# phantom experiments

@dataclass(frozen=True)
class NominalConditions:
    gamma_jitter: float = 0.1
    noise_std: float = 0.02
    blur_max: float = 0.5
    vignette: float = 0.0

    def draw(self, rng) -> ph.AppearanceParams:
        return ph.jittered_appearance(rng, self.gamma_jitter, self.noise_std, self.blur_max, self.vignette)


@dataclass(eq=False)
class PhantomSetup:
    phantom: ph.RetinaPhantom
    scan: ph.GridScan
    build: object
    rng: np.random.Generator


def setup_phantom_run(seed: int, vessel_density: float = 0.5, size=(1200, 1100),
                      cal: Calibration = Calibration(), cond: NominalConditions = NominalConditions(),
                      rows: int = 5, cols: int = 5, spacing_deg: float = 2.5,
                      use_enhancement: bool = False) -> PhantomSetup:
    """Phantom + jittered grid scan + canonical space, all from one seed."""
    phantom = ph.generate_phantom(seed, vessel_density, size, cal=cal)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    aps = [cond.draw(rng) for _ in range(rows * cols)]
    scan = ph.grid_scan(phantom, cal, aps, rows, cols, spacing_deg, seed=seed)
    build = build_space(scan.frames, scan.edges, scan.central, cal, use_enhancement=use_enhancement)
    return PhantomSetup(phantom, scan, build, rng)


def render_test_frames(setup: PhantomSetup, n: int, cal: Calibration = Calibration(),
                       cond: NominalConditions = NominalConditions(),
                       range_deg: float = ph.GAZE_RANGE_DEG) -> list[Frame]:
    gazes = ph.random_gazes(setup.rng, n, range_deg)
    seeds = np.random.SeedSequence(int(setup.rng.integers(2 ** 31))).generate_state(n)
    return [ph.render_frame(setup.phantom, g, cal, cond.draw(setup.rng), int(s), frame_id=f"test_{k:04d}")
            for k, (g, s) in enumerate(zip(gazes, seeds))]


def evaluate(frames: Sequence[Frame], estimates: Sequence[GazeEstimate]) -> ErrorStats:
    errs, n_bad = angular_errors(estimates, [f.true_gaze for f in frames])
    return percentile_stats(errs, n_bad)


def phantom_tracking_study(seed: int = 0, n_frames: int = 500, cfg: TrackerConfig = TrackerConfig(),
                           cond: NominalConditions = NominalConditions()):
    setup = setup_phantom_run(seed, cal=cfg.cal, cond=cond, use_enhancement=cfg.use_enhancement)
    frames = render_test_frames(setup, n_frames, cfg.cal, cond)
    est = [track_frame(f, setup.build.space, cfg) for f in frames]
    return evaluate(frames, est), frames, est


def ablation_run(seed: int, n_frames: int = 500, cfg: TrackerConfig = TrackerConfig(),
                 cond: NominalConditions = NominalConditions()) -> tuple[ErrorStats, ErrorStats]:
    """Paired canonical-space vs blended-map tracking on the same scan and test frames."""
    setup = setup_phantom_run(seed, cal=cfg.cal, cond=cond, use_enhancement=cfg.use_enhancement)
    bmap = blended_map_baseline(setup.scan.frames, setup.build.space.node_positions, cfg.cal,
                                cfg.use_enhancement)
    frames = render_test_frames(setup, n_frames, cfg.cal, cond)
    canon, blend = [], []
    for f in frames:
        fs = extract(f, use_enhancement=cfg.use_enhancement, max_keypoints=cfg.max_keypoints)
        canon.append(estimate_gaze(match_to_space(fs, setup.build.space, cfg.cp), cfg))
        blend.append(estimate_gaze(match_to_space(fs, bmap.space, cfg.cp), cfg))
    return evaluate(frames, canon), evaluate(frames, blend)


# ---------------------------------------------------------------------------
# latency

class StageTimer:
    """Accumulates wall-clock time between successive ``mark`` calls."""

    def __init__(self):
        self.totals = {s: 0.0 for s in BENCH_STAGES}
        self._t = time.perf_counter()

    def start(self):
        self._t = time.perf_counter()

    def __call__(self, stage: str):
        now = time.perf_counter()
        self.totals[stage] += now - self._t
        self._t = now


@dataclass(frozen=True)
class BenchResult:
    stage_ms: dict
    total_ms: float
    n_frames: int

    @property
    def fps(self) -> float:
        return 1000.0 / self.total_ms if self.total_ms > 0 else float("inf")


def bench_stages(frames: Sequence[Frame], space: CanonicalFeatureSpace,
                 cfg: TrackerConfig = TrackerConfig(), min_frames: int = 100,
                 warmup: int = 3) -> BenchResult:
    """Mean per-stage latency (ms) over at least ``min_frames`` frames (cycling the input)."""
    if not frames:
        raise EmptyInputError("no frames to benchmark")
    n = max(min_frames, len(frames))
    seq = [frames[k % len(frames)] for k in range(n)]
    for f in seq[:warmup]:
        track_frame(f, space, cfg)
    timer = StageTimer()
    total = 0.0
    for f in seq:
        t0 = time.perf_counter()
        timer.start()
        fs = extract(f, use_enhancement=cfg.use_enhancement, max_keypoints=cfg.max_keypoints, timer=timer)
        m = mutual_nn(fs, space.features, src_xy=fs.centered_xy, tgt_xy=space.positions)
        timer("matching")
        m = score_matches(m, cfg.cp)
        timer("scoring")
        estimate_gaze(m, cfg)
        timer("gaze")
        total += time.perf_counter() - t0
    stage_ms = {k: 1000.0 * v / n for k, v in timer.totals.items()}
    return BenchResult(stage_ms, 1000.0 * total / n, n)
