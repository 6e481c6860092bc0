"""Synthetic wide-field retina and small field-of-view frame rendering.

The phantom is a 2-D intensity map made of band-limited value noise (the
photoreceptor-scale texture) and dark curvilinear vessels.  Frames are crops of
the phantom taken at a position set by the gaze angle through a linear
pixels-per-degree calibration, followed by an appearance pipeline
(gamma -> blur -> vignette -> additive noise).

Conventions
-----------
Image coordinates are (x, y) with x to the right and y down, origin at the
top-left pixel.  A positive yaw moves the sampled region right on the phantom,
a positive pitch moves it *up* (towards smaller y).  The frame center is the
pixel ``(width // 2, height // 2)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

FRAME_WIDTH = 253
FRAME_HEIGHT = 207
PPD_X = 40.18
PPD_Y = 40.17
GAZE_RANGE_DEG = 5.0

# value-noise octaves: (cell size in px, amplitude)
_OCTAVES = ((24, 1.0), (12, 0.6), (6, 0.4))
# vessel count at vessel_density == 1, per megapixel
_VESSELS_PER_MPIX = 24.0


class CoverageError(ValueError):
    """Requested region is not covered by the phantom."""


@dataclass(frozen=True)
class Calibration:
    ppd_x: float = PPD_X
    ppd_y: float = PPD_Y
    steering_offset: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (self.ppd_x > 0 and self.ppd_y > 0):
            raise ValueError("pixels-per-degree ratios must be positive")


@dataclass(frozen=True)
class GazeAngle:
    yaw: float
    pitch: float


@dataclass(frozen=True)
class AppearanceParams:
    gamma: float = 1.0
    noise_std: float = 0.0
    blur_sigma: float = 0.0
    vignette_strength: float = 0.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.noise_std < 0 or self.blur_sigma < 0:
            raise ValueError("noise_std and blur_sigma must be >= 0")
        if not 0.0 <= self.vignette_strength <= 1.0:
            raise ValueError("vignette_strength must be in [0, 1]")

    @property
    def is_neutral(self) -> bool:
        return (self.gamma == 1.0 and self.noise_std == 0.0
                and self.blur_sigma == 0.0 and self.vignette_strength == 0.0)

    def as_dict(self) -> dict:
        return {"gamma": self.gamma, "noise_std": self.noise_std,
                "blur_sigma": self.blur_sigma,
                "vignette_strength": self.vignette_strength}


NEUTRAL = AppearanceParams()


@dataclass(frozen=True, eq=False)
class RetinaPhantom:
    intensity: np.ndarray
    texture_seed: int
    vessel_density: float
    vessel_map: np.ndarray = field(repr=False)

    @property
    def width(self) -> int:
        return self.intensity.shape[1]

    @property
    def height(self) -> int:
        return self.intensity.shape[0]

    @property
    def center(self) -> tuple[int, int]:
        """Phantom location of the (0, 0) gaze frame center."""
        return self.width // 2, self.height // 2


@dataclass(eq=False)
class Frame:
    intensity: np.ndarray
    true_gaze: Optional[GazeAngle] = None
    frame_id: str = ""

    @property
    def width(self) -> int:
        return self.intensity.shape[1]

    @property
    def height(self) -> int:
        return self.intensity.shape[0]

    @property
    def center(self) -> tuple[int, int]:
        return self.width // 2, self.height // 2


@dataclass
class GridScan:
    frames: list[Frame]
    edges: list[tuple[int, int]]
    central: int
    rows: int
    cols: int
    gazes: list[GazeAngle]


def required_size(frame_size=(FRAME_WIDTH, FRAME_HEIGHT), range_deg=GAZE_RANGE_DEG,
                  cal: Calibration = Calibration()) -> tuple[int, int]:
    """Smallest (width, height) covering ``range_deg`` around center plus one frame."""
    fw, fh = frame_size
    return (int(np.ceil(fw + 2 * range_deg * cal.ppd_x)) + 2,
            int(np.ceil(fh + 2 * range_deg * cal.ppd_y)) + 2)


def _value_noise(rng: np.random.Generator, shape: tuple[int, int], cell: int) -> np.ndarray:
    h, w = shape
    gh, gw = h // cell + 4, w // cell + 4
    grid = rng.random((gh, gw))
    up = ndimage.zoom(grid, cell, order=3, mode="mirror", grid_mode=True)
    return up[cell:cell + h, cell:cell + w]


def _quad_bezier(p0, p1, p2, n):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


def _draw_vessels(rng: np.random.Generator, shape: tuple[int, int], count: int) -> np.ndarray:
    """Darkening map in [0, 1] from ``count`` random quadratic arcs."""
    h, w = shape
    out = np.zeros(shape)
    for _ in range(count):
        p0 = rng.uniform((0, 0), (w, h))
        length = rng.uniform(0.25, 0.8) * min(w, h)
        ang = rng.uniform(0, 2 * np.pi)
        p2 = p0 + length * np.array([np.cos(ang), np.sin(ang)])
        mid = 0.5 * (p0 + p2)
        normal = np.array([-np.sin(ang), np.cos(ang)])
        p1 = mid + rng.uniform(-0.4, 0.4) * length * normal
        width = rng.uniform(1.5, 4.0)
        depth = rng.uniform(0.25, 0.6)

        pts = _quad_bezier(p0, p1, p2, int(length * 2) + 2)
        pad = int(np.ceil(4 * width)) + 1
        x0 = max(int(np.floor(pts[:, 0].min())) - pad, 0)
        x1 = min(int(np.ceil(pts[:, 0].max())) + pad, w)
        y0 = max(int(np.floor(pts[:, 1].min())) - pad, 0)
        y1 = min(int(np.ceil(pts[:, 1].max())) + pad, h)
        if x1 <= x0 or y1 <= y0:
            continue
        mask = np.ones((y1 - y0, x1 - x0), dtype=bool)
        ix = np.round(pts[:, 0]).astype(int) - x0
        iy = np.round(pts[:, 1]).astype(int) - y0
        ok = (ix >= 0) & (ix < x1 - x0) & (iy >= 0) & (iy < y1 - y0)
        if not ok.any():
            continue
        mask[iy[ok], ix[ok]] = False
        dist = ndimage.distance_transform_edt(mask)
        profile = depth * np.exp(-0.5 * (dist / width) ** 2)
        region = out[y0:y1, x0:x1]
        np.maximum(region, profile, out=region)
    return out


def generate_phantom(seed: int, vessel_density: float = 0.5,
                     size: tuple[int, int] = (1200, 1100), *,
                     frame_size=(FRAME_WIDTH, FRAME_HEIGHT),
                     range_deg: float = GAZE_RANGE_DEG,
                     cal: Calibration = Calibration()) -> RetinaPhantom:
    """Generate a deterministic retina phantom.

    Args:
        seed: texture and vessel seed.
        vessel_density: 0 gives a texture-only map, 1 the densest vasculature.
        size: (width, height) in pixels.
        frame_size, range_deg, cal: used only for the coverage check.

    Raises:
        CoverageError: if ``size`` cannot hold the gaze range plus one frame.
    """
    if not 0.0 <= vessel_density <= 1.0:
        raise ValueError("vessel_density must be in [0, 1]")
    w, h = size
    need_w, need_h = required_size(frame_size, range_deg, cal)
    if w < need_w or h < need_h:
        raise CoverageError(f"phantom {w}x{h} smaller than required {need_w}x{need_h}")

    ss = np.random.SeedSequence(seed)
    tex_seq, ves_seq = ss.spawn(2)
    tex_rng = np.random.default_rng(tex_seq)
    tex = np.zeros((h, w))
    for cell, amp in _OCTAVES:
        tex += amp * _value_noise(tex_rng, (h, w), cell)
    tex -= tex.min()
    tex /= tex.max()
    base = 0.15 + 0.7 * tex

    count = int(round(vessel_density * _VESSELS_PER_MPIX * w * h / 1e6))
    if count > 0:
        vessels = _draw_vessels(np.random.default_rng(ves_seq), (h, w), count)
    else:
        vessels = np.zeros((h, w))
    intensity = np.clip(base * (1.0 - vessels), 0.0, 1.0)
    intensity.setflags(write=False)
    return RetinaPhantom(intensity, int(seed), float(vessel_density), vessels)


def gaze_to_offset(gaze: GazeAngle, cal: Calibration) -> tuple[float, float]:
    """Image-plane offset (x right, y down) of the sampled region for ``gaze``."""
    return gaze.yaw * cal.ppd_x, -gaze.pitch * cal.ppd_y


def _crop_origin(phantom: RetinaPhantom, gaze: GazeAngle, cal: Calibration,
                 frame_size: tuple[int, int]) -> tuple[float, float]:
    fw, fh = frame_size
    cx, cy = phantom.center
    ox, oy = gaze_to_offset(gaze, cal)
    x0 = cx + ox - fw // 2
    y0 = cy + oy - fh // 2
    ix, iy = np.floor(x0), np.floor(y0)
    if ix < 0 or iy < 0 or ix + fw >= phantom.width or iy + fh >= phantom.height:
        raise CoverageError(f"gaze ({gaze.yaw:.3f}, {gaze.pitch:.3f}) deg outside phantom coverage")
    return x0, y0


def _bilinear_crop(img: np.ndarray, x0: float, y0: float, fw: int, fh: int) -> np.ndarray:
    ix, iy = int(np.floor(x0)), int(np.floor(y0))
    fx, fy = x0 - ix, y0 - iy
    if fx == 0.0 and fy == 0.0:
        return img[iy:iy + fh, ix:ix + fw].copy()
    a = img[iy:iy + fh, ix:ix + fw]
    b = img[iy:iy + fh, ix + 1:ix + fw + 1]
    c = img[iy + 1:iy + fh + 1, ix:ix + fw]
    d = img[iy + 1:iy + fh + 1, ix + 1:ix + fw + 1]
    return ((1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d))


def perturb_appearance(frame: Frame, ap: AppearanceParams,
                       noise_seed: Optional[int] = None) -> Frame:
    """Apply gamma, blur, vignette and additive noise, clamping after each stage."""
    img = frame.intensity
    if ap.is_neutral:
        return Frame(img.copy(), frame.true_gaze, frame.frame_id)
    img = np.clip(img, 0.0, 1.0) ** ap.gamma
    if ap.blur_sigma > 0:
        img = np.clip(ndimage.gaussian_filter(img, ap.blur_sigma, mode="nearest"), 0.0, 1.0)
    if ap.vignette_strength > 0:
        h, w = img.shape
        yy, xx = np.mgrid[0:h, 0:w]
        cx, cy = w // 2, h // 2
        r2 = ((xx - cx) ** 2 + (yy - cy) ** 2) / float(cx ** 2 + cy ** 2)
        img = np.clip(img * (1.0 - ap.vignette_strength * r2), 0.0, 1.0)
    if ap.noise_std > 0:
        rng = np.random.default_rng(noise_seed)
        img = np.clip(img + rng.normal(0.0, ap.noise_std, img.shape), 0.0, 1.0)
    return Frame(img, frame.true_gaze, frame.frame_id)


def render_frame(phantom: RetinaPhantom, gaze: GazeAngle, cal: Calibration = Calibration(),
                 ap: AppearanceParams = NEUTRAL, noise_seed: Optional[int] = None,
                 frame_size=(FRAME_WIDTH, FRAME_HEIGHT), frame_id: str = "") -> Frame:
    """Render the frame seen at ``gaze``.

    The frame center samples the phantom at
    ``(cx + yaw * ppd_x, cy - pitch * ppd_y)`` with bilinear interpolation.
    """
    fw, fh = frame_size
    x0, y0 = _crop_origin(phantom, gaze, cal, frame_size)
    img = _bilinear_crop(phantom.intensity, x0, y0, fw, fh)
    return perturb_appearance(Frame(img, gaze, frame_id), ap, noise_seed)


def grid_gazes(rows: int, cols: int, spacing_deg: float) -> list[GazeAngle]:
    """Row-major gaze targets, top row first (positive pitch)."""
    out = []
    for r in range(rows):
        for c in range(cols):
            out.append(GazeAngle((c - (cols - 1) / 2) * spacing_deg,
                                 ((rows - 1) / 2 - r) * spacing_deg))
    return out


def grid_edges(rows: int, cols: int) -> list[tuple[int, int]]:
    """4-neighbour adjacency, each edge directed from the lower to the higher index."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges.append((i, i + 1))
            if r + 1 < rows:
                edges.append((i, i + cols))
    return edges


def grid_scan(phantom: RetinaPhantom, cal: Calibration = Calibration(),
              ap: Union[AppearanceParams, Sequence[AppearanceParams]] = NEUTRAL,
              rows: int = 5, cols: int = 5, spacing_deg: float = 2.5,
              seed: int = 0, frame_size=(FRAME_WIDTH, FRAME_HEIGHT)) -> GridScan:
    """Render a rectangular grid scan centred on the (0, 0) gaze.

    ``ap`` is either one appearance for every frame or one per frame in
    row-major order.  The default spacing of 2.5 deg gives roughly 50-60%
    overlap between neighbours at the default frame size and calibration.
    """
    gazes = grid_gazes(rows, cols, spacing_deg)
    if isinstance(ap, AppearanceParams):
        aps = [ap] * len(gazes)
    else:
        aps = list(ap)
        if len(aps) != len(gazes):
            raise ValueError("need one AppearanceParams per grid frame")
    seeds = np.random.SeedSequence(seed).generate_state(len(gazes))
    frames = []
    for k, (g, a) in enumerate(zip(gazes, aps)):
        frames.append(render_frame(phantom, g, cal, a, int(seeds[k]), frame_size,
                                   frame_id=f"scan_{k:02d}"))
    central = (rows // 2) * cols + cols // 2
    return GridScan(frames, grid_edges(rows, cols), central, rows, cols, gazes)


def jittered_appearance(rng: np.random.Generator, gamma_jitter: float = 0.1,
                        noise_std: float = 0.02, blur_max: float = 0.5,
                        vignette: float = 0.0) -> AppearanceParams:
    """Nominal acquisition conditions: gamma in 1 +/- jitter, blur in [0, blur_max]."""
    return AppearanceParams(gamma=float(rng.uniform(1 - gamma_jitter, 1 + gamma_jitter)),
                            noise_std=noise_std,
                            blur_sigma=float(rng.uniform(0.0, blur_max)),
                            vignette_strength=vignette)


def random_gazes(rng: np.random.Generator, n: int, range_deg: float = GAZE_RANGE_DEG) -> list[GazeAngle]:
    yp = rng.uniform(-range_deg, range_deg, size=(n, 2))
    return [GazeAngle(float(a), float(b)) for a, b in yp]


def with_gaze(frame: Frame, gaze: GazeAngle) -> Frame:
    return replace(frame, true_gaze=gaze)
