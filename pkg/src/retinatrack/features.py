"""Deterministic keypoint detection and description.

Detection is a multi-scale difference-of-Gaussians magnitude map followed by
7x7 non-maximum suppression at a 0.15 threshold with sub-pixel quadratic
refinement.  Descriptors are 4x4 cells x 8 orientation histograms sampled on a
16x16 grid around each keypoint (128 values, L2-normalised).
"""
from __future__ import annotations

import csv
from functools import cached_property
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .imgmath import EnhanceParams, enhance
from .phantom import Frame

NMS_WINDOW = 7
DETECTION_THRESHOLD = 0.15
DESC_DIM = 128
PATCH = 16
PATCH_RADIUS = PATCH // 2
ENHANCE_KAPPA = 2.0

_DOG_SIGMAS = (1.2, 1.7, 2.4, 3.4)
_GRAD_SIGMA = 1.0
_N_ORI = 8
_N_CELL = 4


@dataclass(eq=False)
class FeatureSet:
    """Keypoints (image coordinates) with their unit-norm descriptors."""

    xy: np.ndarray
    response: np.ndarray
    desc: np.ndarray
    image_shape: tuple[int, int] = (0, 0)
    frame_id: str = ""

    def __len__(self):
        return len(self.xy)

    @cached_property
    def desc32(self) -> np.ndarray:
        """float32 copy used for nearest-neighbour search."""
        return np.ascontiguousarray(self.desc, dtype=np.float32)

    @property
    def center(self) -> np.ndarray:
        h, w = self.image_shape
        return np.array([w // 2, h // 2], dtype=float)

    @property
    def centered_xy(self) -> np.ndarray:
        """Keypoint positions relative to the frame center pixel."""
        return self.xy - self.center

    @classmethod
    def empty(cls, image_shape=(0, 0), frame_id=""):
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, DESC_DIM)), tuple(image_shape), frame_id)

    def subset(self, idx) -> "FeatureSet":
        return FeatureSet(self.xy[idx], self.response[idx], self.desc[idx], self.image_shape, self.frame_id)

    def to_csv(self, path) -> None:
        """Debug dump: x, y, response, d0..d127."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "response"] + [f"d{i}" for i in range(DESC_DIM)])
            for (x, y), r, d in zip(self.xy, self.response, self.desc):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(r))] + [repr(float(v)) for v in d])


def response_map(frame) -> np.ndarray:
    """Multi-scale |DoG| normalised so that its maximum is 1 (all zero for flat frames)."""
    img = frame.intensity if isinstance(frame, Frame) else np.asarray(frame, dtype=float)
    if np.ptp(img) == 0:
        return np.zeros_like(img, dtype=float)
    blurred = [ndimage.gaussian_filter(img, s, mode="nearest") for s in _DOG_SIGMAS]
    resp = np.zeros_like(img, dtype=float)
    for lo, hi in zip(blurred[:-1], blurred[1:]):
        np.maximum(resp, np.abs(lo - hi), out=resp)
    peak = resp.max()
    if peak <= 0:
        return resp
    return resp / peak


def _refine(prob: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vertex of the quadratic through each 3x3 neighbourhood."""
    c = prob[ys, xs]
    l, r = prob[ys, xs - 1], prob[ys, xs + 1]
    u, d = prob[ys - 1, xs], prob[ys + 1, xs]
    gx, gy = 0.5 * (r - l), 0.5 * (d - u)
    hxx, hyy = r - 2 * c + l, d - 2 * c + u
    hxy = 0.25 * (prob[ys + 1, xs + 1] - prob[ys + 1, xs - 1]
                  - prob[ys - 1, xs + 1] + prob[ys - 1, xs - 1])
    det = hxx * hyy - hxy * hxy
    with np.errstate(divide="ignore", invalid="ignore"):
        ox = -(hyy * gx - hxy * gy) / det
        oy = -(hxx * gy - hxy * gx) / det
        # fallback: independent 1-D parabolas
        fx = np.where(hxx < 0, -gx / hxx, 0.0)
        fy = np.where(hyy < 0, -gy / hyy, 0.0)
    good = (det > 0) & (hxx < 0) & (np.abs(ox) <= 1) & (np.abs(oy) <= 1)
    ox = np.where(good, ox, np.clip(fx, -0.5, 0.5))
    oy = np.where(good, oy, np.clip(fy, -0.5, 0.5))
    return xs + ox, ys + oy


def nms_detect(prob: np.ndarray, window: int = NMS_WINDOW,
               threshold: float = DETECTION_THRESHOLD) -> tuple[np.ndarray, np.ndarray]:
    """Local maxima of ``prob`` at or above ``threshold``.

    Returns ``(xy, response)`` with sub-pixel ``xy`` of shape (K, 2), sorted by
    descending response.  Plateaus inside a window keep the pixel with the
    lowest y, then lowest x.  The one-pixel border is never reported.
    """
    if window % 2 != 1:
        raise ValueError("NMS window must be odd")
    prob = np.asarray(prob, dtype=float)
    h, w = prob.shape
    if h < 3 or w < 3:
        return np.zeros((0, 2)), np.zeros(0)
    mx = ndimage.maximum_filter(prob, size=window, mode="constant", cval=-np.inf)
    cand = (prob == mx) & (prob >= threshold)
    cand[0, :] = cand[-1, :] = cand[:, 0] = cand[:, -1] = False
    ys, xs = np.nonzero(cand)
    if ys.size == 0:
        return np.zeros((0, 2)), np.zeros(0)
    vals = prob[ys, xs]
    order = np.lexsort((xs, ys, -vals))
    ys, xs, vals = ys[order], xs[order], vals[order]

    # only plateau ties can sit inside each other's window
    half = window // 2
    keep = np.ones(ys.size, dtype=bool)
    taken = np.zeros((h, w), dtype=bool)
    for k in range(ys.size):
        y, x = ys[k], xs[k]
        if taken[y, x]:
            keep[k] = False
            continue
        taken[max(y - half, 0):y + half + 1, max(x - half, 0):x + half + 1] = True
    ys, xs, vals = ys[keep], xs[keep], vals[keep]
    rx, ry = _refine(prob, ys, xs)
    return np.column_stack([rx, ry]), vals


def _gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sm = ndimage.gaussian_filter(img, _GRAD_SIGMA, mode="nearest")
    gy, gx = np.gradient(sm)
    return gx, gy


_IOFFS = np.arange(PATCH) - PATCH_RADIUS
_OFFS = _IOFFS + 0.5
_CELL_OF = (np.arange(PATCH) // (PATCH // _N_CELL))
_SPATIAL_W = np.exp(-0.5 * (_OFFS[:, None] ** 2 + _OFFS[None, :] ** 2) / (0.5 * PATCH) ** 2)


def describe(frame, xy: np.ndarray, response: Optional[np.ndarray] = None,
             frame_id: str = "") -> FeatureSet:
    """Describe keypoints; those closer than the patch radius (+1) to the border are dropped."""
    img = frame.intensity if isinstance(frame, Frame) else np.asarray(frame, dtype=float)
    if isinstance(frame, Frame) and not frame_id:
        frame_id = frame.frame_id
    h, w = img.shape
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    if response is None:
        response = np.ones(len(xy))
    lim = PATCH_RADIUS + 1
    ok = ((xy[:, 0] >= lim) & (xy[:, 0] <= w - 1 - lim)
          & (xy[:, 1] >= lim) & (xy[:, 1] <= h - 1 - lim))
    xy, response = xy[ok], np.asarray(response, dtype=float)[ok]
    if len(xy) == 0:
        return FeatureSet.empty(img.shape, frame_id)

    gx, gy = _gradients(img)
    # patches are cut at the rounded keypoint; only positions carry sub-pixel precision
    cx = np.rint(xy[:, 0]).astype(int)
    cy = np.rint(xy[:, 1]).astype(int)
    rows = cy[:, None, None] + _IOFFS[None, :, None]
    cols = cx[:, None, None] + _IOFFS[None, None, :]
    px = gx[rows, cols]
    py = gy[rows, cols]
    mag = np.hypot(px, py) * _SPATIAL_W
    ang = np.mod(np.arctan2(py, px), 2 * np.pi) * (_N_ORI / (2 * np.pi))
    b0 = np.floor(ang).astype(int) % _N_ORI
    frac = ang - np.floor(ang)
    b1 = (b0 + 1) % _N_ORI

    K = len(xy)
    cell = (_CELL_OF[:, None] * _N_CELL + _CELL_OF[None, :])  # (PATCH, PATCH)
    base = (np.arange(K)[:, None, None] * _N_CELL * _N_CELL + cell[None]) * _N_ORI
    size = K * DESC_DIM
    desc = (np.bincount((base + b0).ravel(), (mag * (1 - frac)).ravel(), minlength=size)
            + np.bincount((base + b1).ravel(), (mag * frac).ravel(), minlength=size))
    desc = desc.reshape(K, DESC_DIM)

    norm = np.linalg.norm(desc, axis=1, keepdims=True)
    good = norm[:, 0] > 1e-12
    desc = desc[good] / norm[good]
    desc = np.minimum(desc, 0.2)
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    return FeatureSet(xy[good], response[good], desc, img.shape, frame_id)


def enhancement_alpha(img: np.ndarray, kappa: float = ENHANCE_KAPPA, window_sigma: float = 8.0) -> np.ndarray:
    """Per-pixel curve parameter pulling the local mean towards mid-grey."""
    local_mean = ndimage.gaussian_filter(img, window_sigma, mode="nearest")
    return np.clip(kappa * (0.5 - local_mean), -1.0, 1.0)


def enhance_frame(img: np.ndarray, kappa: float = ENHANCE_KAPPA, iterations: int = 2) -> np.ndarray:
    if kappa == 0:
        return img
    return enhance(img, EnhanceParams(enhancement_alpha(img, kappa), iterations))


def extract(frame, use_enhancement: bool = False, kappa: float = ENHANCE_KAPPA,
            iterations: int = 2, max_keypoints: Optional[int] = None,
            timer=None) -> FeatureSet:
    """Full per-frame front end: optional enhancement, response map, NMS, description.

    ``timer`` is an optional callable ``timer(stage_name)`` used by the
    benchmark harness to mark stage boundaries.
    """
    img = frame.intensity if isinstance(frame, Frame) else np.asarray(frame, dtype=float)
    fid = frame.frame_id if isinstance(frame, Frame) else ""
    if use_enhancement:
        img = enhance_frame(img, kappa, iterations)
    if timer:
        timer("enhancement")
    prob = response_map(img)
    if timer:
        timer("detection")
    xy, resp = nms_detect(prob)
    if max_keypoints is not None and len(xy) > max_keypoints:
        xy, resp = xy[:max_keypoints], resp[:max_keypoints]
    fs = describe(img, xy, resp, frame_id=fid)
    if timer:
        timer("nms_description")
    return fs
