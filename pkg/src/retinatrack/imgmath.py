"""Enhancement curve, training losses and inlier labelling as plain numpy functions.

Every function here is pure and side-effect free; analytic gradients are
provided next to the losses so they can be checked against
:func:`finite_diff_grad`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

BCE_FLOOR = 1e-7


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class EnhanceParams:
    alpha: np.ndarray | float = 0.0
    iterations: int = 2


@dataclass(frozen=True)
class LossParams:
    margin: float = 1.0
    gamma: float = 0.1
    temperature: float = 0.1
    headroom: float = 1000.0
    epsilon: float = 10.0

    def __post_init__(self):
        if self.temperature <= 0 or self.epsilon <= 0 or self.headroom < 0:
            raise ValueError("need temperature > 0, epsilon > 0, headroom >= 0")


def _sigmoid(z):
    # numerically stable for large |z|
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_alpha(alpha):
    a = np.asarray(alpha, dtype=float)
    if np.any(np.abs(a) > 1.0):
        raise ValueError("enhancement alpha must satisfy |alpha| <= 1")
    return a


def enhance_step(image, alpha):
    """One application of the quadratic curve ``I + alpha * I * (1 - I)``."""
    I = np.asarray(image, dtype=float)
    a = _check_alpha(alpha)
    return I + a * I * (1.0 - I)


def enhance(image, params: EnhanceParams = EnhanceParams()):
    """``params.iterations`` compositions of :func:`enhance_step` with a shared alpha."""
    if params.iterations < 1:
        raise ValueError("iterations must be >= 1")
    out = np.asarray(image, dtype=float)
    for _ in range(params.iterations):
        out = enhance_step(out, params.alpha)
    return out


def enhance_grad(image, params: EnhanceParams = EnhanceParams()):
    """Elementwise derivative of :func:`enhance` with respect to the input image."""
    a = _check_alpha(params.alpha)
    I = np.asarray(image, dtype=float)
    g = np.ones_like(I)
    for _ in range(params.iterations):
        g = g * (1.0 + a * (1.0 - 2.0 * I))
        I = I + a * I * (1.0 - I)
    return g


def soft_keypoint_count(prob, gamma: float = 0.1, temperature: float = 0.1) -> float:
    """Sum over pixels of ``sigmoid((D - gamma) / t)``."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    D = np.asarray(prob, dtype=float)
    return float(_sigmoid((D - gamma) / temperature).sum())


def soft_keypoint_count_grad(prob, gamma: float = 0.1, temperature: float = 0.1):
    s = _sigmoid((np.asarray(prob, dtype=float) - gamma) / temperature)
    return s * (1.0 - s) / temperature


def keypoint_preserve_loss(d_enhanced, d_raw, lp: LossParams = LossParams(),
                           raw_count: float | None = None) -> float:
    """Hinge on the soft keypoint gain of the enhanced map over the raw map.

    The raw-map count enters as a constant (it carries no gradient), so the
    loss is ``max(0, h - (count(d_enhanced) - count(d_raw)))``. Passing
    ``raw_count`` freezes that constant; ``d_raw`` is then only shape-checked.
    """
    de = np.asarray(d_enhanced, dtype=float)
    dr = np.asarray(d_raw, dtype=float)
    if de.shape != dr.shape:
        raise ShapeError(f"probability maps differ in shape: {de.shape} vs {dr.shape}")
    if raw_count is None:
        raw_count = soft_keypoint_count(dr, lp.gamma, lp.temperature)
    gain = soft_keypoint_count(de, lp.gamma, lp.temperature) - raw_count
    return max(0.0, lp.headroom - gain)


def keypoint_preserve_objective(d_raw, lp: LossParams = LossParams()):
    """Loss as a function of ``(d_enhanced, d_raw)`` with the raw branch detached.

    The raw count is evaluated once from ``d_raw`` and held fixed, which is
    what a stop-gradient does during differentiation.
    """
    frozen = soft_keypoint_count(d_raw, lp.gamma, lp.temperature)

    def objective(d_enhanced, d_raw_in):
        return keypoint_preserve_loss(d_enhanced, d_raw_in, lp, raw_count=frozen)

    return objective


def keypoint_preserve_loss_grad(d_enhanced, d_raw, lp: LossParams = LossParams()):
    """Gradients ``(d/dD_enhanced, d/dD_raw)``; the raw gradient is identically zero."""
    de = np.asarray(d_enhanced, dtype=float)
    dr = np.asarray(d_raw, dtype=float)
    active = keypoint_preserve_loss(de, dr, lp) > 0
    g_enh = -soft_keypoint_count_grad(de, lp.gamma, lp.temperature) if active else np.zeros_like(de)
    return g_enh, np.zeros_like(dr)


def _as_rows(x, name):
    a = np.asarray(x, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"{name} must be a (K, D) array")
    return a


def triplet_descriptor_loss(anchor, positive, neg_random, neg_hard, margin: float = 1.0) -> float:
    """Sum over keypoints of ``max(0, m + d_pos - (d_neg_rand + d_neg_hard) / 2)``.

    Distances are Euclidean between descriptors; how negatives are mined is
    the caller's business.
    """
    a, p, nr, nh = (_as_rows(x, n) for x, n in
                    ((anchor, "anchor"), (positive, "positive"),
                     (neg_random, "neg_random"), (neg_hard, "neg_hard")))
    if not (a.shape == p.shape == nr.shape == nh.shape):
        raise ShapeError("descriptor lists must be aligned per keypoint")
    terms = _triplet_terms(a, p, nr, nh, margin)
    return float(np.maximum(0.0, terms).sum())


def _triplet_terms(a, p, nr, nh, margin):
    d_pos = np.linalg.norm(a - p, axis=1)
    d_nr = np.linalg.norm(a - nr, axis=1)
    d_nh = np.linalg.norm(a - nh, axis=1)
    return margin + d_pos - 0.5 * (d_nr + d_nh)


def triplet_descriptor_loss_grad_anchor(anchor, positive, neg_random, neg_hard, margin: float = 1.0):
    """Gradient of :func:`triplet_descriptor_loss` with respect to the anchors."""
    a, p, nr, nh = (_as_rows(x, "desc") for x in (anchor, positive, neg_random, neg_hard))
    active = (_triplet_terms(a, p, nr, nh, margin) > 0)[:, None]

    def unit(v):
        n = np.linalg.norm(v, axis=1, keepdims=True)
        return np.divide(v, n, out=np.zeros_like(v), where=n > 0)

    g = unit(a - p) - 0.5 * (unit(a - nr) + unit(a - nh))
    return np.where(active, g, 0.0)


def bce_loss(scores, labels) -> float:
    """Mean binary cross-entropy; scores are clamped to ``[1e-7, 1 - 1e-7]``."""
    x = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if x.shape != y.shape:
        raise ShapeError("scores and labels must have equal length")
    if x.size == 0:
        raise ShapeError("empty input")
    x = np.clip(x, BCE_FLOOR, 1.0 - BCE_FLOOR)
    return float(-np.mean(y * np.log(x) + (1.0 - y) * np.log(1.0 - x)))


def bce_loss_grad(scores, labels):
    x = np.clip(np.asarray(scores, dtype=float).ravel(), BCE_FLOOR, 1.0 - BCE_FLOOR)
    y = np.asarray(labels, dtype=float).ravel()
    return -(y / x - (1.0 - y) / (1.0 - x)) / x.size


def inlier_label(k_src, k_tgt, translation, epsilon: float = 10.0) -> int:
    """1 if the translated source point lands strictly within ``epsilon`` of the target."""
    d = np.asarray(k_src, dtype=float) + np.asarray(translation, dtype=float) - np.asarray(k_tgt, dtype=float)
    return int(np.hypot(d[0], d[1]) < epsilon)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if step <= 0:
        raise ValueError("step must be > 0")
    x = np.array(x, dtype=float)
    g = np.empty_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g
