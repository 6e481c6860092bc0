"""Mutual nearest-neighbour matching, consensus scoring and translation estimation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .features import FeatureSet
from .imgmath import inlier_label


class RegistrationError(RuntimeError):
    """Too few confident correspondences to estimate a translation."""


class Translation2D(NamedTuple):
    dx: float
    dy: float


@dataclass(frozen=True)
class ConsensusParams:
    tau: float = 3.0
    min_matches: int = 4
    inlier_cut: float = 0.5

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")


@dataclass(eq=False)
class Matches:
    """Correspondences stored column-wise.

    ``src_xy``/``tgt_xy`` are whatever coordinates the caller fed in (image
    coordinates for frame pairs, centered/canonical coordinates for space
    matching).  ``score`` is None until :func:`score_matches` has run.
    """

    src_idx: np.ndarray
    tgt_idx: np.ndarray
    src_xy: np.ndarray
    tgt_xy: np.ndarray
    desc_dist: np.ndarray
    score: Optional[np.ndarray] = field(default=None)

    def __len__(self):
        return len(self.src_idx)

    @property
    def displacement(self) -> np.ndarray:
        return self.tgt_xy - self.src_xy

    def retained(self, inlier_cut: float) -> np.ndarray:
        if self.score is None:
            return np.zeros(len(self), dtype=bool)
        return self.score >= inlier_cut

    def take(self, mask) -> "Matches":
        return Matches(self.src_idx[mask], self.tgt_idx[mask], self.src_xy[mask],
                       self.tgt_xy[mask], self.desc_dist[mask],
                       None if self.score is None else self.score[mask])


def _empty_matches() -> Matches:
    z = np.zeros(0, dtype=int)
    return Matches(z, z.copy(), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))


def mutual_nn(a: FeatureSet, b: FeatureSet, src_xy=None, tgt_xy=None) -> Matches:
    """Pairs (i, j) such that j is i's nearest neighbour in ``b`` and vice versa.

    Descriptors are unit-norm, so the nearest neighbour is the row with the
    largest dot product; the search runs in float32 and the reported
    ``desc_dist`` is recomputed in float64.  Ties go to the lower index.
    ``src_xy``/``tgt_xy`` override the coordinates carried into the result
    (default: the sets' own ``xy``).
    """
    if len(a) == 0 or len(b) == 0:
        return _empty_matches()
    sim = a.desc32 @ b.desc32.T
    ab = np.argmax(sim, axis=1)
    # reverse search is only needed for columns that are somebody's forward NN
    cols = np.unique(ab)
    back = np.argmax(sim[:, cols], axis=0)
    i = np.nonzero(back[np.searchsorted(cols, ab)] == np.arange(len(a)))[0]
    j = ab[i]
    dist = np.linalg.norm(a.desc[i] - b.desc[j], axis=1)
    sxy = a.xy if src_xy is None else np.asarray(src_xy, dtype=float)
    txy = b.xy if tgt_xy is None else np.asarray(tgt_xy, dtype=float)
    return Matches(i, j, sxy[i], txy[j], dist)


def _tukey_rho(r2: np.ndarray, c: float) -> np.ndarray:
    u = np.minimum(r2 / (c * c), 1.0)
    return (c * c / 6.0) * (1.0 - (1.0 - u) ** 3)


def consensus_mode(disp: np.ndarray, tau: float) -> np.ndarray:
    """Candidate displacement with the least total Tukey loss to all others.

    Exhaustive O(N^2); ties resolved by the lexicographically smallest
    displacement so the result does not depend on input order.
    """
    diff = disp[:, None, :] - disp[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", diff, diff)
    cost = _tukey_rho(r2, 3.0 * tau).sum(axis=1)
    best = np.nonzero(cost == cost.min())[0]
    if best.size > 1:
        best = best[np.lexsort((disp[best, 1], disp[best, 0]))]
    return disp[best[0]]


def score_matches(m: Matches, cp: ConsensusParams = ConsensusParams()) -> Matches:
    """Attach a confidence score in [0, 1] to every candidate.

    ``score_i = exp(-|d_i - mode|^2 / (2 tau^2))`` with ``d = tgt - src`` and
    ``mode`` the robust consensus displacement; all scores are zero when fewer
    than ``min_matches`` candidates are given.
    """
    n = len(m)
    if n < cp.min_matches or n == 0:
        return Matches(m.src_idx, m.tgt_idx, m.src_xy, m.tgt_xy, m.desc_dist, np.zeros(n))
    disp = m.displacement
    mode = consensus_mode(disp, cp.tau)
    r2 = np.sum((disp - mode) ** 2, axis=1)
    score = np.exp(-r2 / (2.0 * cp.tau ** 2))
    return Matches(m.src_idx, m.tgt_idx, m.src_xy, m.tgt_xy, m.desc_dist, score)


def label_matches(m: Matches, translation, epsilon: float = 10.0) -> np.ndarray:
    """Ground-truth inlier labels (1/0) for each candidate under a known translation."""
    t = tuple(translation)
    return np.array([inlier_label(s, g, t, epsilon) for s, g in zip(m.src_xy, m.tgt_xy)], dtype=int)


def estimate_translation(m: Matches, cp: ConsensusParams = ConsensusParams()) -> tuple[Translation2D, float]:
    """Score-weighted mean displacement over retained matches and the summed score.

    Raises:
        RegistrationError: fewer than ``cp.min_matches`` scores reach ``cp.inlier_cut``.
    """
    keep = m.retained(cp.inlier_cut)
    if keep.sum() < cp.min_matches:
        raise RegistrationError(f"{int(keep.sum())} confident matches < {cp.min_matches}")
    w = m.score[keep]
    d = m.displacement[keep]
    total = float(w.sum())
    t = (w[:, None] * d).sum(axis=0) / total
    return Translation2D(float(t[0]), float(t[1])), total


def register_pair(a: FeatureSet, b: FeatureSet, cp: ConsensusParams = ConsensusParams()):
    """Match ``a`` to ``b`` and estimate the translation taking ``a`` points to ``b`` points."""
    m = score_matches(mutual_nn(a, b), cp)
    t, w = estimate_translation(m, cp)
    return t, w, m
