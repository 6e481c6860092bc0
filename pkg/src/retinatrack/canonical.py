"""Canonical feature space: pairwise grid registration, weighted bundle adjustment, assembly.

Coordinates follow the image convention (x right, y down).  Node positions
are the locations of each frame's center pixel in the canonical frame, whose
origin is the center pixel of the central (0, 0) gaze image.  For an edge
``a -> b`` the measurement is ``mu = n_b - n_a``.
"""
from __future__ import annotations

import json
from functools import cached_property
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .features import FeatureSet, extract
from .matching import (ConsensusParams, Matches, RegistrationError, Translation2D,
                       estimate_translation, mutual_nn, score_matches)
from .phantom import Calibration

SPACE_FILE_VERSION = 1


class SpaceConstructionError(RuntimeError):
    def __init__(self, msg, failed_edges=()):
        super().__init__(msg)
        self.failed_edges = list(failed_edges)


class SingularSystemError(np.linalg.LinAlgError):
    pass


class SpaceFileError(ValueError):
    pass


@dataclass
class GridGraph:
    node_count: int
    edges: list[tuple[int, int]]
    central_node: int

    def is_connected(self, edge_mask: Optional[Sequence[bool]] = None) -> bool:
        return is_connected(self.node_count, self.edges if edge_mask is None
                            else [e for e, k in zip(self.edges, edge_mask) if k])


@dataclass(eq=False)
class EdgeMeasurement:
    edge_index: int
    mu: Translation2D
    weight: float
    matches: Optional[Matches] = field(default=None, repr=False)


@dataclass(eq=False)
class BundleProblem:
    """Graph plus measurements; ``excluded`` nodes take no part in the solve (position NaN)."""

    graph: GridGraph
    measurements: list[EdgeMeasurement]
    excluded: frozenset = frozenset()

    @property
    def incidence(self) -> np.ndarray:
        """Oriented incidence matrix, one row per measurement: -1 at from, +1 at to."""
        C = np.zeros((len(self.measurements), self.graph.node_count))
        for r, m in enumerate(self.measurements):
            a, b = self.graph.edges[m.edge_index]
            C[r, a] -= 1.0
            C[r, b] += 1.0
        return C

    @property
    def weights(self) -> np.ndarray:
        return np.diag([m.weight for m in self.measurements])

    @property
    def mu(self) -> np.ndarray:
        return np.array([[m.mu.dx, m.mu.dy] for m in self.measurements], dtype=float).reshape(-1, 2)


@dataclass(eq=False)
class CanonicalFeatureSpace:
    positions: np.ndarray
    descriptors: np.ndarray
    node_positions: np.ndarray
    central_node: int
    ppd_x: float
    ppd_y: float

    def __len__(self):
        return len(self.positions)

    @cached_property
    def features(self) -> FeatureSet:
        """The space entries viewed as one feature set (positions as ``xy``)."""
        return FeatureSet(self.positions, np.ones(len(self)), self.descriptors, (0, 0), "space")

    def __eq__(self, other):
        if not isinstance(other, CanonicalFeatureSpace):
            return NotImplemented
        return (self.central_node == other.central_node and self.ppd_x == other.ppd_x
                and self.ppd_y == other.ppd_y
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.descriptors, other.descriptors)
                and np.array_equal(self.node_positions, other.node_positions, equal_nan=True))


def is_connected(node_count: int, edges: Sequence[tuple[int, int]],
                 nodes: Optional[Sequence[int]] = None) -> bool:
    """True if ``nodes`` (default: all) lie in one component of the graph."""
    nodes = range(node_count) if nodes is None else list(nodes)
    if len(nodes) <= 1:
        return True
    if not edges:
        return False
    a, b = np.array(edges).T
    adj = coo_matrix((np.ones(len(a)), (a, b)), shape=(node_count, node_count))
    _, labels = connected_components(adj, directed=False)
    return len(set(labels[list(nodes)].tolist())) == 1


def register_all_edges(features: Sequence[FeatureSet], graph: GridGraph,
                       cp: ConsensusParams = ConsensusParams()):
    """Register every grid edge; returns ``(measurements, failed_edge_indices)``.

    For edge ``a -> b`` features of ``a`` are the match source, so each
    correspondence displacement is ``k_b - k_a = n_a - n_b`` and ``mu`` is its
    negation.  Frames without any keypoint cannot be registered and are left
    out of the connectivity requirement (see :func:`featureless_nodes`).

    Raises:
        SpaceConstructionError: the successful edges do not connect the
            remaining frames, or the central frame has no keypoints.
    """
    out, failed = [], []
    for k, (a, b) in enumerate(graph.edges):
        m = score_matches(mutual_nn(features[a], features[b]), cp)
        try:
            t, w = estimate_translation(m, cp)
        except RegistrationError:
            failed.append(k)
            continue
        out.append(EdgeMeasurement(k, Translation2D(-t.dx, -t.dy), w, m))
    kept = [graph.edges[m.edge_index] for m in out]
    skip = featureless_nodes(features)
    if graph.central_node in skip:
        raise SpaceConstructionError("central frame has no keypoints", failed)
    live = [j for j in range(graph.node_count) if j not in skip]
    if not is_connected(graph.node_count, kept, live):
        raise SpaceConstructionError(
            f"grid graph disconnected after {len(failed)} failed registrations", failed)
    return out, failed


def featureless_nodes(features: Sequence[FeatureSet]) -> frozenset:
    return frozenset(j for j, f in enumerate(features) if len(f) == 0)


def bundle_adjust(problem: BundleProblem) -> np.ndarray:
    """Solve ``min |W^1/2 (C n - mu)|^2`` with the central node pinned at the origin.

    Both axes share the reduced normal matrix ``C_r^T W C_r``; the system is
    solved densely.  Returns an (N, 2) array; excluded nodes are NaN.
    """
    g = problem.graph
    N = g.node_count
    excl = problem.excluded
    if g.central_node in excl:
        raise ValueError("the central node cannot be excluded")
    live = [m for m in problem.measurements if m.weight > 0]
    if any(a in excl or b in excl for a, b in (g.edges[m.edge_index] for m in live)):
        raise ValueError("measurement touches an excluded node")
    nodes = [j for j in range(N) if j not in excl]
    n = np.full((N, 2), np.nan)
    if len(nodes) == 1:
        n[nodes] = 0.0
        return n
    if not live or not is_connected(N, [g.edges[m.edge_index] for m in live], nodes):
        raise SingularSystemError("measurement graph is disconnected")
    sub = BundleProblem(g, live)
    C, W, mu = sub.incidence, np.array([m.weight for m in live]), sub.mu
    free = np.array([j for j in nodes if j != g.central_node])
    Cr = C[:, free]
    A = Cr.T @ (W[:, None] * Cr)
    rhs = Cr.T @ (W[:, None] * mu)
    sol = np.linalg.solve(A, rhs)
    # one step of iterative refinement
    sol += np.linalg.solve(A, rhs - A @ sol)
    n[g.central_node] = 0.0
    n[free] = sol

    grad = 2.0 * Cr.T @ (W[:, None] * (Cr @ sol - mu))
    scale = max(1.0, float(np.abs(rhs).max()))
    if np.abs(grad).max() > 1e-9 * scale:
        raise SingularSystemError(f"normal equations not satisfied (|grad|={np.abs(grad).max():.3g})")
    return n


def assemble_space(features: Sequence[FeatureSet], measurements: Sequence[EdgeMeasurement],
                   graph: GridGraph, node_positions: np.ndarray,
                   cal: Calibration = Calibration(),
                   cp: ConsensusParams = ConsensusParams()) -> CanonicalFeatureSpace:
    """Place every retained correspondence endpoint into canonical coordinates.

    Both endpoints of each retained correspondence are kept, once per edge, so
    the entry count is twice the retained correspondence count.
    """
    pos, desc = [], []
    for meas in measurements:
        if meas.matches is None:
            continue
        a, b = graph.edges[meas.edge_index]
        fa, fb = features[a], features[b]
        keep = meas.matches.retained(cp.inlier_cut)
        ia, ib = meas.matches.src_idx[keep], meas.matches.tgt_idx[keep]
        pos.append(fa.xy[ia] - fa.center + node_positions[a])
        desc.append(fa.desc[ia])
        pos.append(fb.xy[ib] - fb.center + node_positions[b])
        desc.append(fb.desc[ib])
    dim = features[0].desc.shape[1] if len(features) else 128
    positions = np.concatenate(pos) if pos else np.zeros((0, 2))
    descriptors = np.concatenate(desc) if desc else np.zeros((0, dim))
    return CanonicalFeatureSpace(positions, descriptors, np.asarray(node_positions, dtype=float),
                                 graph.central_node, cal.ppd_x, cal.ppd_y)


def single_frame_space(fs: FeatureSet, cal: Calibration = Calibration()) -> CanonicalFeatureSpace:
    return CanonicalFeatureSpace(fs.centered_xy, fs.desc.copy(), np.zeros((1, 2)), 0, cal.ppd_x, cal.ppd_y)


@dataclass(eq=False)
class SpaceBuild:
    space: CanonicalFeatureSpace
    features: list[FeatureSet]
    measurements: list[EdgeMeasurement]
    failed_edges: list[int]
    graph: GridGraph


def build_space(frames, edges, central: int, cal: Calibration = Calibration(),
                cp: ConsensusParams = ConsensusParams(), use_enhancement: bool = False,
                features: Optional[Sequence[FeatureSet]] = None) -> SpaceBuild:
    """extract -> register_all_edges -> bundle_adjust -> assemble_space."""
    graph = GridGraph(len(frames), list(edges), central)
    if features is None:
        features = [extract(f, use_enhancement=use_enhancement) for f in frames]
    features = list(features)
    if graph.node_count == 1:
        return SpaceBuild(single_frame_space(features[0], cal), features, [], [], graph)
    meas, failed = register_all_edges(features, graph, cp)
    n = bundle_adjust(BundleProblem(graph, meas, featureless_nodes(features)))
    space = assemble_space(features, meas, graph, n, cal, cp)
    return SpaceBuild(space, features, meas, failed, graph)


def save_space(space: CanonicalFeatureSpace, path) -> None:
    doc = {
        "version": SPACE_FILE_VERSION,
        "ppd_x": space.ppd_x,
        "ppd_y": space.ppd_y,
        "central_node": int(space.central_node),
        "node_positions": [[None if np.isnan(v) else float(v) for v in p]
                           for p in space.node_positions],
        "entries": [{"x": float(p[0]), "y": float(p[1]), "desc": d.tolist()}
                    for p, d in zip(space.positions, space.descriptors)],
    }
    Path(path).write_text(json.dumps(doc))


def load_space(path) -> CanonicalFeatureSpace:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SpaceFileError(f"malformed space file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise SpaceFileError("space file must contain a JSON object")
    if doc.get("version") != SPACE_FILE_VERSION:
        raise SpaceFileError(f"unsupported space file version {doc.get('version')!r}")
    try:
        entries = doc["entries"]
        positions = np.array([[e["x"], e["y"]] for e in entries], dtype=float).reshape(-1, 2)
        dim = len(entries[0]["desc"]) if entries else 128
        desc = np.array([e["desc"] for e in entries], dtype=float).reshape(-1, dim)
        nodes = np.array(doc["node_positions"], dtype=float).reshape(-1, 2)
        return CanonicalFeatureSpace(positions, desc, nodes, int(doc["central_node"]),
                                     float(doc["ppd_x"]), float(doc["ppd_y"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise SpaceFileError(f"malformed space file {path}: {exc}") from exc
