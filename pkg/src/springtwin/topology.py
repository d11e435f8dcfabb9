"""Spring-graph construction from point sets and control-point attachment.

Connectivity follows a nearest-neighbor rule bounded by a radius and a
neighbor cap; an edge exists if either endpoint selects the other (union
rule), which keeps sparse point sets connected more often. All rest lengths
equal the construction-time distances, so the built state is force-free.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .model import SpringTopology, _as_points, seeded_rng

log = logging.getLogger(__name__)


class DegeneratePointSet(ValueError):
    pass


class AttachmentError(ValueError):
    pass


@dataclass(frozen=True)
class ControlAttachment:
    """A spring from a kinematic control point to an object node."""

    ctrl_index: int
    node_index: int
    rest_length: float
    stiffness: float


def build_springs(points, topo_radius: float, max_neighbors: int, k_hom: float) -> SpringTopology:
    """Connect each point to its ``max_neighbors`` nearest neighbors within
    ``topo_radius``; ties at equal distance break toward the lower index.

    Returns a simple graph (no self-loops or duplicates) with rest lengths set
    to current distances and uniform stiffness ``k_hom``. A disconnected
    result is permitted (logged), but fewer than 2 points is an error.
    """
    pts = _as_points(points)
    n = pts.shape[0]
    if n < 2:
        raise DegeneratePointSet(f"degenerate point set: {n} point(s)")
    if topo_radius <= 0 or max_neighbors < 1:
        raise ValueError("topo_radius must be > 0 and max_neighbors >= 1")

    tree = cKDTree(pts)
    edges: set[tuple[int, int]] = set()
    for i in range(n):
        cand = [j for j in tree.query_ball_point(pts[i], topo_radius) if j != i]
        if not cand:
            continue
        d = np.linalg.norm(pts[cand] - pts[i], axis=1)
        order = sorted(range(len(cand)), key=lambda c: (d[c], cand[c]))
        for c in order[:max_neighbors]:
            j = cand[c]
            edges.add((min(i, j), max(i, j)))

    edge_arr = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    rest = (
        np.linalg.norm(pts[edge_arr[:, 1]] - pts[edge_arr[:, 0]], axis=1)
        if len(edge_arr)
        else np.zeros(0)
    )
    if len(edge_arr) == 0:
        log.warning("build_springs: radius %g excludes all pairs; graph has no edges", topo_radius)
    elif not _is_connected(n, edge_arr):
        log.warning("build_springs: resulting graph is disconnected (%d nodes, %d edges)",
                    n, len(edge_arr))
    return SpringTopology(n, edge_arr, rest, np.full(len(edge_arr), float(k_hom)))


def _is_connected(n: int, edges: np.ndarray) -> bool:
    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in edges:
        parent[find(int(i))] = find(int(j))
    return len({find(i) for i in range(n)}) == 1


def attach_controls(
    ctrl_points, object_points, ctrl_radius: float, max_neighbors: int, k_ctrl: float
) -> list[ControlAttachment]:
    """Attach each control point to its nearest in-range object points.

    Attachments are computed once at the canonical frame and stay fixed for
    the rollout. A control point with no object point within ``ctrl_radius``
    is an error (it could never transmit force).
    """
    ctrl = _as_points(ctrl_points)
    obj = _as_points(object_points, allow_empty=False)
    if ctrl_radius <= 0 or max_neighbors < 1:
        raise ValueError("ctrl_radius must be > 0 and max_neighbors >= 1")

    tree = cKDTree(obj)
    out: list[ControlAttachment] = []
    unreachable: list[int] = []
    for c in range(ctrl.shape[0]):
        cand = tree.query_ball_point(ctrl[c], ctrl_radius)
        if not cand:
            unreachable.append(c)
            continue
        d = np.linalg.norm(obj[cand] - ctrl[c], axis=1)
        order = sorted(range(len(cand)), key=lambda k: (d[k], cand[k]))
        for k in order[:max_neighbors]:
            out.append(ControlAttachment(c, int(cand[k]), float(d[k]), float(k_ctrl)))
    if unreachable:
        raise AttachmentError(
            f"control point(s) {unreachable} have no object point within radius {ctrl_radius}"
        )
    return out


def attachments_to_arrays(atts: list[ControlAttachment]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Parallel arrays (ctrl_index, node_index, rest_length, stiffness) for kernels."""
    ci = np.array([a.ctrl_index for a in atts], dtype=np.int64)
    ni = np.array([a.node_index for a in atts], dtype=np.int64)
    rl = np.array([a.rest_length for a in atts], dtype=np.float64)
    ks = np.array([a.stiffness for a in atts], dtype=np.float64)
    return ci, ni, rl, ks


def farthest_point_sample(points, k: int, seed: int) -> list[int]:
    """Greedy farthest-point sampling.

    The first index is drawn from the seeded RNG; each subsequent index
    maximizes the minimum distance to the chosen set, ties broken by lowest
    index.
    """
    pts = _as_points(points)
    n = pts.shape[0]
    if k > n:
        raise ValueError(f"cannot sample {k} of {n} points")
    if k <= 0:
        return []
    rng = seeded_rng(seed)
    first = int(rng.integers(0, n))
    chosen = [first]
    min_d = np.linalg.norm(pts - pts[first], axis=1)
    while len(chosen) < k:
        best = int(np.argmax(min_d))  # argmax returns the lowest index on ties
        chosen.append(best)
        min_d = np.minimum(min_d, np.linalg.norm(pts - pts[best], axis=1))
    return chosen
