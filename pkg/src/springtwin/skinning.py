"""Motion transfer from mass nodes to appearance-carrying skin particles.

Per-node rigid rotations come from an SVD-based orthogonal Procrustes fit of
each node's neighborhood motion (proper rotation enforced by determinant
correction). Particles follow their bound nodes through Linear Blend
Skinning: centers as weight-blended rigid transforms, orientations as a
hemisphere-aligned weighted quaternion blend. Particles carry appearance
attributes (scale, opacity, color) but are never rasterized here.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .model import SpringTopology, _as_points

log = logging.getLogger(__name__)

DEGENERATE_DIST = 1e-9


@dataclass(frozen=True)
class SkinParticle:
    """Isotropic appearance particle bound to the deforming node cloud."""

    center: np.ndarray      # (3,)
    orientation: np.ndarray  # unit quaternion (w, x, y, z)
    scale: float
    opacity: float
    color: tuple[float, float, float]

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        q = np.asarray(self.orientation, dtype=np.float64).reshape(4)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "orientation", q)


@dataclass(frozen=True)
class SkinBinding:
    """Per-particle neighbor node indices and normalized inverse-distance
    weights, computed once at the canonical frame."""

    node_ids: np.ndarray  # (P, K) int64
    weights: np.ndarray   # (P, K), rows sum to 1


def bind_skin(particles: list[SkinParticle], canonical_nodes, k: int) -> SkinBinding:
    """Bind each particle to its k nearest nodes with inverse-distance weights."""
    nodes = _as_points(canonical_nodes, allow_empty=False)
    if not (1 <= k <= nodes.shape[0]):
        raise ValueError(f"k must be in [1, {nodes.shape[0]}], got {k}")
    centers = np.array([p.center for p in particles]).reshape(-1, 3)
    d, idx = cKDTree(nodes).query(centers, k=k)
    d = np.atleast_2d(d).reshape(len(particles), k)
    idx = np.atleast_2d(idx).reshape(len(particles), k)
    inv = 1.0 / np.maximum(d, DEGENERATE_DIST)
    w = inv / inv.sum(axis=1, keepdims=True)
    return SkinBinding(idx.astype(np.int64), w)


def _kabsch(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Proper rotation best aligning centered offsets src -> dst."""
    H = src.T @ dst
    U, _, Vt = np.linalg.svd(H)
    R = Vt.T @ U.T
    if np.linalg.det(R) < 0:
        Vt = Vt.copy()
        Vt[-1] *= -1
        R = Vt.T @ U.T
    return R


def neighborhoods_from_topology(topology: SpringTopology) -> list[np.ndarray]:
    """Per-node neighbor sets from spring adjacency."""
    adj: list[list[int]] = [[] for _ in range(topology.n_nodes)]
    for i, j in topology.indices:
        adj[int(i)].append(int(j))
        adj[int(j)].append(int(i))
    return [np.array(sorted(a), dtype=np.int64) for a in adj]


def knn_neighborhoods(points, k: int = 6) -> list[np.ndarray]:
    pts = _as_points(points, allow_empty=False)
    kk = min(k + 1, pts.shape[0])
    _, idx = cKDTree(pts).query(pts, k=kk)
    idx = np.atleast_2d(idx)
    return [np.array([j for j in row if j != i], dtype=np.int64) for i, row in enumerate(idx)]


def estimate_node_rotations(
    prev_nodes, next_nodes, neighborhoods: list[np.ndarray]
) -> np.ndarray:
    """Per-node rotations minimizing the squared neighborhood motion residual.

    Degenerate neighborhoods (< 2 neighbors, or rank-deficient offsets) fall
    back to the identity with a logged warning.
    """
    prev = _as_points(prev_nodes, allow_empty=False)
    nxt = _as_points(next_nodes, allow_empty=False)
    n = prev.shape[0]
    out = np.tile(np.eye(3), (n, 1, 1))
    degenerate = 0
    for i in range(n):
        nb = neighborhoods[i]
        if nb.shape[0] < 2:
            degenerate += 1
            continue
        src = prev[nb] - prev[i]
        dst = nxt[nb] - nxt[i]
        if np.linalg.matrix_rank(src, tol=1e-12) < 2:
            degenerate += 1
            continue
        out[i] = _kabsch(src, dst)
    if degenerate:
        log.warning("estimate_node_rotations: %d node(s) with degenerate "
                    "neighborhoods kept the identity rotation", degenerate)
    return out


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z), w >= 0."""
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def deform_skin(
    particles: list[SkinParticle],
    binding: SkinBinding,
    prev_nodes,
    next_nodes,
    rotations: np.ndarray,
    translations: np.ndarray | None = None,
) -> list[SkinParticle]:
    """One LBS frame update of centers and orientations.

    center' = sum_k w_k (R_k (c - n_k) + n_k + T_k) with T_k the node
    displacement (next - prev unless given); orientation' =
    normalize(sum_k w_k r_k) * orientation, with neighbor quaternions
    sign-aligned to the largest-weight neighbor before the weighted sum.
    Scale, opacity, and color pass through unchanged.
    """
    prev = _as_points(prev_nodes, allow_empty=False)
    nxt = _as_points(next_nodes, allow_empty=False)
    anchors = prev + (nxt - prev if translations is None
                      else np.asarray(translations, dtype=np.float64))
    quats = np.array([rotation_to_quat(R) for R in rotations])
    out: list[SkinParticle] = []
    for p_idx, part in enumerate(particles):
        ids = binding.node_ids[p_idx]
        w = binding.weights[p_idx]
        c = part.center
        new_c = np.zeros(3)
        for kk in range(ids.shape[0]):
            nd = ids[kk]
            new_c += w[kk] * (rotations[nd] @ (c - prev[nd]) + anchors[nd])
        ref = quats[ids[int(np.argmax(w))]]
        qs = quats[ids]
        signs = np.where(qs @ ref >= 0.0, 1.0, -1.0)
        q_blend = (w[:, None] * signs[:, None] * qs).sum(axis=0)
        norm = np.linalg.norm(q_blend)
        if norm < 1e-9:
            log.warning("deform_skin: particle %d quaternion blend degenerate, "
                        "keeping previous orientation", p_idx)
            new_q = part.orientation
        else:
            new_q = quat_multiply(q_blend / norm, part.orientation)
            new_q = new_q / np.linalg.norm(new_q)
        out.append(replace(part, center=new_c, orientation=new_q))
    return out


def make_skin_particles(points, per_node: int, jitter: float, seed: int) -> list[SkinParticle]:
    """Sample appearance particles near the node cloud (synthetic stand-in
    for a reconstructed surface)."""
    from .model import seeded_rng

    pts = _as_points(points, allow_empty=False)
    rng = seeded_rng(seed, 4)
    out = []
    for i in range(pts.shape[0]):
        for _ in range(per_node):
            c = pts[i] + rng.normal(0.0, jitter, 3)
            color = tuple(float(x) for x in rng.uniform(0.2, 0.9, 3))
            out.append(SkinParticle(c, np.array([1.0, 0, 0, 0]), float(jitter), 1.0, color))
    return out
