"""Geometry and motion costs aligning simulated states with observations.

The geometry term is the single-direction Chamfer distance from the observed
partial cloud to the predicted full state (observations are partial, the
prediction is complete, so only that direction is meaningful). The motion
term penalizes tracked nodes: squared distances for optimization (smooth),
unsquared RMSE for evaluation reporting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .model import ObservationSequence, SystemState

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostWeights:
    w_cd: float = 1.0
    w_track: float = 1.0


@dataclass(frozen=True)
class CostBreakdown:
    """Mean-over-frames cost terms and their weighted total."""

    c_geometry: float  # m
    c_motion: float    # m^2
    total: float
    per_frame_geometry: np.ndarray
    per_frame_motion: np.ndarray


def nearest_predicted(observed: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    """Index of the nearest predicted point for each observed point."""
    if predicted.shape[0] == 0:
        raise ValueError("predicted point set must be non-empty")
    if observed.shape[0] == 0:
        return np.empty(0, np.int64)
    _, idx = cKDTree(predicted).query(observed, k=1)
    return np.asarray(idx, dtype=np.int64)


def chamfer_single_direction(observed, predicted) -> float:
    """Mean distance from each observed point to its nearest predicted point."""
    obs = np.asarray(observed, dtype=np.float64).reshape(-1, 3)
    pred = np.asarray(predicted, dtype=np.float64).reshape(-1, 3)
    if obs.shape[0] == 0:
        log.warning("chamfer: empty observed cloud (occluded frame), returning 0")
        return 0.0
    idx = nearest_predicted(obs, pred)
    d = pred[idx] - obs
    return float(np.mean(np.sqrt(np.einsum("ij,ij->i", d, d))))


def tracking_error(track_ids, track_positions, predicted_state: SystemState) -> float:
    """Mean squared distance between predicted node positions and their tracks."""
    ids = np.asarray(track_ids, dtype=np.int64).reshape(-1)
    if ids.shape[0] == 0:
        log.warning("tracking_error: empty track set, returning 0")
        return 0.0
    tgt = np.asarray(track_positions, dtype=np.float64).reshape(-1, 3)
    d = predicted_state.positions[ids] - tgt
    return float(np.mean(np.einsum("ij,ij->i", d, d)))


def _frame_terms(positions: np.ndarray, frame) -> tuple[float, float]:
    obs = frame.partial_cloud
    if obs.shape[0] == 0:
        cd = 0.0
    else:
        idx = nearest_predicted(obs, positions)
        d = positions[idx] - obs
        cd = float(np.mean(np.sqrt(np.einsum("ij,ij->i", d, d))))
    if frame.track_ids.shape[0] == 0:
        tr = 0.0
    else:
        d = positions[frame.track_ids] - frame.track_positions
        tr = float(np.mean(np.einsum("ij,ij->i", d, d)))
    return cd, tr


def trajectory_cost(
    states: list[SystemState],
    obs: ObservationSequence,
    weights: CostWeights = CostWeights(),
) -> CostBreakdown:
    """Per-frame chamfer and tracking terms, averaged across the window.

    ``states[t]`` is compared against ``obs.frames[t]``; the rollout must
    cover every observation frame.
    """
    T = obs.n_frames
    if len(states) < T:
        raise ValueError(f"rollout has {len(states)} states for {T} observation frames")
    geo = np.zeros(T)
    mot = np.zeros(T)
    empties = 0
    for t in range(T):
        fr = obs.frames[t]
        empties += fr.partial_cloud.shape[0] == 0
        geo[t], mot[t] = _frame_terms(states[t].positions, fr)
    if empties:
        log.debug("trajectory_cost: %d fully occluded frame(s) contribute 0", empties)
    c_geo = float(np.mean(geo)) if T else 0.0
    c_mot = float(np.mean(mot)) if T else 0.0
    return CostBreakdown(
        c_geometry=c_geo,
        c_motion=c_mot,
        total=weights.w_cd * c_geo + weights.w_track * c_mot,
        per_frame_geometry=geo,
        per_frame_motion=mot,
    )


@dataclass(frozen=True)
class EvalReport:
    """Evaluation metrics over a frame window: mean single-direction CD and
    track error as the root of the mean squared per-point distance."""

    window: str
    frame_start: int
    frame_stop: int
    mean_cd: float
    track_rmse: float
    per_frame_cd: np.ndarray
    per_frame_track_rmse: np.ndarray

    def to_dict(self) -> dict:
        return {
            "v": 1,
            "window": self.window,
            "frame_start": self.frame_start,
            "frame_stop": self.frame_stop,
            "mean_cd": self.mean_cd,
            "track_rmse": self.track_rmse,
            "per_frame_cd": [float(x) for x in self.per_frame_cd],
            "per_frame_track_rmse": [float(x) for x in self.per_frame_track_rmse],
        }


def evaluate_window(
    states: list[SystemState],
    obs: ObservationSequence,
    start: int,
    stop: int,
    window_name: str = "window",
) -> EvalReport:
    """Report metrics over frames [start, stop)."""
    if not (0 <= start < stop <= obs.n_frames) or len(states) < stop:
        raise ValueError(f"bad evaluation window [{start}, {stop})")
    cds = []
    rmses = []
    sq_sum = 0.0
    sq_n = 0
    for t in range(start, stop):
        fr = obs.frames[t]
        cd, mse = _frame_terms(states[t].positions, fr)
        cds.append(cd)
        k = fr.track_ids.shape[0]
        rmses.append(float(np.sqrt(mse)))
        sq_sum += mse * k
        sq_n += k
    return EvalReport(
        window=window_name,
        frame_start=start,
        frame_stop=stop,
        mean_cd=float(np.mean(cds)),
        track_rmse=float(np.sqrt(sq_sum / sq_n)) if sq_n else 0.0,
        per_frame_cd=np.asarray(cds),
        per_frame_track_rmse=np.asarray(rmses),
    )
