"""Pose-error metrics, success ratios, and map-size accounting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch
from .geometry import Pose, rotation_angle_between
from .localizer import LocalizationResult
from .mapmodel import Reconstruction, SceneMap
from .mapio import serialize_map

DEFAULT_THRESHOLDS = ((5.0, 5.0), (25.0, 2.0))   # (cm, degrees)


@dataclass(frozen=True)
class EvalReport:
    median_position_error_cm: float
    median_orientation_error_deg: float
    success_ratios: dict
    failure_rate: float
    per_query: list
    matcher_invocation_stats: dict
    map_stats: dict | None = None

    def to_dict(self) -> dict:
        return {
            "median_position_error_cm": self.median_position_error_cm,
            "median_orientation_error_deg": self.median_orientation_error_deg,
            "success_ratios": {
                f"{p:g}cm,{r:g}deg": v
                for (p, r), v in self.success_ratios.items()},
            "failure_rate": self.failure_rate,
            "per_query": self.per_query,
            "matcher_invocation_stats": self.matcher_invocation_stats,
            "map_stats": self.map_stats,
        }


def _lower_median(values: np.ndarray) -> float:
    """Median that stays meaningful with infinite entries: the element at
    index (n-1)//2 of the sorted multiset."""
    ordered = np.sort(values)
    return float(ordered[(len(ordered) - 1) // 2])


def pose_errors(result: LocalizationResult,
                gt: Pose) -> tuple[float, float]:
    """(position error in cm, orientation error in degrees); failed results
    count as infinite on both axes."""
    if not result.localized or result.pose is None:
        return float("inf"), float("inf")
    est = result.pose
    pos_cm = float(np.linalg.norm(est.camera_center() - gt.camera_center())
                   * 100.0)
    rot_deg = float(np.degrees(rotation_angle_between(est.rotation,
                                                      gt.rotation)))
    return pos_cm, rot_deg


def evaluate(results: list[LocalizationResult], gts: list[Pose],
             thresholds=DEFAULT_THRESHOLDS,
             map_stats_record: dict | None = None) -> EvalReport:
    """Score localization results against ground-truth poses."""
    if len(results) != len(gts):
        raise LengthMismatch(
            f"{len(results)} results vs {len(gts)} ground-truth poses")
    if not results:
        raise ValueError("evaluate needs at least one query")

    pos = np.empty(len(results))
    rot = np.empty(len(results))
    per_query = []
    tried = np.empty(len(results))
    for i, (res, gt) in enumerate(zip(results, gts)):
        pos[i], rot[i] = pose_errors(res, gt)
        tried[i] = res.candidates_tried
        per_query.append({
            "index": i,
            "status": res.status,
            "position_error_cm": float(pos[i]) if np.isfinite(pos[i]) else None,
            "orientation_error_deg": float(rot[i]) if np.isfinite(rot[i]) else None,
            "used_landmark": res.used_landmark,
            "num_inliers": res.num_inliers,
            "candidates_tried": res.candidates_tried,
            "refined": res.refined,
        })

    ratios = {}
    for p_thr, r_thr in thresholds:
        ok = (pos <= p_thr) & (rot <= r_thr)
        ratios[(float(p_thr), float(r_thr))] = float(ok.mean())
    failure_rate = float(np.mean([not r.localized for r in results]))
    stats = {
        "max": float(tried.max()),
        "mean": float(tried.mean()),
        "median": _lower_median(tried),
    }
    return EvalReport(
        median_position_error_cm=_lower_median(pos),
        median_orientation_error_deg=_lower_median(rot),
        success_ratios=ratios,
        failure_rate=failure_rate,
        per_query=per_query,
        matcher_invocation_stats=stats,
        map_stats=map_stats_record,
    )


def map_stats(map_before: Reconstruction, map_after: SceneMap) -> dict:
    """Size accounting: reconstruction frames vs VRFs, point counts, and
    serialized container bytes."""
    return {
        "num_points_before": len(map_before.points),
        "num_points_after": len(map_after.points),
        "num_ref_frames_before": len(map_before.frames),
        "num_vrfs": len(map_after.landmarks),
        "serialized_bytes": len(serialize_map(map_after)),
    }
