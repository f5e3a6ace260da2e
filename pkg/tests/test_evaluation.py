"""Evaluation metrics on hand-built localization results.

Hand-computed expectations:

* A result whose camera sits at (0.03, 0.04, 0) with the ground truth at
  the origin has position error 5 cm (3-4-5 triangle, meters to cm).
* A 90 degree roll against an identity ground truth is 90 degrees of
  orientation error.
* The lower median of (1, 2, 3, 4) is 2; of (1, 2, inf) it is 2.
"""

import math

import numpy as np
import pytest

import landmarkloc as L
from landmarkloc.errors import LengthMismatch


def _result(pose, **kw):
    fields = dict(status="Localized" if pose is not None else "Failed",
                  pose=pose, used_landmark=1 if pose is not None else 0,
                  num_inliers=50 if pose is not None else 0,
                  candidates_tried=1, refined=False)
    fields.update(kw)
    return L.LocalizationResult(**fields)


def _pose_at(center, rotation=None):
    rot = np.eye(3) if rotation is None else np.asarray(rotation, float)
    return L.Pose(rotation=rot, translation=-rot @ np.asarray(center, float))


def test_pose_errors_hand_values():
    gt = _pose_at([0.0, 0.0, 0.0])
    cm, deg = L.pose_errors(_result(_pose_at([0.03, 0.04, 0.0])), gt)
    assert abs(cm - 5.0) < 1e-9 and abs(deg) < 1e-9
    s = math.sqrt(0.5)
    roll90 = L.Pose.from_quaternion((s, 0.0, 0.0, s), (0.0, 0.0, 0.0))
    cm, deg = L.pose_errors(_result(roll90), gt)
    assert abs(cm) < 1e-9 and abs(deg - 90.0) < 1e-9


def test_pose_errors_failed_is_infinite():
    cm, deg = L.pose_errors(_result(None), _pose_at([0, 0, 0]))
    assert math.isinf(cm) and math.isinf(deg)


def test_evaluate_medians_and_ratios():
    gt = _pose_at([0.0, 0.0, 0.0])
    results = [
        _result(_pose_at([0.01, 0.0, 0.0])),            # 1 cm
        _result(_pose_at([0.0, 0.02, 0.0])),            # 2 cm
        _result(_pose_at([0.10, 0.0, 0.0])),            # 10 cm
        _result(None),                                  # inf
    ]
    report = L.evaluate(results, [gt] * 4,
                        thresholds=((5.0, 5.0), (25.0, 2.0)))
    # sorted position errors (1, 2, 10, inf): lower median is index 1
    assert report.median_position_error_cm == 2.0
    assert report.median_orientation_error_deg == 0.0
    assert report.success_ratios[(5.0, 5.0)] == 0.5
    assert report.success_ratios[(25.0, 2.0)] == 0.75
    assert report.failure_rate == 0.25
    assert len(report.per_query) == 4
    q3 = report.per_query[3]
    assert q3["status"] == "Failed"
    assert q3["position_error_cm"] is None
    assert q3["orientation_error_deg"] is None
    q0 = report.per_query[0]
    assert abs(q0["position_error_cm"] - 1.0) < 1e-9
    assert q0["used_landmark"] == 1 and q0["num_inliers"] == 50


def test_evaluate_matcher_invocation_stats():
    gt = _pose_at([0.0, 0.0, 0.0])
    results = [_result(_pose_at([0.0, 0.0, 0.0]), candidates_tried=t)
               for t in (1, 4, 2)]
    stats = L.evaluate(results, [gt] * 3).matcher_invocation_stats
    assert stats["max"] == 4.0
    assert abs(stats["mean"] - 7.0 / 3.0) < 1e-12
    assert stats["median"] == 2.0


def test_evaluate_validates_inputs():
    gt = _pose_at([0.0, 0.0, 0.0])
    with pytest.raises(LengthMismatch):
        L.evaluate([_result(None)], [gt, gt])
    with pytest.raises(ValueError):
        L.evaluate([], [])


def test_report_to_dict_keys():
    gt = _pose_at([0.0, 0.0, 0.0])
    report = L.evaluate([_result(_pose_at([0.0, 0.0, 0.0]))], [gt],
                        thresholds=((5.0, 5.0), (25.0, 2.0)),
                        map_stats_record={"num_vrfs": 3})
    d = report.to_dict()
    assert set(d["success_ratios"]) == {"5cm,5deg", "25cm,2deg"}
    assert d["success_ratios"]["5cm,5deg"] == 1.0
    assert d["map_stats"] == {"num_vrfs": 3}
    assert d["failure_rate"] == 0.0


def test_map_stats_accounts_for_compaction(small_scene, small_map):
    recon, _ = small_scene
    stats = L.map_stats(recon, small_map)
    assert stats["num_points_before"] == len(recon.points)
    assert stats["num_points_after"] == len(small_map.points)
    assert stats["num_points_after"] <= stats["num_points_before"]
    assert stats["num_ref_frames_before"] == len(recon.frames)
    assert stats["num_vrfs"] == 8
    assert stats["serialized_bytes"] == len(L.serialize_map(small_map))
