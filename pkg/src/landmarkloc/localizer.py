"""Progressive landmark-wise localization.

A query is localized by recognizing landmark labels per keypoint, dropping
likely outliers, ranking candidate landmarks by mean confidence, and then
verifying candidates one at a time: descriptor matching against the points
of a single landmark (visible in its virtual reference frame), robust PnP,
and early exit once a pose gathers enough inliers. An optional final stage
enlarges the match set with points from covisible landmarks projected under
the initial pose and re-estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateConfiguration,
    LandmarkLocError,
    MinimalSampleUnavailable,
    NoConsensus,
)
from .geometry import (
    CameraIntrinsics,
    Correspondence2D3D,
    Pose,
    RansacParams,
    RefineParams,
    project_points,
    ransac_pnp,
    refine_pose,
    reprojection_errors,
    stack_correspondences,
)
from .mapmodel import SceneMap
from .recognition import RecognitionOutput, recognize

_GEOMETRY_FAILURES = (MinimalSampleUnavailable, DegenerateConfiguration,
                      NoConsensus)


@dataclass(frozen=True)
class LocalizerParams:
    lambda_s: float = 0.9           # outlier-confidence removal threshold
    lambda_i: int = 64              # inlier count needed to accept a pose
    lambda_c: int = 20              # candidate landmarks tried at most
    ratio_test: float = 0.9         # best/second-best descriptor distance
    refine: bool = True             # run covisibility refinement
    ransac: RansacParams = field(default_factory=RansacParams)
    refine_pose_params: RefineParams = field(default_factory=RefineParams)
    refine_window_px: float = 12.0  # projection search window

    def __post_init__(self):
        if not 0.0 < self.lambda_s <= 1.0:
            raise ValueError("lambda_s must lie in (0, 1]")
        if self.lambda_i < 4:
            raise ValueError("lambda_i must be at least 4")
        if self.lambda_c < 1:
            raise ValueError("lambda_c must be at least 1")
        if self.ratio_test <= 0.0:
            raise ValueError("ratio_test must be positive")
        if self.refine_window_px <= 0.0:
            raise ValueError("refine_window_px must be positive")


LOCALIZED = "Localized"
FAILED = "Failed"


@dataclass(frozen=True)
class LocalizationResult:
    status: str                     # LOCALIZED or FAILED
    pose: Pose | None
    used_landmark: int              # 0 when failed
    num_inliers: int                # inliers of the accepted verification
    candidates_tried: int           # matcher invocations
    refined: bool

    @property
    def localized(self) -> bool:
        return self.status == LOCALIZED

    def to_dict(self) -> dict:
        d = {
            "status": self.status,
            "used_landmark": self.used_landmark,
            "num_inliers": self.num_inliers,
            "candidates_tried": self.candidates_tried,
            "refined": self.refined,
        }
        if self.pose is not None:
            q = self.pose.as_quaternion()
            d["pose"] = {
                "rotation": self.pose.rotation.tolist(),
                "translation": self.pose.translation.tolist(),
                "quaternion": [float(x) for x in q],
            }
        return d

    @staticmethod
    def from_dict(d: dict) -> "LocalizationResult":
        pose = None
        if d.get("pose") is not None:
            rot = np.asarray(d["pose"]["rotation"], dtype=np.float64)
            pose = Pose(rotation=rot,
                        translation=np.asarray(d["pose"]["translation"],
                                               dtype=np.float64))
        return LocalizationResult(
            status=str(d["status"]),
            pose=pose,
            used_landmark=int(d["used_landmark"]),
            num_inliers=int(d["num_inliers"]),
            candidates_tried=int(d["candidates_tried"]),
            refined=bool(d["refined"]),
        )


def _failed(candidates_tried: int) -> LocalizationResult:
    return LocalizationResult(status=FAILED, pose=None, used_landmark=0,
                              num_inliers=0,
                              candidates_tried=candidates_tried,
                              refined=False)


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------

def remove_outliers(keypoints, rec: RecognitionOutput, lambda_s: float):
    """Drop keypoints whose outlier-class confidence strictly exceeds
    lambda_s; survivors are relabeled to their best landmark class.

    Returns (kept keypoints, labels, per-keypoint confidence at the label).
    """
    if len(keypoints) != rec.confidences.shape[0]:
        raise ValueError("recognition output does not align with keypoints")
    if len(keypoints) == 0:
        return [], np.zeros(0, dtype=np.int64), np.zeros(0)
    conf = rec.confidences
    keep = conf[:, 0] <= lambda_s
    kept = [kp for kp, flag in zip(keypoints, keep) if flag]
    if not kept:
        return [], np.zeros(0, dtype=np.int64), np.zeros(0)
    rows = conf[keep]
    labels = rows[:, 1:].argmax(axis=1).astype(np.int64) + 1
    values = rows[np.arange(len(kept)), labels]
    return kept, labels, values


def rank_landmarks(labels: np.ndarray, confidences: np.ndarray,
                   lambda_c: int) -> list[int]:
    """Candidate labels ordered by descending mean confidence; ties prefer
    more keypoints, then the lower label. Truncated to lambda_c."""
    labels = np.asarray(labels, dtype=np.int64)
    confidences = np.asarray(confidences, dtype=np.float64)
    if labels.shape != confidences.shape:
        raise ValueError("labels and confidences must align")
    stats: dict[int, tuple[float, int]] = {}
    for label in np.unique(labels):
        mask = labels == label
        stats[int(label)] = (float(confidences[mask].mean()),
                             int(mask.sum()))
    ordered = sorted(stats, key=lambda l: (-stats[l][0], -stats[l][1], l))
    return ordered[:lambda_c]


def _vrf_visible_points(landmark, scene_map: SceneMap):
    """Retained landmark points visible in the landmark's VRF, with their
    stacked positions and descriptors."""
    row_of, all_pos, all_desc = scene_map.point_arrays()
    rows = np.fromiter((row_of[pid] for pid in landmark.point_ids),
                       dtype=np.intp, count=len(landmark.point_ids))
    positions = all_pos[rows]
    _, visible = project_points(landmark.vrf.pose, landmark.vrf.intrinsics,
                                positions)
    ids = [pid for pid, flag in zip(landmark.point_ids, visible) if flag]
    if not ids:
        return [], np.zeros((0, 3)), np.zeros((0, scene_map.descriptor_dim))
    return ids, positions[visible], all_desc[rows[visible]]


def match_landmark(query_keypoints, landmark, scene_map: SceneMap,
                   ratio_test: float) -> list[Correspondence2D3D]:
    """Mutual-nearest-neighbor descriptor matches between query keypoints
    and the landmark's VRF-visible points, with a best/second-best ratio
    test on the query side."""
    if len(query_keypoints) == 0:
        return []
    ids, positions, descriptors = _vrf_visible_points(landmark, scene_map)
    if not ids:
        return []
    # float32 throughout: the distances only feed comparisons
    dq = np.stack([kp.descriptor for kp in query_keypoints]).astype(np.float32)
    dm = descriptors.astype(np.float32)
    dist2 = ((dq * dq).sum(axis=1)[:, None] + (dm * dm).sum(axis=1)[None, :]
             - np.float32(2.0) * dq @ dm.T)
    np.maximum(dist2, np.float32(0.0), out=dist2)
    dist = np.sqrt(dist2, out=dist2)

    nq = dist.shape[0]
    best_j = dist.argmin(axis=1)
    mutual = dist.argmin(axis=0)[best_j] == np.arange(nq)
    accept = mutual
    if dist.shape[1] > 1:
        d1 = dist[np.arange(nq), best_j]
        d2 = np.partition(dist, 1, axis=1)[:, 1]
        # d2 == 0 means identical duplicate candidates: ambiguous, reject
        ratio = np.divide(d1, d2, out=np.full(nq, np.inf), where=d2 > 0)
        accept = accept & (ratio <= ratio_test)
    matches: list[Correspondence2D3D] = []
    for i in np.nonzero(accept)[0]:
        kp = query_keypoints[i]
        matches.append(Correspondence2D3D(
            point2d=np.array([kp.u, kp.v]),
            point3d=positions[best_j[i]].copy()))
    return matches


def covis_refine(t_init: Pose, used_landmark: int, keypoints,
                 scene_map: SceneMap, k_query: CameraIntrinsics,
                 params: LocalizerParams,
                 initial_inliers: int | None = None):
    """Re-estimate the pose on an enlarged match set.

    Points of the used landmark and of every covisible landmark are
    projected under t_init; each keypoint matches the descriptor-nearest
    point projecting within refine_window_px (ratio test against the
    second-nearest in the window). Falls back to t_init when the enlarged
    set cannot beat the initial inlier count.

    Returns (pose, inlier count, refined flag).
    """
    floor = 4 if initial_inliers is None else initial_inliers
    labels = {used_landmark} | scene_map.neighbors(used_landmark)
    point_ids = sorted({pid
                        for label in labels
                        for pid in scene_map.landmarks[label - 1].point_ids})
    if not point_ids or len(keypoints) == 0:
        return t_init, floor, False

    row_of, all_pos, all_desc = scene_map.point_arrays()
    rows_sel = np.fromiter((row_of[pid] for pid in point_ids),
                           dtype=np.intp, count=len(point_ids))
    positions = all_pos[rows_sel]
    descriptors = all_desc[rows_sel]
    uv, visible = project_points(t_init, k_query, positions)
    if not visible.any():
        return t_init, floor, False
    positions = positions[visible]
    descriptors = descriptors[visible]
    uv = uv[visible]

    q_uv = np.array([[kp.u, kp.v] for kp in keypoints], dtype=np.float64)
    # the match search runs in float32: distances only feed comparisons and
    # the ratio test, and the dense matrices here are the per-query hot spot
    dq = np.stack([kp.descriptor for kp in keypoints]).astype(np.float32)
    dm = descriptors.astype(np.float32)
    quv32 = q_uv.astype(np.float32)
    uv32 = uv.astype(np.float32)
    inside = ((quv32[:, 0:1] - uv32[:, 0]) ** 2
              + (quv32[:, 1:2] - uv32[:, 1]) ** 2
              <= np.float32(params.refine_window_px ** 2))

    # descriptor distances restricted to the projection window
    dist2 = ((dq * dq).sum(axis=1)[:, None] + (dm * dm).sum(axis=1)[None, :]
             - np.float32(2.0) * dq @ dm.T)
    np.maximum(dist2, np.float32(0.0), out=dist2)
    dist = np.sqrt(dist2, out=dist2)
    dist[~inside] = np.inf
    nq = dist.shape[0]
    best_j = dist.argmin(axis=1)
    d1 = dist[np.arange(nq), best_j]
    if dist.shape[1] > 1:
        d2 = np.partition(dist, 1, axis=1)[:, 1]
    else:
        d2 = np.full(nq, np.inf, dtype=dist.dtype)
    # lone candidate in the window (d2 infinite) passes; identical
    # duplicates (d2 == 0) are ambiguous and rejected
    ratio = np.divide(d1, d2, out=np.full(nq, np.inf, dtype=dist.dtype),
                      where=(d2 > 0) & np.isfinite(d2))
    ratio[np.isinf(d2) & np.isfinite(d1)] = 0.0
    accept = np.isfinite(d1) & (ratio <= params.ratio_test)

    rows = np.nonzero(accept)[0]
    match_uv = q_uv[rows]
    match_xyz = positions[best_j[rows]]

    if len(match_uv) < max(4, floor):
        return t_init, floor, False
    try:
        res = ransac_pnp((match_uv, match_xyz), k_query, params.ransac)
    except _GEOMETRY_FAILURES:
        return t_init, floor, False
    if res.num_inliers < floor:
        return t_init, floor, False
    try:
        pose = refine_pose(res.pose,
                           (match_uv[res.inlier_mask],
                            match_xyz[res.inlier_mask]),
                           k_query, params.refine_pose_params)
    except LandmarkLocError:
        pose = res.pose
    return pose, res.num_inliers, True


def progressive_localize(keypoints, model, scene_map: SceneMap,
                         k_query: CameraIntrinsics,
                         params: LocalizerParams | None = None
                         ) -> LocalizationResult:
    """Full query pipeline: recognize, drop outliers, rank landmarks, then
    verify candidates in order until one gathers >= lambda_i inliers."""
    if params is None:
        params = LocalizerParams()
    rec = recognize(keypoints, model)
    kept, labels, confidences = remove_outliers(keypoints, rec,
                                                params.lambda_s)
    if not kept:
        return _failed(0)
    candidates = rank_landmarks(labels, confidences, params.lambda_c)

    tried = 0
    for label in candidates:
        subset = [kp for kp, lab in zip(kept, labels) if lab == label]
        tried += 1
        corrs = match_landmark(subset, scene_map.landmarks[label - 1],
                               scene_map, params.ratio_test)
        if len(corrs) < 4:
            continue
        try:
            res = ransac_pnp(corrs, k_query, params.ransac)
        except _GEOMETRY_FAILURES:
            continue
        if res.num_inliers < params.lambda_i:
            continue

        pose = res.pose
        refined = False
        if params.refine:
            new_pose, _, did = covis_refine(
                res.pose, label, kept, scene_map, k_query, params,
                initial_inliers=res.num_inliers)
            if did:
                # the accepted inlier set must stay within the RANSAC
                # threshold under whatever pose is returned
                inlier_corrs = [c for c, flag in zip(corrs, res.inlier_mask)
                                if flag]
                p2d, p3d, _ = stack_correspondences(inlier_corrs)
                errs = reprojection_errors(new_pose, k_query, p2d, p3d)
                if np.all(errs <= params.ransac.inlier_px_threshold):
                    pose = new_pose
                    refined = True
        return LocalizationResult(status=LOCALIZED, pose=pose,
                                  used_landmark=label,
                                  num_inliers=res.num_inliers,
                                  candidates_tried=tried, refined=refined)
    return _failed(tried)
