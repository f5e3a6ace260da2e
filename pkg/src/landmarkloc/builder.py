"""Map construction: filter unstable points, cluster the survivors into
landmarks on the ground plane, pick one descriptor per point, one virtual
reference frame per landmark, and prune observation redundancy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .clustering import cluster_landmarks
from .errors import TooFewPoints
from .geometry import project
from .mapmodel import (
    Keypoint2D,
    Landmark,
    Point3D,
    Reconstruction,
    SceneMap,
    VirtualReferenceFrame,
)


@dataclass(frozen=True)
class BuilderConfig:
    """Knobs of the map builder.

    lambda_l: number of landmarks; lambda_n / lambda_v: neighborhood size and
    covariance-trace threshold of the stability filter; lambda_o: pixel
    radius of the pruning conflict test; up_axis: which world coordinate is
    vertical (dropped by the ground projection).
    """

    lambda_l: int
    lambda_n: int = 20
    lambda_v: float = 0.2
    lambda_o: float = 25.0
    up_axis: int = 2
    enable_pruning: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lambda_l", int(self.lambda_l))
        object.__setattr__(self, "lambda_n", int(self.lambda_n))
        object.__setattr__(self, "lambda_v", float(self.lambda_v))
        object.__setattr__(self, "lambda_o", float(self.lambda_o))
        object.__setattr__(self, "up_axis", int(self.up_axis))
        object.__setattr__(self, "enable_pruning", bool(self.enable_pruning))
        object.__setattr__(self, "seed", int(self.seed))
        if self.lambda_l < 1:
            raise ValueError("lambda_l must be positive")
        if self.lambda_n < 1:
            raise ValueError("lambda_n must be positive")
        if self.lambda_v <= 0:
            raise ValueError("lambda_v must be positive")
        if self.lambda_o < 0:
            raise ValueError("lambda_o must be non-negative")
        if self.up_axis not in (0, 1, 2):
            raise ValueError("up_axis must be 0, 1, or 2")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def filter_points(recon: Reconstruction, lambda_n: int = 20,
                  lambda_v: float = 0.2) -> set[int]:
    """Ids of points whose local neighborhood is compact.

    A point X survives when the trace of the sample covariance of X together
    with its ``lambda_n`` nearest neighbors is at most ``lambda_v``. With
    ``lambda_n`` or fewer points in total, everything survives.
    """
    ids = sorted(recon.points)
    n = len(ids)
    if n <= lambda_n:
        return set(ids)
    positions = np.array([recon.points[pid].position for pid in ids])
    tree = cKDTree(positions)
    k = lambda_n + 1          # the query point is its own nearest neighbor
    retained: set[int] = set()
    chunk = 8192
    for start in range(0, n, chunk):
        block = positions[start:start + chunk]
        _, idx = tree.query(block, k=k)
        nb = positions[idx]                       # (b, k, 3)
        dev = nb - nb.mean(axis=1, keepdims=True)
        trace = (dev * dev).sum(axis=(1, 2)) / (k - 1)
        for offset in np.flatnonzero(trace <= lambda_v):
            retained.add(ids[start + int(offset)])
    return retained


def project_to_ground(points, up_axis: int = 2) -> np.ndarray:
    """Drop the vertical coordinate: (n, 3) -> (n, 2) or (3,) -> (2,)."""
    pts = np.asarray(points, dtype=np.float64)
    if up_axis not in (0, 1, 2):
        raise ValueError("up_axis must be 0, 1, or 2")
    return np.delete(pts, up_axis, axis=-1)


def select_descriptor(descriptors) -> int:
    """Index of the member whose median distance to the other members is
    minimal. Rows must already be sorted by (frame_id, keypoint_index);
    ties resolve to the first row."""
    desc = np.asarray(descriptors, dtype=np.float64)
    k = len(desc)
    if k == 0:
        raise ValueError("no descriptors to select from")
    if k == 1:
        return 0
    sq = (desc * desc).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (desc @ desc.T)
    np.maximum(d2, 0.0, out=d2)
    dist = np.sqrt(d2)
    medians = np.empty(k)
    for i in range(k):
        medians[i] = np.median(np.delete(dist[i], i))
    return int(np.argmin(medians))


def select_vrf(point_ids, recon: Reconstruction) -> VirtualReferenceFrame:
    """The real frame observing the largest fraction of the landmark's
    points, ties to the lowest frame id. Copies its intrinsics and pose."""
    if not point_ids:
        raise ValueError("landmark has no points")
    counts: dict[int, int] = {}
    for pid in point_ids:
        for fid, _ in recon.points[pid].track:
            counts[fid] = counts.get(fid, 0) + 1
    best_fid = min(counts, key=lambda fid: (-counts[fid], fid))
    frame = recon.frames[best_fid]
    return VirtualReferenceFrame(
        intrinsics=recon.cameras[frame.camera_id],
        pose=frame.pose,
        source_frame_id=best_fid,
    )


@dataclass(frozen=True)
class PruneWitness:
    """Evidence for one removal: the removed point projected onto
    ``frame_id`` within ``distance_px`` of ``kept_point_id``'s projection."""

    frame_id: int
    kept_point_id: int
    distance_px: float


@dataclass(eq=False)
class PruneResult:
    kept_point_ids: list[int]
    kept_track: dict[int, list[tuple[int, int]]]   # point -> retained obs
    removed: dict[int, PruneWitness]
    frame_order: list[int]


def prune_landmark_points(point_ids, recon: Reconstruction,
                          lambda_o: float = 25.0) -> PruneResult:
    """Drop redundantly observed points of one landmark.

    Frames observing the landmark are ranked by descending observation
    count (ties to the lower frame id). The first frame keeps everything it
    observes. A later frame's not-yet-kept point is discarded iff its
    projection onto some earlier frame is visible and lies strictly within
    ``lambda_o`` pixels of an already-kept point's projection there; the
    conflict is recorded as a witness. Later duplicate observations of kept
    points are dropped from the retained track.
    """
    by_frame: dict[int, dict[int, int]] = {}
    for pid in point_ids:
        for fid, ki in recon.points[pid].track:
            by_frame.setdefault(fid, {}).setdefault(pid, ki)
    frame_order = sorted(by_frame, key=lambda fid: (-len(by_frame[fid]), fid))

    cams = [recon.cameras[recon.frames[fid].camera_id] for fid in frame_order]
    poses = [recon.frames[fid].pose for fid in frame_order]

    # projections of kept points, per frame in frame_order
    kept_uv: list[list[np.ndarray]] = [[] for _ in frame_order]
    kept_pid: list[list[int]] = [[] for _ in frame_order]

    kept_track: dict[int, list[tuple[int, int]]] = {}
    removed: dict[int, PruneWitness] = {}

    def keep(pid: int, fid: int, ki: int):
        kept_track[pid] = [(fid, ki)]
        pos = recon.points[pid].position
        for slot, (pose, cam) in enumerate(zip(poses, cams)):
            uv = project(pose, cam, pos)
            if uv is not None:
                kept_uv[slot].append(np.array(uv))
                kept_pid[slot].append(pid)

    for rank, fid in enumerate(frame_order):
        obs = by_frame[fid]
        for pid in sorted(obs):
            if pid in kept_track:
                continue                      # duplicate observation, dropped
            if rank == 0:
                keep(pid, fid, obs[pid])
                continue
            pos = recon.points[pid].position
            witness = None
            for slot in range(rank):
                if not kept_pid[slot]:
                    continue
                uv = project(poses[slot], cams[slot], pos)
                if uv is None:
                    continue
                arr = np.vstack(kept_uv[slot])
                dist = np.hypot(arr[:, 0] - uv[0], arr[:, 1] - uv[1])
                jmin = int(np.argmin(dist))
                if dist[jmin] < lambda_o:
                    witness = PruneWitness(
                        frame_id=frame_order[slot],
                        kept_point_id=kept_pid[slot][jmin],
                        distance_px=float(dist[jmin]),
                    )
                    break
            if witness is None:
                keep(pid, fid, obs[pid])
            else:
                removed[pid] = witness

    return PruneResult(
        kept_point_ids=sorted(kept_track),
        kept_track=kept_track,
        removed=removed,
        frame_order=frame_order,
    )


def build_covisibility(recon: Reconstruction,
                       labels: dict[int, int],
                       num_landmarks: int) -> dict[int, set[int]]:
    """Edge (a, b) iff some frame observes retained points of both
    landmarks. Symmetric, irreflexive.

    Observation here means the reconstruction's full tracks: pruning trims
    a point's stored track to its keeping frame, but the refinement stage
    needs the graph to reflect which landmarks actually share views."""
    per_frame: dict[int, set[int]] = {}
    for pid, label in labels.items():
        for fid, _ in recon.points[pid].track:
            per_frame.setdefault(fid, set()).add(label)
    covis: dict[int, set[int]] = {lb: set() for lb in range(1, num_landmarks + 1)}
    for lbs in per_frame.values():
        group = sorted(lbs)
        for i, a in enumerate(group):
            for b in group[i + 1:]:
                covis[a].add(b)
                covis[b].add(a)
    return covis


def build_map(recon: Reconstruction, config: BuilderConfig) -> SceneMap:
    """Run the full pipeline: filter, cluster, select descriptors and VRFs,
    prune, and assemble the validated map."""
    recon.validate()
    retained = sorted(filter_points(recon, config.lambda_n, config.lambda_v))
    if len(retained) < config.lambda_l:
        raise TooFewPoints(
            f"{len(retained)} filtered points cannot form "
            f"{config.lambda_l} landmarks")

    positions = np.array([recon.points[pid].position for pid in retained])
    ground = project_to_ground(positions, config.up_axis)
    labels_arr = cluster_landmarks(ground, config.lambda_l, config.seed)
    label_of = {pid: int(lb) for pid, lb in zip(retained, labels_arr)}
    ground_of = {pid: ground[i] for i, pid in enumerate(retained)}

    members: dict[int, list[int]] = {lb: [] for lb in range(1, config.lambda_l + 1)}
    for pid in retained:
        members[label_of[pid]].append(pid)

    descriptors: dict[int, np.ndarray] = {}
    for pid in retained:
        track = sorted(recon.points[pid].track)
        descs = np.stack([
            recon.frames[fid].keypoints[ki].descriptor for fid, ki in track])
        descriptors[pid] = descs[select_descriptor(descs)].copy()

    landmarks: list[Landmark] = []
    kept_track_all: dict[int, list[tuple[int, int]]] = {}
    for lb in range(1, config.lambda_l + 1):
        pids = members[lb]
        vrf = select_vrf(pids, recon)
        if config.enable_pruning:
            pr = prune_landmark_points(pids, recon, config.lambda_o)
            kept = pr.kept_point_ids
            for pid in kept:
                kept_track_all[pid] = pr.kept_track[pid]
        else:
            kept = sorted(pids)
            for pid in kept:
                kept_track_all[pid] = sorted(recon.points[pid].track)
        centroid = np.mean([ground_of[pid] for pid in kept], axis=0)
        landmarks.append(Landmark(label=lb, point_ids=kept, vrf=vrf,
                                  centroid2d=centroid))

    points: dict[int, Point3D] = {}
    for lm in landmarks:
        for pid in lm.point_ids:
            points[pid] = Point3D(
                point_id=pid,
                position=recon.points[pid].position,
                descriptor=descriptors[pid],
                track=kept_track_all[pid],
                landmark_label=lm.label,
            )

    covis = build_covisibility(recon,
                               {pid: pt.landmark_label for pid, pt in points.items()},
                               config.lambda_l)

    scene_map = SceneMap(
        descriptor_dim=recon.descriptor_dim,
        landmarks=landmarks,
        points=points,
        covisibility=covis,
        build_config=config,
    )
    scene_map.validate()
    return scene_map


@dataclass(eq=False)
class TrainingSample:
    """One frame's keypoints with per-keypoint landmark labels."""

    frame_id: int
    keypoints: list[Keypoint2D]
    labels: np.ndarray          # (len(keypoints),) int64 over [0, lambda_l]


def assign_training_labels(recon: Reconstruction,
                           scene_map: SceneMap) -> list[TrainingSample]:
    """Label every keypoint with its retained map point's landmark, or 0
    for keypoints without a 3D point or whose point was filtered/pruned."""
    samples = []
    for fid in sorted(recon.frames):
        frame = recon.frames[fid]
        labels = np.zeros(len(frame.keypoints), dtype=np.int64)
        for i, kp in enumerate(frame.keypoints):
            if kp.point3d_id is not None:
                pt = scene_map.points.get(kp.point3d_id)
                if pt is not None:
                    labels[i] = pt.landmark_label
        samples.append(TrainingSample(frame_id=fid, keypoints=frame.keypoints,
                                      labels=labels))
    return samples
