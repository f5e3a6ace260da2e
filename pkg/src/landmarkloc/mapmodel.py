"""Domain types for reconstructions and landmark maps.

A ``Reconstruction`` is the raw multi-view input: calibrated frames with
keypoints and triangulated 3D points with observation tracks. A ``SceneMap``
is the compact product of the map builder: points carry a single selected
descriptor and a landmark label, each landmark owns one virtual reference
frame, and a covisibility graph links landmarks that share an observing
frame.

Arrays follow the storage layout of the binary container: descriptors and
point positions are float32, poses and intrinsics are float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvariantViolation, LinkageError
from .geometry import CameraIntrinsics, Pose

DESCRIPTOR_NORM_TOL = 1e-3   # accepted deviation from unit norm on import
_UNIT_TOL = 1e-5             # validation tolerance after float32 storage


@dataclass(eq=False)
class Keypoint2D:
    """A detected feature in one image."""

    u: float
    v: float
    descriptor: np.ndarray          # (D,) float32, unit norm
    score: float = 1.0
    point3d_id: int | None = None   # absent => recognition label 0

    def __post_init__(self):
        self.u = float(self.u)
        self.v = float(self.v)
        self.score = float(self.score)
        self.descriptor = np.asarray(self.descriptor, dtype=np.float32).reshape(-1)
        if self.point3d_id is not None:
            self.point3d_id = int(self.point3d_id)


@dataclass(eq=False)
class Frame:
    """A calibrated, posed image with its keypoints."""

    frame_id: int
    camera_id: int
    pose: Pose
    keypoints: list[Keypoint2D] = field(default_factory=list)


@dataclass(eq=False)
class ReconstructionPoint:
    """A triangulated point of the raw reconstruction."""

    point_id: int
    position: np.ndarray                     # (3,) float64, meters
    track: list[tuple[int, int]] = field(default_factory=list)  # (frame_id, kp_idx)

    def __post_init__(self):
        self.point_id = int(self.point_id)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.track = [(int(f), int(k)) for f, k in self.track]


@dataclass(eq=False)
class Reconstruction:
    """Raw multi-view reconstruction used as builder input."""

    descriptor_dim: int
    cameras: dict[int, CameraIntrinsics]
    frames: dict[int, Frame]
    points: dict[int, ReconstructionPoint]

    def validate(self):
        """Check linkage both ways; raises LinkageError on any dangling or
        inconsistent reference."""
        for fid, frame in self.frames.items():
            if frame.camera_id not in self.cameras:
                raise LinkageError(f"frame {fid} references unknown camera "
                                   f"{frame.camera_id}")
            for ki, kp in enumerate(frame.keypoints):
                if kp.descriptor.shape != (self.descriptor_dim,):
                    raise LinkageError(
                        f"frame {fid} keypoint {ki} has descriptor of dim "
                        f"{kp.descriptor.shape[0]}, expected {self.descriptor_dim}")
                if kp.point3d_id is not None:
                    pt = self.points.get(kp.point3d_id)
                    if pt is None:
                        raise LinkageError(
                            f"frame {fid} keypoint {ki} references unknown "
                            f"point {kp.point3d_id}")
                    if (fid, ki) not in pt.track:
                        raise LinkageError(
                            f"point {kp.point3d_id} track is missing "
                            f"observation ({fid}, {ki})")
        for pid, pt in self.points.items():
            if not pt.track:
                raise LinkageError(f"point {pid} has an empty track")
            for fid, ki in pt.track:
                frame = self.frames.get(fid)
                if frame is None:
                    raise LinkageError(
                        f"point {pid} track references unknown frame {fid}")
                if not (0 <= ki < len(frame.keypoints)):
                    raise LinkageError(
                        f"point {pid} track references keypoint {ki} outside "
                        f"frame {fid}")
                if frame.keypoints[ki].point3d_id != pid:
                    raise LinkageError(
                        f"frame {fid} keypoint {ki} does not point back at "
                        f"point {pid}")


@dataclass(eq=False)
class Point3D:
    """A retained map point: one selected descriptor, one landmark label."""

    point_id: int
    position: np.ndarray            # (3,) float32, meters
    descriptor: np.ndarray          # (D,) float32, unit norm
    track: list[tuple[int, int]]    # retained observations (frame_id, kp_idx)
    landmark_label: int             # 1-based

    def __post_init__(self):
        self.point_id = int(self.point_id)
        self.position = np.asarray(self.position, dtype=np.float32).reshape(3)
        self.descriptor = np.asarray(self.descriptor, dtype=np.float32).reshape(-1)
        self.track = [(int(f), int(k)) for f, k in self.track]
        self.landmark_label = int(self.landmark_label)


@dataclass(eq=False)
class VirtualReferenceFrame:
    """Intrinsics and pose copied from the best-covering real frame."""

    intrinsics: CameraIntrinsics
    pose: Pose
    source_frame_id: int

    def __post_init__(self):
        self.source_frame_id = int(self.source_frame_id)


@dataclass(eq=False)
class Landmark:
    """A cluster of map points with its virtual reference frame."""

    label: int                      # 1-based
    point_ids: list[int]            # sorted ascending
    vrf: VirtualReferenceFrame
    centroid2d: np.ndarray          # (2,) float32, mean ground projection

    def __post_init__(self):
        self.label = int(self.label)
        self.point_ids = sorted(int(p) for p in self.point_ids)
        self.centroid2d = np.asarray(self.centroid2d, dtype=np.float32).reshape(2)


@dataclass(eq=False)
class SceneMap:
    """The compact landmark map produced by the builder."""

    descriptor_dim: int
    landmarks: list[Landmark]                  # sorted by label, 1..lambda_l
    points: dict[int, Point3D]
    covisibility: dict[int, set[int]]          # label -> neighbor labels
    build_config: "BuilderConfig"

    def neighbors(self, label: int) -> set[int]:
        return set(self.covisibility.get(label, set()))

    def point_arrays(self):
        """Stacked positions (n,3) and descriptors (n,D) as float64 plus a
        point-id -> row lookup. Cached on first use; the map is treated as
        immutable once built."""
        cache = getattr(self, "_point_arrays", None)
        if cache is None:
            ids = sorted(self.points)
            positions = np.array([self.points[p].position for p in ids],
                                 dtype=np.float64).reshape(len(ids), 3)
            descriptors = np.array([self.points[p].descriptor for p in ids],
                                   dtype=np.float64).reshape(
                                       len(ids), self.descriptor_dim)
            cache = ({pid: row for row, pid in enumerate(ids)},
                     positions, descriptors)
            self._point_arrays = cache
        return cache

    def validate(self):
        """Raise InvariantViolation on any structural defect."""
        labels = [lm.label for lm in self.landmarks]
        expected = list(range(1, len(self.landmarks) + 1))
        if labels != expected:
            raise InvariantViolation(
                f"landmark labels must be exactly 1..{len(self.landmarks)} "
                f"in order, got {labels}")
        owner: dict[int, int] = {}
        for lm in self.landmarks:
            if not lm.point_ids:
                raise InvariantViolation(f"landmark {lm.label} has no points")
            for pid in lm.point_ids:
                if pid in owner:
                    raise InvariantViolation(
                        f"point {pid} belongs to landmarks {owner[pid]} "
                        f"and {lm.label}")
                owner[pid] = lm.label
                pt = self.points.get(pid)
                if pt is None:
                    raise InvariantViolation(
                        f"landmark {lm.label} references unknown point {pid}")
                if pt.landmark_label != lm.label:
                    raise InvariantViolation(
                        f"point {pid} is labeled {pt.landmark_label} but "
                        f"listed under landmark {lm.label}")
            if not any(fid == lm.vrf.source_frame_id
                       for pid in lm.point_ids
                       for fid, _ in self.points[pid].track):
                raise InvariantViolation(
                    f"landmark {lm.label} VRF frame {lm.vrf.source_frame_id} "
                    f"observes none of its points")
        if set(owner) != set(self.points):
            orphans = set(self.points) - set(owner)
            raise InvariantViolation(
                f"points {sorted(orphans)} belong to no landmark")
        for pid, pt in self.points.items():
            if pt.point_id != pid:
                raise InvariantViolation(f"point key {pid} holds id {pt.point_id}")
            if not pt.track:
                raise InvariantViolation(f"point {pid} has an empty track")
            if pt.descriptor.shape != (self.descriptor_dim,):
                raise InvariantViolation(
                    f"point {pid} descriptor dim {pt.descriptor.shape[0]} != "
                    f"{self.descriptor_dim}")
            norm = float(np.linalg.norm(pt.descriptor.astype(np.float64)))
            if abs(norm - 1.0) > _UNIT_TOL:
                raise InvariantViolation(
                    f"point {pid} descriptor norm {norm} is not unit")
        nlabels = set(expected)
        for a, nbrs in self.covisibility.items():
            if a not in nlabels:
                raise InvariantViolation(f"covisibility references label {a}")
            for b in nbrs:
                if b not in nlabels:
                    raise InvariantViolation(f"covisibility references label {b}")
                if b == a:
                    raise InvariantViolation(f"covisibility self-edge at {a}")
                if a not in self.covisibility.get(b, set()):
                    raise InvariantViolation(
                        f"covisibility edge ({a}, {b}) is not symmetric")

    def covisibility_edges(self) -> list[tuple[int, int]]:
        """Sorted unique undirected edges (a, b) with a < b."""
        edges = set()
        for a, nbrs in self.covisibility.items():
            for b in nbrs:
                edges.add((a, b) if a < b else (b, a))
        return sorted(edges)
