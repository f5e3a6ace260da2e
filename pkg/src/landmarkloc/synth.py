"""Synthetic multi-view scenes for exercising the pipeline end to end.

Scenes are clusters of 3D points (spread in the ground plane, modest
vertical extent) ringed by reference cameras aimed at cluster centroids in
round-robin order. Point descriptors are unit vectors drawn near a
per-cluster prototype so descriptor-space structure mirrors spatial
structure; observations add Gaussian descriptor noise and per-frame outlier
keypoints. Everything is deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Pose, project_points
from .mapmodel import Frame, Keypoint2D, Reconstruction, ReconstructionPoint

_MIN_TRACK = 2          # SfM points are observed at least twice
_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class SceneSpec:
    num_clusters: int = 16
    points_per_cluster: int = 200
    cluster_spread_m: float = 0.03
    scene_extent_m: float = 2.0
    num_ref_frames: int = 40
    descriptor_dim: int = 128
    descriptor_noise_sigma: float = 0.0
    outlier_keypoint_fraction: float = 0.0
    # how far point descriptors scatter around their cluster prototype
    descriptor_cluster_spread: float = 0.03
    # fraction of visible observations withheld per frame; leaves pruning
    # and VRF selection something to do
    observation_dropout: float = 0.3
    intrinsics: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics(
            fx=600.0, fy=600.0, cx=320.0, cy=240.0, width=640, height=480))
    seed: int = 0

    def __post_init__(self):
        for name in ("num_clusters", "points_per_cluster", "num_ref_frames",
                     "descriptor_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        for name in ("outlier_keypoint_fraction", "observation_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        for name in ("cluster_spread_m", "scene_extent_m",
                     "descriptor_noise_sigma", "descriptor_cluster_spread"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        if self.scene_extent_m <= 0.0:
            raise ValueError("scene_extent_m must be positive")


@dataclass(frozen=True)
class SceneGroundTruth:
    cluster_of: np.ndarray         # (num_points,) generating cluster index
    frame_poses: dict[int, Pose]
    cluster_centers: np.ndarray    # (num_clusters, 3)
    prototypes: np.ndarray         # (num_clusters, D) unit float32


@dataclass(frozen=True)
class QueryNoise:
    descriptor_sigma: float = 0.0
    outlier_fraction: float = 0.0
    pixel_noise_px: float = 0.0

    def __post_init__(self):
        if self.descriptor_sigma < 0 or self.pixel_noise_px < 0:
            raise ValueError("noise magnitudes must be nonnegative")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class QueryRender:
    keypoints: list
    pose: Pose
    insufficient_visibility: bool
    num_visible: int


def _look_at(eye: np.ndarray, target: np.ndarray) -> Pose:
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera eye coincides with its target")
    z = forward / norm
    up = _UP if abs(z @ _UP) < 0.999 else np.array([1.0, 0.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z])
    return Pose(rotation=rot, translation=-rot @ eye)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _noisy_descriptors(base: np.ndarray, sigma: float,
                       rng: np.random.Generator) -> np.ndarray:
    if sigma > 0.0:
        base = base + sigma * rng.standard_normal(base.shape)
    return _unit_rows(base).astype(np.float32)


def _outlier_keypoints(count: int, intrinsics: CameraIntrinsics, dim: int,
                       rng: np.random.Generator) -> list:
    kps = []
    if count <= 0:
        return kps
    uv = rng.uniform([0.0, 0.0], [intrinsics.width, intrinsics.height],
                     size=(count, 2))
    desc = _unit_rows(rng.standard_normal((count, dim))).astype(np.float32)
    for i in range(count):
        kps.append(Keypoint2D(u=float(uv[i, 0]), v=float(uv[i, 1]),
                              descriptor=desc[i], score=0.5,
                              point3d_id=None))
    return kps


def _num_outliers(num_inliers: int, fraction: float) -> int:
    if fraction <= 0.0 or num_inliers == 0:
        return 0
    return int(round(num_inliers * fraction / (1.0 - fraction)))


def generate_scene(spec: SceneSpec) -> tuple[Reconstruction, SceneGroundTruth]:
    """Build a reconstruction and the generating ground truth."""
    rng = np.random.default_rng(spec.seed)
    k = spec.num_clusters
    half = spec.scene_extent_m / 2.0

    # cluster centers on a jittered grid in the ground plane
    grid = int(np.ceil(np.sqrt(k)))
    spacing = spec.scene_extent_m / grid
    centers = np.zeros((k, 3))
    for c in range(k):
        gi, gj = divmod(c, grid)
        centers[c, 0] = -half + (gj + 0.5) * spacing
        centers[c, 1] = -half + (gi + 0.5) * spacing
    centers[:, :2] += rng.uniform(-0.05 * spacing, 0.05 * spacing,
                                  size=(k, 2))

    n_total = k * spec.points_per_cluster
    cluster_of = np.repeat(np.arange(k), spec.points_per_cluster)
    offsets = np.zeros((n_total, 3))
    offsets[:, :2] = rng.normal(0.0, spec.cluster_spread_m, size=(n_total, 2))
    offsets[:, 2] = rng.uniform(0.0, 2.0 * spec.cluster_spread_m,
                                size=n_total)
    positions = centers[cluster_of] + offsets

    prototypes = _unit_rows(
        rng.standard_normal((k, spec.descriptor_dim))).astype(np.float32)
    point_desc = prototypes[cluster_of].astype(np.float64)
    if spec.descriptor_cluster_spread > 0.0:
        point_desc = point_desc + spec.descriptor_cluster_spread * \
            rng.standard_normal(point_desc.shape)
    point_desc = _unit_rows(point_desc).astype(np.float32)

    # reference cameras on a ring, aimed at cluster centroids round-robin
    ring_radius = 0.85 * spec.scene_extent_m
    height = 0.25 * spec.scene_extent_m
    angles = (2.0 * np.pi * np.arange(spec.num_ref_frames)
              / spec.num_ref_frames)
    angles = angles + rng.uniform(-0.02, 0.02, size=spec.num_ref_frames)
    poses = []
    for f in range(spec.num_ref_frames):
        eye = np.array([ring_radius * np.cos(angles[f]),
                        ring_radius * np.sin(angles[f]),
                        height])
        poses.append(_look_at(eye, centers[f % k]))

    # visibility and observation selection
    vis = np.zeros((spec.num_ref_frames, n_total), dtype=bool)
    uvs = np.zeros((spec.num_ref_frames, n_total, 2))
    for f, pose in enumerate(poses):
        uvs[f], vis[f] = project_points(pose, spec.intrinsics, positions)
    selected = vis.copy()
    if spec.observation_dropout > 0.0:
        drop = rng.random(vis.shape) < spec.observation_dropout
        selected &= ~drop
    counts = selected.sum(axis=0)
    for pid in np.nonzero(counts < _MIN_TRACK)[0]:
        need = _MIN_TRACK - int(counts[pid])
        for f in np.nonzero(vis[:, pid])[0]:
            if need == 0:
                break
            if not selected[f, pid]:
                selected[f, pid] = True
                need -= 1

    keep = selected.sum(axis=0) >= _MIN_TRACK
    new_id = np.full(n_total, -1, dtype=np.int64)
    new_id[keep] = np.arange(int(keep.sum()))

    frames = {}
    tracks: dict[int, list[tuple[int, int]]] = {
        int(pid): [] for pid in new_id[keep]}
    for f, pose in enumerate(poses):
        observed = np.nonzero(selected[f] & keep)[0]
        noisy = _noisy_descriptors(point_desc[observed].astype(np.float64),
                                   spec.descriptor_noise_sigma, rng)
        kps = []
        for row, pid in enumerate(observed):
            mapped = int(new_id[pid])
            tracks[mapped].append((f, len(kps)))
            kps.append(Keypoint2D(u=float(uvs[f, pid, 0]),
                                  v=float(uvs[f, pid, 1]),
                                  descriptor=noisy[row], score=1.0,
                                  point3d_id=mapped))
        kps.extend(_outlier_keypoints(
            _num_outliers(len(kps), spec.outlier_keypoint_fraction),
            spec.intrinsics, spec.descriptor_dim, rng))
        frames[f] = Frame(frame_id=f, camera_id=0, pose=pose, keypoints=kps)

    points = {}
    for pid in np.nonzero(keep)[0]:
        mapped = int(new_id[pid])
        points[mapped] = ReconstructionPoint(
            point_id=mapped, position=positions[pid].copy(),
            track=tracks[mapped])

    recon = Reconstruction(descriptor_dim=spec.descriptor_dim,
                           cameras={0: spec.intrinsics},
                           frames=frames, points=points)
    recon.validate()
    gt = SceneGroundTruth(cluster_of=cluster_of[keep].copy(),
                          frame_poses={f: p for f, p in enumerate(poses)},
                          cluster_centers=centers,
                          prototypes=prototypes)
    return recon, gt


def render_query(recon: Reconstruction, pose: Pose, noise: QueryNoise,
                 seed: int, min_visible: int = 64) -> QueryRender:
    """Observe the reconstruction's points from a query pose.

    Same observation model as the reference frames (descriptor noise,
    outlier keypoints) plus Gaussian pixel noise; no observation dropout.
    Keypoints keep their source point id for ground-truth bookkeeping.
    """
    rng = np.random.default_rng(seed)
    intr = next(iter(recon.cameras.values()))
    ids = sorted(recon.points)
    positions = np.stack([recon.points[pid].position for pid in ids])
    uv, vis = project_points(pose, intr, positions)
    observed = np.nonzero(vis)[0]
    num_visible = int(observed.size)

    kps: list[Keypoint2D] = []
    if num_visible:
        def clean_descriptor(i):
            fid, kidx = recon.points[ids[i]].track[0]
            return recon.frames[fid].keypoints[kidx].descriptor
        base = np.stack([clean_descriptor(i)
                         for i in observed]).astype(np.float64)
        # observation noise applies to the clean point descriptor, which by
        # construction is the prototype-derived descriptor; reference frames
        # stored it unmodified when their own sigma was zero. Use the first
        # observation's descriptor as the canonical clean vector.
        noisy = _noisy_descriptors(base, noise.descriptor_sigma, rng)
        puv = uv[observed]
        if noise.pixel_noise_px > 0.0:
            puv = puv + rng.normal(0.0, noise.pixel_noise_px,
                                   size=puv.shape)
        for row, i in enumerate(observed):
            kps.append(Keypoint2D(u=float(puv[row, 0]), v=float(puv[row, 1]),
                                  descriptor=noisy[row], score=1.0,
                                  point3d_id=ids[i]))
    kps.extend(_outlier_keypoints(
        _num_outliers(len(kps), noise.outlier_fraction), intr,
        recon.descriptor_dim, rng))
    return QueryRender(keypoints=kps, pose=pose,
                       insufficient_visibility=num_visible < min_visible,
                       num_visible=num_visible)


def sample_query_poses(spec: SceneSpec, ground_truth: SceneGroundTruth,
                       num_queries: int, seed: int) -> list[Pose]:
    """Query poses on a jittered ring, aimed at cluster centroids in
    round-robin order; same placement family as the reference cameras."""
    rng = np.random.default_rng(seed)
    poses = []
    base_radius = 0.85 * spec.scene_extent_m
    base_height = 0.25 * spec.scene_extent_m
    k = ground_truth.cluster_centers.shape[0]
    for i in range(num_queries):
        angle = 2.0 * np.pi * (i + rng.uniform(0.0, 1.0)) / num_queries
        radius = base_radius * rng.uniform(0.9, 1.1)
        height = base_height * rng.uniform(0.8, 1.2)
        eye = np.array([radius * np.cos(angle), radius * np.sin(angle),
                        height])
        poses.append(_look_at(eye, ground_truth.cluster_centers[i % k]))
    return poses
