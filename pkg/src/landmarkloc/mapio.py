"""Serialization: the binary map container and reconstruction JSON import.

Map container layout (all integers unsigned 64-bit little-endian, bulk reals
float32, poses/intrinsics and config scalars float64):

    magic    8 bytes  b"PRAMMAP1"
    payload  version u64, section table (5 x (id, offset, length)),
             then the header / landmarks / points / descriptors /
             covisibility sections
    crc      u64 holding CRC-32 over the payload bytes

Round trips are bit-exact: deserialize(serialize(m)) reproduces every field
including float bit patterns.
"""

from __future__ import annotations

import io
import json
import struct
import zlib

import numpy as np

from . import builder as _builder
from .errors import (
    BadMagic,
    ChecksumMismatch,
    DescriptorDimMismatch,
    InvariantViolation,
    LinkageError,
    ParseError,
    UnsupportedVersion,
)
from .geometry import CameraIntrinsics, Pose, quaternion_from_rotation
from .mapmodel import (
    DESCRIPTOR_NORM_TOL,
    Frame,
    Keypoint2D,
    Landmark,
    Point3D,
    Reconstruction,
    ReconstructionPoint,
    SceneMap,
    VirtualReferenceFrame,
)

MAP_MAGIC = b"PRAMMAP1"
MAP_VERSION = 1

_SEC_HEADER = 0
_SEC_LANDMARKS = 1
_SEC_POINTS = 2
_SEC_DESCRIPTORS = 3
_SEC_COVISIBILITY = 4
_NUM_SECTIONS = 5

_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")


class _Writer:
    def __init__(self):
        self.buf = bytearray()

    def u64(self, value: int):
        self.buf += _U64.pack(int(value))

    def f64(self, value: float):
        self.buf += _F64.pack(float(value))

    def f32_array(self, arr: np.ndarray):
        self.buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()

    def f64_array(self, arr: np.ndarray):
        self.buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.pos = offset

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise InvariantViolation("section data ends prematurely")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def f64(self) -> float:
        return _F64.unpack(self._take(8))[0]

    def f32_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(4 * count), dtype="<f4").astype(
            np.float32, copy=True)

    def f64_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(8 * count), dtype="<f8").astype(
            np.float64, copy=True)


# ---------------------------------------------------------------------------
# map container
# ---------------------------------------------------------------------------

def serialize_map(scene_map: SceneMap) -> bytes:
    """Encode a validated map into the binary container."""
    scene_map.validate()
    cfg = scene_map.build_config

    header = _Writer()
    header.u64(scene_map.descriptor_dim)
    header.u64(len(scene_map.landmarks))
    header.u64(len(scene_map.points))
    header.u64(cfg.lambda_l)
    header.u64(cfg.lambda_n)
    header.f64(cfg.lambda_v)
    header.f64(cfg.lambda_o)
    header.u64(cfg.up_axis)
    header.u64(1 if cfg.enable_pruning else 0)
    header.u64(cfg.seed)

    landmarks = _Writer()
    for lm in scene_map.landmarks:
        k = lm.vrf.intrinsics
        landmarks.u64(lm.label)
        landmarks.u64(lm.vrf.source_frame_id)
        landmarks.u64(k.width)
        landmarks.u64(k.height)
        landmarks.f64(k.fx)
        landmarks.f64(k.fy)
        landmarks.f64(k.cx)
        landmarks.f64(k.cy)
        landmarks.f64_array(lm.vrf.pose.rotation.reshape(9))
        landmarks.f64_array(lm.vrf.pose.translation)
        landmarks.f32_array(lm.centroid2d)

    points = _Writer()
    desc = _Writer()
    for pid in sorted(scene_map.points):
        pt = scene_map.points[pid]
        points.u64(pt.point_id)
        points.u64(pt.landmark_label)
        points.u64(len(pt.track))
        for fid, ki in pt.track:
            points.u64(fid)
            points.u64(ki)
        points.f32_array(pt.position)
        desc.f32_array(pt.descriptor)

    covis = _Writer()
    edges = scene_map.covisibility_edges()
    covis.u64(len(edges))
    for a, b in edges:
        covis.u64(a)
        covis.u64(b)

    sections = [bytes(header.buf), bytes(landmarks.buf), bytes(points.buf),
                bytes(desc.buf), bytes(covis.buf)]

    table_size = _NUM_SECTIONS * 24
    payload_head = len(MAP_MAGIC) + 8 + table_size
    table = _Writer()
    offset = payload_head
    for sid, blob in enumerate(sections):
        table.u64(sid)
        table.u64(offset)
        table.u64(len(blob))
        offset += len(blob)

    payload = _U64.pack(MAP_VERSION) + bytes(table.buf) + b"".join(sections)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    return MAP_MAGIC + payload + _U64.pack(crc)


def deserialize_map(data: bytes) -> SceneMap:
    """Decode and validate a binary map container.

    Check order: magic, CRC-32 (covers truncation and bit flips), version,
    structure, then the full map invariants.
    """
    if len(data) < len(MAP_MAGIC) or data[:len(MAP_MAGIC)] != MAP_MAGIC:
        raise BadMagic("not a map container")
    if len(data) < len(MAP_MAGIC) + 8 + 8:
        raise ChecksumMismatch("container truncated")
    payload = data[len(MAP_MAGIC):-8]
    stored_crc = _U64.unpack(data[-8:])[0]
    if (zlib.crc32(payload) & 0xFFFFFFFF) != stored_crc:
        raise ChecksumMismatch("payload CRC-32 does not match")

    rd = _Reader(data, len(MAP_MAGIC))
    version = rd.u64()
    if version != MAP_VERSION:
        raise UnsupportedVersion(f"map container version {version}")
    table = {}
    for _ in range(_NUM_SECTIONS):
        sid = rd.u64()
        off = rd.u64()
        length = rd.u64()
        table[sid] = (off, length)
    if set(table) != set(range(_NUM_SECTIONS)):
        raise InvariantViolation("section table is incomplete")
    for off, length in table.values():
        if off + length > len(data) - 8:
            raise InvariantViolation("section exceeds container bounds")

    hdr = _Reader(data, table[_SEC_HEADER][0])
    descriptor_dim = hdr.u64()
    num_landmarks = hdr.u64()
    num_points = hdr.u64()
    cfg_kwargs = dict(
        lambda_l=hdr.u64(),
        lambda_n=hdr.u64(),
        lambda_v=hdr.f64(),
        lambda_o=hdr.f64(),
        up_axis=hdr.u64(),
        enable_pruning=bool(hdr.u64()),
        seed=hdr.u64(),
    )
    try:
        cfg = _builder.BuilderConfig(**cfg_kwargs)
    except ValueError as exc:
        raise InvariantViolation(f"stored builder config invalid: {exc}") from exc

    lrd = _Reader(data, table[_SEC_LANDMARKS][0])
    landmarks = []
    for _ in range(num_landmarks):
        label = lrd.u64()
        source_frame_id = lrd.u64()
        width = lrd.u64()
        height = lrd.u64()
        fx = lrd.f64()
        fy = lrd.f64()
        cx = lrd.f64()
        cy = lrd.f64()
        rotation = lrd.f64_array(9).reshape(3, 3)
        translation = lrd.f64_array(3)
        centroid2d = lrd.f32_array(2)
        try:
            intr = CameraIntrinsics(fx, fy, cx, cy, width, height)
            pose = Pose(rotation, translation)
        except ValueError as exc:
            raise InvariantViolation(f"landmark {label}: {exc}") from exc
        landmarks.append(Landmark(
            label=label,
            point_ids=[],
            vrf=VirtualReferenceFrame(intr, pose, source_frame_id),
            centroid2d=centroid2d,
        ))

    prd = _Reader(data, table[_SEC_POINTS][0])
    drd = _Reader(data, table[_SEC_DESCRIPTORS][0])
    points: dict[int, Point3D] = {}
    by_label: dict[int, list[int]] = {}
    for _ in range(num_points):
        pid = prd.u64()
        label = prd.u64()
        track_len = prd.u64()
        if track_len * 16 > len(data) - prd.pos:
            raise InvariantViolation("track length exceeds container bounds")
        track = [(prd.u64(), prd.u64()) for _ in range(track_len)]
        position = prd.f32_array(3)
        descriptor = drd.f32_array(descriptor_dim)
        if pid in points:
            raise InvariantViolation(f"duplicate point id {pid}")
        points[pid] = Point3D(point_id=pid, position=position,
                              descriptor=descriptor, track=track,
                              landmark_label=label)
        by_label.setdefault(label, []).append(pid)

    for lm in landmarks:
        lm.point_ids = sorted(by_label.get(lm.label, []))

    crd = _Reader(data, table[_SEC_COVISIBILITY][0])
    num_edges = crd.u64()
    covisibility: dict[int, set[int]] = {lm.label: set() for lm in landmarks}
    for _ in range(num_edges):
        a = crd.u64()
        b = crd.u64()
        if a not in covisibility or b not in covisibility:
            raise InvariantViolation(f"covisibility edge ({a}, {b}) references "
                                     f"unknown labels")
        covisibility[a].add(b)
        covisibility[b].add(a)

    scene_map = SceneMap(descriptor_dim=descriptor_dim, landmarks=landmarks,
                         points=points, covisibility=covisibility,
                         build_config=cfg)
    scene_map.validate()
    return scene_map


def save_map(scene_map: SceneMap, path):
    with open(path, "wb") as fh:
        fh.write(serialize_map(scene_map))


def load_map(path) -> SceneMap:
    with open(path, "rb") as fh:
        return deserialize_map(fh.read())


# ---------------------------------------------------------------------------
# reconstruction JSON
# ---------------------------------------------------------------------------

def _require(obj: dict, key: str, ctx: str):
    if key not in obj:
        raise ParseError(f"{ctx}: missing key '{key}'")
    return obj[key]


def _as_int(value, ctx: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(f"{ctx}: expected an integer, got {value!r}")
    return value


def _as_float(value, ctx: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"{ctx}: expected a number, got {value!r}")
    return float(value)


def normalize_descriptor(values, dim: int, ctx: str) -> np.ndarray:
    """Validate a raw descriptor list: dimension, finiteness, and a norm
    within 1e-3 of one. Returns the renormalized float32 vector."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ParseError(f"{ctx}: descriptor must be a flat list")
    if arr.shape[0] != dim:
        raise DescriptorDimMismatch(
            f"{ctx}: descriptor has dim {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ParseError(f"{ctx}: descriptor has non-finite entries")
    norm = float(np.linalg.norm(arr))
    if abs(norm - 1.0) > DESCRIPTOR_NORM_TOL:
        raise ParseError(
            f"{ctx}: descriptor norm {norm:.6f} deviates from unit by more "
            f"than {DESCRIPTOR_NORM_TOL}")
    return (arr / norm).astype(np.float32)


def reconstruction_from_dict(doc: dict) -> Reconstruction:
    if not isinstance(doc, dict):
        raise ParseError("reconstruction root must be an object")
    version = _as_int(_require(doc, "version", "reconstruction"), "version")
    if version != 1:
        raise ParseError(f"unsupported reconstruction version {version}")
    dim = _as_int(_require(doc, "descriptor_dim", "reconstruction"),
                  "descriptor_dim")
    if dim < 1:
        raise ParseError(f"descriptor_dim must be positive, got {dim}")

    cameras: dict[int, CameraIntrinsics] = {}
    for cam in _require(doc, "cameras", "reconstruction"):
        cid = _as_int(_require(cam, "id", "camera"), "camera id")
        if cid in cameras:
            raise ParseError(f"duplicate camera id {cid}")
        try:
            cameras[cid] = CameraIntrinsics(
                fx=_as_float(_require(cam, "fx", f"camera {cid}"), "fx"),
                fy=_as_float(_require(cam, "fy", f"camera {cid}"), "fy"),
                cx=_as_float(_require(cam, "cx", f"camera {cid}"), "cx"),
                cy=_as_float(_require(cam, "cy", f"camera {cid}"), "cy"),
                width=_as_int(_require(cam, "width", f"camera {cid}"), "width"),
                height=_as_int(_require(cam, "height", f"camera {cid}"), "height"),
            )
        except ValueError as exc:
            raise ParseError(f"camera {cid}: {exc}") from exc

    frames: dict[int, Frame] = {}
    for fr in _require(doc, "frames", "reconstruction"):
        fid = _as_int(_require(fr, "id", "frame"), "frame id")
        if fid in frames:
            raise ParseError(f"duplicate frame id {fid}")
        cam_id = _as_int(_require(fr, "camera_id", f"frame {fid}"), "camera_id")
        q = _require(fr, "q", f"frame {fid}")
        t = _require(fr, "t", f"frame {fid}")
        if not (isinstance(q, list) and len(q) == 4):
            raise ParseError(f"frame {fid}: q must be [w, x, y, z]")
        if not (isinstance(t, list) and len(t) == 3):
            raise ParseError(f"frame {fid}: t must be [x, y, z]")
        try:
            pose = Pose.from_quaternion(
                [_as_float(x, f"frame {fid} q") for x in q],
                [_as_float(x, f"frame {fid} t") for x in t])
        except ValueError as exc:
            raise ParseError(f"frame {fid}: {exc}") from exc
        keypoints = []
        for ki, kp in enumerate(_require(fr, "keypoints", f"frame {fid}")):
            ctx = f"frame {fid} keypoint {ki}"
            desc = normalize_descriptor(_require(kp, "desc", ctx), dim, ctx)
            pid = kp.get("point3d_id")
            if pid is not None:
                pid = _as_int(pid, f"{ctx} point3d_id")
            keypoints.append(Keypoint2D(
                u=_as_float(_require(kp, "u", ctx), f"{ctx} u"),
                v=_as_float(_require(kp, "v", ctx), f"{ctx} v"),
                descriptor=desc,
                score=_as_float(_require(kp, "score", ctx), f"{ctx} score"),
                point3d_id=pid,
            ))
        frames[fid] = Frame(frame_id=fid, camera_id=cam_id, pose=pose,
                            keypoints=keypoints)

    points: dict[int, ReconstructionPoint] = {}
    for pt in _require(doc, "points", "reconstruction"):
        pid = _as_int(_require(pt, "id", "point"), "point id")
        if pid in points:
            raise ParseError(f"duplicate point id {pid}")
        xyz = _require(pt, "xyz", f"point {pid}")
        if not (isinstance(xyz, list) and len(xyz) == 3):
            raise ParseError(f"point {pid}: xyz must be [x, y, z]")
        track_raw = _require(pt, "track", f"point {pid}")
        track = []
        for entry in track_raw:
            if not (isinstance(entry, list) and len(entry) == 2):
                raise ParseError(f"point {pid}: track entries must be "
                                 f"[frame_id, keypoint_index]")
            track.append((_as_int(entry[0], f"point {pid} track frame"),
                          _as_int(entry[1], f"point {pid} track index")))
        points[pid] = ReconstructionPoint(
            point_id=pid,
            position=[_as_float(x, f"point {pid} xyz") for x in xyz],
            track=track,
        )

    recon = Reconstruction(descriptor_dim=dim, cameras=cameras, frames=frames,
                           points=points)
    recon.validate()
    return recon


def reconstruction_to_dict(recon: Reconstruction) -> dict:
    cameras = []
    for cid in sorted(recon.cameras):
        k = recon.cameras[cid]
        cameras.append({"id": cid, "fx": k.fx, "fy": k.fy, "cx": k.cx,
                        "cy": k.cy, "width": k.width, "height": k.height})
    frames = []
    for fid in sorted(recon.frames):
        fr = recon.frames[fid]
        q = quaternion_from_rotation(fr.pose.rotation)
        keypoints = []
        for kp in fr.keypoints:
            entry = {
                "u": kp.u,
                "v": kp.v,
                "score": kp.score,
                "desc": [float(x) for x in kp.descriptor],
            }
            if kp.point3d_id is not None:
                entry["point3d_id"] = kp.point3d_id
            keypoints.append(entry)
        frames.append({
            "id": fid,
            "camera_id": fr.camera_id,
            "q": [float(x) for x in q],
            "t": [float(x) for x in fr.pose.translation],
            "keypoints": keypoints,
        })
    points = []
    for pid in sorted(recon.points):
        pt = recon.points[pid]
        points.append({
            "id": pid,
            "xyz": [float(x) for x in pt.position],
            "track": [[f, k] for f, k in pt.track],
        })
    return {"version": 1, "descriptor_dim": recon.descriptor_dim,
            "cameras": cameras, "frames": frames, "points": points}


def load_reconstruction(path) -> Reconstruction:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from exc
    return reconstruction_from_dict(doc)


def save_reconstruction(recon: Reconstruction, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(reconstruction_to_dict(recon), fh)
        fh.write("\n")
