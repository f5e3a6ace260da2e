"""Binary map container round trips, corruption rejection, and the
reconstruction JSON import/export.

Container checks run in a fixed order: magic, CRC-32 over the payload,
version, structure, then full map invariants. The corruption tests below
recompute the CRC after each structural mutation so the failure they hit is
the structural check itself, not the checksum.
"""

import json
import struct
import zlib

import numpy as np
import pytest

import landmarkloc as L
from landmarkloc.errors import (
    BadMagic,
    ChecksumMismatch,
    DescriptorDimMismatch,
    InvariantViolation,
    LinkageError,
    ParseError,
    UnsupportedVersion,
)
from landmarkloc.mapio import (
    load_map,
    load_reconstruction,
    normalize_descriptor,
    reconstruction_from_dict,
    reconstruction_to_dict,
    save_map,
    save_reconstruction,
)

MAGIC = b"PRAMMAP1"


def _recrc(data: bytes) -> bytes:
    """Rewrite the trailing checksum to match a mutated payload."""
    payload = data[len(MAGIC):-8]
    return (data[:len(MAGIC)] + payload
            + struct.pack("<Q", zlib.crc32(payload) & 0xFFFFFFFF))


def _same_intrinsics(a, b) -> bool:
    return (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == \
        (b.fx, b.fy, b.cx, b.cy, b.width, b.height)


def _section_offset(data: bytes, sid: int) -> int:
    # table of five (id, offset, size) rows right after magic and version
    base = len(MAGIC) + 8
    for row in range(5):
        rid, off, _ = struct.unpack_from("<QQQ", data, base + 24 * row)
        if rid == sid:
            return off
    raise AssertionError(f"section {sid} missing")


# ---------------------------------------------------------------------------
# binary container
# ---------------------------------------------------------------------------

def test_map_round_trip_bit_exact(small_map):
    blob = L.serialize_map(small_map)
    back = L.deserialize_map(blob)
    assert L.serialize_map(back) == blob
    assert back.descriptor_dim == small_map.descriptor_dim
    assert back.build_config == small_map.build_config
    assert back.covisibility == small_map.covisibility
    assert sorted(back.points) == sorted(small_map.points)
    for pid, pt in small_map.points.items():
        bp = back.points[pid]
        assert np.array_equal(bp.position, pt.position)
        assert np.array_equal(bp.descriptor, pt.descriptor)
        assert bp.track == pt.track and bp.landmark_label == pt.landmark_label
    for la, lb in zip(small_map.landmarks, back.landmarks):
        assert la.label == lb.label and la.point_ids == lb.point_ids
        assert la.vrf.source_frame_id == lb.vrf.source_frame_id
        assert np.array_equal(la.vrf.pose.rotation, lb.vrf.pose.rotation)
        assert np.array_equal(la.vrf.pose.translation,
                              lb.vrf.pose.translation)
        assert _same_intrinsics(la.vrf.intrinsics, lb.vrf.intrinsics)
        assert np.array_equal(la.centroid2d, lb.centroid2d)


def test_map_save_load(small_map, tmp_path):
    path = tmp_path / "scene.pmap"
    save_map(small_map, path)
    assert L.serialize_map(load_map(path)) == L.serialize_map(small_map)


def test_map_rejects_bad_magic(small_map):
    blob = bytearray(L.serialize_map(small_map))
    blob[:8] = b"NOTAMAPX"
    with pytest.raises(BadMagic):
        L.deserialize_map(bytes(blob))
    with pytest.raises(BadMagic):
        L.deserialize_map(b"")


def test_map_rejects_corruption_and_truncation(small_map):
    blob = L.serialize_map(small_map)
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0x01
    with pytest.raises(ChecksumMismatch):
        L.deserialize_map(bytes(flipped))
    with pytest.raises(ChecksumMismatch):
        L.deserialize_map(blob[:-3])
    with pytest.raises(ChecksumMismatch):
        L.deserialize_map(MAGIC + b"\x00" * 8)


def test_map_rejects_unknown_version(small_map):
    blob = L.serialize_map(small_map)
    payload = blob[len(MAGIC):-8]
    bumped = MAGIC + struct.pack("<Q", 9) + payload[8:] + blob[-8:]
    with pytest.raises(UnsupportedVersion):
        L.deserialize_map(_recrc(bumped))


def test_map_rejects_point_with_unknown_landmark(small_map):
    blob = bytearray(L.serialize_map(small_map))
    off = _section_offset(bytes(blob), 2)       # points section
    # second u64 of a point record is its landmark label
    struct.pack_into("<Q", blob, off + 8, 9999)
    with pytest.raises(InvariantViolation):
        L.deserialize_map(_recrc(bytes(blob)))


def test_map_rejects_edge_with_unknown_label(small_map):
    blob = bytearray(L.serialize_map(small_map))
    off = _section_offset(bytes(blob), 4)       # covisibility section
    assert struct.unpack_from("<Q", blob, off)[0] > 0, "fixture has edges"
    struct.pack_into("<Q", blob, off + 8, 7777)
    with pytest.raises(InvariantViolation):
        L.deserialize_map(_recrc(bytes(blob)))


# ---------------------------------------------------------------------------
# reconstruction JSON
# ---------------------------------------------------------------------------

def _minimal_doc():
    """Two frames observing one point, identity poses, 2D descriptors."""
    def frame(fid):
        return {
            "id": fid, "camera_id": 0,
            "q": [1.0, 0.0, 0.0, 0.0], "t": [0.0, 0.0, float(fid)],
            "keypoints": [{"u": 10.0, "v": 20.0, "score": 1.0,
                           "desc": [1.0, 0.0], "point3d_id": 1}],
        }
    return {
        "version": 1,
        "descriptor_dim": 2,
        "cameras": [{"id": 0, "fx": 100.0, "fy": 100.0, "cx": 50.0,
                     "cy": 50.0, "width": 100, "height": 100}],
        "frames": [frame(0), frame(1)],
        "points": [{"id": 1, "xyz": [0.0, 0.0, 2.0],
                    "track": [[0, 0], [1, 0]]}],
    }


def test_reconstruction_round_trip(small_scene, tmp_path):
    recon, _ = small_scene
    path = tmp_path / "recon.json"
    save_reconstruction(recon, path)
    back = load_reconstruction(path)
    assert back.descriptor_dim == recon.descriptor_dim
    assert sorted(back.cameras) == sorted(recon.cameras)
    for cid in recon.cameras:
        assert _same_intrinsics(back.cameras[cid], recon.cameras[cid])
    assert sorted(back.points) == sorted(recon.points)
    for pid, pt in recon.points.items():
        assert np.array_equal(back.points[pid].position, pt.position)
        assert back.points[pid].track == pt.track
    for fid, fr in recon.frames.items():
        bf = back.frames[fid]
        assert bf.camera_id == fr.camera_id
        # pose passes through a quaternion; exact to rounding
        assert np.allclose(bf.pose.rotation, fr.pose.rotation, atol=1e-12)
        assert np.allclose(bf.pose.translation, fr.pose.translation,
                           atol=1e-15)
        assert len(bf.keypoints) == len(fr.keypoints)
        for bk, fk in zip(bf.keypoints, fr.keypoints):
            assert (bk.u, bk.v, bk.score, bk.point3d_id) == \
                (fk.u, fk.v, fk.score, fk.point3d_id)
            # descriptors are renormalized on import
            assert np.allclose(bk.descriptor, fk.descriptor, atol=1e-6)


def test_minimal_doc_parses_and_is_json_stable():
    recon = reconstruction_from_dict(_minimal_doc())
    assert len(recon.points) == 1 and len(recon.frames) == 2
    doc2 = json.loads(json.dumps(reconstruction_to_dict(recon)))
    again = reconstruction_from_dict(doc2)
    assert reconstruction_to_dict(again) == reconstruction_to_dict(recon)


def test_normalize_descriptor():
    out = normalize_descriptor([1.0 + 5e-4, 0.0], 2, "t")
    assert out.dtype == np.float32
    assert abs(float(np.linalg.norm(out.astype(np.float64))) - 1.0) < 1e-6
    with pytest.raises(ParseError):
        normalize_descriptor([0.9, 0.0], 2, "t")          # norm off by 0.1
    with pytest.raises(ParseError):
        normalize_descriptor([np.nan, 0.0], 2, "t")
    with pytest.raises(ParseError):
        normalize_descriptor([[1.0, 0.0]], 2, "t")        # not flat
    with pytest.raises(DescriptorDimMismatch):
        normalize_descriptor([1.0, 0.0, 0.0], 2, "t")


def test_reconstruction_parse_errors():
    cases = []

    d = _minimal_doc()
    d["version"] = 2
    cases.append(d)

    d = _minimal_doc()
    del d["descriptor_dim"]
    cases.append(d)

    d = _minimal_doc()
    d["frames"][0]["q"] = [1.0, 0.0, 0.0]                 # wrong arity
    cases.append(d)

    d = _minimal_doc()
    d["frames"][1]["id"] = 0                              # duplicate frame
    cases.append(d)

    d = _minimal_doc()
    d["cameras"].append(dict(d["cameras"][0]))            # duplicate camera
    cases.append(d)

    d = _minimal_doc()
    d["points"][0]["track"] = [[0, 0, 0], [1, 0]]         # bad track entry
    cases.append(d)

    d = _minimal_doc()
    d["points"][0]["id"] = "one"                          # non-integer id
    cases.append(d)

    d = _minimal_doc()
    d["frames"][0]["keypoints"][0]["u"] = True            # bool is not a number
    cases.append(d)

    for doc in cases:
        with pytest.raises(ParseError):
            reconstruction_from_dict(doc)


def test_reconstruction_rejects_broken_linkage():
    d = _minimal_doc()
    # the frame keypoint no longer points back at the track's point
    del d["frames"][0]["keypoints"][0]["point3d_id"]
    with pytest.raises(LinkageError):
        reconstruction_from_dict(d)


def test_load_reconstruction_rejects_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ParseError):
        load_reconstruction(path)
