"""Synthetic scene generator: determinism, the observation model, and the
query renderer.

The generator stores exact projections for reference observations (pixel
noise exists only on rendered queries), keeps every track at two or more
observations, and appends outlier keypoints after the real ones at a count
of round(n_inliers * f / (1 - f)), which makes them the fraction f of the
final keypoint list.
"""

import numpy as np
import pytest

import landmarkloc as L
from landmarkloc.geometry import project

TINY = dict(num_clusters=4, points_per_cluster=20, num_ref_frames=6,
            descriptor_dim=16, seed=7)


def _spec(**overrides):
    kw = dict(TINY)
    kw.update(overrides)
    return L.SceneSpec(**kw)


def _total_observations(recon):
    return sum(len(p.track) for p in recon.points.values())


def test_generate_scene_deterministic():
    a, gta = L.generate_scene(_spec())
    b, gtb = L.generate_scene(_spec())
    assert sorted(a.points) == sorted(b.points)
    for pid in a.points:
        assert np.array_equal(a.points[pid].position, b.points[pid].position)
        assert a.points[pid].track == b.points[pid].track
    assert sorted(a.frames) == sorted(b.frames)
    for fid in a.frames:
        fa, fb = a.frames[fid], b.frames[fid]
        assert np.array_equal(fa.pose.rotation, fb.pose.rotation)
        assert np.array_equal(fa.pose.translation, fb.pose.translation)
        assert len(fa.keypoints) == len(fb.keypoints)
        for ka, kb in zip(fa.keypoints, fb.keypoints):
            assert (ka.u, ka.v, ka.point3d_id) == (kb.u, kb.v, kb.point3d_id)
            assert np.array_equal(ka.descriptor, kb.descriptor)
    assert np.array_equal(gta.cluster_centers, gtb.cluster_centers)
    assert np.array_equal(gta.cluster_of, gtb.cluster_of)


def test_observations_project_exactly():
    recon, _ = L.generate_scene(_spec())
    intr = recon.cameras[0]
    for pid, pt in recon.points.items():
        assert len(pt.track) >= 2
        for fid, ki in pt.track:
            kp = recon.frames[fid].keypoints[ki]
            assert kp.point3d_id == pid
            uv = project(recon.frames[fid].pose, intr, pt.position)
            assert uv is not None, "linked observation must be visible"
            assert abs(kp.u - uv[0]) < 1e-9 and abs(kp.v - uv[1]) < 1e-9
            assert 0.0 <= kp.u < intr.width and 0.0 <= kp.v < intr.height


def test_dropout_reduces_observations():
    dense, _ = L.generate_scene(_spec(observation_dropout=0.0))
    sparse, _ = L.generate_scene(_spec(observation_dropout=0.5))
    assert _total_observations(sparse) < _total_observations(dense)
    # the floor holds even under aggressive dropout
    floor, _ = L.generate_scene(_spec(observation_dropout=0.9))
    assert all(len(p.track) >= 2 for p in floor.points.values())


def test_outlier_keypoint_accounting():
    frac = 0.25
    recon, _ = L.generate_scene(_spec(outlier_keypoint_fraction=frac))
    saw_outliers = False
    for frame in recon.frames.values():
        n_in = sum(kp.point3d_id is not None for kp in frame.keypoints)
        n_out = len(frame.keypoints) - n_in
        assert n_out == round(n_in * frac / (1.0 - frac))
        saw_outliers |= n_out > 0
        for kp in frame.keypoints[:n_in]:
            assert kp.point3d_id is not None and kp.score == 1.0
        for kp in frame.keypoints[n_in:]:
            assert kp.point3d_id is None and kp.score == 0.5
    assert saw_outliers


def test_descriptor_noise_per_observation():
    clean, _ = L.generate_scene(_spec(descriptor_noise_sigma=0.0))
    for pt in clean.points.values():
        first = None
        for fid, ki in pt.track:
            d = clean.frames[fid].keypoints[ki].descriptor
            assert abs(np.linalg.norm(d) - 1.0) < 1e-6
            first = d if first is None else first
            assert np.array_equal(d, first)
    noisy, _ = L.generate_scene(_spec(descriptor_noise_sigma=0.2))
    multi = next(p for p in noisy.points.values() if len(p.track) >= 2)
    (f0, k0), (f1, k1) = multi.track[:2]
    assert not np.array_equal(noisy.frames[f0].keypoints[k0].descriptor,
                              noisy.frames[f1].keypoints[k1].descriptor)


def test_ground_truth_shapes():
    recon, gt = L.generate_scene(_spec())
    assert gt.cluster_centers.shape == (4, 3)
    assert gt.prototypes.shape == (4, 16)
    assert np.allclose(np.linalg.norm(gt.prototypes, axis=1), 1.0, atol=1e-6)
    assert gt.cluster_of.shape == (len(recon.points),)
    assert sorted(gt.frame_poses) == sorted(recon.frames)


def test_render_query_noiseless_matches_reconstruction(small_scene):
    recon, gt = small_scene
    intr = recon.cameras[0]
    q = L.render_query(recon, gt.frame_poses[0], L.QueryNoise(), seed=1,
                       min_visible=1)
    assert not q.insufficient_visibility
    assert q.num_visible == len(q.keypoints) > 0
    for kp in q.keypoints:
        pt = recon.points[kp.point3d_id]
        uv = project(q.pose, intr, pt.position)
        assert abs(kp.u - uv[0]) < 1e-9 and abs(kp.v - uv[1]) < 1e-9
        # with zero descriptor noise the rendered descriptor is the clean
        # one stored at the point's first observation
        fid, ki = pt.track[0]
        assert np.array_equal(kp.descriptor,
                              recon.frames[fid].keypoints[ki].descriptor)


def test_render_query_min_visible_flag(small_scene):
    recon, gt = small_scene
    q = L.render_query(recon, gt.frame_poses[0], L.QueryNoise(), seed=1,
                       min_visible=10 ** 6)
    assert q.insufficient_visibility


def test_render_query_noise_and_outliers(small_scene):
    recon, gt = small_scene
    intr = recon.cameras[0]
    noise = L.QueryNoise(outlier_fraction=0.2, pixel_noise_px=1.0)
    q = L.render_query(recon, gt.frame_poses[0], noise, seed=2, min_visible=1)
    n_out = len(q.keypoints) - q.num_visible
    assert n_out == round(q.num_visible * 0.2 / 0.8) > 0
    offsets = []
    for kp in q.keypoints[:q.num_visible]:
        uv = project(q.pose, intr, recon.points[kp.point3d_id].position)
        offsets.append(np.hypot(kp.u - uv[0], kp.v - uv[1]))
    offsets = np.array(offsets)
    assert offsets.max() > 0.0 and offsets.max() < 6.0
    assert all(kp.point3d_id is None for kp in q.keypoints[q.num_visible:])


def test_render_query_deterministic(small_scene):
    recon, gt = small_scene
    noise = L.QueryNoise(descriptor_sigma=0.05, outlier_fraction=0.1,
                         pixel_noise_px=0.5)
    a = L.render_query(recon, gt.frame_poses[3], noise, seed=9)
    b = L.render_query(recon, gt.frame_poses[3], noise, seed=9)
    assert len(a.keypoints) == len(b.keypoints)
    for ka, kb in zip(a.keypoints, b.keypoints):
        assert (ka.u, ka.v, ka.point3d_id) == (kb.u, kb.v, kb.point3d_id)
        assert np.array_equal(ka.descriptor, kb.descriptor)


def test_sample_query_poses_placement():
    spec = _spec(scene_extent_m=2.0)
    _, gt = L.generate_scene(spec)
    poses = L.sample_query_poses(spec, gt, 12, seed=4)
    again = L.sample_query_poses(spec, gt, 12, seed=4)
    assert len(poses) == 12
    for p, p2 in zip(poses, again):
        assert np.array_equal(p.rotation, p2.rotation)
        assert np.array_equal(p.translation, p2.translation)
        center = p.camera_center()
        radius = np.hypot(center[0], center[1])
        # ring radius 0.85 * extent scaled by [0.9, 1.1], height
        # 0.25 * extent scaled by [0.8, 1.2]
        assert 0.9 * 1.7 - 1e-9 <= radius <= 1.1 * 1.7 + 1e-9
        assert 0.8 * 0.5 - 1e-9 <= center[2] <= 1.2 * 0.5 + 1e-9


def test_spec_validation():
    for bad in [dict(num_clusters=0), dict(points_per_cluster=0),
                dict(num_ref_frames=0), dict(descriptor_dim=0),
                dict(cluster_spread_m=-0.1), dict(scene_extent_m=0.0),
                dict(observation_dropout=1.0),
                dict(outlier_keypoint_fraction=1.0),
                dict(descriptor_noise_sigma=-0.5)]:
        with pytest.raises(ValueError):
            _spec(**bad)


def test_query_noise_validation():
    for bad in [dict(descriptor_sigma=-1.0), dict(outlier_fraction=1.0),
                dict(pixel_noise_px=-0.1)]:
        with pytest.raises(ValueError):
            L.QueryNoise(**bad)
