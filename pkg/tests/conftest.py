"""Shared fixtures: one small synthetic scene reused across test modules.

Session scope keeps the scene/map/model builds out of the per-test cost;
tests must treat these objects as read-only.
"""

import pytest

from landmarkloc import (
    BuilderConfig,
    SceneSpec,
    build_map,
    generate_scene,
    train_centroid_recognizer,
)

SMALL_SPEC = SceneSpec(
    num_clusters=8,
    points_per_cluster=40,
    num_ref_frames=12,
    descriptor_dim=32,
    cluster_spread_m=0.05,
    descriptor_cluster_spread=0.05,
    observation_dropout=0.3,
    seed=21,
)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(SMALL_SPEC)


@pytest.fixture(scope="session")
def small_map(small_scene):
    recon, _ = small_scene
    return build_map(recon, BuilderConfig(lambda_l=8))


@pytest.fixture(scope="session")
def small_model(small_map):
    return train_centroid_recognizer(small_map)
