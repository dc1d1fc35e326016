import numpy as np
import pytest

from corrpose import geometry, pipeline, synth


@pytest.fixture(scope="session")
def mesh():
    return synth.make_blob_mesh(seed=3, diameter=0.30)


@pytest.fixture(scope="session")
def intrinsics():
    return geometry.Intrinsics(350.0, 350.0, 111.5, 111.5)


@pytest.fixture(scope="session")
def level1_poses(mesh):
    return synth.sample_viewpoints(1, radius=2.2 * mesh.diameter, target=mesh.centroid)


@pytest.fixture(scope="session")
def level2_poses(mesh):
    return synth.sample_viewpoints(2, radius=2.2 * mesh.diameter, target=mesh.centroid)


@pytest.fixture(scope="session")
def config_level1():
    return pipeline.PipelineConfig(template_level=1,
                                   feature=pipeline.FeatureConfig(noise_sigma=0.0))


@pytest.fixture(scope="session")
def tset_level1(mesh, config_level1):
    return pipeline.onboard(mesh, config_level1)


def random_pose(rng, radius=0.7):
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    pose = geometry.look_at_pose(radius * direction, np.zeros(3))
    roll = rng.uniform(-np.pi, np.pi)
    return geometry.rotate_in_camera_frame(pose, [0.0, 0.0, roll])
