import numpy as np
import pytest

from vpd.skeleton import DEFAULT_SKELETON, RawPose2D


def make_humanoid_3d(arm_lift: float = 0.3, leg_spread: float = 0.15) -> np.ndarray:
    """A plausible upright 3D figure facing +z, hips centered at the origin.

    Facing +z means the torso normal cross(RSho - LSho, midHip - midSho)
    points along +z, which puts the anatomical left side at +x.
    """
    j = np.zeros((13, 3))
    j[7] = (0.12, 0.0, 0.0)    # LHip
    j[8] = (-0.12, 0.0, 0.0)   # RHip
    j[1] = (0.18, 0.55, 0.0)   # LShoulder
    j[2] = (-0.18, 0.55, 0.0)  # RShoulder
    j[0] = (0.0, 0.75, 0.05)   # Nose
    j[3] = (0.30, 0.40 + arm_lift, 0.02)   # LElbow
    j[4] = (-0.30, 0.40 + arm_lift, 0.02)  # RElbow
    j[5] = (0.42, 0.25 + arm_lift, 0.06)   # LWrist
    j[6] = (-0.42, 0.25 + arm_lift, 0.06)  # RWrist
    j[9] = (0.12 + leg_spread, -0.45, 0.01)    # LKnee
    j[10] = (-0.12 - leg_spread, -0.45, 0.01)  # RKnee
    j[11] = (0.12 + leg_spread, -0.9, 0.0)     # LAnkle
    j[12] = (-0.12 - leg_spread, -0.9, 0.0)    # RAnkle
    return j


def random_pose_2d(rng: np.random.Generator, scale: float = 40.0) -> RawPose2D:
    joints = rng.normal(0.0, scale, size=(13, 2)) + rng.uniform(-100, 100, size=2)
    scores = rng.uniform(0.0, 1.0, size=13)
    return RawPose2D(joints=joints, joint_scores=scores)


def rot_y(phi: float) -> np.ndarray:
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@pytest.fixture
def skeleton():
    return DEFAULT_SKELETON


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
