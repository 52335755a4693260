"""Shared fixtures-in-plain-python for the test suite."""

import numpy as np

from dslam.geometry import CameraIntrinsics, Se3Pose, quat_from_rotvec


def random_pose(rng, max_angle=np.pi * 0.9, max_trans=2.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    t = rng.uniform(-max_trans, max_trans, size=3)
    return Se3Pose(quat_from_rotvec(axis * angle), t)


def default_intrinsics():
    return CameraIntrinsics(fx=400.0, fy=400.0, cx=320.0, cy=240.0,
                            width=640, height=480)


def small_intrinsics():
    return CameraIntrinsics(fx=120.0, fy=120.0, cx=64.0, cy=48.0,
                            width=128, height=96)
