"""Trajectory file I/O in the plain-text TUM format.

Each data line is ``timestamp tx ty tz qx qy qz qw`` where the pose is the
camera-to-world transform (camera position plus orientation), quaternion
scalar last. Lines starting with ``#`` are comments. Values are written
with nine significant digits.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import TrajectoryParseError
from .geometry import Se3Pose

# Synthetic sequences tick at a nominal 30 Hz.
FRAME_DT = 1.0 / 30.0


def frame_timestamp(frame_id):
    return frame_id * FRAME_DT


def pose_to_tum_fields(pose_world_to_cam):
    """Camera-to-world position and quaternion for one pose."""
    c2w = pose_world_to_cam.inverse()
    return c2w.t, c2w.q


def write_tum(path, stamps, poses_world_to_cam, comment=None):
    """Write a trajectory; poses are given in world-to-camera form."""
    lines = []
    if comment:
        for c in str(comment).splitlines():
            lines.append(f"# {c}")
    for ts, pose in zip(stamps, poses_world_to_cam):
        t, q = pose_to_tum_fields(pose)
        vals = [ts, t[0], t[1], t[2], q[0], q[1], q[2], q[3]]
        lines.append(" ".join(f"{v:.9g}" for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum(path):
    """Read a trajectory file.

    Returns
    -------
    stamps : (N,) float array
    positions : (N, 3) camera positions in the world frame
    quats : (N, 4) scalar-last camera-to-world quaternions
    """
    stamps, positions, quats = [], [], []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise TrajectoryParseError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise TrajectoryParseError(f"{path}:{ln}: {exc}") from exc
        stamps.append(vals[0])
        positions.append(vals[1:4])
        quats.append(vals[4:8])
    return (
        np.asarray(stamps, dtype=np.float64),
        np.asarray(positions, dtype=np.float64).reshape(-1, 3),
        np.asarray(quats, dtype=np.float64).reshape(-1, 4),
    )


def poses_world_to_cam_from_tum(positions, quats):
    """Invert TUM camera-to-world rows back into world-to-camera poses."""
    out = []
    for p, q in zip(positions, quats):
        out.append(Se3Pose(q, p).inverse())
    return out
