"""Trajectory and depth accuracy metrics.

Trajectories are compared after associating samples by timestamp and
optionally aligning the estimate to the reference with a closed-form
similarity or rigid fit. Pose inputs follow the package convention
(world to camera); TUM-style files store the inverse and are converted
by the I/O layer before reaching these functions.
"""

from __future__ import annotations

import numpy as np

from .errors import AssociationError
from .geometry import Se3Pose, quat_rotation_angle

ASSOC_MAX_DT = 0.02


def associate(stamps_a, stamps_b, max_dt=ASSOC_MAX_DT):
    """Greedy nearest-timestamp association.

    Returns two index arrays (into a and b) of equal length, ordered by
    stamp. Each sample is used at most once. Raises AssociationError when
    nothing matches.
    """
    a = np.asarray(stamps_a, dtype=np.float64)
    b = np.asarray(stamps_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise AssociationError("empty trajectory")
    pairs = []
    for i in range(a.size):
        j = int(np.argmin(np.abs(b - a[i])))
        pairs.append((abs(float(b[j] - a[i])), i, j))
    pairs.sort()
    used_a, used_b = set(), set()
    matches = []
    for dt, i, j in pairs:
        if dt > max_dt or i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        matches.append((i, j))
    if not matches:
        raise AssociationError(
            f"no timestamp pairs within {max_dt} s"
        )
    matches.sort()
    ia = np.array([m[0] for m in matches], dtype=np.int64)
    ib = np.array([m[1] for m in matches], dtype=np.int64)
    return ia, ib


def umeyama(src, dst, with_scale=True):
    """Least-squares similarity fit dst ~ s * R @ src + t.

    src and dst are (N, 3). Returns (s, r, t); with_scale=False pins s to 1
    (rigid fit). Standard closed form via the SVD of the cross-covariance
    with a determinant sign correction.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("point sets must both be (N, 3)")
    n = src.shape[0]
    if n < 2:
        raise ValueError("need at least two points to align")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / n
    u, sv, vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2] = -1.0
    r = u @ np.diag(sign) @ vt
    if with_scale:
        var_s = (xs * xs).sum() / n
        if var_s <= 0:
            raise ValueError("degenerate source point set")
        s = float((sv * sign).sum() / var_s)
    else:
        s = 1.0
    t = mu_d - s * r @ mu_s
    return s, r, t


def align_positions(est, gt, mode="sim3"):
    """Map estimated positions onto the reference frame.

    mode: "sim3" fits scale + rotation + translation, "se3" rotation +
    translation only, "none" compares raw coordinates.
    """
    if mode == "none":
        return np.asarray(est, dtype=np.float64)
    if mode not in ("sim3", "se3"):
        raise ValueError(f"unknown alignment mode {mode!r}")
    s, r, t = umeyama(est, gt, with_scale=(mode == "sim3"))
    return s * (r @ np.asarray(est, dtype=np.float64).T).T + t


def ate_rmse(est_positions, gt_positions, mode="sim3"):
    """Root-mean-square position error after alignment."""
    est = align_positions(est_positions, gt_positions, mode)
    gt = np.asarray(gt_positions, dtype=np.float64)
    err = est - gt
    return float(np.sqrt((err * err).sum(axis=1).mean()))


def rpe(est_poses, gt_poses, mode="se3"):
    """Relative pose error over consecutive pose pairs.

    Both inputs are equal-length sequences of world-to-camera Se3Pose,
    already associated. For each consecutive pair the error motion is
    E = (gt_rel)^-1 o est_rel; returns (rte, rre) where rte is the mean
    translation norm of E and rre the mean rotation angle in degrees.
    mode "sim3" first corrects the estimate's global scale against the
    reference (trajectory position fit); "se3" and "none" compare as is.
    """
    if len(est_poses) != len(gt_poses):
        raise ValueError("pose lists differ in length")
    if len(est_poses) < 2:
        raise ValueError("need at least two poses for relative error")
    scale = 1.0
    if mode == "sim3":
        est_pos = np.stack([p.inverse().t for p in est_poses])
        gt_pos = np.stack([p.inverse().t for p in gt_poses])
        scale, _, _ = umeyama(est_pos, gt_pos, with_scale=True)
    elif mode not in ("se3", "none"):
        raise ValueError(f"unknown alignment mode {mode!r}")

    t_norms = []
    angles = []
    for k in range(len(est_poses) - 1):
        est_rel = est_poses[k + 1].compose(est_poses[k].inverse())
        gt_rel = gt_poses[k + 1].compose(gt_poses[k].inverse())
        if scale != 1.0:
            est_rel = Se3Pose(q=est_rel.q, t=scale * est_rel.t)
        err = gt_rel.inverse().compose(est_rel)
        t_norms.append(np.linalg.norm(err.t))
        angles.append(np.degrees(quat_rotation_angle(err.q)))
    return float(np.mean(t_norms)), float(np.mean(angles))


def depth_metrics(pred, gt, median_scale=False):
    """Absolute relative error and inlier ratio for depth maps.

    pred and gt are arrays of metric depth; entries where either side is
    non-positive or non-finite are ignored. median_scale=True rescales the
    prediction by median(gt/pred) first (per-sequence alignment). The
    inlier ratio counts max(pred/gt, gt/pred) strictly below 1.25.

    Returns (abs_rel, delta1, n_valid).
    """
    p = np.asarray(pred, dtype=np.float64).ravel()
    g = np.asarray(gt, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise ValueError("depth arrays differ in shape")
    valid = np.isfinite(p) & np.isfinite(g) & (p > 0) & (g > 0)
    p, g = p[valid], g[valid]
    if p.size == 0:
        raise AssociationError("no valid depth overlap")
    if median_scale:
        p = p * float(np.median(g / p))
    abs_rel = float(np.mean(np.abs(p - g) / g))
    ratio = np.maximum(p / g, g / p)
    delta1 = float(np.mean(ratio < 1.25))
    return abs_rel, delta1, int(p.size)
