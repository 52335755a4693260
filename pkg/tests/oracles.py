"""Independent reference computations used to pin down expected test values.

Everything here is deliberately written the slow, obvious way (finite
differences, dense solves, exhaustive search) so it shares no code path with
the implementations under test.
"""

import numpy as np

from dslam.geometry import Pixel, reproject, se3_retract


def fd_reproject_jacobians(pose_i, pose_j, intr, px, inv_depth, h=1e-6):
    """Central-difference Jacobians of the reprojected pixel.

    Returns (j_pose_i, j_pose_j, j_depth) with the same shapes as the
    analytic counterparts: (2, 6), (2, 6), (2,).
    """

    def f(pi, pj, d):
        p = reproject(pi, pj, intr, px, d)
        return np.array([p.u, p.v])

    j_i = np.zeros((2, 6))
    j_j = np.zeros((2, 6))
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        j_i[:, k] = (
            f(se3_retract(pose_i, e), pose_j, inv_depth)
            - f(se3_retract(pose_i, -e), pose_j, inv_depth)
        ) / (2.0 * h)
        j_j[:, k] = (
            f(pose_i, se3_retract(pose_j, e), inv_depth)
            - f(pose_i, se3_retract(pose_j, -e), inv_depth)
        ) / (2.0 * h)
    j_d = (f(pose_i, pose_j, inv_depth + h) - f(pose_i, pose_j, inv_depth - h)) / (
        2.0 * h
    )
    return j_i, j_j, j_d


def dense_full_solve(b, c, e, v, w, lam=0.0):
    """Solve the undamped-or-damped full normal system without Schur tricks."""
    nf = b.shape[0]
    np_ = c.shape[0]
    h = np.zeros((nf + np_, nf + np_))
    h[:nf, :nf] = b + lam * np.eye(nf)
    h[:nf, nf:] = e
    h[nf:, :nf] = e.T
    h[nf:, nf:] = np.diag(c + lam)
    rhs = np.concatenate([v, w])
    sol = np.linalg.solve(h, rhs)
    return sol[:nf], sol[nf:]


def dense_covariances(b, c, e, lam=0.0):
    """Pose covariance block and per-depth marginal variances by dense inversion."""
    nf = b.shape[0]
    np_ = c.shape[0]
    h = np.zeros((nf + np_, nf + np_))
    h[:nf, :nf] = b + lam * np.eye(nf)
    h[:nf, nf:] = e
    h[nf:, :nf] = e.T
    h[nf:, nf:] = np.diag(c + lam)
    cov = np.linalg.inv(h)
    return cov[:nf, :nf], np.diag(cov)[nf:].copy()


def random_block_system(rng, n_frames, n_patches, obs_per_patch=3):
    """A random solvable normal system with the frame/patch block structure.

    Builds a tall Jacobian in which every residual row touches exactly two
    frame blocks and one depth column, forms H = J^T J plus a small diagonal
    shift for conditioning, and splits H into (B, C, E). The right-hand side
    is drawn at random.
    """
    nf = 6 * n_frames
    rows = []
    for k in range(n_patches):
        frames = rng.choice(n_frames, size=min(obs_per_patch, n_frames), replace=False)
        for fi in frames:
            gj = int(rng.integers(n_frames))
            row = np.zeros((2, nf + n_patches))
            row[:, 6 * fi:6 * fi + 6] = rng.normal(size=(2, 6))
            if gj != fi:
                row[:, 6 * gj:6 * gj + 6] = rng.normal(size=(2, 6))
            row[:, nf + k] = rng.normal(size=2)
            rows.append(row)
    j = np.concatenate(rows, axis=0)
    h = j.T @ j + 0.1 * np.eye(nf + n_patches)
    b = h[:nf, :nf]
    e = h[:nf, nf:]
    c = np.diag(h[nf:, nf:]).copy()
    v = rng.normal(size=nf)
    w = rng.normal(size=n_patches)
    return b, c, e, v, w


def huber_cost(residual_norms, delta):
    """Robust cost matching min(1, delta/|r|) reweighting: quadratic core,
    linear tails, continuous at |r| = delta."""
    r = np.abs(np.asarray(residual_norms, dtype=np.float64))
    return np.where(r <= delta, r * r, delta * (2.0 * r - delta)).sum()


def grid_scale_oracle(d, d_hat, conf, lo=0.01, hi=100.0, n_grid=4000,
                      bisect=200):
    """Brute-force solve of the robust scale fit.

    The estimator is defined by the stationarity equation of the
    confidence-weighted Huber fit d ~ s * d_hat whose width tracks
    1.345 * MAD of the residuals at s:

        g(s) = sum_i min(1, delta(s)/|r_i(s)|) * c_i * r_i(s) * d_hat_i = 0

    This scans g on a log-spaced grid, brackets every sign change, bisects
    each bracket down to machine precision, and returns the root with the
    lowest robust cost. No reweighting iteration is involved, so it shares
    nothing with the implementation under test.
    """

    def parts(s):
        r = d - s * d_hat
        mad = np.median(np.abs(r - np.median(r)))
        delta = max(1.345 * float(mad), 1e-12)
        a = np.abs(r)
        omega = np.where(a > delta, delta / np.where(a > 0, a, 1.0), 1.0)
        return r, a, delta, omega

    def g(s):
        r, _, _, omega = parts(s)
        return float((omega * conf * r * d_hat).sum())

    def cost(s):
        _, a, delta, _ = parts(s)
        rho = np.where(a <= delta, a * a, delta * (2.0 * a - delta))
        return float((conf * rho).sum())

    grid = np.exp(np.linspace(np.log(lo), np.log(hi), n_grid))
    vals = np.array([g(s) for s in grid])
    roots = []
    for k in range(n_grid - 1):
        if vals[k] == 0.0:
            roots.append(grid[k])
            continue
        if np.sign(vals[k]) * np.sign(vals[k + 1]) < 0:
            a, b = grid[k], grid[k + 1]
            fa = vals[k]
            for _ in range(bisect):
                m = 0.5 * (a + b)
                fm = g(m)
                if fm == 0.0:
                    a = b = m
                    break
                if np.sign(fa) * np.sign(fm) < 0:
                    b = m
                else:
                    a, fa = m, fm
            roots.append(0.5 * (a + b))
    if vals[-1] == 0.0:
        roots.append(grid[-1])
    if not roots:
        raise ValueError("no stationary point on the grid")
    return min(roots, key=cost)
