"""Sliding-window bundle adjustment over patch reprojections.

The state is one SE(3) pose per window frame plus one inverse depth per
patch. Pixel reprojection residuals are robustified with a Huber loss on
the 2-vector residual norm; optional per-patch depth priors enter as
quadratic terms weighted per host frame. The normal equations

    [B  E] [dxi]   [v]
    [E' C] [dd ] = [w]

have diagonal C, so pose updates come from the Schur complement
B - E C^-1 E' and depth updates by back substitution. Marginal pose and
depth covariances are read off the same damped system at the final state.

Gauge: callers fix at least the oldest frame's pose; when no depth priors
anchor the scale they additionally fix one patch depth. Fixed blocks are
clamped to the identity during assembly and reported with zero covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import SolverFailure, UnderconstrainedSystem
from .geometry import (
    Z_MIN,
    backproject_batch,
    linearize_reprojection_batch,
    se3_retract,
)

W_MAX = 0.99


@dataclass
class LmConfig:
    """Optimizer knobs; defaults match the pipeline's."""

    huber_px: float = 2.0
    lambda0: float = 1e-4
    lm_down: float = 0.5
    lm_up: float = 4.0
    max_iters: int = 50
    eps_cost: float = 1e-8
    eps_step: float = 1e-8
    d_min: float = 1e-6
    lambda_max: float = 1e10
    prior_enabled: bool = True


@dataclass
class Window:
    """The optimizer's working set.

    frames holds (frame_id, Se3Pose) in arrival order; frame_weights maps
    frame_id to the depth-prior weight used for patches hosted there;
    fixed_frames and fixed_patches name gauge anchors by id.
    """

    frames: list
    patches: list
    observations: list
    intrinsics: object
    frame_weights: dict = field(default_factory=dict)
    fixed_frames: set = field(default_factory=set)
    fixed_patches: set = field(default_factory=set)

    def frame_ids(self):
        return [fid for fid, _ in self.frames]

    def pose_of(self, frame_id):
        for fid, pose in self.frames:
            if fid == frame_id:
                return pose
        raise KeyError(frame_id)


@dataclass
class NormalSystem:
    """Assembled Gauss-Newton system, undamped; lam records the damping to
    apply on the diagonals when solving."""

    b: np.ndarray          # (6F, 6F)
    c: np.ndarray          # (P,) diagonal depth block
    e: np.ndarray          # (6F, P)
    v: np.ndarray          # (6F,)
    w: np.ndarray          # (P,)
    lam: float
    frame_ids: list
    patch_ids: list
    fixed_frame_mask: np.ndarray
    fixed_patch_mask: np.ndarray
    n_valid_obs: int


@dataclass
class CovarianceReport:
    frame_ids: list
    patch_ids: list
    pose_cov: np.ndarray               # (6F, 6F)
    depth_var: np.ndarray              # (P,)
    rel_depth_std: np.ndarray          # (P,) sigma_d / d
    frame_median_rel_std: dict         # frame_id -> median (NaN if no patches)


@dataclass
class LmStats:
    iterations: int = 0
    accepted: int = 0
    rejected: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    converged: bool = False
    reason: str = ""


def huber_weights(residual_norms, delta):
    """IRLS weights min(1, delta/|r|) for the Huber loss."""
    r = np.abs(residual_norms)
    with np.errstate(divide="ignore"):
        w = np.where(r > delta, delta / np.where(r > 0, r, 1.0), 1.0)
    return w


def huber_cost(residual_norms, delta):
    """Quadratic core, linear tails, continuous at the transition."""
    r = np.abs(residual_norms)
    return np.where(r <= delta, r * r, delta * (2.0 * r - delta))


def lower_median(values):
    """Median taking the lower of the two middle values on even counts."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        return float("nan")
    return float(v[(v.size - 1) // 2])


def frame_weight(sigma_med, alpha, beta, w_max=W_MAX):
    """Map a frame's median relative depth std to a prior weight.

    Monotone sigmoid in sigma_med; an undefined statistic (no live patches
    yet) falls back to w_max.
    """
    if sigma_med is None or not np.isfinite(sigma_med):
        return float(w_max)
    return float(1.0 / (1.0 + np.exp(-alpha * (sigma_med - beta))))


# ---------------------------------------------------------------------------
# Window flattening and linearization
# ---------------------------------------------------------------------------

class _WindowArrays:
    """Index arrays for one window, reused across LM iterations."""

    def __init__(self, window, cfg):
        self.window = window
        self.cfg = cfg
        self.intr = window.intrinsics
        self.frame_ids = window.frame_ids()
        self.patch_ids = [p.patch_id for p in window.patches]
        self.n_frames = len(self.frame_ids)
        self.n_patches = len(self.patch_ids)
        fidx = {fid: k for k, fid in enumerate(self.frame_ids)}
        pidx = {pid: k for k, pid in enumerate(self.patch_ids)}

        self.centers = np.array([[p.u, p.v] for p in window.patches],
                                dtype=np.float64).reshape(-1, 2)
        self.owner = np.array([fidx[p.frame_id] for p in window.patches],
                              dtype=np.int64)
        self.prior_inv = np.array([p.prior_inv_depth for p in window.patches],
                                  dtype=np.float64)

        oi, oj, ok, uv = [], [], [], []
        for o in window.observations:
            if not o.valid:
                continue
            if o.frame_j not in fidx or o.patch_id not in pidx:
                continue
            k = pidx[o.patch_id]
            oi.append(self.owner[k])
            oj.append(fidx[o.frame_j])
            ok.append(k)
            uv.append((o.u, o.v))
        self.oi = np.asarray(oi, dtype=np.int64)
        self.oj = np.asarray(oj, dtype=np.int64)
        self.ok = np.asarray(ok, dtype=np.int64)
        self.obs_uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)

        self.fixed_frame_mask = np.array(
            [fid in window.fixed_frames for fid in self.frame_ids], dtype=bool
        )
        self.fixed_patch_mask = np.array(
            [pid in window.fixed_patches for pid in self.patch_ids], dtype=bool
        )

        # Per-patch prior weight from the host frame; silently zero where
        # the prior value is unusable.
        wf = np.array(
            [window.frame_weights.get(p.frame_id, 0.0) for p in window.patches],
            dtype=np.float64,
        )
        usable = np.isfinite(self.prior_inv) & (self.prior_inv > 0.0)
        self.prior_weight = np.where(usable, wf, 0.0)

    def depths(self):
        return np.array([p.inv_depth for p in self.window.patches],
                        dtype=np.float64)

    def poses(self):
        return [pose for _, pose in self.window.frames]

    def rel_transforms(self, poses):
        r = np.stack([p.rotation_matrix() for p in poses])
        t = np.stack([p.t for p in poses])
        r_i, t_i = r[self.oi], t[self.oi]
        r_j, t_j = r[self.oj], t[self.oj]
        r_ji = np.einsum("nab,ncb->nac", r_j, r_i)
        t_ji = t_j - np.einsum("nab,nb->na", r_ji, t_i)
        return r_ji, t_ji

    def predict(self, poses, depths):
        """Predictions only, for cost evaluation."""
        r_ji, t_ji = self.rel_transforms(poses)
        p_i = backproject_batch(self.intr, self.centers[self.ok],
                                depths[self.ok])
        x = np.einsum("nab,nb->na", r_ji, p_i) + t_ji
        valid = x[:, 2] > Z_MIN
        z = np.where(valid, x[:, 2], 1.0)
        pred = np.empty((x.shape[0], 2))
        pred[:, 0] = self.intr.fx * x[:, 0] / z + self.intr.cx
        pred[:, 1] = self.intr.fy * x[:, 1] / z + self.intr.cy
        return pred, valid

    def cost(self, poses, depths):
        """Total robustified cost at a state."""
        if self.ok.size:
            pred, valid = self.predict(poses, depths)
            r = self.obs_uv - pred
            rn = np.linalg.norm(np.where(valid[:, None], r, 0.0), axis=1)
            c = float(huber_cost(rn[valid], self.cfg.huber_px).sum())
        else:
            c = 0.0
        if self.cfg.prior_enabled:
            active = self.prior_weight > 0.0
            if active.any():
                dr = depths[active] - self.prior_inv[active]
                c += float((self.prior_weight[active] * dr * dr).sum())
        return c

    def build(self, poses, depths, lam):
        """Assemble the normal system at a state."""
        nf, np_ = self.n_frames, self.n_patches
        if self.ok.size == 0:
            raise UnderconstrainedSystem("window has no usable observations")
        r_ji, t_ji = self.rel_transforms(poses)
        p_i = backproject_batch(self.intr, self.centers[self.ok],
                                depths[self.ok])
        pred, valid, j_i, j_j, j_d = linearize_reprojection_batch(
            r_ji, t_ji, p_i, depths[self.ok], self.intr
        )
        n_valid = int(valid.sum())
        if n_valid == 0:
            raise UnderconstrainedSystem(
                "all observations are behind the camera"
            )
        r = np.where(valid[:, None], self.obs_uv - pred, 0.0)
        rn = np.linalg.norm(r, axis=1)
        omega = huber_weights(rn, self.cfg.huber_px) * valid

        b4 = np.zeros((nf, nf, 6, 6))
        e3 = np.zeros((nf, np_, 6))
        c = np.zeros(np_)
        v2 = np.zeros((nf, 6))
        w = np.zeros(np_)

        j_iw = j_i * omega[:, None, None]
        j_jw = j_j * omega[:, None, None]
        np.add.at(b4, (self.oi, self.oi), np.einsum("nra,nrb->nab", j_i, j_iw))
        np.add.at(b4, (self.oj, self.oj), np.einsum("nra,nrb->nab", j_j, j_jw))
        bij = np.einsum("nra,nrb->nab", j_i, j_jw)
        np.add.at(b4, (self.oi, self.oj), bij)
        np.add.at(b4, (self.oj, self.oi), bij.transpose(0, 2, 1))

        j_dw = j_d * omega[:, None]
        np.add.at(e3, (self.oi, self.ok), np.einsum("nra,nr->na", j_i, j_dw))
        np.add.at(e3, (self.oj, self.ok), np.einsum("nra,nr->na", j_j, j_dw))
        np.add.at(c, self.ok, np.einsum("nr,nr->n", j_d, j_dw))

        np.add.at(v2, self.oi, np.einsum("nra,nr->na", j_iw, r))
        np.add.at(v2, self.oj, np.einsum("nra,nr->na", j_jw, r))
        np.add.at(w, self.ok, np.einsum("nr,nr->n", j_dw, r))

        if self.cfg.prior_enabled:
            active = self.prior_weight > 0.0
            if active.any():
                c[active] += self.prior_weight[active]
                w[active] += self.prior_weight[active] * (
                    self.prior_inv[active] - depths[active]
                )

        ff = self.fixed_frame_mask
        if ff.any():
            b4[ff, :] = 0.0
            b4[:, ff] = 0.0
            for k in np.flatnonzero(ff):
                b4[k, k] = np.eye(6)
            e3[ff, :] = 0.0
            v2[ff] = 0.0
        fp = self.fixed_patch_mask
        if fp.any():
            c[fp] = 1.0
            w[fp] = 0.0
            e3[:, fp, :] = 0.0

        return NormalSystem(
            b=b4.transpose(0, 2, 1, 3).reshape(6 * nf, 6 * nf),
            c=c,
            e=e3.transpose(0, 2, 1).reshape(6 * nf, np_),
            v=v2.reshape(6 * nf),
            w=w,
            lam=float(lam),
            frame_ids=list(self.frame_ids),
            patch_ids=list(self.patch_ids),
            fixed_frame_mask=ff.copy(),
            fixed_patch_mask=fp.copy(),
            n_valid_obs=n_valid,
        )

    def patch_residual_means(self, poses, depths):
        """Mean pixel residual norm per patch over currently valid tracks."""
        means = np.full(self.n_patches, np.nan)
        if self.ok.size == 0:
            return means
        pred, valid = self.predict(poses, depths)
        r = self.obs_uv - pred
        rn = np.linalg.norm(r, axis=1)
        total = np.zeros(self.n_patches)
        count = np.zeros(self.n_patches)
        np.add.at(total, self.ok[valid], rn[valid])
        np.add.at(count, self.ok[valid], 1.0)
        has = count > 0
        means[has] = total[has] / count[has]
        return means


def build_normal_system(window, cfg=None, lam=0.0):
    """Public assembly entry point; see _WindowArrays.build."""
    cfg = cfg or LmConfig()
    arrays = _WindowArrays(window, cfg)
    return arrays.build(arrays.poses(), arrays.depths(), lam)


def total_cost(window, cfg=None):
    cfg = cfg or LmConfig()
    arrays = _WindowArrays(window, cfg)
    return arrays.cost(arrays.poses(), arrays.depths())


# ---------------------------------------------------------------------------
# Linear solves and covariance recovery
# ---------------------------------------------------------------------------

def _damped(system, lam=None):
    lam = system.lam if lam is None else lam
    bd = system.b + lam * np.eye(system.b.shape[0])
    cd = system.c + lam
    if np.any(cd <= 0.0) or not np.all(np.isfinite(cd)):
        raise SolverFailure("depth diagonal is not strictly positive")
    return bd, cd


def _schur_factor(system, lam=None):
    bd, cd = _damped(system, lam)
    e_over_c = system.e / cd
    s = bd - e_over_c @ system.e.T
    s = 0.5 * (s + s.T)
    try:
        cho = scipy.linalg.cho_factor(s, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise SolverFailure(f"Schur complement not positive definite: {exc}")
    return cho, e_over_c, cd


def solve_schur(system, lam=None):
    """Pose then depth updates by Schur elimination of the depth block."""
    cho, e_over_c, cd = _schur_factor(system, lam)
    rhs = system.v - e_over_c @ system.w
    dxi = scipy.linalg.cho_solve(cho, rhs, check_finite=False)
    dd = (system.w - system.e.T @ dxi) / cd
    return dxi, dd


def pose_covariance(system, lam=None):
    """Marginal pose covariance: inverse of the damped Schur complement.

    Fixed-frame blocks are zeroed; they carry no uncertainty by definition.
    """
    cho, _, _ = _schur_factor(system, lam)
    n = system.b.shape[0]
    cov = scipy.linalg.cho_solve(cho, np.eye(n), check_finite=False)
    if system.fixed_frame_mask.any():
        sel = np.repeat(system.fixed_frame_mask, 6)
        cov[sel, :] = 0.0
        cov[:, sel] = 0.0
    return cov


def depth_marginal_variances(system, pose_cov, lam=None):
    """Per-patch marginal depth variances without forming the dense block.

    diag(C^-1 + C^-1 E' Sigma_T E C^-1), evaluated patch by patch.
    """
    _, cd = _damped(system, lam)
    m = pose_cov @ system.e
    quad = np.einsum("ij,ij->j", system.e, m)
    var = 1.0 / cd + quad / (cd * cd)
    var = np.where(system.fixed_patch_mask, 0.0, var)
    return var


def relative_depth_std(depth_var, inv_depths):
    """sigma_d / d per patch (inverse-depth domain)."""
    return np.sqrt(np.maximum(depth_var, 0.0)) / np.maximum(inv_depths, 1e-300)


def _covariance_report(arrays, poses, depths, lam):
    """Build the report at a state, escalating damping if the factorization
    is marginal.

    Depths frozen as optimization anchors are priced as free parameters
    here: an arbitrary frozen depth is a solver convenience, not actual
    information, and counting it would hide the scale blindness of windows
    that carry no depth prior. Only the damping bounds that direction.

    The caller passes a fixed reference damping rather than the trust
    region state the optimizer stopped at. A rejection streak can leave
    the loop with damping orders of magnitude above its floor, and pricing
    uncertainty there would report trust region health, not information.
    """
    saved = arrays.fixed_patch_mask
    arrays.fixed_patch_mask = np.zeros_like(saved)
    trial = max(lam, 0.0)
    last_exc = None
    try:
        for _ in range(8):
            try:
                system = arrays.build(poses, depths, trial)
                cov = pose_covariance(system)
                var = depth_marginal_variances(system, cov)
                break
            except SolverFailure as exc:
                last_exc = exc
                trial = max(trial * 10.0, 1e-8)
        else:
            raise SolverFailure(f"covariance recovery failed: {last_exc}")
    finally:
        arrays.fixed_patch_mask = saved
    rel = relative_depth_std(var, depths)
    medians = {}
    for k, fid in enumerate(arrays.frame_ids):
        sel = arrays.owner == k
        medians[fid] = lower_median(rel[sel]) if sel.any() else float("nan")
    return CovarianceReport(
        frame_ids=list(arrays.frame_ids),
        patch_ids=list(arrays.patch_ids),
        pose_cov=cov,
        depth_var=var,
        rel_depth_std=rel,
        frame_median_rel_std=medians,
    )


# ---------------------------------------------------------------------------
# Levenberg-Marquardt driver
# ---------------------------------------------------------------------------

def lm_optimize(window, cfg=None):
    """Optimize the window in place.

    Returns (window, CovarianceReport, LmStats). Steps are accepted only if
    they strictly reduce the robustified cost; damping is additive on both
    diagonals. The covariance report is evaluated at the final accepted
    state with the final damping.
    """
    cfg = cfg or LmConfig()
    arrays = _WindowArrays(window, cfg)
    poses = arrays.poses()
    depths = arrays.depths()
    fixed = arrays.fixed_frame_mask

    lam = cfg.lambda0
    cost = arrays.cost(poses, depths)
    stats = LmStats(initial_cost=cost, final_cost=cost)

    system = None
    while stats.iterations < cfg.max_iters:
        stats.iterations += 1
        if system is None:
            system = arrays.build(poses, depths, lam)
        try:
            dxi, dd = solve_schur(system, lam)
        except SolverFailure:
            stats.rejected += 1
            lam *= cfg.lm_up
            if lam > cfg.lambda_max:
                stats.reason = "damping limit reached"
                break
            continue

        step_inf = max(
            float(np.abs(dxi).max(initial=0.0)),
            float(np.abs(dd).max(initial=0.0)),
        )
        if step_inf < cfg.eps_step:
            stats.converged = True
            stats.reason = "step below threshold"
            break

        cand_poses = []
        for k, pose in enumerate(poses):
            if fixed[k]:
                cand_poses.append(pose)
            else:
                cand_poses.append(se3_retract(pose, dxi[6 * k:6 * k + 6]))
        cand_depths = np.maximum(depths + dd, cfg.d_min)
        cand_cost = arrays.cost(cand_poses, cand_depths)

        if cand_cost < cost:
            rel_drop = (cost - cand_cost) / max(cost, 1e-300)
            poses, depths, cost = cand_poses, cand_depths, cand_cost
            stats.accepted += 1
            lam = max(lam * cfg.lm_down, 1e-15)
            system = None
            if rel_drop < cfg.eps_cost:
                stats.converged = True
                stats.reason = "cost plateau"
                break
        else:
            stats.rejected += 1
            lam *= cfg.lm_up
            if lam > cfg.lambda_max:
                stats.reason = "damping limit reached"
                break
    else:
        stats.reason = "iteration limit"

    stats.final_cost = cost
    window.frames = [(fid, poses[k]) for k, fid in enumerate(arrays.frame_ids)]
    for k, p in enumerate(window.patches):
        p.inv_depth = float(depths[k])

    report = _covariance_report(arrays, poses, depths, cfg.lambda0)
    for k, p in enumerate(window.patches):
        p.rel_depth_std = float(report.rel_depth_std[k])
    return window, report, stats


def mean_patch_residuals(window, cfg=None):
    """Dict patch_id -> mean valid-track residual norm (NaN when trackless)."""
    cfg = cfg or LmConfig()
    arrays = _WindowArrays(window, cfg)
    means = arrays.patch_residual_means(arrays.poses(), arrays.depths())
    return {pid: float(means[k]) for k, pid in enumerate(arrays.patch_ids)}


# ---------------------------------------------------------------------------
# Pose-only refinement for non-keyframes
# ---------------------------------------------------------------------------

def optimize_single_pose(pose_init, host_poses, centers, inv_depths, obs_uv,
                         intr, cfg=None, max_iters=15):
    """LM over one pose with all depths and host poses frozen.

    host_poses is a list of Se3Pose, one per observation; centers (N, 2),
    inv_depths (N,), obs_uv (N, 2). Returns (pose, n_valid_observations).
    """
    cfg = cfg or LmConfig()
    n = len(host_poses)
    if n == 0:
        return pose_init, 0
    r_i = np.stack([p.rotation_matrix() for p in host_poses])
    t_i = np.stack([p.t for p in host_poses])
    p_i = backproject_batch(intr, centers, inv_depths)

    def linearize(pose):
        r_j = pose.rotation_matrix()
        t_j = pose.t
        r_ji = np.einsum("ab,ncb->nac", r_j, r_i)
        t_ji = t_j - np.einsum("nab,nb->na", r_ji, t_i)
        pred, valid, _, j_j, _ = linearize_reprojection_batch(
            r_ji, t_ji, p_i, inv_depths, intr
        )
        r = np.where(valid[:, None], obs_uv - pred, 0.0)
        rn = np.linalg.norm(r, axis=1)
        omega = huber_weights(rn, cfg.huber_px) * valid
        return r, rn, valid, omega, j_j

    def cost_of(pose):
        r, rn, valid, _, _ = linearize(pose)
        return float(huber_cost(rn[valid], cfg.huber_px).sum()), int(valid.sum())

    pose = pose_init
    cost, n_valid = cost_of(pose)
    if n_valid == 0:
        return pose_init, 0
    lam = cfg.lambda0
    for _ in range(max_iters):
        r, rn, valid, omega, j_j = linearize(pose)
        j_w = j_j * omega[:, None, None]
        h = np.einsum("nra,nrb->ab", j_j, j_w)
        g = np.einsum("nra,nr->a", j_w, r)
        try:
            dx = np.linalg.solve(h + lam * np.eye(6), g)
        except np.linalg.LinAlgError:
            lam *= cfg.lm_up
            continue
        if np.abs(dx).max() < cfg.eps_step:
            break
        cand = se3_retract(pose, dx)
        cand_cost, cand_valid = cost_of(cand)
        if cand_valid > 0 and cand_cost < cost:
            drop = (cost - cand_cost) / max(cost, 1e-300)
            pose, cost = cand, cand_cost
            lam = max(lam * cfg.lm_down, 1e-15)
            if drop < cfg.eps_cost:
                break
        else:
            lam *= cfg.lm_up
            if lam > cfg.lambda_max:
                break
    return pose, n_valid
