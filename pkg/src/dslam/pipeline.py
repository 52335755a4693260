"""The online estimation loop.

Frames arrive in order. The first frame becomes a keyframe at the origin;
frames are then consumed until the median tracked flow clears a parallax
threshold (bootstrap). After that every frame is either promoted to a
keyframe (flow or gap rule) or tracked with a pose-only solve against the
latest keyframe. Keyframes trigger a prior batch request, static patch
sampling, robust scale alignment of the new batch, and a sliding-window
bundle adjustment with uncertainty-weighted depth priors.

Keyframe decisions track the original patch set of the previous keyframe,
never the optimized one, so the decision sequence is independent of
estimation results. All sampling randomness is keyed by (seed, frame id),
which makes runs bitwise reproducible and provider-exchangeable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import ba, tum
from .errors import (
    BehindCameraError,
    ConfigError,
    DslamError,
    EstimateFailed,
    InsufficientSamples,
    InvalidDepthError,
    NoStaticRegion,
    PipelineError,
)
from .geometry import Pixel, Se3Pose, reproject_jacobians
from .provider import (
    PriorBatchRequest,
    patch_id_base,
    sample_static_patches,
    sampling_rng,
)
from .scale import align_depth_raster, estimate_scale


@dataclass
class PipelineConfig:
    """Everything the loop needs; defaults are the desk-scale settings."""

    patches_per_frame: int = 96
    window_frames: int = 10
    n_batch: int = 6
    s_d: float = 0.5
    t_sigma: float = 0.5
    alpha: float = 10.0
    beta: float = 0.2
    w_max: float = 0.99
    huber_px: float = 2.0
    lambda0: float = 1e-4
    lm_down: float = 0.5
    lm_up: float = 4.0
    max_iters: int = 50
    eps_cost: float = 1e-8
    eps_step: float = 1e-8
    d_min: float = 1e-6
    use_mask: bool = True
    use_prior: bool = True
    use_uncertainty: bool = True
    fixed_weight: float = 1.0
    kf_flow_px: float = 8.0
    kf_max_gap: int = 5
    bootstrap_px: float = 4.0
    max_bootstrap_frames: int = 30
    border_px: int = 8
    min_scale_samples: int = 10
    retire_factor: float = 4.0
    seed: int = 0

    def validate(self):
        if self.patches_per_frame < 8:
            raise ConfigError("patches_per_frame must be at least 8")
        if self.window_frames < 3:
            raise ConfigError("window_frames must be at least 3")
        if self.n_batch < 2:
            raise ConfigError("n_batch must be at least 2")
        for name in ("s_d", "t_sigma", "huber_px", "lambda0", "kf_flow_px",
                     "bootstrap_px", "fixed_weight", "retire_factor"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 < self.w_max < 1.0:
            raise ConfigError("w_max must lie in (0, 1)")
        if self.kf_max_gap < 1 or self.max_bootstrap_frames < 1:
            raise ConfigError("gap limits must be positive")
        if self.min_scale_samples < 2:
            raise ConfigError("min_scale_samples must be at least 2")
        return self

    def lm_config(self):
        return ba.LmConfig(
            huber_px=self.huber_px,
            lambda0=self.lambda0,
            lm_down=self.lm_down,
            lm_up=self.lm_up,
            max_iters=self.max_iters,
            eps_cost=self.eps_cost,
            eps_step=self.eps_step,
            d_min=self.d_min,
            prior_enabled=self.use_prior,
        )

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class TrajectoryEstimate:
    """Ordered (frame_id, timestamp, pose) triples for every processed
    frame; poses are world to camera."""

    entries: list

    def frame_ids(self):
        return [fid for fid, _, _ in self.entries]

    def timestamps(self):
        return [ts for _, ts, _ in self.entries]

    def poses(self):
        return [pose for _, _, pose in self.entries]

    def positions(self):
        """Camera centers in world coordinates, (N, 3)."""
        return np.stack([pose.inverse().t for _, _, pose in self.entries])

    def write(self, path, comment=None):
        tum.write_tum(path, self.timestamps(), self.poses(), comment=comment)


@dataclass
class KeyframeDiagnostics:
    frame_id: int
    s_star: float
    sigma_med: float
    w_f: float
    n_patches: int
    n_retired: int
    n_scale_inliers: int = 0

    def format_line(self):
        return (f"{self.frame_id} {self.s_star:.9g} {self.sigma_med:.9g} "
                f"{self.w_f:.9g} {self.n_patches} {self.n_retired}")

    def scale_line(self):
        return f"{self.frame_id} {self.s_star:.9g} {self.n_scale_inliers}"

    def report_line(self):
        return f"{self.frame_id} {self.sigma_med:.9g} {self.w_f:.9g}"


class Pipeline:
    """Sequential state machine; one instance per sequence."""

    def __init__(self, provider, config=None):
        self.cfg = (config or PipelineConfig()).validate()
        self.provider = provider
        self.intr = provider.intrinsics
        self.lm_cfg = self.cfg.lm_config()

        self.keyframes = []          # frame ids currently in the window
        self.all_keyframes = []      # every keyframe id ever promoted
        self.window_poses = {}       # kf id -> current pose estimate
        self.patches = {}            # kf id -> live patches
        self.kf_track_sets = {}      # kf id -> original full patch set
        self.observations = []       # flow observations among window members
        self.scale_failed = set()    # kf ids whose prior weight is pinned to 0
        self.prev_report = None

        self.frozen_poses = {}       # fid -> pose, final
        self.processed = []          # (fid, pose) snapshots in arrival order
        self.initialized = False
        self.bootstrap_exhausted = False
        self.last_kf_id = None
        self.prev_s_star = 1.0
        self.last_scale_inliers = 0

        self.diagnostics = []
        self.applied_scales = {}     # kf id -> s_star (inverse-depth factor)
        self.aligned_depths = {}     # kf id -> own prior raster on arrival,
                                     # divided by s_star (optimizer scale)
        self.failure = None

    # -- small helpers ------------------------------------------------------

    def _record(self, frame_id, pose, final):
        self.processed.append((frame_id, pose))
        if final:
            self.frozen_poses[frame_id] = pose

    def _const_velocity_init(self):
        if len(self.processed) >= 2:
            (_, prev), (_, last) = self.processed[-2], self.processed[-1]
            return last.compose(prev.inverse()).compose(last)
        if self.processed:
            return self.processed[-1][1]
        return Se3Pose.identity()

    def _median_flow(self, patch_set, frame_id):
        obs = self.provider.track_patches(patch_set, frame_id)
        by_id = {p.patch_id: p for p in patch_set}
        disp = [
            math.hypot(o.u - by_id[o.patch_id].u, o.v - by_id[o.patch_id].v)
            for o in obs if o.valid
        ]
        if not disp:
            return 0.0
        return float(np.median(disp))

    def _live_patches(self):
        out = []
        for fid in self.keyframes:
            out.extend(self.patches[fid])
        return out

    def _sample_patches(self, prior, frame_id):
        """Static-gated sampling, falling back to ungated on fully dynamic
        frames (the fallback also switches the patch id namespace, so the
        ids stay unambiguous)."""
        k = self.cfg.patches_per_frame
        masked = self.cfg.use_mask
        rng = sampling_rng(self.cfg.seed, frame_id)
        s_d = self.cfg.s_d if masked else None
        try:
            return sample_static_patches(
                prior, s_d, k, rng,
                border_px=self.cfg.border_px,
                id_start=patch_id_base(frame_id, k, masked=masked),
            )
        except NoStaticRegion:
            if not masked:
                raise
            rng = sampling_rng(self.cfg.seed, frame_id)
            return sample_static_patches(
                prior, None, k, rng,
                border_px=self.cfg.border_px,
                id_start=patch_id_base(frame_id, k, masked=False),
            )

    # -- frame intake -------------------------------------------------------

    def process_frame(self, frame_id):
        try:
            self._process(frame_id)
        except DslamError as exc:
            self.failure = exc
            raise PipelineError(f"frame {frame_id}: {exc}") from exc

    def _process(self, frame_id):
        if not self.keyframes:
            self._first_keyframe(frame_id)
            return
        if not self.initialized:
            flow = self._median_flow(self.kf_track_sets[self.last_kf_id],
                                     frame_id)
            if flow > self.cfg.bootstrap_px:
                self.initialized = True
                self._add_keyframe(frame_id)
            else:
                if frame_id - self.all_keyframes[0] >= \
                        self.cfg.max_bootstrap_frames:
                    self.bootstrap_exhausted = True
                self._pose_only(frame_id)
            return
        flow = self._median_flow(self.kf_track_sets[self.last_kf_id],
                                 frame_id)
        if flow > self.cfg.kf_flow_px or \
                frame_id - self.last_kf_id >= self.cfg.kf_max_gap:
            self._add_keyframe(frame_id)
        else:
            self._pose_only(frame_id)

    def run(self, frame_ids=None):
        """Process a whole sequence and return the trajectory.

        On an internal failure the exception carries the poses recovered so
        far in its `trajectory` attribute.
        """
        if frame_ids is None:
            frame_ids = self.provider.frame_ids()
        try:
            for fid in frame_ids:
                self._process(fid)
        except DslamError as exc:
            self.failure = exc
            err = PipelineError(f"frame {fid}: {exc}")
            err.trajectory = self.trajectory()
            raise err from exc
        return self.trajectory()

    def trajectory(self):
        poses = dict(self.frozen_poses)
        for fid in self.keyframes:
            poses[fid] = self.window_poses[fid]
        entries = [
            (fid, tum.frame_timestamp(fid), poses[fid])
            for fid in sorted(poses)
        ]
        return TrajectoryEstimate(entries=entries)

    # -- stages -------------------------------------------------------------

    def _first_keyframe(self, frame_id):
        resp = self.provider.request_priors(
            PriorBatchRequest(frame_ids=(frame_id,)))
        prior = resp.frame(frame_id)
        new_patches = self._sample_patches(prior, frame_id)
        # The first batch defines the global scale.
        s_star = 1.0
        if not self.cfg.use_prior:
            for p in new_patches:
                p.inv_depth = 1.0
        pose = Se3Pose.identity()
        self.keyframes.append(frame_id)
        self.all_keyframes.append(frame_id)
        self.window_poses[frame_id] = pose
        self.patches[frame_id] = list(new_patches)
        self.kf_track_sets[frame_id] = list(new_patches)
        self.last_kf_id = frame_id
        self.applied_scales[frame_id] = s_star
        self.aligned_depths[frame_id] = align_depth_raster(prior.depth,
                                                           s_star)
        self._record(frame_id, pose, final=False)
        w0 = self.cfg.fixed_weight if not self.cfg.use_uncertainty \
            else self.cfg.w_max
        self.diagnostics.append(KeyframeDiagnostics(
            frame_id=frame_id, s_star=s_star, sigma_med=float("nan"),
            w_f=w0, n_patches=len(new_patches), n_retired=0,
        ))

    def _pose_only(self, frame_id):
        ref = self.last_kf_id
        ref_pose = self.window_poses[ref]
        patch_set = self.patches[ref]
        obs = [o for o in self.provider.track_patches(patch_set, frame_id)
               if o.valid]
        by_id = {p.patch_id: p for p in patch_set}
        init = self._const_velocity_init()
        if obs:
            centers = np.array(
                [[by_id[o.patch_id].u, by_id[o.patch_id].v] for o in obs])
            depths = np.array([by_id[o.patch_id].inv_depth for o in obs])
            uv = np.array([[o.u, o.v] for o in obs])
            pose, _ = ba.optimize_single_pose(
                init, [ref_pose] * len(obs), centers, depths, uv,
                self.intr, self.lm_cfg,
            )
        else:
            pose = init
        self._record(frame_id, pose, final=True)

    def _estimate_batch_scale(self, frame_id, resp):
        """Align the new batch to the optimizer's scale from the window
        patches hosted at the batch's historical frames."""
        self.last_scale_inliers = 0
        if not self.cfg.use_prior:
            return 1.0
        d, dh, conf, rel = [], [], [], []
        have_report = self.prev_report is not None
        for prior in resp.frames:
            fid = prior.frame_id
            if fid == frame_id or fid not in self.keyframes:
                continue
            for p in self.patches[fid]:
                iu, iv = int(round(p.u)), int(round(p.v))
                if not (0 <= iv < prior.depth.shape[0]
                        and 0 <= iu < prior.depth.shape[1]):
                    continue
                z = float(prior.depth[iv, iu])
                if z <= 0.0:
                    continue
                d.append(p.inv_depth)
                dh.append(1.0 / z)
                conf.append(float(prior.confidence[iv, iu]))
                rel.append(p.rel_depth_std)
        try:
            est = estimate_scale(
                d, dh, conf,
                rel_stds=rel if have_report else None,
                t_sigma=self.cfg.t_sigma,
                min_samples=self.cfg.min_scale_samples,
            )
            self.prev_s_star = est.s
            self.last_scale_inliers = est.n_used
            return est.s
        except (InsufficientSamples, EstimateFailed):
            self.scale_failed.add(frame_id)
            return self.prev_s_star

    def _frame_weights(self):
        weights = {}
        prev_medians = (self.prev_report.frame_median_rel_std
                        if self.prev_report else {})
        for fid in self.keyframes:
            if not self.cfg.use_prior or fid in self.scale_failed:
                weights[fid] = 0.0
            elif not self.cfg.use_uncertainty:
                weights[fid] = self.cfg.fixed_weight
            else:
                weights[fid] = ba.frame_weight(
                    prev_medians.get(fid), self.cfg.alpha, self.cfg.beta,
                    self.cfg.w_max,
                )
        return weights

    def _add_keyframe(self, frame_id):
        hist = self.all_keyframes[-(self.cfg.n_batch - 1):]
        resp = self.provider.request_priors(
            PriorBatchRequest(frame_ids=tuple(hist) + (frame_id,)))
        prior = resp.frame(frame_id)

        new_patches = self._sample_patches(prior, frame_id)
        s_star = self._estimate_batch_scale(frame_id, resp)
        for p in new_patches:
            p.prior_inv_depth *= s_star

        # Window insert: pose seed, patches, and cross tracks in both
        # directions between the new keyframe and the window.
        init_pose = self._const_velocity_init()
        outgoing = []
        for fid in self.keyframes:
            self.observations.extend(
                o for o in
                self.provider.track_patches(self.patches[fid], frame_id)
                if o.valid
            )
            tracked = [o for o in
                       self.provider.track_patches(new_patches, fid)
                       if o.valid]
            self.observations.extend(tracked)
            outgoing.extend(tracked)

        if self.cfg.use_prior:
            for p in new_patches:
                p.inv_depth = p.prior_inv_depth
        else:
            self._triangulate_init(new_patches, outgoing, init_pose)
        self.keyframes.append(frame_id)
        self.all_keyframes.append(frame_id)
        self.window_poses[frame_id] = init_pose
        self.patches[frame_id] = list(new_patches)
        self.kf_track_sets[frame_id] = list(new_patches)
        self.applied_scales[frame_id] = s_star
        self.aligned_depths[frame_id] = align_depth_raster(prior.depth,
                                                           s_star)

        while len(self.keyframes) > self.cfg.window_frames:
            self._drop_oldest()

        weights = self._frame_weights()
        window = ba.Window(
            frames=[(fid, self.window_poses[fid]) for fid in self.keyframes],
            patches=self._live_patches(),
            observations=self.observations,
            intrinsics=self.intr,
            frame_weights=weights,
            fixed_frames={self.keyframes[0]},
            fixed_patches=self._gauge_patches(weights),
        )
        window, report, stats = ba.lm_optimize(window, self.lm_cfg)
        for fid, pose in window.frames:
            self.window_poses[fid] = pose
        self.prev_report = report

        n_retired = 0
        if stats.converged:
            n_retired = self._retire(window)

        self.last_kf_id = frame_id
        self._record(frame_id, self.window_poses[frame_id], final=False)
        self.diagnostics.append(KeyframeDiagnostics(
            frame_id=frame_id,
            s_star=s_star,
            sigma_med=report.frame_median_rel_std.get(frame_id, float("nan")),
            w_f=weights[frame_id],
            n_patches=len(self._live_patches()),
            n_retired=n_retired,
            n_scale_inliers=self.last_scale_inliers,
        ))

    def _triangulate_init(self, new_patches, outgoing, host_pose):
        """Depth-prior-free initialization for a new keyframe's patches.

        Each patch gets a two-view depth from its own track into the window
        frame with the widest baseline, refined by a short 1-D Gauss-Newton
        on the reprojection residual. Patches without usable parallax keep
        the median depth of the live set, which also seeds the iteration.
        """
        live = [q.inv_depth for q in self._live_patches()]
        fallback = float(np.median(live)) if live else 1.0
        baselines = {}
        for fid in self.keyframes:
            rel = self.window_poses[fid].compose(host_pose.inverse())
            baselines[fid] = float(np.linalg.norm(rel.t))
        best = {}
        for o in outgoing:
            cur = best.get(o.patch_id)
            if cur is None or baselines[o.frame_j] > baselines[cur.frame_j]:
                best[o.patch_id] = o
        for p in new_patches:
            obs = best.get(p.patch_id)
            p.inv_depth = fallback
            if obs is None or baselines[obs.frame_j] < 1e-9:
                continue
            other = self.window_poses[obs.frame_j]
            px = Pixel(p.u, p.v)
            d = fallback
            for _ in range(10):
                try:
                    pred, _, _, j_d = reproject_jacobians(
                        host_pose, other, self.intr, px, d)
                except (InvalidDepthError, BehindCameraError):
                    d = fallback
                    break
                r = np.array([pred.u - obs.u, pred.v - obs.v])
                denom = float(j_d @ j_d)
                if denom < 1e-12:
                    break
                step = -float(j_d @ r) / denom
                d += step
                if d <= self.cfg.d_min:
                    d = fallback
                    break
                if abs(step) < 1e-10:
                    break
            p.inv_depth = float(min(max(d, self.cfg.d_min), 1e3))

    def _gauge_patches(self, weights):
        """When no depth prior anchors the scale, freeze one depth."""
        if self.cfg.use_prior and any(w > 0 for w in weights.values()):
            return set()
        for fid in self.keyframes:
            if self.patches[fid]:
                return {self.patches[fid][0].patch_id}
        return set()

    def _drop_oldest(self):
        old = self.keyframes.pop(0)
        self.frozen_poses[old] = self.window_poses.pop(old)
        gone = {p.patch_id for p in self.patches.pop(old)}
        self.kf_track_sets.pop(old)
        self.observations = [
            o for o in self.observations
            if o.patch_id not in gone and o.frame_j != old
        ]

    def _retire(self, window):
        """Drop patches whose mean tracked residual marks them as outliers."""
        means = ba.mean_patch_residuals(window, self.lm_cfg)
        threshold = self.cfg.retire_factor * self.cfg.huber_px
        doomed = {pid for pid, m in means.items()
                  if not math.isnan(m) and m > threshold}
        if not doomed:
            return 0
        for fid in self.keyframes:
            self.patches[fid] = [p for p in self.patches[fid]
                                 if p.patch_id not in doomed]
        self.observations = [o for o in self.observations
                             if o.patch_id not in doomed]
        return len(doomed)

    # -- reporting ----------------------------------------------------------

    def diagnostics_lines(self):
        return [d.format_line() for d in self.diagnostics]

    def live_counts(self):
        """(n_patches, n_observations) currently held; bounded by the
        window geometry regardless of sequence length."""
        return len(self._live_patches()), len(self.observations)
