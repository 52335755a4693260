"""Synthetic scenes with moving objects, plus the provider that serves them.

The world is a box of static points and a handful of rigid point clusters
drifting with constant linear and angular velocity. Each frame renders the
points into sparse depth, ownership, and motion rasters by nearest-depth
point splatting. A SyntheticProvider wraps the ground truth and serves
corrupted priors and patch tracks:

* per-batch depth scale drawn log-uniform from the configured range,
* per-pixel log-normal depth noise with confidence set from the inverse
  injected error,
* motion-mask bit flips at a configured rate,
* per-observation flow noise and uniform outliers.

Every random quantity is keyed by its coordinates (frame, pair, patch), so
a response depends only on the request and the seed, never on call order.
export() writes the provider's data to disk in the layout FileProvider
reads, including the flow tables any same-seed pipeline run will ask for.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GenerationError
from .geometry import (
    CameraIntrinsics,
    Se3Pose,
    Z_MIN,
    quat_from_matrix,
    quat_from_rotvec,
    quat_to_matrix,
)
from .provider import (
    RNG_TAG_FLOW,
    RNG_TAG_RASTER,
    RNG_TAG_SCALE,
    RNG_TAG_SCENE,
    FlowObservation,
    as_request,
    PriorBatchResponse,
    PriorFrameData,
    PriorProvider,
    patch_id_base,
    sample_static_patches,
    sampling_rng,
    write_raster,
    write_scales_file,
)
from .tum import frame_timestamp, write_tum

# Extra batch scales drawn beyond one per frame, as slack.
_SCALE_MARGIN = 16


@dataclass
class SceneSpec:
    """Everything needed to generate a scene and its corrupted priors."""

    n_frames: int = 30
    seed: int = 0

    # Camera trajectory: orbit | forward | rotation_dominant | random_walk.
    camera_path: str = "orbit"
    path_scale: float = 1.0
    path_angle: float = 0.6

    # World content.
    scene_extent: float = 2.0
    n_static_points: int = 900
    n_moving_objects: int = 0
    points_per_object: int = 80
    object_radius: float = 0.35
    object_speed_min: float = 0.02
    object_speed_max: float = 0.06
    object_spin: float = 0.0

    # Pinhole camera.
    width: int = 128
    height: int = 96
    fx: float = 120.0
    fy: float = 120.0
    cx: float = 64.0
    cy: float = 48.0

    # Prior corruption.
    sigma_flow: float = 0.0
    p_outlier: float = 0.0
    sigma_depth: float = 0.0
    mask_error_rate: float = 0.0
    scale_min: float = 0.25
    scale_max: float = 4.0
    pin_first_batch_scale: float | None = None

    # Label pixels by measured displacement instead of object ownership.
    mask_by_motion: bool = False
    motion_eps: float = 1e-6

    @property
    def intrinsics(self):
        return CameraIntrinsics(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
                                width=self.width, height=self.height)

    def validate(self):
        if self.n_frames < 1:
            raise GenerationError("n_frames must be at least 1")
        total = self.n_static_points + self.n_moving_objects * self.points_per_object
        if total <= 0:
            raise GenerationError("scene has no points")
        if self.camera_path not in (
            "orbit", "forward", "rotation_dominant", "random_walk"
        ):
            raise GenerationError(f"unknown camera path {self.camera_path!r}")
        if not (0.0 < self.scale_min <= self.scale_max):
            raise GenerationError("scale range must satisfy 0 < min <= max")
        for name in ("sigma_flow", "sigma_depth", "p_outlier", "mask_error_rate"):
            if getattr(self, name) < 0:
                raise GenerationError(f"{name} must be nonnegative")


@dataclass
class MovingObject:
    center: np.ndarray        # initial cluster center
    velocity: np.ndarray      # units per frame
    spin: np.ndarray          # rotation vector per frame

    def rotation_at(self, frame):
        return quat_to_matrix(quat_from_rotvec(self.spin * float(frame)))

    def transform_between(self, frame_i, frame_j, points):
        """Move world points rigidly attached to this object from i to j."""
        r_i = self.rotation_at(frame_i)
        r_j = self.rotation_at(frame_j)
        rel = r_j @ r_i.T
        base = points - self.center - self.velocity * float(frame_i)
        return (rel @ base.T).T + self.center + self.velocity * float(frame_j)


@dataclass
class GroundTruth:
    """Generated world: poses, point tracks, and rendered rasters."""

    spec: SceneSpec
    intrinsics: CameraIntrinsics
    poses: list                    # world-to-camera Se3Pose per frame
    points0: np.ndarray            # (P, 3) world positions at frame 0
    obj_of_point: np.ndarray       # (P,) object index, -1 for static
    objects: list                  # MovingObject entries
    depth: np.ndarray              # (n_frames, H, W) camera depth, 0 invalid
    owner: np.ndarray              # (n_frames, H, W) winning point index, -1 none
    motion_mask: np.ndarray        # (n_frames, H, W) bool
    batch_scales: np.ndarray       # per-batch injected depth scales

    def point_positions(self, frame):
        pts = self.points0.copy()
        for oi, obj in enumerate(self.objects):
            sel = self.obj_of_point == oi
            if sel.any():
                pts[sel] = obj.transform_between(0, frame, pts[sel])
        return pts

    @property
    def n_frames(self):
        return len(self.poses)


def _look_at(position, target):
    """World-to-camera pose for a camera at position looking at target."""
    z = target - position
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise GenerationError("camera position coincides with its target")
    z = z / nz
    up = np.array([0.0, 1.0, 0.0])
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    r_wc = np.column_stack([x, y, z])
    r = r_wc.T
    return Se3Pose(quat_from_matrix(r), -(r @ position))


def _camera_poses(spec, rng):
    n = spec.n_frames
    ext = spec.scene_extent
    poses = []
    # Path radii keep scene depths of order one to a few units: the depth
    # prior couples to the optimizer in inverse-depth units, so very distant
    # scenes leave the scale gauge weakly anchored.
    if spec.camera_path == "orbit":
        radius = 2.0 * ext * spec.path_scale
        sweep = spec.path_angle
        for f in range(n):
            th = sweep * (f / max(n - 1, 1) - 0.5)
            pos = np.array([
                radius * np.sin(th),
                0.05 * radius * np.sin(2.0 * th),
                -radius * np.cos(th),
            ])
            poses.append(_look_at(pos, np.zeros(3)))
    elif spec.camera_path == "forward":
        start = np.array([0.0, 0.0, -2.5 * ext])
        step = 0.02 * ext * spec.path_scale
        for f in range(n):
            pos = start + np.array([
                0.02 * ext * spec.path_scale * np.sin(0.3 * f),
                0.0,
                step * f,
            ])
            poses.append(_look_at(pos, pos + np.array([0.0, 0.0, 1.0])))
    elif spec.camera_path == "rotation_dominant":
        base = np.array([0.0, 0.0, -1.2 * ext])
        drift = 0.008 * ext * spec.path_scale
        for f in range(n):
            pos = base + np.array([drift * f, 0.0, 0.0])
            psi = spec.path_angle * (f / max(n - 1, 1) - 0.5)
            target = pos + np.array([np.sin(psi), 0.0, np.cos(psi)])
            poses.append(_look_at(pos, target))
    else:  # random_walk
        pose = _look_at(np.array([0.0, 0.0, -2.0 * ext]), np.zeros(3))
        poses.append(pose)
        for _ in range(n - 1):
            rho = rng.normal(scale=0.03 * ext * spec.path_scale, size=3)
            phi = rng.normal(scale=spec.path_angle / max(n, 2), size=3)
            step = Se3Pose(quat_from_rotvec(phi), rho)
            pose = step.compose(pose)
            poses.append(pose)
    return poses


def _splat(points_cam, intr):
    """Nearest-depth point splatting onto the pixel grid.

    Returns (depth, owner) rasters; points farther than an already written
    pixel lose, so each pixel records its closest point.
    """
    h, w = intr.height, intr.width
    depth = np.zeros((h, w))
    owner = np.full((h, w), -1, dtype=np.int64)
    z = points_cam[:, 2]
    front = z > Z_MIN
    idx = np.flatnonzero(front)
    if idx.size == 0:
        return depth, owner
    u = intr.fx * points_cam[idx, 0] / z[idx] + intr.cx
    v = intr.fy * points_cam[idx, 1] / z[idx] + intr.cy
    iu = np.rint(u).astype(np.int64)
    iv = np.rint(v).astype(np.int64)
    inside = (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
    idx, iu, iv = idx[inside], iu[inside], iv[inside]
    order = np.argsort(-z[idx], kind="stable")
    idx, iu, iv = idx[order], iu[order], iv[order]
    depth[iv, iu] = z[idx]
    owner[iv, iu] = idx
    return depth, owner


def generate(spec):
    """Build a GroundTruth world and the provider that serves it."""
    spec.validate()
    rng = np.random.default_rng((int(spec.seed), RNG_TAG_SCENE))
    ext = spec.scene_extent

    pts = [rng.uniform(-ext, ext, size=(spec.n_static_points, 3))]
    obj_of = [np.full(spec.n_static_points, -1, dtype=np.int64)]
    objects = []
    for oi in range(spec.n_moving_objects):
        center = rng.uniform(-0.6 * ext, 0.6 * ext, size=3)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        speed = rng.uniform(spec.object_speed_min, spec.object_speed_max)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        spin = axis * rng.uniform(0.0, spec.object_spin) if spec.object_spin > 0 \
            else np.zeros(3)
        cluster = center + rng.normal(scale=spec.object_radius,
                                      size=(spec.points_per_object, 3))
        objects.append(MovingObject(center=center,
                                    velocity=direction * speed, spin=spin))
        pts.append(cluster)
        obj_of.append(np.full(spec.points_per_object, oi, dtype=np.int64))
    points0 = np.concatenate(pts, axis=0)
    obj_of_point = np.concatenate(obj_of, axis=0)

    poses = _camera_poses(spec, rng)
    intr = spec.intrinsics

    n = spec.n_frames
    h, w = intr.height, intr.width
    depth = np.zeros((n, h, w))
    owner = np.full((n, h, w), -1, dtype=np.int64)
    motion = np.zeros((n, h, w), dtype=bool)

    gt = GroundTruth(
        spec=spec, intrinsics=intr, poses=poses, points0=points0,
        obj_of_point=obj_of_point, objects=objects, depth=depth, owner=owner,
        motion_mask=motion,
        batch_scales=np.zeros(0),
    )

    point_is_moving = obj_of_point >= 0
    positions = [gt.point_positions(f) for f in range(n)]
    for f in range(n):
        r = poses[f].rotation_matrix()
        cam = positions[f] @ r.T + poses[f].t
        depth[f], owner[f] = _splat(cam, intr)
        has = owner[f] >= 0
        own = owner[f][has]
        if spec.mask_by_motion:
            nxt = f + 1 if f + 1 < n else f
            prv = f if f + 1 < n else max(f - 1, 0)
            disp = np.linalg.norm(positions[nxt] - positions[prv], axis=1)
            motion[f][has] = disp[own] > spec.motion_eps
        else:
            motion[f][has] = point_is_moving[own]

    scale_rng = np.random.default_rng((int(spec.seed), RNG_TAG_SCALE))
    n_scales = n + _SCALE_MARGIN
    scales = np.exp(scale_rng.uniform(
        np.log(spec.scale_min), np.log(spec.scale_max), size=n_scales
    ))
    if spec.pin_first_batch_scale is not None:
        scales[0] = float(spec.pin_first_batch_scale)
    gt.batch_scales = scales

    return gt, SyntheticProvider(gt)


# ---------------------------------------------------------------------------
# Provider backed by the generated world
# ---------------------------------------------------------------------------

class SyntheticProvider(PriorProvider):
    """Serves corrupted priors and patch tracks straight from a GroundTruth."""

    def __init__(self, gt):
        self.gt = gt
        self.seed = int(gt.spec.seed)
        self._batch_counter = 0
        self._base_cache = {}

    @property
    def intrinsics(self):
        return self.gt.intrinsics

    def frame_ids(self):
        return list(range(self.gt.n_frames))

    @property
    def batches_served(self):
        return self._batch_counter

    def base_rasters(self, frame_id):
        """Noise-corrupted rasters before any batch scale, float32."""
        if frame_id not in self._base_cache:
            spec = self.gt.spec
            rng = np.random.default_rng((self.seed, RNG_TAG_RASTER, int(frame_id)))
            gt_depth = self.gt.depth[frame_id]
            valid = gt_depth > 0
            noise = rng.standard_normal(size=gt_depth.shape)
            flips = rng.random(size=gt_depth.shape) < spec.mask_error_rate
            factor = np.exp(spec.sigma_depth * noise)
            depth = np.where(valid, gt_depth * factor, 0.0)
            conf = np.where(valid, 1.0 / (0.01 + np.abs(factor - 1.0)), 0.0)
            mask = self.gt.motion_mask[frame_id] ^ flips
            self._base_cache[frame_id] = (
                depth.astype(np.float32),
                conf.astype(np.float32),
                mask.astype(np.float32),
            )
        return self._base_cache[frame_id]

    def batch_scale(self, batch_id):
        if batch_id >= self.gt.batch_scales.size:
            raise GenerationError(
                f"batch {batch_id} exceeds the drawn scale schedule"
            )
        return float(self.gt.batch_scales[batch_id])

    def request_priors(self, frame_ids):
        request = as_request(frame_ids)
        batch_id = self._batch_counter
        self._batch_counter += 1
        scale = self.batch_scale(batch_id)
        frames = []
        for fid in request.frame_ids:
            depth, conf, mask = self.base_rasters(fid)
            frames.append(PriorFrameData(
                frame_id=fid, depth=depth * scale, confidence=conf.copy(),
                motion_prob=mask.copy(), batch_id=batch_id,
            ))
        return PriorBatchResponse(batch_id=batch_id, frames=frames)

    def _track_one(self, patch, target):
        """Noiseless track of one patch center into the target frame."""
        gt = self.gt
        i = patch.frame_id
        iu, iv = int(round(patch.u)), int(round(patch.v))
        z = gt.depth[i][iv, iu]
        if z <= 0:
            return None
        intr = gt.intrinsics
        p_cam = np.array([
            (patch.u - intr.cx) / intr.fx * z,
            (patch.v - intr.cy) / intr.fy * z,
            z,
        ])
        pose_i = gt.poses[i]
        x_w = pose_i.inverse().apply(p_cam)
        pt = gt.owner[i][iv, iu]
        if pt >= 0:
            oi = gt.obj_of_point[pt]
            if oi >= 0:
                x_w = gt.objects[oi].transform_between(i, target, x_w[None])[0]
        x_j = gt.poses[target].apply(x_w)
        if x_j[2] <= Z_MIN:
            return None
        return np.array([
            intr.fx * x_j[0] / x_j[2] + intr.cx,
            intr.fy * x_j[1] / x_j[2] + intr.cy,
        ])

    def track_patches(self, patches, target_frame):
        spec = self.gt.spec
        intr = self.gt.intrinsics
        target = int(target_frame)
        noisy = spec.sigma_flow > 0.0 or spec.p_outlier > 0.0
        out = []
        for p in patches:
            geo = self._track_one(p, target)
            if geo is None:
                out.append(FlowObservation(
                    patch_id=p.patch_id, frame_i=p.frame_id, frame_j=target,
                    u=float("nan"), v=float("nan"), valid=False,
                ))
                continue
            u, v = float(geo[0]), float(geo[1])
            if noisy:
                rng = np.random.default_rng(
                    (self.seed, RNG_TAG_FLOW, int(p.frame_id), target,
                     int(p.patch_id))
                )
                n = rng.standard_normal(2)
                p_out = rng.random()
                uo = rng.random(2)
                u = float(u + spec.sigma_flow * n[0])
                v = float(v + spec.sigma_flow * n[1])
                if p_out < spec.p_outlier:
                    u = float(uo[0] * intr.width)
                    v = float(uo[1] * intr.height)
            valid = bool(0.0 <= u < intr.width and 0.0 <= v < intr.height)
            out.append(FlowObservation(
                patch_id=p.patch_id, frame_i=p.frame_id, frame_j=target,
                u=u, v=v, valid=valid,
            ))
        return out


# ---------------------------------------------------------------------------
# Export to the file-provider layout
# ---------------------------------------------------------------------------

def _would_be_patches(provider, frame_id, pipeline_cfg, masked):
    """The patch set a pipeline run would sample on this frame, or None."""
    depth, conf, mask = provider.base_rasters(frame_id)
    prior = PriorFrameData(frame_id=frame_id, depth=depth, confidence=conf,
                           motion_prob=mask, batch_id=-1)
    rng = sampling_rng(pipeline_cfg.seed, frame_id)
    s_d = pipeline_cfg.s_d if masked else None
    try:
        return sample_static_patches(
            prior, s_d, pipeline_cfg.patches_per_frame, rng,
            border_px=pipeline_cfg.border_px,
            id_start=patch_id_base(frame_id, pipeline_cfg.patches_per_frame,
                                   masked),
        )
    except Exception:
        return None


def export(gt, out_dir, provider=None, pipeline_cfg=None):
    """Write the provider file layout plus ground truth to out_dir.

    The flow tables are precomputed for every patch set a pipeline run with
    pipeline_cfg's sampling parameters could request (both masked and
    unmasked sampling, all frame pairs within the window horizon), so a
    FileProvider over the result replays the synthetic provider exactly.
    """
    from .pipeline import PipelineConfig

    if provider is None:
        provider = SyntheticProvider(gt)
    if pipeline_cfg is None:
        pipeline_cfg = PipelineConfig()

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "frames").mkdir(exist_ok=True)
    (out / "flows").mkdir(exist_ok=True)
    (out / "gt_depth").mkdir(exist_ok=True)

    n = gt.n_frames
    for f in range(n):
        depth, conf, mask = provider.base_rasters(f)
        d = out / "frames" / str(f)
        d.mkdir(exist_ok=True)
        write_raster(d / "depth.dpr", depth, "depth")
        write_raster(d / "confidence.prb", conf, "prob")
        write_raster(d / "motion.prb", mask, "prob")
        write_raster(out / "gt_depth" / f"{f}.dpr",
                     gt.depth[f].astype(np.float32), "depth")

    write_scales_file(out / "scales.txt", gt.batch_scales)
    write_tum(out / "gt_traj.tum",
              [frame_timestamp(f) for f in range(n)], gt.poses,
              comment="ground truth trajectory")

    # The oldest window keyframe can trail the current frame by the whole
    # bootstrap stretch plus a full window of maximum keyframe gaps, and
    # _add_keyframe tracks its patches into the new frame, so the flow
    # tables must reach that far.
    span = (pipeline_cfg.max_bootstrap_frames
            + pipeline_cfg.window_frames * pipeline_cfg.kf_max_gap)

    patch_sets = {}
    for f in range(n):
        sets = []
        for masked in (True, False):
            ps = _would_be_patches(provider, f, pipeline_cfg, masked)
            if ps:
                sets.extend(ps)
        patch_sets[f] = sets

    for i in range(n):
        if not patch_sets[i]:
            continue
        for j in range(max(0, i - span), min(n, i + span + 1)):
            if j == i:
                continue
            obs = provider.track_patches(patch_sets[i], j)
            lines = [
                f"{o.patch_id} {repr(float(o.u))} {repr(float(o.v))} "
                f"{1 if o.valid else 0}"
                for o in obs
            ]
            (out / "flows" / f"{i}_{j}.txt").write_text("\n".join(lines) + "\n")

    meta = {
        "intrinsics": {
            "fx": gt.intrinsics.fx, "fy": gt.intrinsics.fy,
            "cx": gt.intrinsics.cx, "cy": gt.intrinsics.cy,
            "width": gt.intrinsics.width, "height": gt.intrinsics.height,
        },
        "n_frames": n,
        "scene_seed": int(gt.spec.seed),
        "sampling": {
            "seed": int(pipeline_cfg.seed),
            "patches_per_frame": int(pipeline_cfg.patches_per_frame),
            "s_d": float(pipeline_cfg.s_d),
            "border_px": int(pipeline_cfg.border_px),
        },
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out
