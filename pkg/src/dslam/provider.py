"""Prior data contracts: batch requests, raster I/O, and patch sampling.

A provider hands the pipeline, per requested batch of frames, a dense depth
raster, a confidence raster, and a motion-probability raster for each frame,
plus sparse patch tracks between frames on demand. Depth is metrically
consistent inside one batch but carries an arbitrary positive scale from
batch to batch; the pipeline aligns it online.

Two implementations exist: a synthetic provider backed by a generated scene
(see sim.py) and the FileProvider below, which replays a directory written
by the simulator's export.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NoStaticRegion, ProviderLookupError, RasterFormatError
from .geometry import CameraIntrinsics

# Fixed margin kept free of patches at the image border, in pixels.
BORDER_PX = 8

# Tags that key the independent random streams used across the package.
# Streams are derived as default_rng((seed, tag, ...)) so every draw is a
# pure function of its coordinates rather than of call order.
RNG_TAG_SAMPLE = 101
RNG_TAG_FLOW = 102
RNG_TAG_RASTER = 103
RNG_TAG_SCALE = 104
RNG_TAG_SCENE = 105


def sampling_rng(seed, frame_id):
    """Random stream for patch sampling on one frame."""
    return np.random.default_rng((int(seed), RNG_TAG_SAMPLE, int(frame_id)))


def patch_id_base(frame_id, patches_per_frame, masked):
    """First patch id for a frame's patch block.

    Masked and unmasked sampling draw different pixels, so each frame owns
    two disjoint id ranges; this keeps exported flow files valid for either
    sampling mode.
    """
    base = int(frame_id) * 2 * int(patches_per_frame)
    return base if masked else base + int(patches_per_frame)


# ---------------------------------------------------------------------------
# Data types
# ---------------------------------------------------------------------------

@dataclass
class PriorFrameData:
    """Dense priors for one frame inside one batch.

    Rasters are float32, shaped (height, width), row-major from the top-left
    pixel. Depth entries at or below zero mark invalid pixels.
    """

    frame_id: int
    depth: np.ndarray
    confidence: np.ndarray
    motion_prob: np.ndarray
    batch_id: int

    def __post_init__(self):
        if not (self.depth.shape == self.confidence.shape == self.motion_prob.shape):
            raise ValueError("prior rasters must share one shape")


@dataclass(frozen=True)
class PriorBatchRequest:
    frame_ids: tuple

    def __post_init__(self):
        if len(self.frame_ids) == 0:
            raise ValueError("a prior request needs at least one frame")


def as_request(frame_ids):
    """Coerce an id iterable (or a ready request) to a PriorBatchRequest."""
    if isinstance(frame_ids, PriorBatchRequest):
        return frame_ids
    return PriorBatchRequest(tuple(int(f) for f in frame_ids))


@dataclass
class PriorBatchResponse:
    """One provider answer; frames appear in request order."""

    batch_id: int
    frames: list

    def frame(self, frame_id):
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(frame_id)


@dataclass
class Patch:
    """A tracked point: one pixel in its host frame plus an inverse depth.

    inv_depth is optimizer state; prior_inv_depth is the scale-aligned prior
    sampled at creation; rel_depth_std is filled in after each bundle
    adjustment from the marginal depth covariance.
    """

    patch_id: int
    frame_id: int
    u: float
    v: float
    inv_depth: float
    prior_inv_depth: float
    rel_depth_std: float = 0.0


@dataclass
class FlowObservation:
    """Where a patch was found in another frame.

    valid is False when the track left the image or fell behind the camera;
    u and v are then not meaningful.
    """

    patch_id: int
    frame_i: int
    frame_j: int
    u: float
    v: float
    valid: bool


class PriorProvider:
    """Interface both providers implement."""

    @property
    def intrinsics(self) -> CameraIntrinsics:
        raise NotImplementedError

    def frame_ids(self):
        raise NotImplementedError

    def request_priors(self, frame_ids) -> PriorBatchResponse:
        raise NotImplementedError

    def track_patches(self, patches, target_frame):
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Raster container format
# ---------------------------------------------------------------------------

RASTER_MAGIC = {"depth": b"DPR1", "prob": b"PRB1"}
_MAGIC_TO_KIND = {v: k for k, v in RASTER_MAGIC.items()}
_HEADER = struct.Struct("<II")


def write_raster(path, data, kind):
    """Write a float32 raster with magic, little-endian size, and payload."""
    if kind not in RASTER_MAGIC:
        raise ValueError(f"unknown raster kind {kind!r}")
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("raster must be two dimensional")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC[kind])
        fh.write(_HEADER.pack(w, h))
        fh.write(arr.tobytes())


def read_raster(path, expect_kind=None):
    """Read a raster written by write_raster; returns (array, kind)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise RasterFormatError(f"{path}: truncated header")
    magic = blob[:4]
    kind = _MAGIC_TO_KIND.get(magic)
    if kind is None:
        raise RasterFormatError(f"{path}: unknown magic {magic!r}")
    if expect_kind is not None and kind != expect_kind:
        raise RasterFormatError(f"{path}: expected {expect_kind} raster, got {kind}")
    w, h = _HEADER.unpack_from(blob, 4)
    payload = blob[12:]
    if len(payload) != 4 * w * h:
        raise RasterFormatError(
            f"{path}: payload holds {len(payload)} bytes, header says {4 * w * h}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w).copy()
    return arr, kind


# ---------------------------------------------------------------------------
# Patch sampling
# ---------------------------------------------------------------------------

def eligible_pixels(prior, s_d, border_px=BORDER_PX):
    """Boolean mask of pixels a patch may be planted on.

    Requires valid depth and, when s_d is given, a motion probability
    strictly below it.
    """
    mask = prior.depth > 0
    if s_d is not None:
        mask &= prior.motion_prob < s_d
    b = int(border_px)
    if b > 0:
        mask[:b, :] = False
        mask[-b:, :] = False
        mask[:, :b] = False
        mask[:, -b:] = False
    return mask


def sample_static_patches(prior, s_d, count, rng, *, border_px=BORDER_PX,
                          id_start=0):
    """Draw patch centers uniformly, without replacement, from eligible pixels.

    Pass s_d=None to ignore the motion raster (used by the unmasked ablation
    mode). Returned patches are ordered by raster position and get ids
    id_start, id_start + 1, ...

    Raises NoStaticRegion when fewer than count pixels are eligible.
    """
    mask = eligible_pixels(prior, s_d, border_px)
    flat = np.flatnonzero(mask)
    if flat.size < count:
        raise NoStaticRegion(flat.size, count)
    sel = rng.choice(flat.size, size=count, replace=False)
    sel.sort()
    idx = flat[sel]
    h, w = prior.depth.shape
    vs, us = np.divmod(idx, w)
    patches = []
    for i, (u, v) in enumerate(zip(us, vs)):
        d = 1.0 / float(prior.depth[v, u])
        patches.append(Patch(
            patch_id=id_start + i,
            frame_id=prior.frame_id,
            u=float(u),
            v=float(v),
            inv_depth=d,
            prior_inv_depth=d,
        ))
    return patches


# ---------------------------------------------------------------------------
# File-backed provider
# ---------------------------------------------------------------------------

def read_scales_file(path):
    """Parse 'batch_id scale' lines into a dict."""
    table = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        bid, s = line.split()
        table[int(bid)] = float(s)
    return table


def write_scales_file(path, scales):
    lines = [f"{bid} {repr(float(s))}" for bid, s in enumerate(scales)]
    Path(path).write_text("\n".join(lines) + "\n")


def parse_flow_file(path):
    """Parse 'patch_id u v valid' lines into {patch_id: (u, v, valid)}."""
    table = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        pid, u, v, valid = line.split()
        table[int(pid)] = (float(u), float(v), valid == "1")
    return table


class FileProvider(PriorProvider):
    """Replays priors and tracks from an exported sequence directory.

    Layout::

        frames/<id>/depth.dpr        base depth raster
        frames/<id>/confidence.prb
        frames/<id>/motion.prb
        flows/<i>_<j>.txt            'patch_id u v valid' per line
        scales.txt                   per-batch scale schedule (optional)
        meta.json                    intrinsics and sampling parameters

    Observations and rasters are served verbatim; the only per-request
    computation is multiplying each depth raster by the recorded scale of
    the current batch, replaying the corruption schedule of the run that
    was exported.
    """

    def __init__(self, root):
        self.root = Path(root)
        frames_dir = self.root / "frames"
        if not frames_dir.is_dir():
            raise ProviderLookupError(f"{frames_dir} does not exist")
        meta_path = self.root / "meta.json"
        if not meta_path.is_file():
            raise ProviderLookupError(f"{meta_path} is required")
        self.meta = json.loads(meta_path.read_text())
        intr = self.meta["intrinsics"]
        self._intrinsics = CameraIntrinsics(
            fx=float(intr["fx"]), fy=float(intr["fy"]),
            cx=float(intr["cx"]), cy=float(intr["cy"]),
            width=int(intr["width"]), height=int(intr["height"]),
        )
        self._frame_ids = sorted(
            int(p.name) for p in frames_dir.iterdir() if p.name.isdigit()
        )
        scales_path = self.root / "scales.txt"
        self._scales = read_scales_file(scales_path) if scales_path.is_file() else {}
        self._batch_counter = 0
        self._raster_cache = {}
        self._flow_cache = {}

    @property
    def intrinsics(self):
        return self._intrinsics

    def frame_ids(self):
        return list(self._frame_ids)

    def _base_rasters(self, frame_id):
        if frame_id not in self._raster_cache:
            d = self.root / "frames" / str(frame_id)
            if not d.is_dir():
                raise ProviderLookupError(f"no priors for frame {frame_id}")
            depth, _ = read_raster(d / "depth.dpr", "depth")
            conf, _ = read_raster(d / "confidence.prb", "prob")
            motion, _ = read_raster(d / "motion.prb", "prob")
            self._raster_cache[frame_id] = (depth, conf, motion)
        return self._raster_cache[frame_id]

    def request_priors(self, frame_ids):
        request = as_request(frame_ids)
        batch_id = self._batch_counter
        self._batch_counter += 1
        scale = float(self._scales.get(batch_id, 1.0))
        frames = []
        for fid in request.frame_ids:
            depth, conf, motion = self._base_rasters(fid)
            frames.append(PriorFrameData(
                frame_id=fid,
                depth=depth * scale,
                confidence=conf.copy(),
                motion_prob=motion.copy(),
                batch_id=batch_id,
            ))
        return PriorBatchResponse(batch_id=batch_id, frames=frames)

    def _flow_table(self, i, j):
        key = (i, j)
        if key not in self._flow_cache:
            path = self.root / "flows" / f"{i}_{j}.txt"
            if not path.is_file():
                raise ProviderLookupError(f"no flow file for pair {i}->{j}")
            self._flow_cache[key] = parse_flow_file(path)
        return self._flow_cache[key]

    def track_patches(self, patches, target_frame):
        target = int(target_frame)
        out = []
        for p in patches:
            table = self._flow_table(p.frame_id, target)
            if p.patch_id not in table:
                raise ProviderLookupError(
                    f"patch {p.patch_id} missing from flow {p.frame_id}->{target}"
                )
            u, v, valid = table[p.patch_id]
            out.append(FlowObservation(
                patch_id=p.patch_id, frame_i=p.frame_id, frame_j=target,
                u=u, v=v, valid=valid,
            ))
        return out
