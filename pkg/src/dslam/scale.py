"""Robust alignment of prior depth to the optimizer's scale.

Each batch of prior depth arrives at an arbitrary (and possibly drifting)
scale. We estimate one multiplier s per keyframe such that the optimized
inverse depths d satisfy d ~ s * d_hat against the sampled prior inverse
depths d_hat, then multiply the prior side by s before it is used as
evidence. Estimation is confidence-weighted IRLS under a Huber loss whose
width tracks the median absolute deviation of the current residuals, seeded
by a weighted median of the per-sample ratios.

Samples with poorly constrained optimized depths are excluded up front: a
patch only votes when its relative depth standard deviation is at or below
the gate threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EstimateFailed, InsufficientSamples

MAD_SCALE = 1.345
DELTA_FLOOR = 1e-12


@dataclass
class ScaleEstimate:
    s: float
    n_used: int
    n_iters: int
    converged: bool


def weighted_median(values, weights):
    """Smallest value whose cumulative normalized weight reaches one half."""
    v = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    keep = np.isfinite(v) & np.isfinite(w) & (w > 0)
    v, w = v[keep], w[keep]
    if v.size == 0:
        raise InsufficientSamples("weighted median of nothing")
    order = np.argsort(v, kind="stable")
    v, w = v[order], w[order]
    cum = np.cumsum(w) / w.sum()
    return float(v[np.searchsorted(cum, 0.5)])


def gate_scale_samples(inv_depths, prior_inv_depths, confidences,
                       rel_stds=None, t_sigma=0.5, min_samples=10):
    """Boolean mask of patches allowed to vote on the scale.

    Requires finite positive depths on both sides and positive confidence;
    when rel_stds is given, additionally requires the optimized depth to be
    constrained to within t_sigma relative.
    """
    d = np.asarray(inv_depths, dtype=np.float64)
    dh = np.asarray(prior_inv_depths, dtype=np.float64)
    c = np.asarray(confidences, dtype=np.float64)
    keep = (
        np.isfinite(d) & (d > 0)
        & np.isfinite(dh) & (dh > 0)
        & np.isfinite(c) & (c > 0)
    )
    if rel_stds is not None:
        s = np.asarray(rel_stds, dtype=np.float64)
        keep &= np.isfinite(s) & (s <= t_sigma)
    if int(keep.sum()) < min_samples:
        raise InsufficientSamples(
            f"{int(keep.sum())} scale samples after gating, "
            f"need {min_samples}"
        )
    return keep


def estimate_scale_irls(inv_depths, prior_inv_depths, confidences,
                        max_iters=100, tol=1e-10):
    """IRLS fixed point of the confidence-weighted Huber fit d ~ s * d_hat.

    The Huber width is retied to the residual MAD every iteration. Raises
    EstimateFailed if the iteration leaves the positive reals.
    """
    d = np.asarray(inv_depths, dtype=np.float64)
    dh = np.asarray(prior_inv_depths, dtype=np.float64)
    c = np.asarray(confidences, dtype=np.float64)

    s = weighted_median(d / dh, c)
    if not np.isfinite(s) or s <= 0.0:
        raise EstimateFailed(f"initial scale {s} is not positive")

    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        r = d - s * dh
        mad = np.median(np.abs(r - np.median(r)))
        delta = max(MAD_SCALE * float(mad), DELTA_FLOOR)
        a = np.abs(r)
        omega = np.where(a > delta, delta / np.where(a > 0, a, 1.0), 1.0)
        den = float((omega * c * dh * dh).sum())
        if not np.isfinite(den) or den <= 0.0:
            raise EstimateFailed("degenerate weighted system")
        s_new = float((omega * c * d * dh).sum()) / den
        if not np.isfinite(s_new) or s_new <= 0.0:
            raise EstimateFailed(f"scale iterate left (0, inf): {s_new}")
        done = abs(s_new - s) <= tol * max(abs(s_new), 1e-300)
        s = s_new
        if done:
            converged = True
            break
    return ScaleEstimate(s=s, n_used=int(d.size), n_iters=it,
                         converged=converged)


def estimate_scale(inv_depths, prior_inv_depths, confidences, rel_stds=None,
                   t_sigma=0.5, min_samples=10, max_iters=100, tol=1e-10):
    """Gate then fit; the one-call form used by the pipeline."""
    keep = gate_scale_samples(inv_depths, prior_inv_depths, confidences,
                              rel_stds, t_sigma, min_samples)
    d = np.asarray(inv_depths, dtype=np.float64)[keep]
    dh = np.asarray(prior_inv_depths, dtype=np.float64)[keep]
    c = np.asarray(confidences, dtype=np.float64)[keep]
    est = estimate_scale_irls(d, dh, c, max_iters=max_iters, tol=tol)
    est.n_used = int(keep.sum())
    return est


def align_depth_raster(depth, s):
    """Bring a prior depth raster to the optimizer's scale.

    Inverse depths scale as d_hat -> s * d_hat, so metric depth divides by
    s. Non-positive entries mark invalid pixels and stay untouched.
    """
    out = np.array(depth, dtype=np.float64, copy=True)
    pos = out > 0
    out[pos] = out[pos] / s
    return out
