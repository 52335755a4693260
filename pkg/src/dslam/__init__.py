"""Sliding-window patch bundle adjustment for dynamic scenes.

The package couples a patch-based bundle adjustment backend with dense
depth, confidence, and motion-probability priors supplied per batch by an
external provider. Moving regions are kept out of the patch set, prior
depths are aligned to the current map scale online, and per-frame prior
weights are derived from marginal depth uncertainties.
"""

__version__ = "0.1.0"

from .errors import DslamError
from .geometry import CameraIntrinsics, Pixel, Se3Pose

__all__ = [
    "CameraIntrinsics",
    "DslamError",
    "Pixel",
    "Se3Pose",
    "__version__",
]
