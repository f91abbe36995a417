"""Kernel backend selection.

The compiled extension is preferred when it imports cleanly; the NumPy
module is a drop-in fallback. ``GROUPVEC_KERNELS=py`` or ``=c`` forces a
backend (``c`` raises if the extension is unavailable).
"""

import os

from . import pykernels

_forced = os.environ.get("GROUPVEC_KERNELS", "").strip().lower()

if _forced == "py":
    kernels = pykernels
else:
    try:
        from . import ckernels as kernels  # type: ignore[no-redef]
    except ImportError:
        if _forced == "c":
            raise
        kernels = pykernels

BACKEND_NAME = "c" if kernels.__name__.endswith("ckernels") else "py"

cross_sqdist = kernels.cross_sqdist
pairwise_dist = kernels.pairwise_dist
pairwise_dist_grad = kernels.pairwise_dist_grad
assign_nearest = kernels.assign_nearest
topk_smallest = kernels.topk_smallest
