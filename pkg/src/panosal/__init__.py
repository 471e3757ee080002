"""panosal: salient-object detection on equirectangular 360° panoramas.

numpy implementation with numba-accelerated hot kernels (fold/unfold and
deformable sampling), trained end to end with hand-written backprop.
"""

__version__ = "0.1.0"

from .kernels import BACKEND_NAME

__all__ = ["BACKEND_NAME", "__version__"]
