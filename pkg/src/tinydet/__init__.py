"""tinydet: a desk-scale single-shot object detection training toolkit.

Implements three training improvements over a plain dense-anchor
detector on top of a from-scratch tensor engine: best-match anchor
assignment for otherwise-unmatchable ground truths, a smooth L1
regression loss whose control point self-adjusts from running residual
statistics, and a training-time instance mask head fed by pyramid-level
ROI features. Includes synthetic data generation, COCO-style AP
evaluation, and an ablation runner.
"""

__version__ = "0.1.0"

from ._kernels import BACKEND as kernel_backend  # noqa: F401
