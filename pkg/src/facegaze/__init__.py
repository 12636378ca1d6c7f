"""facegaze: full-face appearance-based gaze estimation.

Camera-space image normalization, a from-scratch spatial-weights CNN for
2D/3D gaze regression, synthetic desk-scale datasets with exact ground
truth, cross-subject evaluation, and occlusion-based region-importance
analysis.
"""

__version__ = "0.1.0"
