"""Tile-based residual depth refinement with teacher-student detail transfer.

Library layout:
  numerics   - float64 tensors with reverse-mode differentiation
  scenegen   - procedural image/depth/segmentation scenes + real-GT degradation
  model      - coarse depth network and the patch refiner
  tiling     - patch grids and seam-free assembly of patch predictions
  losses     - silog, ranking, scale-shift-invariant and combined objectives
  metrics    - scale metrics, soft edge error, edge P/R/F1, EDT, boundary errors
  pipeline   - teacher/coarse/student training stages and pseudo labels
  cli        - prkit command-line entry point
"""

__version__ = "0.1.0"
