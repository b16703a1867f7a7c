"""Small value types shared by most modules."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass
class DepthMap:
    """2-D depth grid in meters plus a per-pixel validity mask.

    Ground-truth maps may have holes (valid == False); predictions are dense.
    Invalid pixels carry the value 0.0 by convention (matches the PFM encoding).
    """

    values: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"depth map must be 2-D, got shape {self.values.shape}")
        if self.valid is None:
            self.valid = np.ones(self.values.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.values.shape:
            raise ShapeError("validity mask shape differs from depth shape")

    @property
    def shape(self):
        return self.values.shape

    def is_dense(self):
        return bool(self.valid.all())


@dataclass(frozen=True)
class PatchRoi:
    """Rectangular region (row, col, height, width) in full-resolution pixels."""

    row: int
    col: int
    height: int
    width: int

    def inside(self, image_h, image_w):
        return (
            self.row >= 0
            and self.col >= 0
            and self.height >= 1
            and self.width >= 1
            and self.row + self.height <= image_h
            and self.col + self.width <= image_w
        )

    def normalized(self, image_h, image_w):
        """(top, left, height, width) in [0,1] coordinates of the full image."""
        return (
            self.row / image_h,
            self.col / image_w,
            self.height / image_h,
            self.width / image_w,
        )

    def slices(self):
        return (
            slice(self.row, self.row + self.height),
            slice(self.col, self.col + self.width),
        )
