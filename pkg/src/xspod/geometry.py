"""Cone-beam acquisition geometry.

Frame: the rotation axis is the z axis through the origin, the source sits at
``(-sod, 0, 0)`` and the flat detector is the plane ``x = sdd - sod``.  Detector
columns run along +y, rows run along -z (row 0 is the top of the image).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class AcquisitionGeometry:
    sod: float = 200.0
    sdd: float = 300.0
    det_width: float = 75.0
    det_height: float = 82.5
    pixel_pitch: float = 0.3
    n_cols: int = 250
    n_rows: int = 275

    def __post_init__(self):
        if not 0 < self.sod < self.sdd:
            raise ValueError(f"need 0 < sod < sdd, got sod={self.sod}, sdd={self.sdd}")
        if self.pixel_pitch <= 0 or self.det_width <= 0 or self.det_height <= 0:
            raise ValueError("detector dimensions and pitch must be positive")
        if self.n_cols < 1 or self.n_rows < 1:
            raise ValueError("detector needs at least one pixel")
        if abs(self.n_cols * self.pixel_pitch - self.det_width) > self.pixel_pitch:
            raise ValueError("n_cols * pixel_pitch must match det_width within one pitch")
        if abs(self.n_rows * self.pixel_pitch - self.det_height) > self.pixel_pitch:
            raise ValueError("n_rows * pixel_pitch must match det_height within one pitch")

    @classmethod
    def from_detector(cls, sod, sdd, det_width, det_height, pixel_pitch):
        """Derive pixel counts from the detector size."""
        return cls(
            sod=sod,
            sdd=sdd,
            det_width=det_width,
            det_height=det_height,
            pixel_pitch=pixel_pitch,
            n_cols=int(round(det_width / pixel_pitch)),
            n_rows=int(round(det_height / pixel_pitch)),
        )

    @property
    def magnification(self) -> float:
        return self.sdd / self.sod

    @property
    def source(self) -> np.ndarray:
        return np.array([-self.sod, 0.0, 0.0])

    @property
    def detector_x(self) -> float:
        return self.sdd - self.sod

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(y, z) coordinates of pixel centers, each shaped (n_rows, n_cols)."""
        y = (np.arange(self.n_cols) + 0.5) * self.pixel_pitch - 0.5 * self.det_width
        z = 0.5 * self.det_height - (np.arange(self.n_rows) + 0.5) * self.pixel_pitch
        return np.meshgrid(y, z)

    def as_array(self) -> np.ndarray:
        """Packed float64 parameters for the jitted kernels."""
        return np.array(
            [self.sod, self.sdd, self.det_width, self.det_height, self.pixel_pitch,
             self.n_cols, self.n_rows],
            dtype=np.float64,
        )

    def to_dict(self) -> dict:
        return asdict(self)
