"""Container for 2D landmark observations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch


@dataclass(eq=False)
class LandmarkSet:
    """2D landmarks in normalized image coordinates ([0, 1] x [0, 1]).

    Attributes:
        points: (N, 2) float array; finite, but allowed to leave the unit
            square (a detector may place points slightly off-frame).
        visibility: (N,) bool array; invisible landmarks are ignored by
            losses and alignment.
        sigma: (N,) positive per-landmark uncertainty in normalized units.
            On observed sets this is the detector confidence used only to
            initialize the optimized uncertainties.
    """

    points: np.ndarray
    visibility: np.ndarray = None
    sigma: np.ndarray = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise DimensionMismatch(f"points must be (N, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DimensionMismatch("landmark coordinates must be finite")
        n = pts.shape[0]
        vis = self.visibility
        vis = np.ones(n, dtype=bool) if vis is None else np.asarray(vis, dtype=bool)
        if vis.shape != (n,):
            raise DimensionMismatch(f"visibility must be ({n},), got {vis.shape}")
        sig = self.sigma
        sig = np.full(n, 0.01) if sig is None else np.asarray(sig, dtype=float)
        if sig.shape == ():
            sig = np.full(n, float(sig))
        if sig.shape != (n,):
            raise DimensionMismatch(f"sigma must be ({n},), got {sig.shape}")
        if not np.all(sig > 0.0):
            raise DimensionMismatch("sigma must be positive")
        self.points = pts
        self.visibility = vis
        self.sigma = sig

    @property
    def n(self):
        return self.points.shape[0]

    def to_pixels(self, width, height):
        """Scale normalized coordinates to pixels for a width x height image."""
        return self.points * np.array([float(width), float(height)])

    @classmethod
    def from_pixels(cls, points_px, width, height, visibility=None, sigma=None):
        pts = np.asarray(points_px, dtype=float) / np.array(
            [float(width), float(height)])
        return cls(pts, visibility, sigma)
