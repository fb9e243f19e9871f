"""Argmax + offset fusion of per-shift predictions and median refinement."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import median_filter

from .lightfield import DisparityMap


@dataclass(frozen=True)
class SweepVolumes:
    """Per-shift classification ``C``, regression ``R`` and validity, each (S, H, W)."""

    shifts: tuple[int, ...]
    C: np.ndarray
    R: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shifts", tuple(int(s) for s in self.shifts))
        if not self.shifts:
            raise ValueError("empty sweep volume")
        if any(b <= a for a, b in zip(self.shifts, self.shifts[1:])):
            raise ValueError("shifts must be strictly increasing")
        shape = (len(self.shifts),) + np.shape(self.C)[1:]
        for name in ("C", "R", "valid"):
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")


def fuse(vol: SweepVolumes) -> DisparityMap:
    """``D = l + R_l`` with ``l`` the shift of maximal ``C``; ties go to the smallest shift."""
    label = np.argmax(vol.C, axis=0)  # first maximum == smallest shift
    shifts = np.asarray(vol.shifts, dtype=np.float32)
    offset = np.take_along_axis(vol.R, label[None], axis=0)[0]
    valid = np.take_along_axis(vol.valid, label[None], axis=0)[0]
    return DisparityMap(np.where(valid, shifts[label] + offset, 0.0).astype(np.float32), valid)


def refine(vol: SweepVolumes, t: float = 0.01, k: int = 3) -> SweepVolumes:
    """Replace ``C`` at pixels where no shift reaches ``t`` by the k x k median
    of each original classification map. ``R`` is left untouched."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"median kernel size must be odd, got {k}")
    low = np.max(vol.C, axis=0) < t
    if not low.any():
        return vol
    medians = median_filter(vol.C, size=(1, k, k), mode="nearest")
    return replace(vol, C=np.where(low[None], medians, vol.C))
