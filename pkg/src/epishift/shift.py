"""EPI-Shift: integer skew of view stacks and plane-sweep construction.

Sign convention (used everywhere in the package): the center camera has
u = 0, positive u lies to the right, and the shift by ``s`` reads

    out(u, x, y) = in(u, clamp(x - u*s, 0, W-1), y)

so a fronto-parallel plane at disparity ``d`` is aligned across all views at
``s = d``. Vertical stacks are rotated by +90 degrees (``np.rot90``), which maps
a y-displacement onto an x-displacement of the same sign, shifted the same
way and rotated back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lightfield import CrossStack

MAX_SWEEP = 64


def _check_shift(s) -> int:
    if int(s) != s:
        raise ValueError(f"EPI-Shift is defined for integer shifts only, got {s}")
    return int(s)


def shift_horizontal(stack: np.ndarray, s: int, center: int | None = None):
    """Skew a stack ``(U, H, W, ...)`` indexed by u.

    Returns the shifted stack (a new array) and the ``(H, W)`` validity mask,
    false wherever any view had to read a clipped coordinate.
    """
    s = _check_shift(s)
    n, h, w = stack.shape[:3]
    if center is None:
        center = n // 2
    offsets = (np.arange(n) - center) * s
    cols = np.arange(w)[None, :] - offsets[:, None]
    index = np.clip(cols, 0, w - 1)
    out = np.empty_like(stack)
    for i in range(n):
        out[i] = stack[i][:, index[i]]
    lo, hi = max(offsets.max(), 0), w - 1 + min(offsets.min(), 0)
    valid = np.zeros((h, w), bool)
    if lo <= hi:
        valid[:, lo:hi + 1] = True
    return out, valid


def rotate_for_vertical(stack: np.ndarray) -> np.ndarray:
    """Rotate each view of a v-indexed stack so that y-parallax becomes x-parallax."""
    return np.rot90(stack, k=1, axes=(1, 2))


def unrotate_for_vertical(stack: np.ndarray) -> np.ndarray:
    return np.rot90(stack, k=-1, axes=(1, 2))


def shift_vertical(stack: np.ndarray, s: int, center: int | None = None):
    shifted, valid = shift_horizontal(rotate_for_vertical(stack), s, center)
    return np.ascontiguousarray(unrotate_for_vertical(shifted)), np.ascontiguousarray(np.rot90(valid, k=-1))


@dataclass(frozen=True)
class ShiftedStack:
    stack: CrossStack
    shift: int
    valid: np.ndarray


def shift_cross(cross: CrossStack, s: int) -> ShiftedStack:
    """Shift both stacks of a cross; the mask is the intersection of both."""
    h, valid_h = shift_horizontal(cross.horizontal, s, cross.center_u)
    v, valid_v = shift_vertical(cross.vertical, s, cross.center_v)
    return ShiftedStack(CrossStack(h, v, cross.center_u, cross.center_v), int(s), valid_h & valid_v)


@dataclass(frozen=True)
class SweepRange:
    s_min: int
    s_max: int

    def __post_init__(self):
        if int(self.s_min) != self.s_min or int(self.s_max) != self.s_max:
            raise ValueError("sweep bounds must be integers")
        if self.s_min > self.s_max:
            raise ValueError(f"empty sweep range [{self.s_min}, {self.s_max}]")

    @classmethod
    def from_disparity(cls, disp_min: float, disp_max: float) -> "SweepRange":
        return cls(math.floor(disp_min), math.ceil(disp_max))

    @property
    def shifts(self) -> list[int]:
        return list(range(self.s_min, self.s_max + 1))

    def __len__(self):
        return self.s_max - self.s_min + 1


def build_sweep(cross: CrossStack, sweep: SweepRange, max_shifts: int = MAX_SWEEP) -> list[ShiftedStack]:
    if len(sweep) > max_shifts:
        raise ValueError(f"sweep of {len(sweep)} shifts exceeds the cap of {max_shifts}")
    return [shift_cross(cross, s) for s in sweep.shifts]
