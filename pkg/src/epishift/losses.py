"""Classification/regression targets per shift and the training losses.

Sums run over (shift, y, x) and are divided by the number of unmasked
entries, so the loss scale does not depend on patch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

RECTANGLE = "rectangle"
TRIANGLE = "triangle"


@dataclass(frozen=True)
class TargetSpec:
    kind: str = RECTANGLE
    eps_class: float = 0.17
    eps_reg: float = 0.25
    alpha: float = 2.5
    weight_floor: float = 0.0

    def __post_init__(self):
        if self.kind not in (RECTANGLE, TRIANGLE):
            raise ValueError(f"unknown target kind {self.kind!r}")
        if self.eps_class < 0:
            raise ValueError("eps_class must be >= 0")
        if self.eps_reg < self.eps_class:
            raise ValueError("eps_reg must not be smaller than eps_class")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.weight_floor < 0:
            raise ValueError("weight_floor must be >= 0")


def _tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))


def _offsets(gt, s) -> torch.Tensor:
    """|D* - s|; ``s`` may be a scalar or a tensor broadcastable against ``gt``."""
    gt = _tensor(gt)
    return (gt - _tensor(s).to(gt.dtype)).abs()


def rect_target(gt, s, eps: float) -> torch.Tensor:
    gt = _tensor(gt)
    return (_offsets(gt, s) <= 0.5 + eps).to(gt.dtype if gt.is_floating_point() else torch.float32)


def tri_target(gt, s, eps: float) -> torch.Tensor:
    return torch.clamp(0.5 + eps - _offsets(gt, s), min=0.0)


def class_target(gt, s, spec: TargetSpec) -> torch.Tensor:
    if spec.kind == RECTANGLE:
        return rect_target(gt, s, spec.eps_class)
    return tri_target(gt, s, spec.eps_class)


@dataclass
class ShiftTargets:
    """Per-shift targets, each of shape (S, H, W)."""

    c_star: torch.Tensor
    r_star: torch.Tensor
    r_mask: torch.Tensor
    loss_mask: torch.Tensor


def make_targets(gt, gt_valid, shifts, spec: TargetSpec, pad_valid=None) -> ShiftTargets:
    """Targets for ``shifts`` against ground truth ``gt`` (H, W).

    ``pad_valid`` is the (S, H, W) mask of pixels untouched by shift padding.
    """
    gt = _tensor(gt)
    if not gt.is_floating_point():
        gt = gt.float()
    s = torch.as_tensor(np.asarray(shifts), dtype=gt.dtype).view(-1, 1, 1)
    gt_valid = _tensor(gt_valid).bool()
    loss_mask = gt_valid.expand(s.shape[0], *gt.shape).clone()
    if pad_valid is not None:
        loss_mask &= _tensor(pad_valid).bool()
    c_star = class_target(gt, s, spec) * loss_mask
    r_mask = rect_target(gt, s, spec.eps_reg).bool() & loss_mask
    r_star = (gt - s) * r_mask
    return ShiftTargets(c_star, r_star, r_mask, loss_mask)


def _check_shapes(*tensors):
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def _mean_over(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    count = mask.sum()
    if count == 0:
        return values.sum() * 0.0
    return (values * mask).sum() / count


def disp_weight(pred, gt, floor: float = 0.0) -> torch.Tensor:
    """Squared error of the fused disparity, a constant weight (no gradient)."""
    pred, gt = _tensor(pred), _tensor(gt)
    return ((pred.detach() - gt) ** 2 + floor).detach()


def class_loss(C, C_star, w_disp, loss_mask) -> torch.Tensor:
    C, C_star = _tensor(C), _tensor(C_star)
    mask = _tensor(loss_mask).to(C.dtype)
    _check_shapes(C, C_star, torch.broadcast_to(mask, C.shape))
    return _mean_over((C - C_star) ** 2 * _tensor(w_disp).to(C.dtype), mask.expand_as(C))


def reg_loss(R, gt, shifts, rect_gate, loss_mask) -> torch.Tensor:
    R = _tensor(R)
    gt = _tensor(gt).to(R.dtype)
    s = torch.as_tensor(np.asarray(shifts), dtype=R.dtype).view(-1, 1, 1)
    gate = _tensor(rect_gate).to(R.dtype)
    mask = _tensor(loss_mask).to(R.dtype)
    _check_shapes(R, gate)
    return _mean_over((R - gt + s).abs() * gate, mask.expand_as(R))


def total_loss(l_reg, l_class, alpha: float = 2.5):
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return alpha * l_reg + l_class
