"""Disparity error measures: MSE x 100 and BadPix."""

from __future__ import annotations

import csv

import numpy as np

from .lightfield import DisparityMap


def _masked_error(pred: DisparityMap, gt: DisparityMap, mask=None) -> np.ndarray:
    if pred.values.shape != gt.values.shape:
        raise ValueError(f"shape mismatch: {pred.values.shape} vs {gt.values.shape}")
    m = pred.valid & gt.valid
    if mask is not None:
        m &= np.asarray(mask, bool)
    if not m.any():
        raise ValueError("empty evaluation mask")
    return (pred.values.astype(np.float64) - gt.values.astype(np.float64))[m]


def mse_x100(pred: DisparityMap, gt: DisparityMap, mask=None) -> float:
    err = _masked_error(pred, gt, mask)
    return float(100.0 * np.mean(err**2))


def badpix(pred: DisparityMap, gt: DisparityMap, mask=None, tau: float = 0.07) -> float:
    """Fraction of evaluated pixels with absolute error strictly above ``tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    err = _masked_error(pred, gt, mask)
    return float(np.mean(np.abs(err) > tau))


def badpix_image(pred: DisparityMap, gt: DisparityMap, mask=None, tau: float = 0.07) -> np.ndarray:
    """Boolean (H, W) map of bad pixels inside the evaluation mask."""
    m = pred.valid & gt.valid
    if mask is not None:
        m &= np.asarray(mask, bool)
    return m & (np.abs(pred.values.astype(np.float64) - gt.values) > tau)


def badpix_overlay(center_view: np.ndarray, bad: np.ndarray) -> np.ndarray:
    """Gray center view with bad pixels painted red."""
    gray = np.repeat(center_view.mean(axis=-1, keepdims=True), 3, axis=-1)
    out = 0.5 * gray
    out[bad] = (1.0, 0.0, 0.0)
    return out


def evaluate(pred: DisparityMap, gt: DisparityMap, mask=None, tau: float = 0.07) -> dict[str, float]:
    return {"mse_x100": mse_x100(pred, gt, mask), f"badpix_{tau:g}": badpix(pred, gt, mask, tau)}


def write_report(path, rows: dict[str, float]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        for key, value in rows.items():
            writer.writerow([key, f"{value:.6g}"])


def format_table(rows: dict[str, float]) -> str:
    width = max(len(k) for k in rows)
    return "\n".join(f"{k:<{width}}  {v:10.4f}" for k, v in rows.items())
