"""Sweep -> per-shift network predictions -> fused disparity."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import torch

from .fusion import SweepVolumes, fuse, refine
from .lightfield import CrossStack, DisparityMap
from .network import EPIShiftNet, image_tensor, stack_tensor
from .shift import MAX_SWEEP, SweepRange, build_sweep

log = logging.getLogger(__name__)


def triple_index(shifts, s: int) -> tuple[int, int, int]:
    """Positions of (s-1, s, s+1) in ``shifts``, clamped at the sweep ends."""
    shifts = list(shifts)
    i = shifts.index(s)
    return max(i - 1, 0), i, min(i + 1, len(shifts) - 1)


def default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return os.cpu_count() or 1


@torch.no_grad()
def predict_volumes(net: EPIShiftNet, cross: CrossStack, sweep: SweepRange, max_shifts: int = MAX_SWEEP,
                    timings: list | None = None, workers: int | None = None) -> SweepVolumes:
    """Run the network once per shift of ``sweep`` and collect ``C``, ``R`` and masks.

    Shifts are spread over ``workers`` threads; results are joined in shift order,
    so the output does not depend on the worker count.
    """
    net.eval()
    stacks = build_sweep(cross, sweep, max_shifts)
    dtype = next(net.parameters()).dtype
    center = image_tensor(cross.center_view)[None].to(dtype)
    shifts = sweep.shifts
    workers = default_workers() if workers is None else max(1, int(workers))

    @torch.no_grad()  # grad mode is per thread
    def extract(st):
        t0 = time.perf_counter()
        h = stack_tensor(st.stack.horizontal)[None].to(dtype)
        v = stack_tensor(st.stack.vertical)[None].to(dtype)
        return net.extract(h, v), time.perf_counter() - t0

    with ThreadPoolExecutor(workers) as pool:
        extracted = list(pool.map(extract, stacks))
        feats = [f for f, _ in extracted]

        @torch.no_grad()
        def head(k):
            t0 = time.perf_counter()
            idx = triple_index(shifts, shifts[k])
            out = net.head(torch.cat([feats[i] for i in idx], dim=1), center)
            valid = np.logical_and.reduce([stacks[i].valid for i in idx])
            return out[0, 0].float().numpy(), out[0, 1].float().numpy(), valid, time.perf_counter() - t0

        results = list(pool.map(head, range(len(shifts))))

    for k, s in enumerate(shifts):
        elapsed = extracted[k][1] + results[k][3]
        if timings is not None:
            timings.append((s, elapsed))
        log.info("shift %d: forward pass %.3f s", s, elapsed)
    C, R, valid = (np.stack([r[j] for r in results]) for j in range(3))
    return SweepVolumes(tuple(shifts), C, R, valid)


def estimate_disparity(net: EPIShiftNet, cross: CrossStack, sweep: SweepRange,
                       refine_params: tuple[float, int] | None = None, **kwargs) -> DisparityMap:
    vol = predict_volumes(net, cross, sweep, **kwargs)
    if refine_params is not None:
        vol = refine(vol, *refine_params)
    return fuse(vol)
