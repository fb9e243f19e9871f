"""Augmentation, batch assembly and the two-phase Adam schedule."""

from __future__ import annotations

import csv
import json
import logging
import os
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import zoom

from .lightfield import CrossStack, DisparityMap, LightField4D, extract_cross, load_tensor, save_tensor
from .losses import TargetSpec, class_loss, disp_weight, make_targets, reg_loss, total_loss
from .network import EPIShiftNet, NetConfig, image_tensor, init_params, load_checkpoint, save_checkpoint, stack_tensor
from .pipeline import triple_index
from .shift import SweepRange, shift_cross

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    color: bool = True
    brightness: float = 0.1  # max additive offset
    contrast: float = 0.2  # max relative change
    rotate: bool = True
    scale_range: tuple[float, float] = (0.5, 1.0)

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls(color=False, brightness=0.0, contrast=0.0, rotate=False, scale_range=(1.0, 1.0))


@dataclass(frozen=True)
class TrainConfig:
    lr_phase1: float = 1e-4
    iters_phase1: int = 10000
    lr_phase2: float = 1e-5
    iters_phase2: int = 30000
    patch: int = 225
    shifts_per_batch: int = 7
    seed: int = 0
    target_spec: TargetSpec = field(default_factory=TargetSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    prefetch: int = 2  # batches assembled ahead of the optimizer; 0 disables the worker thread

    @property
    def iterations(self) -> int:
        return self.iters_phase1 + self.iters_phase2

    def __post_init__(self):
        if min(self.lr_phase1, self.lr_phase2) < 0:
            raise ValueError("learning rates must be non-negative")
        if min(self.iters_phase1, self.iters_phase2) < 0 or self.patch < 1 or self.shifts_per_batch < 1:
            raise ValueError("iteration counts, patch and batch size must be positive")


@dataclass(frozen=True)
class Scene:
    cross: CrossStack
    gt: DisparityMap
    sweep: SweepRange

    @classmethod
    def from_lightfield(cls, lf: LightField4D, gt: DisparityMap) -> "Scene":
        return cls(extract_cross(lf), gt, SweepRange.from_disparity(lf.disp_min, lf.disp_max))


# ---------------------------------------------------------------------------
# Augmentation


def rotate90(cross: CrossStack, gt: DisparityMap) -> tuple[CrossStack, DisparityMap]:
    """Rotate the scene by +90 degrees.

    Horizontal parallax turns into vertical parallax with reversed view order,
    vertical parallax into horizontal parallax with the same order.
    """
    rot = lambda a: np.ascontiguousarray(np.rot90(a, 1, axes=(1, 2)))
    h = rot(cross.vertical)
    v = rot(cross.horizontal)[::-1]
    cu, cv = cross.center_v, cross.horizontal.shape[0] - 1 - cross.center_u
    g = DisparityMap(np.rot90(gt.values).copy(), np.rot90(gt.valid).copy())
    return CrossStack(h, np.ascontiguousarray(v), cu, cv), g


def _remap_colors(stack: np.ndarray, matrix: np.ndarray, gain: float, offset: float) -> np.ndarray:
    out = stack @ matrix.T.astype(np.float32)
    out = (out - 0.5) * gain + 0.5 + offset
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _rescale(cross: CrossStack, gt: DisparityMap, k: float):
    h, w = cross.shape
    nh, nw = max(1, round(h * k)), max(1, round(w * k))
    fac = (nh / h, nw / w)

    def resample(stack):
        return np.clip(zoom(stack, (1,) + fac + (1,), order=1, mode="nearest", grid_mode=True), 0, 1).astype(np.float32)

    values = zoom(gt.values, fac, order=0, mode="nearest", grid_mode=True) * np.float32(k)
    valid = zoom(gt.valid.astype(np.uint8), fac, order=0, mode="nearest", grid_mode=True).astype(bool)
    return (CrossStack(resample(cross.horizontal), resample(cross.vertical), cross.center_u, cross.center_v),
            DisparityMap(values, valid))


def crop(cross: CrossStack, gt: DisparityMap, patch: int, rng: np.random.Generator):
    h, w = cross.shape
    if patch > h or patch > w:
        raise ValueError(f"crop of {patch} px exceeds image of {h}x{w}")
    y = int(rng.integers(0, h - patch + 1))
    x = int(rng.integers(0, w - patch + 1))
    sl = (slice(y, y + patch), slice(x, x + patch))
    sub = lambda a: np.ascontiguousarray(a[:, sl[0], sl[1]])
    return (CrossStack(sub(cross.horizontal), sub(cross.vertical), cross.center_u, cross.center_v),
            DisparityMap(gt.values[sl], gt.valid[sl]))


def augment(cross: CrossStack, gt: DisparityMap, rng: np.random.Generator,
            config: AugmentConfig = AugmentConfig(), patch: int | None = None):
    """Random color remix, brightness/contrast, 90-degree rotation, rescale and crop.

    Disparities are scaled along with the image; color changes leave them alone.
    """
    if config.color or config.brightness or config.contrast:
        matrix = np.eye(3)
        if config.color:
            perm = np.eye(3)[rng.permutation(3)]
            mix = rng.dirichlet(np.ones(3), size=3)
            lam = rng.uniform(0.0, 0.3)
            matrix = (1 - lam) * perm + lam * mix
        gain = 1.0 + rng.uniform(-config.contrast, config.contrast)
        offset = rng.uniform(-config.brightness, config.brightness)
        cross = CrossStack(_remap_colors(cross.horizontal, matrix, gain, offset),
                           _remap_colors(cross.vertical, matrix, gain, offset),
                           cross.center_u, cross.center_v)
    if config.rotate:
        for _ in range(int(rng.integers(0, 4))):
            cross, gt = rotate90(cross, gt)
    lo, hi = config.scale_range
    if (lo, hi) != (1.0, 1.0):
        k = float(rng.uniform(lo, hi))
        if patch is not None:
            k = max(k, patch / min(cross.shape))
        if k != 1.0:
            cross, gt = _rescale(cross, gt, k)
    if patch is not None:
        cross, gt = crop(cross, gt, patch, rng)
    return cross, gt


# ---------------------------------------------------------------------------
# Batches


@dataclass
class Batch:
    shifts: list[int]  # one per sample, may repeat
    stack_shifts: list[int]  # distinct shifts whose stacks are fed through the extractor
    horizontal: torch.Tensor  # (K, 3U, H, W)
    vertical: torch.Tensor
    index: torch.Tensor  # (N, 3) rows into the K stacks: s-1, s, s+1
    center: torch.Tensor  # (3, H, W)
    gt: torch.Tensor  # (H, W)
    targets: object  # ShiftTargets over ``shifts``

    @property
    def channels(self) -> int:
        """Stack slots in the batch: one per sampled shift and orientation, each an RGB image stack."""
        return len(self.shifts) * 2 * 3


def sample_shifts(sweep: SweepRange, gt: DisparityMap, count: int, eps: float, rng: np.random.Generator) -> list[int]:
    """Draw ``count`` shifts, every shift at least once when the range allows,
    the rest biased toward shifts with non-empty targets."""
    shifts = np.asarray(sweep.shifts)
    values = gt.values[gt.valid]
    hits = np.array([np.count_nonzero(np.abs(values - s) <= 0.5 + eps) for s in shifts], float)
    weights = hits + 0.05 * max(hits.sum(), 1.0) / len(shifts)
    weights /= weights.sum()
    if len(shifts) <= count:
        chosen = list(shifts) + list(rng.choice(shifts, size=count - len(shifts), p=weights))
    else:
        chosen = list(rng.choice(shifts, size=count, replace=False, p=weights))
    return sorted(int(s) for s in chosen)


def make_batch(cross: CrossStack, gt: DisparityMap, sweep: SweepRange, config: TrainConfig,
               rng: np.random.Generator, dtype=torch.float32) -> Batch:
    if not gt.valid.any():
        raise ValueError("no supervised pixels: ground truth is invalid everywhere")
    shifts = sample_shifts(sweep, gt, config.shifts_per_batch, config.target_spec.eps_class, rng)
    all_shifts = sweep.shifts
    needed = sorted({all_shifts[i] for s in set(shifts) for i in triple_index(all_shifts, s)})
    stacks = {s: shift_cross(cross, s) for s in needed}
    pos = {s: i for i, s in enumerate(needed)}
    index = torch.tensor([[pos[all_shifts[i]] for i in triple_index(all_shifts, s)] for s in shifts])
    pad_valid = np.stack([
        np.logical_and.reduce([stacks[all_shifts[i]].valid for i in triple_index(all_shifts, s)]) for s in shifts
    ])
    targets = make_targets(gt.values, gt.valid, shifts, config.target_spec, pad_valid)
    if not targets.loss_mask.any():
        raise ValueError("no supervised pixels left after padding")
    return Batch(
        shifts=shifts,
        stack_shifts=needed,
        horizontal=torch.stack([stack_tensor(stacks[s].stack.horizontal) for s in needed]).to(dtype),
        vertical=torch.stack([stack_tensor(stacks[s].stack.vertical) for s in needed]).to(dtype),
        index=index,
        center=image_tensor(cross.center_view).to(dtype),
        gt=torch.from_numpy(gt.values.copy()),
        targets=targets,
    )


def forward_batch(net: EPIShiftNet, batch: Batch):
    feats = net.extract(batch.horizontal, batch.vertical)
    n = batch.index.shape[0]
    gathered = feats[batch.index.flatten()].view(n, -1, *feats.shape[2:])
    out = net.head(gathered, batch.center.expand(n, -1, -1, -1))
    return out[:, 0], out[:, 1]


def fused_prediction(C: torch.Tensor, R: torch.Tensor, shifts) -> torch.Tensor:
    """Argmax + offset over the distinct shifts of a batch (no gradient)."""
    C, R = C.detach(), R.detach()
    s = torch.as_tensor(shifts, dtype=C.dtype).view(-1, 1, 1)
    label = torch.argmax(C, dim=0, keepdim=True)
    return (torch.gather(s.expand_as(C), 0, label) + torch.gather(R, 0, label))[0]


def batch_losses(net: EPIShiftNet, batch: Batch, spec: TargetSpec):
    C, R = forward_batch(net, batch)
    t = batch.targets
    D = fused_prediction(C, R, batch.shifts)
    w = disp_weight(D, batch.gt.to(C.dtype), spec.weight_floor)
    l_class = class_loss(C, t.c_star.to(C.dtype), w, t.loss_mask)
    l_reg = reg_loss(R, batch.gt.to(C.dtype), batch.shifts, t.r_mask, t.loss_mask)
    return l_class, l_reg, total_loss(l_reg, l_class, spec.alpha)


# ---------------------------------------------------------------------------
# Training loop


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    """Each iteration draws from its own stream, so a resumed run replays exactly."""
    return np.random.default_rng([seed, iteration])


def assemble(scenes: list[Scene], config: TrainConfig, it: int) -> Batch:
    rng = iteration_rng(config.seed, it)
    scene = scenes[int(rng.integers(len(scenes)))]
    cross, gt = augment(scene.cross, scene.gt, rng, config.augment, config.patch)
    return make_batch(cross, gt, scene.sweep, config, rng)


def batches(scenes: list[Scene], config: TrainConfig, start: int, stop: int):
    """Yield batches for iterations ``start..stop-1``, built ahead on a worker thread
    through a bounded queue. Order and content do not depend on timing."""
    if config.prefetch <= 0:
        for it in range(start, stop):
            yield assemble(scenes, config, it)
        return
    q: queue.Queue = queue.Queue(maxsize=config.prefetch)
    done = threading.Event()

    def produce():
        for it in range(start, stop):
            try:
                item = assemble(scenes, config, it)
            except Exception as exc:  # surfaced on the consumer side
                item = exc
            while not done.is_set():
                try:
                    q.put(item, timeout=0.1)
                    break
                except queue.Full:
                    pass
            if done.is_set() or isinstance(item, Exception):
                return

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        for _ in range(start, stop):
            item = q.get()
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        done.set()
        worker.join()


def _make_optimizer(net: EPIShiftNet, config: TrainConfig, lr: float):
    return torch.optim.Adam([p for p in net.parameters() if p.requires_grad], lr=lr,
                            betas=config.betas, eps=config.adam_eps)


def save_training_state(path, net: EPIShiftNet, opt: torch.optim.Optimizer, iteration: int, frozen: bool) -> None:
    save_checkpoint(path, net)
    root = Path(path) / "optimizer"
    os.makedirs(root, exist_ok=True)
    names = {id(p): n for n, p in net.named_parameters()}
    meta = {"iteration": iteration, "norm_frozen": frozen, "params": {}}
    for group in opt.param_groups:
        for p in group["params"]:
            state = opt.state.get(p)
            if not state:
                continue
            name = names[id(p)]
            meta["params"][name] = int(state["step"])
            save_tensor(root / f"{name}.exp_avg.lft", state["exp_avg"].numpy())
            save_tensor(root / f"{name}.exp_avg_sq.lft", state["exp_avg_sq"].numpy())
    (root / "state.json").write_text(json.dumps(meta, indent=1))


def _restore_optimizer(path, net: EPIShiftNet, opt: torch.optim.Optimizer) -> None:
    root = Path(path) / "optimizer"
    meta = json.loads((root / "state.json").read_text())
    params = dict(net.named_parameters())
    for name, step in meta["params"].items():
        p = params[name]
        opt.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(np.array(load_tensor(root / f"{name}.exp_avg.lft"))),
            "exp_avg_sq": torch.from_numpy(np.array(load_tensor(root / f"{name}.exp_avg_sq.lft"))),
        }


def _save_diagnostic(path: Path, net, opt, iteration: int, frozen: bool, reason: str) -> None:
    bad = [k for k, v in net.state_dict().items() if v.is_floating_point() and not torch.isfinite(v).all()]
    if not bad:
        save_training_state(path, net, opt, iteration, frozen)
    # weights that are no longer finite cannot go into LFT1 files; record which ones broke
    os.makedirs(path, exist_ok=True)
    (path / "diagnostic.json").write_text(json.dumps({"iteration": iteration, "reason": reason, "non_finite": bad}, indent=1))


def train(scenes: list[Scene], net_config: NetConfig, config: TrainConfig, *, iterations: int | None = None,
          resume_from=None, checkpoint_path=None, net: EPIShiftNet | None = None, callback=None):
    """Train on ``scenes``; returns the network and a loss trace of
    ``(iteration, l_class, l_reg, total)`` rows.

    ``iterations`` stops early (the schedule is still the full one), which
    together with ``resume_from`` allows interrupted runs to continue exactly.
    """
    if not scenes:
        raise ValueError("training needs at least one scene with ground truth")
    torch.manual_seed(config.seed)
    start, frozen = 0, False
    if resume_from is not None:
        net = load_checkpoint(resume_from, net_config)
        meta = json.loads((Path(resume_from) / "optimizer" / "state.json").read_text())
        start, frozen = meta["iteration"], meta["norm_frozen"]
    elif net is None:
        net = init_params(net_config, config.seed)
    if frozen:
        net.freeze_norm()
    lr = config.lr_phase2 if start >= config.iters_phase1 else config.lr_phase1
    opt = _make_optimizer(net, config, lr)
    if resume_from is not None:
        _restore_optimizer(resume_from, net, opt)

    stop = config.iterations if iterations is None else min(config.iterations, start + iterations)
    trace = []
    net.train()
    for it, batch in zip(range(start, stop), batches(scenes, config, start, stop)):
        if it == config.iters_phase1 and not frozen:
            net.freeze_norm()
            frozen = True
            for group in opt.param_groups:
                group["lr"] = config.lr_phase2
        try:
            l_class, l_reg, loss = batch_losses(net, batch, config.target_spec)
            reason = None if torch.isfinite(loss) else f"class={l_class.item()} reg={l_reg.item()}"
        except FloatingPointError as exc:
            reason = str(exc)
        if reason is not None:
            if checkpoint_path is not None:
                _save_diagnostic(Path(checkpoint_path) / "diverged", net, opt, it, frozen, reason)
            raise TrainingDiverged(f"non-finite loss at iteration {it}: {reason}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        trace.append((it, l_class.item(), l_reg.item(), loss.item()))
        if callback is not None:
            callback(it, trace[-1])
        if it % 50 == 0:
            log.info("iter %d  class %.5f  reg %.5f  total %.5f", it, *trace[-1][1:])
    if checkpoint_path is not None:
        save_training_state(checkpoint_path, net, opt, stop, frozen)
    return net, trace


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "l_class", "l_reg", "total"])
        for row in trace:
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
