"""Siamese feature extractor plus U-Net head predicting, per shift, a
classification map and a sub-pixel regression map.

Tensor layout: a view stack of U views becomes a ``(N, 3U, H, W)`` tensor
(view-major, RGB within a view). Vertical stacks are given in their original
orientation; the network rotates them by +90 degrees before the shared
extractor and rotates the features back.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .lightfield import load_tensor, read_config, save_tensor, write_config

BN_MOMENTUM = 0.1  # running = 0.9 * running + 0.1 * batch
BN_EPS = 1e-5
MANIFEST = "manifest.cfg"


@dataclass(frozen=True)
class NetConfig:
    n_views: int = 9
    feat_channels: int = 8
    feat_blocks: int = 4
    unet_depth: int = 2
    unet_base_channels: int = 16

    @classmethod
    def full_scale(cls, n_views: int = 9) -> "NetConfig":
        return cls(n_views, 64, 4, 5, 64)

    @property
    def concat_channels(self) -> int:
        return self.feat_channels * 2 * 3 + 3

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be positive")


def conv3(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class Block(nn.Sequential):
    """Two (conv 3x3, ReLU, batch norm) stages."""

    def __init__(self, cin: int, cout: int):
        super().__init__(
            conv3(cin, cout), nn.ReLU(), nn.BatchNorm2d(cout, eps=BN_EPS, momentum=BN_MOMENTUM),
            conv3(cout, cout), nn.ReLU(), nn.BatchNorm2d(cout, eps=BN_EPS, momentum=BN_MOMENTUM),
        )


class FeatureExtractor(nn.Module):
    def __init__(self, in_channels: int, channels: int, blocks: int):
        super().__init__()
        self.stem = conv3(in_channels, channels)
        self.blocks = nn.Sequential(*[Block(channels, channels) for _ in range(blocks)])

    def forward(self, x):
        return self.blocks(F.relu(self.stem(x)))


class UNet(nn.Module):
    def __init__(self, in_channels: int, base: int, depth: int):
        super().__init__()
        self.depth = depth
        ch = [base * 2**i for i in range(depth + 1)]
        self.reduce = conv3(in_channels, base)
        self.enc = nn.ModuleList(Block(ch[i], ch[i]) for i in range(depth))
        self.down = nn.ModuleList(conv3(ch[i], ch[i + 1], stride=2) for i in range(depth))
        self.bottom = Block(ch[depth], ch[depth])
        # decoder level i+1: concat with the down-sampled skip (2*ch[i+1]), block, up to ch[i]
        self.dec = nn.ModuleList(Block(2 * ch[i + 1], 2 * ch[i + 1]) for i in range(depth))
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(2 * ch[i + 1], ch[i], 3, stride=2, padding=1, output_padding=1) for i in range(depth)
        )
        self.top = Block(2 * ch[0], ch[0])
        self.head = conv3(ch[0], 2)

    def forward(self, x):
        x = F.relu(self.reduce(x))
        skips = [x]
        for enc, down in zip(self.enc, self.down):
            x = F.relu(down(enc(x)))
            skips.append(x)
        y = self.bottom(x)
        for i in reversed(range(self.depth)):
            y = torch.cat([y, skips[i + 1]], dim=1)
            y = F.relu(self.up[i](self.dec[i](y)))
        y = self.top(torch.cat([y, skips[0]], dim=1))
        return self.head(y)


def _pad_to_multiple(x: torch.Tensor, multiple: int):
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return x
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


class EPIShiftNet(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        self.features = FeatureExtractor(3 * config.n_views, config.feat_channels, config.feat_blocks)
        self.unet = UNet(config.concat_channels, config.unet_base_channels, config.unet_depth)

    def extract(self, horizontal: torch.Tensor, vertical: torch.Tensor) -> torch.Tensor:
        """Features of both orientations with shared weights: ``(N, 2F, H, W)``."""
        fh = self.features(horizontal)
        fv = torch.rot90(self.features(torch.rot90(vertical, 1, dims=(2, 3))), -1, dims=(2, 3))
        return torch.cat([fh, fv], dim=1)

    def head(self, feats: torch.Tensor, center: torch.Tensor) -> torch.Tensor:
        """U-Net on ``[features(s-1), features(s), features(s+1), center view]``."""
        x = torch.cat([feats, center], dim=1)
        h, w = x.shape[-2:]
        out = self.unet(_pad_to_multiple(x, 2**self.config.unet_depth))[..., :h, :w]
        if not torch.isfinite(out).all():
            raise FloatingPointError("non-finite activations in network output")
        return out

    def forward(self, horizontal: torch.Tensor, vertical: torch.Tensor, center: torch.Tensor):
        """Predict ``(C_s, R_s)`` for a batch of shift triples.

        ``horizontal``/``vertical`` have shape ``(N, 3, 3U, H, W)`` holding the
        stacks shifted by ``s-1, s, s+1``; ``center`` is ``(N, 3, H, W)``.
        """
        n = horizontal.shape[0]
        flat = self.extract(horizontal.flatten(0, 1), vertical.flatten(0, 1))
        feats = flat.view(n, 3 * flat.shape[1], *flat.shape[2:])
        out = self.head(feats, center)
        return out[:, 0], out[:, 1]

    def freeze_norm(self):
        """Fix batch-norm statistics and affine parameters."""
        for m in self.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.eval()
                for p in m.parameters():
                    p.requires_grad_(False)
        self._norm_frozen = True

    def train(self, mode: bool = True):
        super().train(mode)
        if mode and getattr(self, "_norm_frozen", False):
            for m in self.modules():
                if isinstance(m, nn.BatchNorm2d):
                    m.eval()
        return self


def init_params(config: NetConfig, seed: int = 0, dtype=torch.float32) -> EPIShiftNet:
    """Deterministic fan-in scaled uniform init, zero biases, unit BN scale."""
    net = EPIShiftNet(config).to(dtype)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = m.in_channels * 9 / 4
            elif isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * 9
            elif isinstance(m, nn.BatchNorm2d):
                m.reset_parameters()
                continue
            else:
                continue
            bound = math.sqrt(6.0 / fan_in)
            m.weight.copy_(torch.rand(m.weight.shape, generator=gen, dtype=dtype) * 2 * bound - bound)
            m.bias.zero_()
    return net


def parameter_gradients(net: nn.Module, outputs, grad_outputs) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``sum(outputs * grad_outputs)`` for every parameter."""
    outputs = tuple(outputs)
    if not all(o.grad_fn is not None for o in outputs):
        raise RuntimeError("outputs carry no recorded activations; run forward with gradients enabled")
    named = [(n, p) for n, p in net.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(outputs, [p for _, p in named], grad_outputs, allow_unused=True)
    return {n: torch.zeros_like(p) if g is None else g for (n, p), g in zip(named, grads)}


def receptive_radius(config: NetConfig) -> int:
    """Upper bound (in pixels) on how far an input pixel can influence an output."""
    r = 1 + 2 * config.feat_blocks  # stem + blocks
    r += 1  # reduce conv
    j = 1
    for _ in range(config.unet_depth):
        r += 2 * j + j  # block, then strided conv
        j *= 2
    r += 2 * j  # bottom block
    for _ in range(config.unet_depth):
        r += 2 * j + j  # block at this level, transposed conv
        j //= 2
    r += 2 + 1  # top block, head conv
    return r


# ---------------------------------------------------------------------------
# Checkpoints: one LFT1 file per tensor plus a manifest fixing the order.


def _checkpoint_tensors(net: nn.Module):
    return [(k, v) for k, v in net.state_dict().items() if not k.endswith("num_batches_tracked")]


def save_checkpoint(path, net: EPIShiftNet) -> None:
    root = Path(path)
    os.makedirs(root, exist_ok=True)
    entries = {f"config.{k}": v for k, v in asdict(net.config).items()}
    for i, (name, value) in enumerate(_checkpoint_tensors(net)):
        fname = f"t{i:03d}.lft"
        save_tensor(root / fname, value.detach().cpu().float().numpy())
        entries[f"tensor.{name}"] = f"{fname} " + "x".join(str(d) for d in value.shape)
    write_config(root / MANIFEST, entries)


def load_config(path) -> NetConfig:
    entries = read_config(Path(path) / MANIFEST)
    return NetConfig(**{f.name: int(entries[f"config.{f.name}"]) for f in fields(NetConfig)})


def load_checkpoint(path, config: NetConfig | None = None) -> EPIShiftNet:
    root = Path(path)
    stored = load_config(root)
    if config is not None and config != stored:
        raise ValueError(f"checkpoint config {stored} does not match requested {config}")
    entries = read_config(root / MANIFEST)
    net = EPIShiftNet(stored)
    state = net.state_dict()
    for name, value in _checkpoint_tensors(net):
        fname, dims = entries[f"tensor.{name}"].split()
        data = load_tensor(root / fname)
        if "x".join(str(d) for d in data.shape) != dims or tuple(data.shape) != tuple(value.shape):
            raise ValueError(f"{root / fname}: shape {data.shape} does not match {tuple(value.shape)}")
        state[name] = torch.from_numpy(np.array(data))
    net.load_state_dict(state)
    return net


def stack_tensor(stack: np.ndarray) -> torch.Tensor:
    """``(U, H, W, 3)`` view stack to ``(3U, H, W)``."""
    u, h, w, c = stack.shape
    return torch.from_numpy(np.ascontiguousarray(np.transpose(stack, (0, 3, 1, 2)).reshape(u * c, h, w)))


def image_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.transpose(image, (2, 0, 1))))
