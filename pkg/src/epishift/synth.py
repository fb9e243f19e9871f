"""Synthetic layered light fields with exact ground-truth disparity.

Each layer is a fronto-parallel textured plane. View (u, v) shows the layer
point at texture coordinate (x + u*d, y + v*d), so a point seen at x in the
center view appears at x - u*d in view u (cameras to the right see near
content move left). Larger disparity means nearer, and nearer layers occlude.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .lightfield import DisparityMap, LightField4D

TEXTURES = ("noise", "checker", "gradient")


@dataclass(frozen=True)
class Texture:
    kind: str = "noise"
    period: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TEXTURES:
            raise ValueError(f"unknown texture {self.kind!r}, expected one of {TEXTURES}")
        if self.period <= 0:
            raise ValueError("texture period must be positive")

    def raster(self, h: int, w: int) -> np.ndarray:
        """Texture values on the integer grid, shape (h, w, 3), in [0, 1]."""
        rng = np.random.default_rng(self.seed)
        if self.kind == "noise":
            img = rng.random((h, w, 3))
            img = gaussian_filter(img, sigma=(self.period / 3.0, self.period / 3.0, 0), mode="wrap")
            lo, hi = img.min(axis=(0, 1)), img.max(axis=(0, 1))
            img = 0.05 + 0.9 * (img - lo) / np.maximum(hi - lo, 1e-12)
        elif self.kind == "checker":
            yy, xx = np.mgrid[0:h, 0:w]
            cell = (np.floor(xx / self.period) + np.floor(yy / self.period)) % 2
            colors = rng.uniform(0.1, 0.9, size=(2, 3))
            img = np.where(cell[..., None] == 0, colors[0], colors[1])
        else:
            xx = np.arange(w, dtype=np.float64)
            phase = rng.uniform(0, 2 * np.pi, size=3)
            ramp = 0.5 + 0.4 * np.sin(2 * np.pi * xx[:, None] / (self.period * 8) + phase)
            img = np.broadcast_to(ramp[None], (h, w, 3))
        return np.ascontiguousarray(img, dtype=np.float32)


@dataclass(frozen=True)
class Layer:
    disparity: float
    texture: Texture = field(default_factory=Texture)
    region: tuple[float, float, float, float] | None = None  # (x0, y0, x1, y1), None = full frame


@dataclass(frozen=True)
class SceneSpec:
    layers: tuple[Layer, ...]
    height: int = 64
    width: int = 64
    nu: int = 9
    nv: int = 9

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("scene needs at least one layer")
        disps = [layer.disparity for layer in self.layers]
        if disps != sorted(disps):
            raise ValueError("layers must be ordered back-to-front (non-decreasing disparity)")

    @property
    def border(self) -> int:
        """Width of the ground-truth band whose content may leave the frame."""
        max_disp = max(abs(layer.disparity) for layer in self.layers)
        return math.ceil(max_disp) * max(self.nu // 2, self.nv // 2)


def _sample(tex: np.ndarray, margin: int, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Separable bilinear lookup of ``tex`` at columns ``xs`` and rows ``ys``."""
    xs = xs + margin
    ys = ys + margin
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    if np.all(xs == x0) and np.all(ys == y0):
        return tex[y0[:, None], x0[None, :]]
    fx = (xs - x0).astype(np.float32)[None, :, None]
    fy = (ys - y0).astype(np.float32)[:, None, None]
    top = tex[y0[:, None], x0[None, :]] * (1 - fx) + tex[y0[:, None], x0[None, :] + 1] * fx
    bot = tex[y0[:, None] + 1, x0[None, :]] * (1 - fx) + tex[y0[:, None] + 1, x0[None, :] + 1] * fx
    return top * (1 - fy) + bot * fy


def _coverage(region, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    if region is None:
        return np.ones((ys.size, xs.size), bool)
    x0, y0, x1, y1 = region
    return ((ys >= y0) & (ys < y1))[:, None] & ((xs >= x0) & (xs < x1))[None, :]


def render(spec: SceneSpec) -> tuple[LightField4D, DisparityMap]:
    h, w = spec.height, spec.width
    cu, cv = spec.nu // 2, spec.nv // 2
    margin = math.ceil(max(abs(layer.disparity) for layer in spec.layers) * max(cu, cv)) + 2
    rasters = [layer.texture.raster(h + 2 * margin, w + 2 * margin) for layer in spec.layers]
    x = np.arange(w, dtype=np.float64)
    y = np.arange(h, dtype=np.float64)

    views = np.zeros((spec.nv, spec.nu, h, w, 3), np.float32)
    for iv in range(spec.nv):
        for iu in range(spec.nu):
            u, v = iu - cu, iv - cv
            img = views[iv, iu]
            for layer, tex in zip(spec.layers, rasters):
                xs, ys = x + u * layer.disparity, y + v * layer.disparity
                cover = _coverage(layer.region, xs, ys)
                img[cover] = _sample(tex, margin, xs, ys)[cover]
    np.clip(views, 0.0, 1.0, out=views)

    gt = np.full((h, w), spec.layers[0].disparity, np.float32)
    for layer in spec.layers:
        gt[_coverage(layer.region, x, y)] = layer.disparity
    valid = np.zeros((h, w), bool)
    b = spec.border
    if 2 * b < min(h, w):
        valid[b:h - b, b:w - b] = True
    disps = [layer.disparity for layer in spec.layers]
    return LightField4D(views, min(disps), max(disps)), DisparityMap(gt, valid)


def two_plane_spec(rng: np.random.Generator, disp_range=(-2.0, 2.0), size=(64, 64), grid=9,
                   integer=False, min_gap=0.5, box_frac=(0.3, 0.6),
                   textures=("noise", "noise", "checker")) -> SceneSpec:
    """Random background plane plus a nearer rectangular foreground plane.

    Each layer's texture kind is drawn uniformly from ``textures`` (repeat a
    kind to weight it).
    """
    lo, hi = disp_range
    while True:
        d = np.sort(rng.uniform(lo, hi, size=2))
        if integer:
            d = np.sort(rng.integers(math.ceil(lo), math.floor(hi) + 1, size=2)).astype(float)
        if d[1] - d[0] >= min_gap:
            break
    h, w = size
    bw = rng.uniform(*box_frac) * w
    bh = rng.uniform(*box_frac) * h
    bx = rng.uniform(0.15 * w, 0.85 * w - bw)
    by = rng.uniform(0.15 * h, 0.85 * h - bh)
    tex = [Texture(str(rng.choice(list(textures))), float(rng.uniform(2.0, 5.0)), int(rng.integers(2**31)))
           for _ in range(2)]
    layers = (Layer(float(d[0]), tex[0]), Layer(float(d[1]), tex[1], (bx, by, bx + bw, by + bh)))
    return SceneSpec(layers, h, w, grid, grid)


# ---------------------------------------------------------------------------
# Declarative scene files: global key=value lines, then one [layer] section per layer.


def parse_scene_spec(text: str) -> SceneSpec:
    globals_, layers = {}, []
    current = globals_
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "[layer]":
            current = {}
            layers.append(current)
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value or [layer], got {line!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        current[key] = value
    try:
        parsed = []
        for entry in layers:
            region = entry.get("region", "full")
            box = None if region == "full" else tuple(float(t) for t in region.split(","))
            if box is not None and len(box) != 4:
                raise ValueError(f"region must be 'full' or x0,y0,x1,y1, got {region!r}")
            tex = Texture(entry.get("texture", "noise"), float(entry.get("period", 3.0)), int(entry.get("seed", 0)))
            parsed.append(Layer(float(entry["disparity"]), tex, box))
        return SceneSpec(
            tuple(parsed),
            height=int(globals_.get("height", 64)),
            width=int(globals_.get("width", 64)),
            nu=int(globals_.get("nu", 9)),
            nv=int(globals_.get("nv", 9)),
        )
    except KeyError as exc:
        raise ValueError(f"missing key {exc}") from exc


def format_scene_spec(spec: SceneSpec) -> str:
    lines = [f"height = {spec.height}", f"width = {spec.width}", f"nu = {spec.nu}", f"nv = {spec.nv}"]
    for layer in spec.layers:
        region = "full" if layer.region is None else ",".join(repr(float(t)) for t in layer.region)
        lines += ["", "[layer]", f"disparity = {layer.disparity!r}", f"texture = {layer.texture.kind}",
                  f"period = {layer.texture.period!r}", f"seed = {layer.texture.seed}", f"region = {region}"]
    return "\n".join(lines) + "\n"
