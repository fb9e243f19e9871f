"""Light field containers and on-disk formats.

Scene directories follow the HCI benchmark layout::

    input_Cam000.png ... input_Cam{nv*nu-1}.png   (row-major, v-major)
    parameters.cfg                                 (key=value: nu, nv, disp_min, disp_max)
    gt_disp_lowres.pfm                             (optional ground truth)
    gt_valid.png                                   (optional, nonzero where gt is defined)
"""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

CONFIG_NAME = "parameters.cfg"
GT_NAME = "gt_disp_lowres.pfm"
GT_VALID_NAME = "gt_valid.png"
TENSOR_MAGIC = b"LFT1"


class SceneError(ValueError):
    """A scene directory is missing files or is inconsistent."""


class PFMError(ValueError):
    pass


class TensorFormatError(ValueError):
    pass


def view_name(index: int) -> str:
    return f"input_Cam{index:03d}.png"


@dataclass(frozen=True)
class LightField4D:
    """Views on a regular (v, u) camera grid.

    ``views`` has shape ``(nv, nu, H, W, 3)``; values are linear reals in [0, 1].
    """

    views: np.ndarray
    disp_min: float
    disp_max: float

    def __post_init__(self):
        if self.views.ndim != 5 or self.views.shape[-1] != 3:
            raise ValueError(f"views must have shape (nv, nu, H, W, 3), got {self.views.shape}")
        nv, nu = self.views.shape[:2]
        for n, name in ((nu, "nu"), (nv, "nv")):
            if n < 3 or n % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 3, got {n}")
        if self.disp_min > self.disp_max:
            raise ValueError(f"disp_min {self.disp_min} > disp_max {self.disp_max}")

    @property
    def nv(self) -> int:
        return self.views.shape[0]

    @property
    def nu(self) -> int:
        return self.views.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.views.shape[2], self.views.shape[3]


@dataclass(frozen=True)
class CrossStack:
    """Center row (``horizontal``, indexed by u) and center column
    (``vertical``, indexed by v) of a light field, each ``(n, H, W, 3)``."""

    horizontal: np.ndarray
    vertical: np.ndarray
    center_u: int = field(default=-1)
    center_v: int = field(default=-1)

    def __post_init__(self):
        if self.center_u < 0:
            object.__setattr__(self, "center_u", self.horizontal.shape[0] // 2)
        if self.center_v < 0:
            object.__setattr__(self, "center_v", self.vertical.shape[0] // 2)
        for stack, name in ((self.horizontal, "horizontal"), (self.vertical, "vertical")):
            n = stack.shape[0]
            if n < 3 or n % 2 == 0:
                raise ValueError(f"{name} stack needs an odd number >= 3 of views, got {n}")
        if self.horizontal.shape[1:] != self.vertical.shape[1:]:
            raise ValueError("horizontal and vertical views differ in size")
        if not np.array_equal(self.horizontal[self.center_u], self.vertical[self.center_v]):
            raise ValueError("horizontal and vertical stacks do not share the center view")

    @property
    def center_view(self) -> np.ndarray:
        return self.horizontal[self.center_u]

    @property
    def shape(self) -> tuple[int, int]:
        return self.horizontal.shape[1], self.horizontal.shape[2]


@dataclass(frozen=True)
class DisparityMap:
    values: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        valid = np.ones(values.shape, bool) if self.valid is None else np.asarray(self.valid, bool)
        if valid.shape != values.shape:
            raise ValueError("mask and values differ in shape")
        if not np.all(np.isfinite(values[valid])):
            raise ValueError("disparity values must be finite where valid")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)


def extract_cross(lf: LightField4D) -> CrossStack:
    """Center row and column of the grid, as views into ``lf.views``."""
    cv, cu = lf.nv // 2, lf.nu // 2
    return CrossStack(lf.views[cv], lf.views[:, cu], center_u=cu, center_v=cv)


# ---------------------------------------------------------------------------
# PFM


def _read_header_line(f) -> bytes:
    line = f.readline()
    if not line:
        raise PFMError("unexpected end of file in header")
    return line.strip()


def read_pfm(path) -> np.ndarray:
    """Read a single-channel PFM as a top-down float32 array."""
    with open(path, "rb") as f:
        magic = _read_header_line(f)
        if magic == b"PF":
            raise PFMError(f"{path}: unsupported channel count (color PFM)")
        if magic != b"Pf":
            raise PFMError(f"{path}: bad magic {magic!r}")
        try:
            width, height = (int(t) for t in _read_header_line(f).split())
            scale = float(_read_header_line(f))
        except ValueError as exc:
            raise PFMError(f"{path}: malformed header") from exc
        if width <= 0 or height <= 0 or not np.isfinite(scale) or scale == 0:
            raise PFMError(f"{path}: invalid dimensions or scale")
        dtype = "<f4" if scale < 0 else ">f4"
        payload = f.read()
    if len(payload) < width * height * 4:
        raise PFMError(f"{path}: truncated payload")
    data = np.frombuffer(payload, dtype=dtype, count=width * height).reshape(height, width)
    return np.flipud(data).astype(np.float32)


def write_pfm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise PFMError(f"expected a 2D map, got shape {image.shape}")
    height, width = image.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{width} {height}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(image).astype("<f4").tobytes())


# ---------------------------------------------------------------------------
# LFT1 tensor container


def save_tensor(path, data: np.ndarray) -> None:
    """Write ``data`` as magic, rank, dims (u32 LE) and row-major f32 LE payload."""
    data = np.asarray(data)
    if not np.all(np.isfinite(data)):
        raise TensorFormatError("tensor contains non-finite values")
    header = TENSOR_MAGIC + struct.pack(f"<{data.ndim + 1}I", data.ndim, *data.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != TENSOR_MAGIC:
        raise TensorFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise TensorFormatError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", raw, 4)
    end = 8 + 4 * rank
    if len(raw) < end:
        raise TensorFormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - end < 4 * count:
        raise TensorFormatError(f"{path}: truncated payload")
    if len(raw) - end > 4 * count:
        raise TensorFormatError(f"{path}: trailing bytes after payload")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=end).reshape(dims).astype(np.float32)


# ---------------------------------------------------------------------------
# Scene directories


def read_config(path) -> dict[str, str]:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    entries = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line or line.startswith("["):
                continue
            if "=" not in line:
                raise SceneError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (t.strip() for t in line.split("=", 1))
            entries[key] = value
    return entries


def write_config(path, entries: dict) -> None:
    with open(path, "w") as f:
        for key, value in entries.items():
            f.write(f"{key} = {value}\n")


def load_scene(dir_path) -> tuple[LightField4D, DisparityMap | None]:
    root = Path(dir_path)
    cfg_path = root / CONFIG_NAME
    if not cfg_path.is_file():
        raise SceneError(f"{cfg_path}: missing scene config")
    cfg = read_config(cfg_path)
    try:
        nu, nv = int(cfg["nu"]), int(cfg["nv"])
        disp_min, disp_max = float(cfg["disp_min"]), float(cfg["disp_max"])
    except (KeyError, ValueError) as exc:
        raise SceneError(f"{cfg_path}: malformed config ({exc})") from exc

    present = {p.name for p in root.iterdir() if re.fullmatch(r"input_Cam\d+\.png", p.name)}
    expected = [view_name(i) for i in range(nu * nv)]
    missing = [name for name in expected if name not in present]
    if missing:
        raise SceneError(f"{root / missing[0]}: missing view ({len(missing)} of {nu * nv} absent)")
    extra = present.difference(expected)
    if extra:
        raise SceneError(f"{root / sorted(extra)[0]}: inconsistent view count, expected {nu * nv} views")

    views = None
    for i, name in enumerate(expected):
        with Image.open(root / name) as im:
            img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        if views is None:
            views = np.empty((nv, nu) + img.shape, np.float32)
        elif img.shape != views.shape[2:]:
            raise SceneError(f"{root / name}: image size {img.shape[:2]} differs from {views.shape[2:4]}")
        views[i // nu, i % nu] = img
    try:
        lf = LightField4D(views, disp_min, disp_max)
    except ValueError as exc:
        raise SceneError(f"{cfg_path}: {exc}") from exc

    gt = None
    if (root / GT_NAME).is_file():
        values = read_pfm(root / GT_NAME)
        if values.shape != lf.shape:
            raise SceneError(f"{root / GT_NAME}: size {values.shape} differs from views {lf.shape}")
        valid = None
        if (root / GT_VALID_NAME).is_file():
            with Image.open(root / GT_VALID_NAME) as im:
                valid = np.asarray(im.convert("L")) > 0
            if valid.shape != lf.shape:
                raise SceneError(f"{root / GT_VALID_NAME}: size {valid.shape} differs from views {lf.shape}")
        gt = DisparityMap(values, valid)
    return lf, gt


def save_image(path, image: np.ndarray) -> None:
    """Quantize a [0, 1] image (H, W) or (H, W, 3) to an 8-bit PNG."""
    data = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def save_scene(dir_path, lf: LightField4D, gt: DisparityMap | None = None) -> None:
    root = Path(dir_path)
    os.makedirs(root, exist_ok=True)
    for i in range(lf.nv * lf.nu):
        save_image(root / view_name(i), lf.views[i // lf.nu, i % lf.nu])
    write_config(root / CONFIG_NAME, {
        "nu": lf.nu, "nv": lf.nv, "disp_min": repr(float(lf.disp_min)), "disp_max": repr(float(lf.disp_max)),
    })
    if gt is not None:
        write_pfm(root / GT_NAME, gt.values)
        if not gt.valid.all():
            save_image(root / GT_VALID_NAME, gt.valid.astype(np.float32))
