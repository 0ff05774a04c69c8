"""Circular patches and their placement (rotation/scale resampling) into frames."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .data import ImagePair, read_image, write_image
from .tensor import Tensor


class PlacementError(ValueError):
    pass


def disk_mask(h: int, w: int) -> np.ndarray:
    """Centered disk of radius floor(min(h, w) / 2), tested at pixel centers."""
    r = min(h, w) // 2
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy + 0.5 - h / 2) ** 2 + (xx + 0.5 - w / 2) ** 2 <= r * r


@dataclass
class AdversarialPatch:
    pixels: np.ndarray  # (h, w, 3) in [0, 1]
    mask: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        h, w = self.pixels.shape[:2]
        if self.mask is None:
            self.mask = disk_mask(h, w)
        if self.mask.shape != (h, w):
            raise ValueError(f"mask shape {self.mask.shape} != patch shape {(h, w)}")

    @property
    def size(self) -> tuple:
        return self.pixels.shape[:2]

    def check(self) -> None:
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError("patch pixels outside [0, 1]")

    def save(self, png_path, extra: Optional[dict] = None) -> None:
        """PNG of the pixels plus a JSON sidecar (size, mask radius, generator meta)."""
        png_path = Path(png_path)
        write_image(png_path, self.pixels)
        h, w = self.size
        side = {"size": [h, w], "mask_radius": min(h, w) // 2,
                "mask_is_disk": bool(np.array_equal(self.mask, disk_mask(h, w))), **self.meta}
        if extra:
            side.update(extra)
        png_path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))

    @classmethod
    def load(cls, png_path) -> "AdversarialPatch":
        png_path = Path(png_path)
        pixels = read_image(png_path, as_float=True)
        meta = {}
        side = png_path.with_suffix(".json")
        if side.exists():
            meta = json.loads(side.read_text())
        mask = disk_mask(*pixels.shape[:2])
        if meta.get("mask_is_disk") is False:
            mask = np.ones(pixels.shape[:2], dtype=bool)
        return cls(pixels, mask, meta)


@dataclass(frozen=True)
class Motion:
    """Change of the patch pose between frame t and frame t+1."""

    dx: int = 0
    dy: int = 0
    rotation: float = 0.0
    scale: float = 1.0


@dataclass(frozen=True)
class PatchPlacement:
    x: int
    y: int
    rotation: float = 0.0  # degrees
    scale: float = 1.0
    second_frame_delta: Optional[Motion] = None

    def second(self) -> "PatchPlacement":
        d = self.second_frame_delta
        if d is None:
            return self
        return PatchPlacement(self.x + int(d.dx), self.y + int(d.dy), self.rotation + d.rotation,
                              self.scale * d.scale)


def footprint_side(n: int, scale: float) -> int:
    """Resampled side length, rounding half up."""
    return int(math.floor(n * scale + 0.5))


@dataclass(frozen=True)
class PastePlan:
    """Precomputed taps: image flat positions and bilinear taps into the patch."""

    positions: np.ndarray  # (P,) flat indices into H*W
    index: np.ndarray  # (4, P) flat indices into h*w
    weights: np.ndarray  # (4, P)
    mask: np.ndarray  # (H, W) bool footprint
    center: tuple  # (cx, cy) in image pixel coordinates


def plan_paste(patch_shape: tuple, placement: PatchPlacement, image_shape: tuple,
               mask: Optional[np.ndarray] = None) -> PastePlan:
    """Inverse-map the footprint onto the patch.

    With the default disk mask the footprint is the scaled disk in image space;
    any other ``mask`` is applied through nearest-pixel lookup of the source.
    """
    h, w = patch_shape
    H, W = image_shape
    sh, sw = footprint_side(h, placement.scale), footprint_side(w, placement.scale)
    x0, y0 = int(placement.x), int(placement.y)
    if x0 < 0 or y0 < 0 or x0 + sw > W or y0 + sh > H or sh < 1 or sw < 1:
        raise PlacementError(f"footprint {sh}x{sw} at (x={x0}, y={y0}) leaves image {H}x{W}")
    eff = sh / h
    r_out = (min(h, w) // 2) * eff
    oy, ox = np.mgrid[0:sh, 0:sw]
    cy = oy + 0.5 - sh / 2
    cx = ox + 0.5 - sw / 2
    inside = cy * cy + cx * cx <= r_out * r_out + 1e-9
    cy, cx, oy, ox = cy[inside], cx[inside], oy[inside], ox[inside]
    th = math.radians(placement.rotation)
    c, s = math.cos(th), math.sin(th)
    sx = (c * cx + s * cy) / eff + w / 2 - 0.5
    sy = (-s * cx + c * cy) / eff + h / 2 - 0.5
    if mask is not None and not np.array_equal(mask, disk_mask(h, w)):
        rx, ry = np.floor(sx + 0.5).astype(int), np.floor(sy + 0.5).astype(int)
        ok = (rx >= 0) & (rx < w) & (ry >= 0) & (ry < h)
        ok[ok] = mask[ry[ok], rx[ok]]
        sx, sy, oy, ox = sx[ok], sy[ok], oy[ok], ox[ok]
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    ix0 = np.minimum(np.floor(sx).astype(int), max(w - 2, 0))
    iy0 = np.minimum(np.floor(sy).astype(int), max(h - 2, 0))
    fx = sx - ix0
    fy = sy - iy0
    ix1 = np.minimum(ix0 + 1, w - 1)
    iy1 = np.minimum(iy0 + 1, h - 1)
    index = np.stack([iy0 * w + ix0, iy0 * w + ix1, iy1 * w + ix0, iy1 * w + ix1])
    weights = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx])
    positions = (y0 + oy) * W + (x0 + ox)
    mask = np.zeros((H, W), dtype=bool)
    mask.reshape(-1)[positions] = True
    return PastePlan(positions, index, weights, mask, (x0 + sw / 2, y0 + sh / 2))


def footprint_mask(patch_shape: tuple, placement: PatchPlacement, image_shape: tuple,
                   mask: Optional[np.ndarray] = None) -> np.ndarray:
    return plan_paste(patch_shape, placement, image_shape, mask).mask


def _paste_array(frame: np.ndarray, pixels: np.ndarray, plan: PastePlan) -> np.ndarray:
    """frame (H, W, 3), pixels (h, w, 3)."""
    H, W = frame.shape[:2]
    flat_src = pixels.reshape(-1, 3)
    vals = (flat_src[plan.index] * plan.weights[..., None]).sum(axis=0)
    out = frame.reshape(H * W, 3).copy()
    out[plan.positions] = vals
    return out.reshape(H, W, 3)


def paste_patch(pair: ImagePair, patch: AdversarialPatch, placement: PatchPlacement) -> ImagePair:
    """Paste into both frames; frame t+1 uses ``placement.second_frame_delta`` when set."""
    shape = pair.shape
    p1 = plan_paste(patch.size, placement, shape, patch.mask)
    p2 = plan_paste(patch.size, placement.second(), shape, patch.mask)
    return ImagePair(_paste_array(pair.frame_t, patch.pixels, p1),
                     _paste_array(pair.frame_t1, patch.pixels, p2))


def paste_tensor(frames: Tensor, patch_chw: Tensor, plan: PastePlan) -> Tensor:
    """Differentiable paste of a (3, h, w) patch into (N, 3, H, W) frames."""
    values = T.gather_linear(patch_chw, plan.index, plan.weights.astype(patch_chw.dtype))
    return T.scatter_overwrite(frames, values, plan.positions)


def lattice(image_shape: tuple, patch_side: int, stride: int) -> list[tuple[int, int]]:
    """Top-left (x, y) positions of fully in-bounds placements, row-major."""
    H, W = image_shape
    if patch_side > H or patch_side > W:
        raise PlacementError(f"patch side {patch_side} exceeds image {H}x{W}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ys = range(0, H - patch_side + 1, stride)
    xs = range(0, W - patch_side + 1, stride)
    return [(x, y) for y in ys for x in xs]
