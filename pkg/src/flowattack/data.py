"""Synthetic flow scenes, normalization schemes, file I/O and flow rendering."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from matplotlib.path import Path as MplPath
from PIL import Image
from scipy.ndimage import gaussian_filter, shift as nd_shift

FLO_MAGIC = b"PIEH"


class FloFormatError(ValueError):
    pass


@dataclass
class ImagePair:
    """Two RGB frames (H, W, 3) with values in [0, 1]."""

    frame_t: np.ndarray
    frame_t1: np.ndarray

    def __post_init__(self):
        if self.frame_t.shape != self.frame_t1.shape:
            raise ValueError(f"frame extents differ: {self.frame_t.shape} vs {self.frame_t1.shape}")

    @property
    def shape(self) -> tuple:
        return self.frame_t.shape[:2]

    def to_batch(self, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
        """Return both frames as (1, 3, H, W) arrays."""
        return (self.frame_t.transpose(2, 0, 1)[None].astype(dtype),
                self.frame_t1.transpose(2, 0, 1)[None].astype(dtype))


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.u.shape != self.v.shape:
            raise ValueError(f"u/v extents differ: {self.u.shape} vs {self.v.shape}")
        if self.valid is None:
            self.valid = np.ones(self.u.shape, dtype=bool)
        elif self.valid.shape != self.u.shape:
            raise ValueError("valid mask extent differs from flow extent")

    @property
    def shape(self) -> tuple:
        return self.u.shape

    def uv(self) -> np.ndarray:
        """Stacked (2, H, W) array."""
        return np.stack([self.u, self.v])

    @classmethod
    def from_uv(cls, uv: np.ndarray, valid: Optional[np.ndarray] = None) -> "FlowField":
        uv = np.asarray(uv)
        if uv.ndim == 4:
            uv = uv[0]
        return cls(np.array(uv[0], dtype=np.float64), np.array(uv[1], dtype=np.float64), valid)


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class NormalizationScheme:
    """``sym_unit`` maps [0, 1] to [-1, 1]; ``unit_meansub`` subtracts per-channel means."""

    id: str = "unit_meansub"
    channel_means: Optional[tuple] = None

    def __post_init__(self):
        if self.id not in ("sym_unit", "unit_meansub"):
            raise ValueError(f"unknown normalization scheme {self.id!r}")
        if self.id == "unit_meansub" and (self.channel_means is None or len(self.channel_means) != 3):
            raise ValueError("unit_meansub needs three channel means")

    def affine(self) -> tuple[np.ndarray, np.ndarray]:
        """(scale, offset) per channel so that normalized = raw * scale + offset."""
        if self.id == "sym_unit":
            return np.full(3, 2.0), np.full(3, -1.0)
        return np.ones(3), -np.asarray(self.channel_means, dtype=np.float64)

    def to_json(self) -> dict:
        return {"id": self.id, "channel_means": list(self.channel_means) if self.channel_means else None}

    @classmethod
    def from_json(cls, d: Optional[dict]) -> Optional["NormalizationScheme"]:
        if d is None:
            return None
        means = d.get("channel_means")
        return cls(d["id"], tuple(means) if means is not None else None)


def normalize(pair: ImagePair, scheme: NormalizationScheme) -> tuple[np.ndarray, np.ndarray]:
    """Apply ``scheme`` to both frames; returns (3, H, W) arrays."""
    scale, offset = scheme.affine()
    out = []
    for frame in (pair.frame_t, pair.frame_t1):
        x = frame.transpose(2, 0, 1).astype(np.float64)
        out.append(x * scale[:, None, None] + offset[:, None, None])
    return out[0], out[1]


def denormalize_sym_unit(x: np.ndarray) -> np.ndarray:
    return (x + 1.0) / 2.0


def estimate_channel_means(pairs: Sequence[ImagePair]) -> tuple:
    total = np.zeros(3)
    count = 0
    for p in pairs:
        for f in (p.frame_t, p.frame_t1):
            total += f.reshape(-1, 3).sum(axis=0)
            count += f.shape[0] * f.shape[1]
    return tuple(float(m) for m in total / count)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SceneConfig:
    height: int = 96
    width: int = 192
    num_shapes: int = 4
    shape_kinds: tuple = ("rectangle", "ellipse", "polygon")
    shape_translation: float = 10.0
    background_translation: float = 5.0
    shape_size: tuple = (0.15, 0.45)
    texture_sigma: float = 1.5
    texture_amplitudes: tuple = (0.06, 0.1, 0.1)  # octaves at 1x, 4x, 16x blur scale
    seed: int = 0
    integer_motion: bool = True
    shape_motions: Optional[tuple] = None  # explicit (dx, dy) per shape instead of sampling

    def to_json(self) -> dict:
        d = asdict(self)
        d["shape_kinds"] = list(self.shape_kinds)
        d["shape_size"] = list(self.shape_size)
        d["texture_amplitudes"] = list(self.texture_amplitudes)
        if self.shape_motions is not None:
            d["shape_motions"] = [list(m) for m in self.shape_motions]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        for key in ("shape_kinds", "shape_size", "texture_amplitudes"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("shape_motions") is not None:
            d["shape_motions"] = tuple(tuple(m) for m in d["shape_motions"])
        return cls(**d)


def _lerp_matrix(n_in: int, n_out: int, factor: int = 4) -> np.ndarray:
    src = np.arange(n_out) / factor
    i0 = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] = 1.0 - frac
    m[np.arange(n_out), i0 + 1] = frac
    return m


def _texture(rng: np.random.Generator, h: int, w: int, sigma: float,
             amplitudes=(0.12, 0.08, 0.0)) -> np.ndarray:
    # octaves of blurred noise around a random base colour; octave k is blurred
    # on a 4**k coarser grid and bilinearly zoomed back up
    base = rng.uniform(0.15, 0.85, size=3)
    tex = np.broadcast_to(base, (h, w, 3)).copy()
    for k, amp in enumerate(amplitudes):
        f = 4 ** k
        hc, wc = (h, w) if k == 0 else (h // f + 2, w // f + 2)
        octave = gaussian_filter(rng.standard_normal((hc, wc, 3)), sigma=(sigma, sigma, 0), truncate=3.0)
        if k:
            octave = (_lerp_matrix(hc, h, f) @ octave.reshape(hc, -1)).reshape(h, wc, 3)
            octave = (octave.transpose(0, 2, 1) @ _lerp_matrix(wc, w, f).T).transpose(0, 2, 1)
        tex += amp * octave / (octave.std() + 1e-12)
    return np.clip(tex, 0.0, 1.0)


def _shape_mask(rng: np.random.Generator, kind: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    cy, cx = h / 2, w / 2
    if kind == "rectangle":
        return np.ones((h, w), dtype=bool)
    if kind == "ellipse":
        return ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
    if kind == "polygon":
        k = int(rng.integers(3, 7))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
        radii = rng.uniform(0.6, 1.0, size=k)
        px = cx + radii * np.cos(angles) * w / 2
        py = cy + radii * np.sin(angles) * h / 2
        path = MplPath(np.stack([px, py], axis=1))
        inside = path.contains_points(np.stack([xx.ravel(), yy.ravel()], axis=1))
        return inside.reshape(h, w)
    raise ValueError(f"unknown shape kind {kind!r}")


def _sample_motion(rng: np.random.Generator, extent: float, integer: bool) -> np.ndarray:
    if extent <= 0:
        return np.zeros(2)
    if integer:
        r = int(np.floor(extent))
        return rng.integers(-r, r + 1, size=2).astype(np.float64)
    return rng.uniform(-extent, extent, size=2)


def _paint(canvas: np.ndarray, tex: np.ndarray, mask: np.ndarray, top: int, left: int,
           ids: Optional[np.ndarray] = None, ident: int = 0) -> None:
    h, w = mask.shape
    H, W = canvas.shape[:2]
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + h, H), min(left + w, W)
    if y0 >= y1 or x0 >= x1:
        return
    m = mask[y0 - top:y1 - top, x0 - left:x1 - left]
    region = canvas[y0:y1, x0:x1]
    region[m] = tex[y0 - top:y1 - top, x0 - left:x1 - left][m]
    if ids is not None:
        ids[y0:y1, x0:x1][m] = ident


def generate_scene(config: SceneConfig, return_layers: bool = False):
    """Render a pair of frames with moving textured shapes over a moving background.

    Flow at a frame-t pixel is the displacement of the topmost layer covering it;
    occluded background keeps the background displacement.

    With ``return_layers`` also returns (layer id map of frame t, of frame t+1),
    where 0 is background and shape ``i`` has id ``i + 1``.
    """
    rng = np.random.default_rng(config.seed)
    H, W = config.height, config.width
    integer = config.integer_motion
    bg_d = _sample_motion(rng, config.background_translation, integer)
    margin = int(np.ceil(config.background_translation)) + 1
    big = _texture(rng, H + 2 * margin, W + 2 * margin, config.texture_sigma, config.texture_amplitudes)

    def crop(d):
        if integer:
            dy, dx = int(d[1]), int(d[0])
            return big[margin - dy:margin - dy + H, margin - dx:margin - dx + W].copy()
        shifted = nd_shift(big, (d[1], d[0], 0), order=1, mode="nearest")
        return shifted[margin:margin + H, margin:margin + W].copy()

    frame_t = crop(np.zeros(2))
    frame_t1 = crop(bg_d)
    u = np.full((H, W), bg_d[0])
    v = np.full((H, W), bg_d[1])
    ids_t = np.zeros((H, W), dtype=np.int32)
    ids_t1 = np.zeros((H, W), dtype=np.int32)

    lo, hi = config.shape_size
    for i in range(config.num_shapes):
        kind = config.shape_kinds[int(rng.integers(len(config.shape_kinds)))]
        sh = max(4, int(rng.uniform(lo, hi) * H))
        sw = max(4, int(rng.uniform(lo, hi) * H * rng.uniform(0.7, 1.6)))
        mask = _shape_mask(rng, kind, sh, sw)
        tex = _texture(rng, sh, sw, config.texture_sigma, config.texture_amplitudes)
        top = int(rng.integers(-sh // 4, H - 3 * sh // 4))
        left = int(rng.integers(-sw // 4, W - 3 * sw // 4))
        d = _sample_motion(rng, config.shape_translation, integer)
        if config.shape_motions is not None:
            d = np.asarray(config.shape_motions[i], dtype=np.float64)
        _paint(frame_t, tex, mask, top, left, ids_t, i + 1)
        if integer:
            _paint(frame_t1, tex, mask, top + int(d[1]), left + int(d[0]), ids_t1, i + 1)
        else:
            fy, fx = d[1] - np.floor(d[1]), d[0] - np.floor(d[0])
            tex_s = nd_shift(tex, (fy, fx, 0), order=1, mode="nearest")
            m_s = nd_shift(mask.astype(float), (fy, fx), order=1) > 0.5
            _paint(frame_t1, tex_s, m_s, top + int(np.floor(d[1])), left + int(np.floor(d[0])), ids_t1, i + 1)
        y0, x0 = max(top, 0), max(left, 0)
        y1, x1 = min(top + sh, H), min(left + sw, W)
        if y0 < y1 and x0 < x1:
            m = mask[y0 - top:y1 - top, x0 - left:x1 - left]
            u[y0:y1, x0:x1][m] = d[0]
            v[y0:y1, x0:x1][m] = d[1]

    pair = ImagePair(frame_t, frame_t1)
    flow = FlowField(u, v, np.ones((H, W), dtype=bool))
    if return_layers:
        return pair, flow, (ids_t, ids_t1)
    return pair, flow


@dataclass
class DatasetManifest:
    """Reproducible list of scene seeds sharing one base configuration."""

    seeds: list
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __len__(self) -> int:
        return len(self.seeds)

    def sample(self, i: int) -> tuple[ImagePair, FlowField]:
        cfg = SceneConfig(**{**asdict(self.scene), "seed": int(self.seeds[i])})
        return generate_scene(cfg)

    def samples(self) -> list[tuple[ImagePair, FlowField]]:
        return [self.sample(i) for i in range(len(self))]

    def to_json(self) -> dict:
        return {"seeds": [int(s) for s in self.seeds], "scene": self.scene.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        return cls(list(d["seeds"]), SceneConfig.from_json(d.get("scene", {})))

    @classmethod
    def range(cls, start: int, count: int, scene: Optional[SceneConfig] = None) -> "DatasetManifest":
        return cls(list(range(start, start + count)), scene or SceneConfig())

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# .flo files


def write_flo(path, flow: FlowField) -> None:
    """Write a Middlebury .flo file: magic, int32 width, int32 height, float32 (u, v) pairs."""
    uv = np.stack([flow.u, flow.v], axis=-1)
    if not np.all(np.isfinite(uv)):
        raise FloFormatError("refusing to write non-finite flow values")
    h, w = flow.u.shape
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(struct.pack("<ii", w, h))
        f.write(uv.astype("<f4").tobytes())


def read_flo(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FloFormatError(f"truncated .flo header in {path}")
    if raw[:4] != FLO_MAGIC:
        raise FloFormatError(f"bad magic {raw[:4]!r} in {path}, expected {FLO_MAGIC!r}")
    w, h = struct.unpack("<ii", raw[4:12])
    if w < 0 or h < 0:
        raise FloFormatError(f"negative extents {w}x{h} in {path}")
    need = 12 + 8 * w * h
    if len(raw) < need:
        raise FloFormatError(f"truncated .flo payload in {path}: {len(raw)} < {need} bytes")
    uv = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return FlowField(uv[..., 0].astype(np.float32), uv[..., 1].astype(np.float32))


# ---------------------------------------------------------------------------
# images


_IMAGE_FORMATS = {".png": "PNG", ".ppm": "PPM"}


def quantize(raster: np.ndarray) -> np.ndarray:
    if raster.dtype == np.uint8:
        return raster
    return np.clip(np.floor(np.asarray(raster, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_image(path, raster: np.ndarray) -> None:
    """Write an (H, W, 3) raster; float input in [0, 1] is quantized to 8 bits."""
    fmt = _IMAGE_FORMATS.get(Path(path).suffix.lower())
    if fmt is None:
        raise ValueError(f"unsupported image format {Path(path).suffix!r}; use .png or .ppm")
    Image.fromarray(quantize(raster), mode="RGB").save(path, format=fmt)


def read_image(path, as_float: bool = False) -> np.ndarray:
    if Path(path).suffix.lower() not in _IMAGE_FORMATS:
        raise ValueError(f"unsupported image format {Path(path).suffix!r}; use .png or .ppm")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return arr.astype(np.float64) / 255.0 if as_float else arr


# ---------------------------------------------------------------------------
# visualization


def flow_to_color(flow: FlowField, max_magnitude: Optional[float] = None) -> np.ndarray:
    """Render flow with an HSV wheel: hue = direction, saturation = magnitude, value = 1.

    Zero flow is white. Direction angle is ``atan2(v, u)`` mapped to hue in [0, 1);
    magnitudes are scaled by ``max_magnitude`` (default: 99th percentile) and clipped.
    """
    u = np.asarray(flow.u, dtype=np.float64)
    v = np.asarray(flow.v, dtype=np.float64)
    mag = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(np.percentile(mag, 99)) if mag.size else 0.0
    max_magnitude = max(max_magnitude, 1e-12)
    sat = np.clip(mag / max_magnitude, 0.0, 1.0)
    hue = np.mod(np.arctan2(v, u) / (2 * np.pi), 1.0)
    # vectorized hsv -> rgb with value 1
    h6 = hue * 6.0
    sector = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = 1.0 - sat
    q = 1.0 - sat * f
    t = 1.0 - sat * (1.0 - f)
    one = np.ones_like(sat)
    choices_r = [one, q, p, p, t, one]
    choices_g = [t, one, one, q, p, p]
    choices_b = [p, p, t, one, one, q]
    rgb = np.stack([np.choose(sector, choices_r), np.choose(sector, choices_g),
                    np.choose(sector, choices_b)], axis=-1)
    return rgb
