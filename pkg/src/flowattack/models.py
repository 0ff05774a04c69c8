"""Miniature FlowNetC / Robust FlowNetC / FlowNetS networks and receptive fields."""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import tensor as T
from .data import ImagePair, NormalizationScheme
from .tensor import Tensor

VARIANTS = ("flownetc_mini", "robust_flownetc_mini", "flownets_mini")
TAP_POINTS = ("conv3", "conv_redir", "corr")
CHECKPOINT_MAGIC = b"FACK"
CHECKPOINT_VERSION = 1
LEAK = 0.1


class NormalizationMismatchWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ConvLayer:
    name: str
    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    dilation: int = 1

    @property
    def padding(self) -> int:
        return self.dilation * (self.kernel - 1) // 2


@dataclass(frozen=True)
class EncoderSpec:
    """Encoder before the correlation layer.

    Level ``l`` holds ``convs_per_level`` convolutions; the first one of every
    level has stride 2, and the very first layer of the network uses
    ``first_kernel``.
    """

    kernel_size: int = 5
    convs_per_level: int = 1
    dilation: int = 1
    levels: int = 3
    first_kernel: int = 7
    channels_per_level: tuple = (16, 32, 64)

    def __post_init__(self):
        for name in ("kernel_size", "first_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ValueError(f"{name} must be an odd positive int, got {k}")
        if self.convs_per_level < 1 or self.dilation < 1 or self.levels < 1:
            raise ValueError("convs_per_level, dilation and levels must be positive")
        if len(self.channels_per_level) != self.levels:
            raise ValueError(f"need {self.levels} channel counts, got {self.channels_per_level}")

    def layers(self, in_ch: int = 3) -> list[ConvLayer]:
        out = []
        c = in_ch
        for level in range(1, self.levels + 1):
            ch = self.channels_per_level[level - 1]
            for j in range(1, self.convs_per_level + 1):
                k = self.first_kernel if (level == 1 and j == 1) else self.kernel_size
                out.append(ConvLayer(f"conv{level}_{j}", c, ch, k, 2 if j == 1 else 1, self.dilation))
                c = ch
        return out


def receptive_field(spec: EncoderSpec) -> int:
    """Side length in input pixels seen by one unit of the final encoder output."""
    rf, jump = 1, 1
    for layer in spec.layers():
        effective = layer.dilation * (layer.kernel - 1) + 1
        rf += (effective - 1) * jump
        jump *= layer.stride
    return rf


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "flownetc_mini"
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    max_displacement: int = 4
    redirect_channels: int = 16
    decoder_levels: int = 2
    channel_scale: float = 1.0
    # subtract each map's spatial mean before correlating (see README: trainability)
    corr_centering: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unsupported variant {self.variant!r}; choose from {VARIANTS}")
        if self.encoder.levels < 2:
            raise ValueError("encoder needs at least 2 levels for the 1/4 resolution prediction")

    def scaled(self, c: int) -> int:
        return max(1, int(round(c * self.channel_scale)))

    @property
    def has_correlation(self) -> bool:
        return self.variant != "flownets_mini"

    @property
    def divisor(self) -> int:
        return 2 ** (self.encoder.levels + self.decoder_levels)

    @property
    def num_scales(self) -> int:
        return self.encoder.levels + self.decoder_levels - 1

    def to_json(self) -> dict:
        d = asdict(self)
        d["encoder"]["channels_per_level"] = list(self.encoder.channels_per_level)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        enc = dict(d.pop("encoder", {}))
        if "channels_per_level" in enc:
            enc["channels_per_level"] = tuple(enc["channels_per_level"])
        return cls(encoder=EncoderSpec(**enc), **d)


def preset(variant: str, **overrides) -> ModelSpec:
    """Desk-scale presets: FlowNetC (k=5, one conv per level), Robust (k=3, four), FlowNetS."""
    enc = {
        "flownetc_mini": EncoderSpec(kernel_size=5, convs_per_level=1),
        "robust_flownetc_mini": EncoderSpec(kernel_size=3, convs_per_level=4),
        "flownets_mini": EncoderSpec(kernel_size=5, convs_per_level=1),
    }
    if variant not in enc:
        raise ValueError(f"unsupported variant {variant!r}; choose from {VARIANTS}")
    enc_over = {k: overrides.pop(k) for k in list(overrides) if k in EncoderSpec.__dataclass_fields__}
    encoder = replace(enc[variant], **enc_over)
    return ModelSpec(variant=variant, encoder=encoder, **overrides)


FULL_SCALE_CHANNELS = (64, 128, 256)


# ---------------------------------------------------------------------------
# parameter layout


@dataclass(frozen=True)
class ParamDecl:
    name: str
    shape: tuple
    fan_in: int
    is_bias: bool


def _conv_decl(name: str, cin: int, cout: int, k: int) -> list[ParamDecl]:
    return [ParamDecl(f"{name}.weight", (cout, cin, k, k), cin * k * k, False),
            ParamDecl(f"{name}.bias", (cout,), cin * k * k, True)]


def _deconv_decl(name: str, cin: int, cout: int, k: int) -> list[ParamDecl]:
    return [ParamDecl(f"{name}.weight", (cin, cout, k, k), cin * k * k, False),
            ParamDecl(f"{name}.bias", (cout,), cin * k * k, True)]


@dataclass(frozen=True)
class _Plan:
    """Layer geometry derived from a ModelSpec."""

    encoder: list
    trunk: list  # (name, in, out, stride)
    decoder: list  # per refinement: (level_factor, skip_ch, deconv_in, deconv_out, predict_in)
    coarse_ch: int
    redir_ch: int
    corr_ch: int


def _plan(spec: ModelSpec) -> _Plan:
    enc_spec = spec.encoder
    chans = tuple(spec.scaled(c) for c in enc_spec.channels_per_level)
    enc_spec = replace(enc_spec, channels_per_level=chans)
    in_ch = 6 if spec.variant == "flownets_mini" else 3
    encoder = enc_spec.layers(in_ch)
    c_last = chans[-1]
    redir = spec.scaled(spec.redirect_channels)
    corr_ch = (2 * spec.max_displacement + 1) ** 2
    trunk_in = corr_ch + redir if spec.has_correlation else c_last
    trunk = [(f"conv{enc_spec.levels}_post", trunk_in, c_last, 1)]
    c = c_last
    for i in range(spec.decoder_levels):
        c_out = 2 * c_last
        trunk.append((f"conv{enc_spec.levels + 1 + i}", c, c_out, 2))
        c = c_out
    # skip channels for levels coarse -> fine, excluding the coarsest
    trunk_ch = [c_last] + [2 * c_last] * spec.decoder_levels
    skips = list(reversed(trunk_ch[:-1])) + list(reversed(chans[1:-1]))
    decoder = []
    cur = c
    for skip in skips:
        dout = max(8, skip // 2)
        decoder.append((skip, cur, dout, skip + dout + 2))
        cur = skip + dout + 2
    return _Plan(encoder, trunk, decoder, c, redir, corr_ch)


def parameter_declarations(spec: ModelSpec) -> list[ParamDecl]:
    """Parameter names, shapes and fan-ins in declaration (= checkpoint) order."""
    plan = _plan(spec)
    decls: list[ParamDecl] = []
    for layer in plan.encoder:
        decls += _conv_decl(layer.name, layer.in_ch, layer.out_ch, layer.kernel)
    if spec.has_correlation:
        decls += _conv_decl("conv_redir", plan.encoder[-1].out_ch, plan.redir_ch, 1)
    for name, cin, cout, _ in plan.trunk:
        decls += _conv_decl(name, cin, cout, 3)
    n = len(plan.decoder)
    decls += _conv_decl(f"predict_flow{n}", plan.coarse_ch, 2, 3)
    for i, (skip, din, dout, pin) in enumerate(plan.decoder):
        lvl = n - 1 - i
        decls += _deconv_decl(f"deconv{lvl}", din, dout, 4)
        decls += _deconv_decl(f"upflow{lvl}", 2, 2, 4)
        decls += _conv_decl(f"predict_flow{lvl}", pin, 2, 3)
    return decls


def parameter_count(spec: ModelSpec) -> int:
    return sum(int(np.prod(d.shape)) for d in parameter_declarations(spec))


def kaiming_init(shape: tuple, fan_in: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Zero-mean normal draw with variance 2 / fan_in."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# ---------------------------------------------------------------------------
# model


@dataclass
class Model:
    spec: ModelSpec
    params: dict
    seed: int = 0
    normalization: Optional[NormalizationScheme] = None

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def astype(self, dtype) -> "Model":
        params = {k: Tensor(v.data.astype(dtype)) for k, v in self.params.items()}
        return Model(self.spec, params, self.seed, self.normalization)

    def copy(self) -> "Model":
        params = {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        return Model(self.spec, params, self.seed, self.normalization)

    def requires_grad_(self, flag: bool = True) -> "Model":
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None
        return self


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float64,
                normalization: Optional[NormalizationScheme] = None) -> Model:
    """Kaiming-initialized model; parameters depend only on (spec, seed)."""
    if not isinstance(spec, ModelSpec):
        raise TypeError("spec must be a ModelSpec")
    rng = np.random.default_rng(seed)
    params = {}
    for d in parameter_declarations(spec):
        if d.is_bias:
            params[d.name] = Tensor(np.zeros(d.shape, dtype=dtype))
        else:
            params[d.name] = Tensor(kaiming_init(d.shape, d.fan_in, rng, dtype))
    return Model(spec, params, seed, normalization)


class FlowPrediction(NamedTuple):
    scales: list  # coarse -> fine, each (N, 2, h, w) in pixels of its own resolution
    full: Tensor  # finest scale upsampled to input resolution, in input pixels


def _conv(model: Model, name: str, x: Tensor, stride: int = 1, padding: Optional[int] = None,
          dilation: int = 1, act: bool = True) -> Tensor:
    w = model.params[f"{name}.weight"]
    b = model.params[f"{name}.bias"]
    k = w.shape[-1]
    if padding is None:
        padding = dilation * (k - 1) // 2
    y = T.conv2d(x, w, b, stride=stride, padding=padding, dilation=dilation)
    return T.leaky_relu(y, LEAK) if act else y


def _deconv(model: Model, name: str, x: Tensor, act: bool = True) -> Tensor:
    y = T.transposed_conv2d(x, model.params[f"{name}.weight"], model.params[f"{name}.bias"],
                            stride=2, padding=1)
    return T.leaky_relu(y, LEAK) if act else y


def _prepare(model: Model, frame, scheme: NormalizationScheme) -> Tensor:
    if not isinstance(frame, Tensor):
        frame = Tensor(np.asarray(frame, dtype=model.dtype))
    scale, offset = scheme.affine()
    dt = model.dtype
    return frame * scale.astype(dt)[None, :, None, None] + offset.astype(dt)[None, :, None, None]


Hook = Callable[[str, Tensor], Tensor]


def _resolve_scheme(model: Model, normalization: Optional[NormalizationScheme]) -> NormalizationScheme:
    if normalization is None:
        if model.normalization is None:
            raise ValueError("model has no bound normalization; pass one explicitly")
        return model.normalization
    if model.normalization is not None and normalization != model.normalization:
        warnings.warn(f"inference normalization {normalization.id} differs from the one bound at "
                      f"training ({model.normalization.id})", NormalizationMismatchWarning, stacklevel=3)
    return normalization


def encode_levels(model: Model, x: Tensor) -> list:
    """Encoder outputs of every level for an already normalized input."""
    cpl = model.spec.encoder.convs_per_level
    feats = []
    for layer in _plan(model.spec).encoder:
        x = _conv(model, layer.name, x, stride=layer.stride, dilation=layer.dilation)
        if layer.name.endswith(f"_{cpl}"):
            feats.append(x)
    return feats


def _run(model: Model, frame1, frame2, hook: Optional[Hook] = None,
         normalization: Optional[NormalizationScheme] = None) -> FlowPrediction:
    spec = model.spec
    plan = _plan(spec)
    scheme = _resolve_scheme(model, normalization)
    x1 = _prepare(model, frame1, scheme)
    x2 = _prepare(model, frame2, scheme)
    n, _, H, W = x1.shape
    if x2.shape != x1.shape:
        raise T.ShapeError("forward", f"frame shapes differ: {x1.shape} vs {x2.shape}")
    div = spec.divisor
    if H % div or W % div:
        raise T.ShapeError("forward", f"input extents {H}x{W} must be divisible by {div}")
    tap = hook or (lambda name, t: t)

    def encode(x):
        return encode_levels(model, x)

    if spec.has_correlation:
        # siamese encoder: both frames share weights, so run them as one batch
        feats = encode(T.concat_batch([x1, x2]))
        a, b = feats[-1][:n], feats[-1][n:]
        c = a.shape[1]
        if hook is not None:
            both = tap("conv3", T.concat_channels([a, b]))
            a, b = both[:, :c], both[:, c:]
        redir = tap("conv_redir", _conv(model, "conv_redir", a, padding=0))
        if spec.corr_centering:
            a_c = a - a.mean(axis=(2, 3), keepdims=True)
            b_c = b - b.mean(axis=(2, 3), keepdims=True)
        else:
            a_c, b_c = a, b
        corr = tap("corr", T.leaky_relu(T.correlation(a_c, b_c, spec.max_displacement), LEAK))
        x = T.concat_channels([corr, redir])
        skips_enc = [None] + [f[:n] for f in feats[1:-1]]
    else:
        feats = encode(T.concat_channels([x1, x2]))
        x = tap("conv3", feats[-1])
        skips_enc = feats[:-1]

    trunk_out = []
    for name, _, _, stride in plan.trunk:
        x = _conv(model, name, x, stride=stride)
        trunk_out.append(x)
    skips = list(reversed(trunk_out[:-1])) + list(reversed(skips_enc[1:]))
    n_ref = len(plan.decoder)
    flow = _conv(model, f"predict_flow{n_ref}", x, act=False)
    scales = [flow]
    for i, skip in enumerate(skips):
        lvl = n_ref - 1 - i
        up_feat = _deconv(model, f"deconv{lvl}", x)
        up_flow = _deconv(model, f"upflow{lvl}", flow, act=False)
        x = T.concat_channels([skip, up_feat, up_flow])
        flow = _conv(model, f"predict_flow{lvl}", x, act=False)
        scales.append(flow)
    factor = H // flow.shape[2]
    full = T.upsample_bilinear(flow, factor) * float(factor)
    return FlowPrediction(scales, full)


def forward(model: Model, frame1, frame2=None,
            normalization: Optional[NormalizationScheme] = None) -> FlowPrediction:
    """Multiscale flow for raw [0, 1] frames given as (N, 3, H, W) arrays/Tensors or an ImagePair."""
    if isinstance(frame1, ImagePair):
        frame1, frame2 = frame1.to_batch(model.dtype)
    return _run(model, frame1, frame2, None, normalization)


class FeatureBank(dict):
    """Maps tap names to recorded activations (numpy arrays)."""


def forward_with_tap(model: Model, frame1, frame2=None, tap="corr", mode: str = "record",
                     bank: Optional[dict] = None,
                     normalization: Optional[NormalizationScheme] = None):
    """Forward pass that records or replaces activations at tap points.

    ``tap`` is a tap name or a sequence of names. Returns
    ``(prediction, recorded)`` where ``recorded`` maps each tap to the
    activation actually fed downstream (the banked one in replace mode).
    """
    if isinstance(frame1, ImagePair):
        frame1, frame2 = frame1.to_batch(model.dtype)
    taps = (tap,) if isinstance(tap, str) else tuple(tap)
    for t in taps:
        if t not in TAP_POINTS:
            raise ValueError(f"unknown tap {t!r}; choose from {TAP_POINTS}")
        if not model.spec.has_correlation and t != "conv3":
            raise ValueError(f"tap {t!r} does not exist in {model.spec.variant}")
    if mode not in ("record", "replace"):
        raise ValueError(f"mode must be 'record' or 'replace', got {mode!r}")
    if mode == "replace" and (bank is None or any(t not in bank for t in taps)):
        raise ValueError("replace mode needs a bank holding every requested tap")
    recorded = FeatureBank()

    def hook(name: str, t: Tensor) -> Tensor:
        if name in taps and mode == "replace":
            stored = np.asarray(bank[name])
            if stored.shape != t.shape:
                raise T.ShapeError("forward_with_tap",
                                   f"banked {name} has shape {stored.shape}, live is {t.shape}")
            t = Tensor(stored.astype(t.dtype, copy=False))
        if name in taps:
            recorded[name] = t.data
        return t

    pred = _run(model, frame1, frame2, hook, normalization)
    return pred, recorded


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, path, extra: Optional[dict] = None) -> None:
    """Binary checkpoint: magic, uint32 header length, JSON header, raw LE buffers."""
    decls = parameter_declarations(model.spec)
    dt = np.dtype(model.dtype).newbyteorder("<")
    header = {
        "format_version": CHECKPOINT_VERSION,
        "spec": model.spec.to_json(),
        "seed": model.seed,
        "normalization": model.normalization.to_json() if model.normalization else None,
        "dtype": dt.str,
        "params": [{"name": d.name, "shape": list(d.shape)} for d in decls],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for d in decls:
            f.write(np.ascontiguousarray(model.params[d.name].data, dtype=dt).tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a flowattack checkpoint (bad magic)")
        (n,) = struct.unpack("<I", f.read(4))
        return json.loads(f.read(n).decode("utf-8"))


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a flowattack checkpoint (bad magic)")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + n].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    spec = ModelSpec.from_json(header["spec"])
    dt = np.dtype(header["dtype"])
    offset = 8 + n
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(shape)
        params[entry["name"]] = Tensor(arr.astype(dt.newbyteorder("="), copy=True))
        offset += count * dt.itemsize
    if offset != len(raw):
        raise ValueError(f"checkpoint {path} has {len(raw) - offset} trailing bytes")
    expected = [d.name for d in parameter_declarations(spec)]
    if list(params) != expected:
        raise ValueError("checkpoint parameters do not match the declared spec layout")
    return Model(spec, params, header["seed"], NormalizationScheme.from_json(header["normalization"]))
