"""Desk-scale trainer: multiscale L2 loss, AdamW, one-cycle schedule, clipping."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import DatasetManifest, NormalizationScheme, estimate_channel_means
from .models import Model, ModelSpec, build_model, forward, save_checkpoint
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

WARMUP_FRACTION = 0.3
DIV_START = 25.0
DIV_END = 1e4


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 20000
    peak_lr: float = 1e-4
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    batch_size: int = 4
    loss_weights: Optional[tuple] = None  # coarse -> fine; default from model spec
    seed: int = 0
    precision: str = "f32"
    crop: Optional[tuple] = (64, 128)
    hflip: bool = True
    normalization: str = "unit_meansub"
    mean_samples: int = 100
    log_every: int = 50
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.peak_lr < 0 or self.weight_decay < 0 or self.clip_norm <= 0:
            raise ValueError("peak_lr and weight_decay must be >= 0 and clip_norm > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be 'f32' or 'f64', got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def weights_for(self, spec: ModelSpec) -> tuple:
        if self.loss_weights is not None:
            if len(self.loss_weights) != spec.num_scales:
                raise ValueError(f"{len(self.loss_weights)} loss weights for {spec.num_scales} scales")
            return tuple(self.loss_weights)
        return default_loss_weights(spec.num_scales)

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("loss_weights", "crop", "betas"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for k in ("loss_weights", "crop", "betas"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def default_loss_weights(num_scales: int) -> tuple:
    # finest scale weight 1, each coarser scale half of the next finer one
    return tuple(0.5 ** (num_scales - 1 - i) for i in range(num_scales))


def downsample_flow(gt: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool (N, 2, H, W) flow and rescale displacements to the coarse grid."""
    return T.avg_pool(gt, factor) / factor


def downsample_valid(valid: np.ndarray, factor: int) -> np.ndarray:
    return T.avg_pool(valid.astype(np.float64), factor) >= 1.0 - 1e-9


def multiscale_l2_loss(predictions: Sequence[Tensor], gt: np.ndarray, weights: Sequence[float],
                       valid: Optional[np.ndarray] = None) -> Tensor:
    """Weighted sum over scales of the mean per-pixel L2 distance to downsampled ground truth.

    ``gt`` is (N, 2, H, W) at input resolution; each prediction is compared with
    ground truth average-pooled to its resolution and divided by the pooling factor.
    """
    if len(predictions) != len(weights):
        raise ValueError(f"{len(weights)} weights for {len(predictions)} predicted scales")
    if valid is None:
        valid = np.ones((gt.shape[0],) + gt.shape[2:], dtype=bool)
    H = gt.shape[2]
    total: Tensor | float = 0.0
    for pred, w in zip(predictions, weights):
        if w == 0:
            continue
        factor = H // pred.shape[2]
        g = downsample_flow(gt, factor).astype(pred.dtype)
        m = downsample_valid(valid, factor)
        diff = pred - g
        sq = (diff * diff).sum(axis=1)
        dist = T.sqrt(sq + 1e-12)
        count = max(int(m.sum()), 1)
        term = (dist * m.astype(pred.dtype)).sum() * (1.0 / count)
        total = total + term * float(w)
    if not isinstance(total, Tensor):
        return Tensor(np.zeros((), dtype=predictions[0].dtype if predictions else np.float64))
    return total


def one_cycle_lr(step: int, total: int, peak_lr: float) -> float:
    """Linear warm-up from peak/25 to peak over 30% of steps, then linear decay to peak/1e4."""
    if total < 1 or step < 0 or step >= total:
        raise ValueError(f"step {step} outside [0, {total})")
    warm = WARMUP_FRACTION * total
    start, end = peak_lr / DIV_START, peak_lr / DIV_END
    if step <= warm:
        return start + (peak_lr - start) * (step / warm if warm > 0 else 1.0)
    return peak_lr + (end - peak_lr) * (step - warm) / (total - warm)


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_gradients(grads: dict, clip_norm: float) -> tuple[dict, float]:
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if norm > clip_norm:
        scale = clip_norm / (norm + 1e-6)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adamw_update(params: dict, grads: dict, state: AdamWState, lr: float, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place decoupled-weight-decay Adam step."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        denom = np.sqrt(v / bc2) + eps
        p.data -= (lr / bc1) * m / denom


def epe_batch(pred_full: np.ndarray, gt: np.ndarray) -> float:
    return float(np.sqrt(((pred_full - gt) ** 2).sum(axis=1)).mean())


def train_step(model: Model, batch: tuple, config: TrainConfig, state: AdamWState,
               lr: Optional[float] = None) -> dict:
    """One forward/backward/update; mutates ``model`` parameters and ``state``."""
    frame1, frame2, gt = batch
    weights = config.weights_for(model.spec)
    if lr is None:
        lr = config.peak_lr
    for p in model.params.values():
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        pred = forward(model, frame1, frame2)
        loss = multiscale_l2_loss(pred.scales, gt, weights)
    loss_value = float(loss.data)
    backward(tape, loss)
    grads = {}
    bad = None
    for name, p in model.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if bad is None and not np.all(np.isfinite(g)):
            bad = name
        grads[name] = g
    if bad is not None or not np.isfinite(loss_value):
        model.requires_grad_(False)
        where = f"first non-finite gradient in parameter {bad}" if bad else "all gradients finite"
        raise TrainingDivergence(f"non-finite loss {loss_value}; {where}" if not np.isfinite(loss_value)
                                 else f"loss {loss_value} but {where}")
    grads, norm = clip_gradients(grads, config.clip_norm)
    adamw_update(model.params, grads, state, lr, config.weight_decay, config.betas, config.eps)
    for p in model.params.values():
        p.grad = None
        p.requires_grad = False
    return {"loss": loss_value, "grad_norm": norm, "lr": lr,
            "epe": epe_batch(pred.full.data, gt)}


def batch_stream(manifest: DatasetManifest, config: TrainConfig):
    """Deterministic infinite batch iterator with random crops and horizontal flips."""
    rng = np.random.default_rng(config.seed + 7919)
    order = np.arange(len(manifest))
    epoch = 0
    while True:
        perm = np.random.default_rng(config.seed * 1000003 + epoch).permutation(order)
        epoch += 1
        for start in range(0, len(perm) - config.batch_size + 1, config.batch_size):
            f1s, f2s, gts = [], [], []
            for idx in perm[start:start + config.batch_size]:
                pair, flow = manifest.sample(int(idx))
                a = pair.frame_t.transpose(2, 0, 1)
                b = pair.frame_t1.transpose(2, 0, 1)
                g = flow.uv()
                if config.crop is not None:
                    ch, cw = config.crop
                    H, W = a.shape[1:]
                    y = int(rng.integers(0, H - ch + 1))
                    x = int(rng.integers(0, W - cw + 1))
                    a, b, g = (arr[:, y:y + ch, x:x + cw] for arr in (a, b, g))
                if config.hflip and rng.random() < 0.5:
                    a, b, g = a[:, :, ::-1], b[:, :, ::-1], g[:, :, ::-1].copy()
                    g[0] = -g[0]
                f1s.append(a)
                f2s.append(b)
                gts.append(g)
            dt = config.dtype
            yield (np.stack(f1s).astype(dt), np.stack(f2s).astype(dt), np.stack(gts).astype(dt))


def resolve_normalization(manifest: DatasetManifest, config: TrainConfig) -> NormalizationScheme:
    if config.normalization == "sym_unit":
        return NormalizationScheme("sym_unit")
    n = min(config.mean_samples, len(manifest))
    means = estimate_channel_means([manifest.sample(i)[0] for i in range(n)])
    return NormalizationScheme("unit_meansub", means)


METRIC_HEADER = ("step", "lr", "loss", "epe")


def train(spec: ModelSpec, manifest: DatasetManifest, config: TrainConfig,
          checkpoint_path=None, metrics_path=None, model_seed: Optional[int] = None,
          progress: bool = False) -> tuple[Model, list]:
    """Train a fresh model and optionally write a checkpoint and a metrics CSV.

    Returns the trained model (in the configured precision) and the list of logged metric rows.
    """
    scheme = resolve_normalization(manifest, config)
    seed = config.seed if model_seed is None else model_seed
    model = build_model(spec, seed, dtype=config.dtype, normalization=scheme)
    state = AdamWState()
    rows = []
    stream = batch_stream(manifest, config)
    for step in range(config.iterations):
        lr = one_cycle_lr(step, config.iterations, config.peak_lr)
        metrics = train_step(model, next(stream), config, state, lr=lr)
        if step % config.log_every == 0 or step == config.iterations - 1:
            rows.append((step, lr, metrics["loss"], metrics["epe"]))
            if progress:
                log.info("step %d lr %.3g loss %.4f epe %.4f", step, lr, metrics["loss"], metrics["epe"])
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, extra={"train_config": config.to_json(),
                                                       "manifest": manifest.to_json()})
    if metrics_path is not None:
        Path(metrics_path).write_text(format_metrics(rows))
    return model, rows


def format_metrics(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_HEADER)
    for step, lr, loss, epe in rows:
        w.writerow([step, repr(float(lr)), repr(float(loss)), repr(float(epe))])
    return buf.getvalue()
