"""Patch optimization, striped patches, iterative FGSM and feature replacement."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import ImagePair
from .evaluation import _chw, epe, predict_full, random_placement, zero_footprint
from .models import TAP_POINTS, Model, forward, forward_with_tap
from .patches import (AdversarialPatch, Motion, PatchPlacement, PlacementError, disk_mask,
                      footprint_mask, footprint_side, paste_patch, paste_tensor, plan_paste)
from .tensor import Tape, Tensor, backward

__all__ = ["AdversarialPatch", "PatchPlacement", "Motion", "PlacementError", "disk_mask",
           "footprint_side", "paste_patch", "cosine_objective", "PatchAttackConfig", "optimize_patch",
           "StripeConfig", "make_striped_patch", "FgsmConfig", "fgsm_step", "fgsm_project",
           "fgsm_attack", "feature_replacement_experiment", "PlacementMismatch"]

COS_EPS = 1e-8


def cosine_objective(unattacked, attacked) -> Tensor:
    """Mean per-pixel cosine between two (N, 2, H, W) flows; differentiable in ``attacked``.

    Norms are guarded as sqrt(|f|^2 + eps^2) so zero vectors contribute 0.
    """
    if not isinstance(attacked, Tensor):
        attacked = Tensor(np.asarray(attacked))
    ref = unattacked.data if isinstance(unattacked, Tensor) else np.asarray(unattacked)
    ref = ref.astype(attacked.dtype, copy=False)
    if ref.shape != attacked.shape:
        raise T.ShapeError("cosine_objective", f"{ref.shape} vs {attacked.shape}")
    eps2 = COS_EPS * COS_EPS
    ref_norm = np.sqrt((ref * ref).sum(axis=1) + eps2)
    dot = (attacked * ref).sum(axis=1)
    att_norm = T.sqrt((attacked * attacked).sum(axis=1) + eps2)
    return (dot / (att_norm * ref_norm)).mean()


# ---------------------------------------------------------------------------
# optimized patch


@dataclass
class PatchAttackConfig:
    size: int = 22
    iterations: int = 1000
    lr: float = 100.0
    rotation_range: float = 10.0
    scale_range: float = 0.05
    locations_per_step: int = 4
    seed: int = 0
    fixed_batch: bool = False
    use_ground_truth: bool = False

    def __post_init__(self):
        if self.size < 2 or self.iterations < 0 or self.locations_per_step < 1:
            raise ValueError("invalid patch attack config")
        if self.lr < 0 or self.rotation_range < 0 or not 0 <= self.scale_range < 1:
            raise ValueError("lr, rotation_range and scale_range must be non-negative")


def _sample_placement(rng: np.random.Generator, image_shape: tuple, size: int,
                      config: PatchAttackConfig) -> PatchPlacement:
    H, W = image_shape
    rot = float(rng.uniform(-config.rotation_range, config.rotation_range))
    scale = float(1.0 + rng.uniform(-config.scale_range, config.scale_range))
    side = footprint_side(size, scale)
    return PatchPlacement(int(rng.integers(0, W - side + 1)), int(rng.integers(0, H - side + 1)),
                          rot, scale)


def _split(sample):
    if isinstance(sample, ImagePair):
        return sample, None
    return sample[0], sample[1]


def attack_batch_objective(model: Model, pairs: Sequence[ImagePair], targets: np.ndarray,
                           patch_chw: Tensor, placements: Sequence[PatchPlacement],
                           mask: Optional[np.ndarray] = None) -> Tensor:
    """Cosine objective of a batch of patched pairs; must be called under a Tape."""
    f1s, f2s = [], []
    for pair, placement in zip(pairs, placements):
        a = Tensor(_chw(pair.frame_t)[None].astype(model.dtype))
        b = Tensor(_chw(pair.frame_t1)[None].astype(model.dtype))
        f1s.append(paste_tensor(a, patch_chw, plan_paste(patch_chw.shape[1:], placement, pair.shape, mask)))
        f2s.append(paste_tensor(b, patch_chw,
                                plan_paste(patch_chw.shape[1:], placement.second(), pair.shape, mask)))
    pred = forward(model, T.concat_batch(f1s), T.concat_batch(f2s))
    return cosine_objective(targets, pred.full)


def optimize_patch(model: Model, dataset, config: PatchAttackConfig,
                   init: Optional[AdversarialPatch] = None) -> tuple[AdversarialPatch, list]:
    """Gradient descent on masked patch pixels of the expected cosine objective.

    Each step draws ``locations_per_step`` samples with a random location,
    rotation and scale; targets are the model's clean predictions (or the true
    flow with ``use_ground_truth``). Pixels are clamped to [0, 1] after every
    step. Returns the patch and the per-step objective trace.
    """
    samples = [_split(s) for s in dataset]
    pairs = [p for p, _ in samples]
    rng = np.random.default_rng(config.seed)
    size = config.size
    if init is None:
        pixels = rng.uniform(0.0, 1.0, size=(size, size, 3))
    else:
        pixels = init.pixels.copy()
        if init.size != (size, size):
            raise ValueError(f"init patch {init.size} does not match size {size}")
    mask = disk_mask(size, size)
    if config.use_ground_truth:
        if any(f is None for _, f in samples):
            raise ValueError("use_ground_truth needs (pair, flow) samples")
        targets = np.stack([f.uv() for _, f in samples])
    else:
        targets = predict_full(model, np.stack([_chw(p.frame_t) for p in pairs]),
                               np.stack([_chw(p.frame_t1) for p in pairs]))
    model.requires_grad_(False)
    k = min(config.locations_per_step, len(pairs)) if config.fixed_batch else config.locations_per_step

    def draw():
        idx = rng.choice(len(pairs), size=k, replace=len(pairs) < k)
        return idx, [_sample_placement(rng, pairs[i].shape, size, config) for i in idx]

    fixed = draw() if config.fixed_batch else None
    trace = []
    m3 = mask[None].astype(model.dtype)
    for _ in range(config.iterations):
        idx, placements = fixed if fixed is not None else draw()
        patch_t = Tensor(pixels.transpose(2, 0, 1).astype(model.dtype), requires_grad=True)
        with Tape() as tape:
            obj = attack_batch_objective(model, [pairs[i] for i in idx], targets[idx], patch_t,
                                         placements)
        backward(tape, obj)
        trace.append(float(obj.data))
        if config.lr:
            step = (config.lr * patch_t.grad * m3).astype(np.float64).transpose(1, 2, 0)
            pixels = np.clip(pixels - step, 0.0, 1.0)
    meta = {"generator": "optimize_patch", "config": asdict(config)}
    return AdversarialPatch(pixels, mask, meta), trace


def format_trace(trace: Sequence[float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("step", "objective"))
    for i, v in enumerate(trace):
        w.writerow((i, repr(float(v))))
    return buf.getvalue()


# ---------------------------------------------------------------------------
# handcrafted stripes


@dataclass
class StripeConfig:
    size: int = 22
    stripe_width: int = 2
    orientation: float = 0.0  # degrees, 0 = vertical stripes
    color_a: tuple = (0.0, 0.0, 0.0)
    color_b: tuple = (1.0, 1.0, 1.0)
    contrast: float = 1.0

    def __post_init__(self):
        if self.stripe_width < 1:
            raise ValueError("stripe_width must be >= 1")
        if self.size < 2:
            raise ValueError("size must be >= 2")
        for c in (self.color_a, self.color_b):
            if len(c) != 3 or min(c) < 0 or max(c) > 1:
                raise ValueError(f"colors must be RGB triples in [0, 1], got {c}")
        if not 0 <= self.contrast <= 1:
            raise ValueError("contrast must lie in [0, 1]")


def make_striped_patch(config: StripeConfig) -> AdversarialPatch:
    """Bands of ``stripe_width`` pixels alternating between two colors, under a disk mask."""
    n = config.size
    yy, xx = np.mgrid[0:n, 0:n]
    xc = xx + 0.5 - n / 2
    yc = yy + 0.5 - n / 2
    th = math.radians(config.orientation)
    # coordinate across the bands; equals the column index for orientation 0
    t = np.round(xc * math.cos(th) + yc * math.sin(th) + n / 2 - 0.5, 9)
    band = np.floor(t / config.stripe_width).astype(int) % 2
    gray = 0.5
    a = gray + config.contrast * (np.asarray(config.color_a, dtype=np.float64) - gray)
    b = gray + config.contrast * (np.asarray(config.color_b, dtype=np.float64) - gray)
    pixels = np.where(band[..., None] == 0, a, b)
    mask = disk_mask(n, n)
    return AdversarialPatch(pixels, mask, {"generator": "make_striped_patch", "config": asdict(config)})


# ---------------------------------------------------------------------------
# iterative FGSM


@dataclass
class FgsmConfig:
    epsilon: float = 0.02
    alpha: float = 0.002
    beta: float = 0.47
    iterations: int = 20

    def __post_init__(self):
        if self.epsilon < 0 or self.alpha < 0 or self.iterations < 0:
            raise ValueError("epsilon, alpha and iterations must be non-negative")


def fgsm_step(x: np.ndarray, grad: np.ndarray, acc: np.ndarray, alpha: float,
              beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Momentum signed-gradient descent step (before projection)."""
    scale = np.abs(grad).mean()
    acc = beta * acc + (grad / scale if scale > 0 else grad)
    return x - alpha * np.sign(acc), acc


def fgsm_project(x: np.ndarray, x0: np.ndarray, epsilon: float) -> np.ndarray:
    return np.clip(np.clip(x, x0 - epsilon, x0 + epsilon), 0.0, 1.0)


def fgsm_attack(model: Model, pair: ImagePair, config: FgsmConfig,
                target: Optional[np.ndarray] = None) -> tuple[ImagePair, tuple]:
    """Perturb both frames independently to reverse the clean prediction.

    Returns the perturbed pair and the two (H, W, 3) perturbations.
    """
    x0 = [_chw(pair.frame_t)[None].astype(np.float64), _chw(pair.frame_t1)[None].astype(np.float64)]
    if target is None:
        target = predict_full(model, x0[0], x0[1])
    model.requires_grad_(False)
    xs = [a.copy() for a in x0]
    accs = [np.zeros_like(a) for a in x0]
    for _ in range(config.iterations):
        ts = [Tensor(a.astype(model.dtype), requires_grad=True) for a in xs]
        with Tape() as tape:
            obj = cosine_objective(target, forward(model, ts[0], ts[1]).full)
        backward(tape, obj)
        for i in range(2):
            x, accs[i] = fgsm_step(xs[i], ts[i].grad.astype(np.float64), accs[i], config.alpha, config.beta)
            xs[i] = fgsm_project(x, x0[i], config.epsilon)
    out = [a[0].transpose(1, 2, 0) for a in xs]
    deltas = (out[0] - pair.frame_t, out[1] - pair.frame_t1)
    return ImagePair(out[0], out[1]), deltas


def fgsm_dataset_epe(model: Model, dataset, epsilons: Sequence[float], base: FgsmConfig = FgsmConfig()):
    """Mean attacked EPE per epsilon (and the clean EPE under key 0.0)."""
    samples = [_split(s) for s in dataset]
    pairs = [p for p, _ in samples]
    f1 = np.stack([_chw(p.frame_t) for p in pairs])
    f2 = np.stack([_chw(p.frame_t1) for p in pairs])
    clean = predict_full(model, f1, f2)
    table = {0.0: float(np.mean([epe(clean[i], f) for i, (_, f) in enumerate(samples)]))}
    examples = {}
    for e in epsilons:
        cfg = FgsmConfig(e, base.alpha, base.beta, base.iterations)
        vals = []
        for i, (pair, flow) in enumerate(samples):
            adv, _ = fgsm_attack(model, pair, cfg, target=clean[i:i + 1])
            a1, a2 = adv.to_batch(model.dtype)
            pred = forward(model, a1, a2).full.data[0]
            vals.append(epe(pred, flow))
            if i == 0:
                examples[e] = (adv, pred)
        table[float(e)] = float(np.mean(vals))
    return table, examples


# ---------------------------------------------------------------------------
# feature replacement


class PlacementMismatch(ValueError):
    pass


def replacement_pass(model: Model, pair: ImagePair, patch: AdversarialPatch, placement: PatchPlacement,
                     tap: Optional[str] = None, bank: Optional[dict] = None) -> np.ndarray:
    """Prediction for the patched pair, optionally replacing one tap with banked features.

    ``bank`` must come from :func:`record_bank` at the same placement.
    """
    attacked = paste_patch(pair, patch, placement)
    if tap is None:
        return forward(model, attacked).full.data[0]
    if bank is None:
        raise ValueError("replacement needs a feature bank")
    if bank.get("placement") != placement:
        raise PlacementMismatch(f"bank recorded at {bank.get('placement')}, replaying at {placement}")
    pred, _ = forward_with_tap(model, attacked, tap=tap, mode="replace", bank=bank["features"])
    return pred.full.data[0]


def record_bank(model: Model, pair: ImagePair, patch: AdversarialPatch, placement: PatchPlacement,
                taps: Sequence[str] = TAP_POINTS) -> dict:
    _, rec = forward_with_tap(model, paste_patch(pair, patch, placement), tap=tuple(taps), mode="record")
    return {"placement": placement, "features": dict(rec)}


def noise_patch(rng: np.random.Generator, size: tuple) -> AdversarialPatch:
    return AdversarialPatch(rng.uniform(0.0, 1.0, size=(*size, 3)))


def feature_replacement_experiment(model: Model, dataset, patch: AdversarialPatch, noise_seed: int = 0,
                                   placements: Optional[Sequence[PatchPlacement]] = None,
                                   taps: Sequence[str] = TAP_POINTS) -> tuple[dict, list]:
    """Attacked EPE without replacement and with each tap replaced by noise-patch features.

    For every sample a uniform-noise patch is pasted at a (sampled or given)
    location and the tap activations are recorded; the adversarial patch is then
    pasted at the same location and the forward pass is repeated with each tap
    swapped for its recorded counterpart. Returns the mean table and per-sample rows.
    """
    rng = np.random.default_rng(noise_seed)
    rows = []
    for i, sample in enumerate(dataset):
        pair, flow = _split(sample)
        placement = placements[i] if placements is not None else \
            random_placement(rng, pair.shape, patch.size)
        noise = noise_patch(rng, patch.size)
        bank = record_bank(model, pair, noise, placement, taps)
        gt = zero_footprint(flow, footprint_mask(patch.size, placement, pair.shape, patch.mask))
        row = {"index": i, "x": placement.x, "y": placement.y,
               "none": epe(replacement_pass(model, pair, patch, placement), gt, flow.valid)}
        for tap in taps:
            row[tap] = epe(replacement_pass(model, pair, patch, placement, tap, bank), gt, flow.valid)
        rows.append(row)
    table = {k: float(np.mean([r[k] for r in rows])) for k in ("none", *taps)}
    return table, rows
