"""EPE metrics, placement heat maps, moving-patch evaluation and MMD feature analysis."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .data import FlowField, ImagePair
from .models import Model, forward, forward_with_tap
from .patches import (AdversarialPatch, Motion, PatchPlacement, PlacementError, footprint_side,
                      lattice, paste_patch, plan_paste)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# end-point error


def _uv(flow) -> np.ndarray:
    if isinstance(flow, FlowField):
        return flow.uv()
    return np.asarray(flow)


def epe(pred, gt, valid: Optional[np.ndarray] = None) -> float:
    """Mean end-point error over valid pixels.

    ``pred`` and ``gt`` are FlowFields or (2, H, W) arrays. When ``gt`` is a
    FlowField its valid mask is used unless ``valid`` is given.
    """
    p, g = _uv(pred), _uv(gt)
    if p.shape != g.shape:
        raise ValueError(f"flow extents differ: {p.shape} vs {g.shape}")
    if valid is None:
        valid = gt.valid if isinstance(gt, FlowField) else np.ones(g.shape[1:], dtype=bool)
    d = np.sqrt(((p - g) ** 2).sum(axis=0))
    if not valid.any():
        raise ValueError("no valid pixels")
    return float(d[valid].mean())


def zero_footprint(gt, footprint: np.ndarray, value=(0.0, 0.0)) -> np.ndarray:
    """Copy of ``gt`` as (2, H, W) with ``value`` written inside ``footprint``."""
    g = _uv(gt).astype(np.float64, copy=True)
    g[0][footprint] = value[0]
    g[1][footprint] = value[1]
    return g


def epe_attacked(pred, gt, placement: PatchPlacement, patch_shape: tuple = None,
                 footprint: Optional[np.ndarray] = None) -> float:
    """EPE with ground truth set to zero flow inside the patch footprint (frame t)."""
    g = _uv(gt)
    if footprint is None:
        if patch_shape is None:
            raise ValueError("need patch_shape or an explicit footprint")
        footprint = plan_paste(patch_shape, placement, g.shape[1:]).mask
    valid = gt.valid if isinstance(gt, FlowField) else None
    return epe(pred, zero_footprint(g, footprint), valid)


def predict_full(model: Model, frames1: np.ndarray, frames2: np.ndarray, batch: int = 8) -> np.ndarray:
    """Full-resolution predictions for stacks of (N, 3, H, W) frames."""
    out = []
    for s in range(0, len(frames1), batch):
        out.append(forward(model, frames1[s:s + batch].astype(model.dtype),
                           frames2[s:s + batch].astype(model.dtype)).full.data)
    return np.concatenate(out).astype(np.float64)


def _chw(img: np.ndarray) -> np.ndarray:
    return img.transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# heat maps


@dataclass
class EvalReport:
    unattacked_epe: float
    best: float
    median: float
    worst: float
    best_location: tuple
    median_location: tuple
    worst_location: tuple
    per_sample: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.best <= self.median <= self.worst):
            raise ValueError("report ordering best <= median <= worst violated")

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("best_location", "median_location", "worst_location"):
            d[k] = list(d[k])
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


@dataclass
class HeatMap:
    xs: list
    ys: list
    grid: np.ndarray  # (len(ys), len(xs)) dataset-mean attacked EPE
    per_image: np.ndarray  # (N, len(ys), len(xs))
    stride: int
    patch_size: tuple

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("x", "y", "epe"))
        for iy, y in enumerate(self.ys):
            for ix, x in enumerate(self.xs):
                w.writerow((x, y, repr(float(self.grid[iy, ix]))))
        return buf.getvalue()


def summarize(grid: np.ndarray, xs: Sequence[int], ys: Sequence[int]) -> dict:
    """Best, lower-median and worst values and their (x, y) locations in lattice order."""
    flat = grid.reshape(-1)
    order = np.argsort(flat, kind="stable")
    nx = len(xs)

    def loc(i):
        return (int(xs[i % nx]), int(ys[i // nx]))

    b, m, w = int(order[0]), int(order[(len(flat) - 1) // 2]), int(order[-1])
    # ties toward the earliest lattice index for the worst case
    w = int(np.flatnonzero(flat == flat[w])[0])
    return {"best": float(flat[b]), "median": float(flat[m]), "worst": float(flat[w]),
            "best_location": loc(b), "median_location": loc(m), "worst_location": loc(w)}


def _normalize_dataset(dataset) -> list:
    out = []
    for item in dataset:
        if isinstance(item, ImagePair):
            raise TypeError("evaluation needs (ImagePair, FlowField) samples")
        pair, flow = item
        out.append((pair, flow))
    return out


Job = Callable[[], np.ndarray]


def _run_jobs(jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [j() for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(lambda j: j(), jobs))  # map keeps submission order


def _placement_grid(model: Model, dataset: list, patch: AdversarialPatch, xs, ys,
                    make_placement: Callable, gt_inside: Callable, batch: int, workers: int):
    """Attacked EPE for each (sample, lattice location); returns (N, ny, nx) array."""
    locs = [(x, y) for y in ys for x in xs]
    jobs = []
    for si, (pair, flow) in enumerate(dataset):
        for start in range(0, len(locs), batch):
            chunk = list(enumerate(locs))[start:start + batch]

            def job(si=si, pair=pair, flow=flow, chunk=chunk):
                f1, f2, gts, masks = [], [], [], []
                vals = np.full(len(chunk), np.nan)
                keep = []
                for k, (li, (x, y)) in enumerate(chunk):
                    placement = make_placement(si, li, x, y)
                    if placement is None:
                        continue
                    attacked = paste_patch(pair, patch, placement)
                    fp = plan_paste(patch.size, placement, pair.shape, patch.mask).mask
                    f1.append(_chw(attacked.frame_t))
                    f2.append(_chw(attacked.frame_t1))
                    gts.append(zero_footprint(flow, fp, gt_inside(placement, patch.size)))
                    keep.append(k)
                if keep:
                    preds = predict_full(model, np.stack(f1), np.stack(f2), batch=len(keep))
                    for j, k in enumerate(keep):
                        vals[k] = epe(preds[j], gts[j], flow.valid)
                return vals

            jobs.append(job)
    results = _run_jobs(jobs, workers)
    per = np.concatenate(results).reshape(len(dataset), len(ys), len(xs))
    return per


def unattacked_epe(model: Model, dataset: list, batch: int = 8) -> tuple[float, list]:
    f1 = np.stack([_chw(p.frame_t) for p, _ in dataset])
    f2 = np.stack([_chw(p.frame_t1) for p, _ in dataset])
    preds = predict_full(model, f1, f2, batch)
    vals = [epe(preds[i], fl) for i, (_, fl) in enumerate(dataset)]
    return float(np.mean(vals)), vals


def location_heatmap(model: Model, dataset, patch: AdversarialPatch, stride: int,
                     batch: int = 8, workers: int = 1) -> tuple[HeatMap, EvalReport]:
    """Attacked EPE over a stride lattice of in-bounds placements (rotation 0, scale 1)."""
    dataset = _normalize_dataset(dataset)
    H, W = dataset[0][0].shape
    h, w = patch.size
    if h > H or w > W:
        raise PlacementError(f"patch {h}x{w} larger than image {H}x{W}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    xs = list(range(0, W - w + 1, stride))
    ys = list(range(0, H - h + 1, stride))
    per = _placement_grid(model, dataset, patch, xs, ys,
                          lambda si, li, x, y: PatchPlacement(x, y),
                          lambda placement, size: (0.0, 0.0), batch, workers)
    grid = per.mean(axis=0)
    clean, clean_vals = unattacked_epe(model, dataset, batch)
    s = summarize(grid, xs, ys)
    per_sample = [{"index": i, "unattacked": clean_vals[i],
                   "worst": float(per[i].max()), "median": float(np.sort(per[i].ravel())[(per[i].size - 1) // 2])}
                  for i in range(len(dataset))]
    report = EvalReport(clean, s["best"], s["median"], s["worst"], s["best_location"],
                        s["median_location"], s["worst_location"], per_sample,
                        {"stride": stride, "patch_size": [h, w], "samples": len(dataset)})
    return HeatMap(xs, ys, grid, per, stride, (h, w)), report


@dataclass(frozen=True)
class MotionRanges:
    translation: float = 50.0
    rotation: float = 180.0
    scale: float = 0.05


def sample_motion(rng: np.random.Generator, ranges: MotionRanges) -> Motion:
    t = int(math.floor(ranges.translation))
    dx = int(rng.integers(-t, t + 1)) if t > 0 else 0
    dy = int(rng.integers(-t, t + 1)) if t > 0 else 0
    rot = float(rng.uniform(-ranges.rotation, ranges.rotation)) if ranges.rotation > 0 else 0.0
    sc = float(1.0 + rng.uniform(-ranges.scale, ranges.scale)) if ranges.scale > 0 else 1.0
    return Motion(dx, dy, rot, sc)


def patch_translation(patch_shape: tuple, placement: PatchPlacement) -> tuple[float, float]:
    """Displacement of the footprint center between frame t and frame t+1."""
    h, w = patch_shape
    a, b = placement, placement.second()
    ca = (a.x + footprint_side(w, a.scale) / 2, a.y + footprint_side(h, a.scale) / 2)
    cb = (b.x + footprint_side(w, b.scale) / 2, b.y + footprint_side(h, b.scale) / 2)
    return (cb[0] - ca[0], cb[1] - ca[1])


def moving_placement(image_shape: tuple, patch_shape: tuple, x: int, y: int, ranges: MotionRanges,
                     rng: np.random.Generator, max_retries: int = 20) -> Optional[PatchPlacement]:
    """Placement at (x, y) with a sampled in-bounds second-frame motion, or None."""
    for _ in range(max_retries):
        p = PatchPlacement(x, y, second_frame_delta=sample_motion(rng, ranges))
        try:
            plan_paste(patch_shape, p.second(), image_shape)
        except PlacementError:
            continue
        return p
    return None


def moving_patch_eval(model: Model, dataset, patch: AdversarialPatch, stride: int,
                      ranges: MotionRanges = MotionRanges(), seed: int = 0, max_retries: int = 20,
                      batch: int = 8, workers: int = 1) -> tuple[HeatMap, EvalReport]:
    """Heat-map evaluation with the patch moving between the two frames.

    Ground truth inside the frame-t footprint becomes the patch's own translation.
    Placements whose second-frame footprint cannot be kept in bounds after
    ``max_retries`` draws are skipped and excluded from the statistics.
    """
    dataset = _normalize_dataset(dataset)
    H, W = dataset[0][0].shape
    h, w = patch.size
    if h > H or w > W:
        raise PlacementError(f"patch {h}x{w} larger than image {H}x{W}")
    xs = list(range(0, W - w + 1, stride))
    ys = list(range(0, H - h + 1, stride))
    skipped = []

    def make(si, li, x, y):
        rng = np.random.default_rng(np.random.SeedSequence([seed, si, li]))
        p = moving_placement((H, W), (h, w), x, y, ranges, rng, max_retries)
        if p is None:
            skipped.append((si, x, y))
            log.warning("skipping placement (%d, %d) of sample %d: no in-bounds motion", x, y, si)
        return p

    per = _placement_grid(model, dataset, patch, xs, ys, make,
                          lambda placement, size: patch_translation(size, placement), batch, workers)
    counts = np.isfinite(per).sum(axis=0)
    grid = np.where(counts > 0, np.nansum(per, axis=0) / np.maximum(counts, 1), np.nan)
    finite = np.isfinite(grid)
    if not finite.any():
        raise PlacementError("every placement was skipped")
    g = np.where(finite, grid, np.nan)
    clean, clean_vals = unattacked_epe(model, dataset, batch)
    s = summarize(np.where(finite, g, -np.inf), xs, ys)
    fin_vals = np.sort(g[finite])
    best = float(fin_vals[0])
    median = float(fin_vals[(len(fin_vals) - 1) // 2])
    flat = g.reshape(-1)

    def loc_of(v):
        i = int(np.flatnonzero(flat == v)[0])
        return (xs[i % len(xs)], ys[i // len(xs)])

    report = EvalReport(clean, best, median, s["worst"], loc_of(best), loc_of(median),
                        s["worst_location"], [{"index": i, "unattacked": v} for i, v in enumerate(clean_vals)],
                        {"stride": stride, "patch_size": [h, w], "seed": seed,
                         "ranges": asdict(ranges), "skipped": len(skipped)})
    return HeatMap(xs, ys, grid, per, stride, (h, w)), report


# ---------------------------------------------------------------------------
# MMD


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Median pairwise Euclidean distance of the pooled samples (1.0 if degenerate)."""
    d = pdist(np.concatenate([x, y]))
    med = float(np.median(d)) if d.size else 0.0
    return med if med > 0 else 1.0


def mmd(x, y, sigma: Optional[float] = None) -> float:
    """Unbiased squared MMD with a Gaussian kernel.

    For equal sample sizes the U-statistic over pairs ``i != j`` is used, so two
    identical sets give exactly zero; otherwise the cross term averages over
    all pairs. ``sigma`` defaults to the median heuristic.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise ValueError("mmd needs at least 2 samples per set")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    if sigma is None:
        sigma = median_bandwidth(x, y)
    if not sigma > 0:
        raise ValueError(f"bandwidth must be positive, got {sigma}")
    g = 1.0 / (2.0 * sigma * sigma)
    kxx = np.exp(-g * cdist(x, x, "sqeuclidean"))
    kyy = np.exp(-g * cdist(y, y, "sqeuclidean"))
    kxy = np.exp(-g * cdist(x, y, "sqeuclidean"))
    txx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    tyy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    if n == m:
        txy = (kxy.sum() - np.trace(kxy)) / (n * (n - 1))
    else:
        txy = kxy.mean()
    return float(txx + tyy - 2.0 * txy)


SEPARABILITY_TAPS = {"before_corr": "conv3", "after_corr": "corr"}


@dataclass
class FeatureSampleSet:
    unattacked: np.ndarray  # (N, D)
    attacked: np.ndarray  # (N, D)

    def __post_init__(self):
        if self.unattacked.shape[1] != self.attacked.shape[1]:
            raise ValueError("feature dimensionality differs between sets")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.unattacked.shape[1]
        w.writerow(["set"] + [f"f{i}" for i in range(d)])
        for label, arr in (("unattacked", self.unattacked), ("attacked", self.attacked)):
            for row in arr:
                w.writerow([label] + [repr(float(v)) for v in row])
        return buf.getvalue()


def random_placement(rng: np.random.Generator, image_shape: tuple, patch_shape: tuple) -> PatchPlacement:
    H, W = image_shape
    h, w = patch_shape
    return PatchPlacement(int(rng.integers(0, W - w + 1)), int(rng.integers(0, H - h + 1)))


def feature_separability(model: Model, dataset, patch: AdversarialPatch, seed: int = 0,
                         placements: Optional[Sequence[PatchPlacement]] = None,
                         taps: dict = SEPARABILITY_TAPS) -> tuple[dict, dict]:
    """MMD between spatially averaged clean and attacked features at each tap.

    Returns ``(scores, sets)``: tap label -> MMD and tap label -> FeatureSampleSet.
    """
    dataset = _normalize_dataset(dataset)
    rng = np.random.default_rng(seed)
    names = list(taps.values())
    clean = {k: [] for k in taps}
    attacked = {k: [] for k in taps}
    for i, (pair, _) in enumerate(dataset):
        placement = placements[i] if placements is not None else \
            random_placement(rng, pair.shape, patch.size)
        for store, p in ((clean, pair), (attacked, paste_patch(pair, patch, placement))):
            _, rec = forward_with_tap(model, p, tap=names, mode="record")
            for label, name in taps.items():
                store[label].append(rec[name][0].mean(axis=(1, 2)).astype(np.float64))
    sets = {k: FeatureSampleSet(np.stack(clean[k]), np.stack(attacked[k])) for k in taps}
    scores = {k: mmd(s.unattacked, s.attacked) for k, s in sets.items()}
    return scores, sets
