"""Command-line entry point: ``flowattack <subcommand> [--config run.json] [flags]``.

Every subcommand that produces files writes ``config.resolved.json`` into its
output directory. Failures exit with status 1 and one stderr line of the form
``error: <category>: <message>``.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import itertools
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import attacks as A
from . import evaluation as E
from . import tensor as T
from .data import (DatasetManifest, FloFormatError, FlowField, SceneConfig, flow_to_color,
                   read_flo, write_image)
from .models import EncoderSpec, load_checkpoint, preset, receptive_field
from .patches import AdversarialPatch, PatchPlacement, PlacementError
from .training import TrainConfig, TrainingDivergence, train

SCHEMA_VERSION = 1
RESOLVED_NAME = "config.resolved.json"
HELD_OUT_START = 100000

log = logging.getLogger("flowattack")


class ConfigError(ValueError):
    pass


DATASET_DEFAULTS = {"start": 0, "count": 2000, "scene": {}}
EVAL_DATASET_DEFAULTS = {"start": HELD_OUT_START, "count": 16, "scene": {}}

DEFAULTS = {
    "train": {
        "variant": "flownetc_mini", "spec": {}, "model_seed": 0,
        "dataset": DATASET_DEFAULTS, "train": {},
    },
    "attack-patch": {
        "checkpoint": None, "dataset": {"start": 0, "count": 64, "scene": {}}, "attack": {},
        "init": None,
    },
    "attack-stripes": {
        "stripes": {}, "sweep": {}, "checkpoint": None, "dataset": EVAL_DATASET_DEFAULTS,
        "stride": 16,
    },
    "attack-fgsm": {
        "checkpoint": None, "dataset": {"start": HELD_OUT_START, "count": 8, "scene": {}},
        "epsilons": [0.02, 0.01, 0.005, 0.002], "alpha": 0.002, "beta": 0.47, "iterations": 20,
    },
    "eval-heatmap": {
        "checkpoint": None, "patch": None, "dataset": EVAL_DATASET_DEFAULTS, "stride": 16,
        "moving": False, "motion": {"translation": 50.0, "rotation": 180.0, "scale": 0.05}, "seed": 0,
    },
    "eval-replace": {
        "checkpoint": None, "patch": None, "dataset": EVAL_DATASET_DEFAULTS, "noise_seed": 0,
        "location": "random", "stride": 16,
    },
    "eval-mmd": {
        "checkpoint": None, "patch": None, "dataset": {"start": HELD_OUT_START, "count": 64, "scene": {}},
        "seed": 0,
    },
}

SECTION_TYPES = {"spec": dict, "train": dict, "attack": dict, "stripes": dict, "sweep": dict,
                 "dataset": dict, "motion": dict}


def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if k not in defaults:
            raise ConfigError(f"unknown key {where}{k!r}")
        if k in ("dataset", "motion") and isinstance(v, dict):
            out[k] = _merge(defaults[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def resolve_config(command: str, config_path: Optional[str], overrides: dict) -> dict:
    """Defaults <- JSON file <- non-None flag overrides; unknown keys are rejected."""
    given = {}
    if config_path:
        try:
            given = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path} is not valid JSON ({exc.msg} at line {exc.lineno})")
        if not isinstance(given, dict):
            raise ConfigError("config root must be a JSON object")
    version = given.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    cfg = _merge(DEFAULTS[command], given, "")
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    for k, typ in SECTION_TYPES.items():
        if k in cfg and not isinstance(cfg[k], typ):
            raise ConfigError(f"section {k!r} must be an object")
    cfg["schema_version"] = SCHEMA_VERSION
    return cfg


def _dataset(cfg: dict) -> DatasetManifest:
    d = cfg["dataset"]
    try:
        scene = SceneConfig.from_json(d.get("scene", {}))
    except TypeError as exc:
        raise ConfigError(f"bad scene config: {exc}")
    return DatasetManifest.range(int(d["start"]), int(d["count"]), scene)


def _construct(cls, params: dict, what: str):
    try:
        return cls(**params)
    except TypeError as exc:
        raise ConfigError(f"bad {what} config: {exc}")


def _require(cfg: dict, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise ConfigError(f"missing required setting {k!r}")


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_resolved(out: Path, cfg: dict) -> None:
    (out / RESOLVED_NAME).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    path.write_text(buf.getvalue())


def _load_patch(path) -> AdversarialPatch:
    if not Path(path).exists():
        raise FileNotFoundError(f"patch file {path} not found")
    return AdversarialPatch.load(path)


def _render_heatmap(path: Path, hm: E.HeatMap, image_shape: tuple) -> None:
    """Linearly interpolated, clipped heat map rendered with a colormap."""
    from matplotlib import colormaps
    from scipy.ndimage import zoom

    g = hm.grid
    if g.shape[0] > 1 and g.shape[1] > 1:
        g = zoom(g, (max(1, image_shape[0] // hm.stride), max(1, image_shape[1] // hm.stride)), order=1)
    lo, hi = np.percentile(g, 1), np.percentile(g, 99)
    g = np.clip((g - lo) / (hi - lo) if hi > lo else np.zeros_like(g), 0.0, 1.0)
    write_image(path, colormaps["viridis"](g)[..., :3])


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(cfg: dict, out: Path, jobs: int) -> None:
    spec_cfg = dict(cfg["spec"])
    if "channels_per_level" in spec_cfg:
        spec_cfg["channels_per_level"] = tuple(spec_cfg["channels_per_level"])
    spec = _construct(lambda **kw: preset(cfg["variant"], **kw), spec_cfg, "spec")
    tc = _construct(lambda **kw: TrainConfig.from_json(kw), cfg["train"], "train")
    manifest = _dataset(cfg)
    train(spec, manifest, tc, checkpoint_path=out / "model.ckpt", metrics_path=out / "metrics.csv",
          model_seed=int(cfg["model_seed"]))
    print(out / "model.ckpt")


def cmd_attack_patch(cfg: dict, out: Path, jobs: int) -> None:
    _require(cfg, "checkpoint")
    model = load_checkpoint(cfg["checkpoint"])
    ac = _construct(A.PatchAttackConfig, cfg["attack"], "attack")
    init = _load_patch(cfg["init"]) if cfg.get("init") else None
    patch, trace = A.optimize_patch(model, _dataset(cfg).samples(), ac, init=init)
    patch.save(out / "patch.png", {"checkpoint": str(cfg["checkpoint"])})
    (out / "trace.csv").write_text(A.format_trace(trace))
    print(out / "patch.png")


def _sweep_configs(base: dict, sweep: dict) -> list[dict]:
    if not sweep:
        return [dict(base)]
    keys = sorted(sweep)
    for k in keys:
        if not isinstance(sweep[k], list) or not sweep[k]:
            raise ConfigError(f"sweep values for {k!r} must be a non-empty list")
    return [{**base, **dict(zip(keys, combo))} for combo in itertools.product(*(sweep[k] for k in keys))]


def cmd_attack_stripes(cfg: dict, out: Path, jobs: int) -> None:
    """Generate one striped patch, or a sweep; with a checkpoint also evaluate each."""
    variants = _sweep_configs(cfg["stripes"], cfg["sweep"])
    model = load_checkpoint(cfg["checkpoint"]) if cfg.get("checkpoint") else None
    samples = _dataset(cfg).samples() if model is not None else None
    keys = sorted(set(itertools.chain.from_iterable(v.keys() for v in variants)))
    rows = []
    for i, params in enumerate(variants):
        sc = _construct(A.StripeConfig, params, "stripes")
        patch = A.make_striped_patch(sc)
        name = "patch.png" if len(variants) == 1 else f"patch_{i:03d}.png"
        patch.save(out / name)
        if model is not None:
            _, rep = E.location_heatmap(model, samples, patch, int(cfg["stride"]), workers=jobs)
            rows.append([i] + [json.dumps(params.get(k)) for k in keys] +
                        [rep.unattacked_epe, rep.best, rep.median, rep.worst])
    if model is not None:
        _write_csv(out / "sweep.csv", ["index"] + keys + ["unattacked", "best", "median", "worst"], rows)
    print(out)


def cmd_attack_fgsm(cfg: dict, out: Path, jobs: int) -> None:
    _require(cfg, "checkpoint")
    model = load_checkpoint(cfg["checkpoint"])
    base = _construct(A.FgsmConfig, {"alpha": cfg["alpha"], "beta": cfg["beta"],
                                     "iterations": int(cfg["iterations"])}, "fgsm")
    eps = [float(e) for e in cfg["epsilons"]]
    if any(e <= 0 for e in eps):
        raise ConfigError("epsilons must be positive")
    table, examples = A.fgsm_dataset_epe(model, _dataset(cfg).samples(), eps, base)
    _write_csv(out / "fgsm.csv", ["epsilon", "epe"], [[e, v] for e, v in table.items()])
    for e, (adv, pred) in examples.items():
        write_image(out / f"example_eps{e:g}_frame_t.png", adv.frame_t)
        write_image(out / f"example_eps{e:g}_flow.png", flow_to_color(FlowField.from_uv(pred)))
    print(out / "fgsm.csv")


def cmd_eval_heatmap(cfg: dict, out: Path, jobs: int) -> None:
    _require(cfg, "checkpoint", "patch")
    model = load_checkpoint(cfg["checkpoint"])
    patch = _load_patch(cfg["patch"])
    samples = _dataset(cfg).samples()
    if cfg["moving"]:
        ranges = _construct(E.MotionRanges, cfg["motion"], "motion")
        hm, rep = E.moving_patch_eval(model, samples, patch, int(cfg["stride"]), ranges,
                                      seed=int(cfg["seed"]), workers=jobs)
    else:
        hm, rep = E.location_heatmap(model, samples, patch, int(cfg["stride"]), workers=jobs)
    rep.config.update({"checkpoint": str(cfg["checkpoint"]), "patch": str(cfg["patch"])})
    (out / "heatmap.csv").write_text(hm.to_csv())
    rows = [[i, x, y, hm.per_image[i, iy, ix]] for i in range(hm.per_image.shape[0])
            for iy, y in enumerate(hm.ys) for ix, x in enumerate(hm.xs)]
    _write_csv(out / "heatmap_per_image.csv", ["index", "x", "y", "epe"], rows)
    _render_heatmap(out / "heatmap.png", hm, samples[0][0].shape)
    (out / "report.json").write_text(rep.dumps() + "\n")
    print(json.dumps({"unattacked": rep.unattacked_epe, "best": rep.best, "median": rep.median,
                      "worst": rep.worst}))


def cmd_eval_replace(cfg: dict, out: Path, jobs: int) -> None:
    _require(cfg, "checkpoint", "patch")
    model = load_checkpoint(cfg["checkpoint"])
    patch = _load_patch(cfg["patch"])
    samples = _dataset(cfg).samples()
    placements = None
    if cfg["location"] == "worst":
        _, rep = E.location_heatmap(model, samples, patch, int(cfg["stride"]), workers=jobs)
        placements = [PatchPlacement(*rep.worst_location)] * len(samples)
    elif cfg["location"] != "random":
        raise ConfigError("location must be 'random' or 'worst'")
    table, rows = A.feature_replacement_experiment(model, samples, patch, int(cfg["noise_seed"]),
                                                   placements=placements)
    keys = ["none", "conv3", "conv_redir", "corr"]
    _write_csv(out / "replace.csv", ["index", "x", "y"] + keys,
               [[r["index"], r["x"], r["y"]] + [r[k] for k in keys] for r in rows])
    (out / "replace.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    print(json.dumps(table))


def cmd_eval_mmd(cfg: dict, out: Path, jobs: int) -> None:
    _require(cfg, "checkpoint", "patch")
    model = load_checkpoint(cfg["checkpoint"])
    patch = _load_patch(cfg["patch"])
    scores, sets = E.feature_separability(model, _dataset(cfg).samples(), patch, seed=int(cfg["seed"]))
    for label, s in sets.items():
        (out / f"features_{label}.csv").write_text(s.to_csv())
    (out / "mmd.json").write_text(json.dumps(scores, indent=2, sort_keys=True) + "\n")
    print(json.dumps(scores))


def cmd_rf(args) -> None:
    spec = EncoderSpec(kernel_size=args.kernel, convs_per_level=args.convs, dilation=args.dilation,
                       levels=args.levels)
    print(receptive_field(spec))


def cmd_render(args) -> None:
    flow = read_flo(args.flo)
    out = Path(args.out) if args.out else Path(args.flo).with_suffix(".png")
    write_image(out, flow_to_color(flow, args.max_magnitude))
    print(out)


COMMANDS = {
    "train": cmd_train, "attack-patch": cmd_attack_patch, "attack-stripes": cmd_attack_stripes,
    "attack-fgsm": cmd_attack_fgsm, "eval-heatmap": cmd_eval_heatmap, "eval-replace": cmd_eval_replace,
    "eval-mmd": cmd_eval_mmd,
}

# flag -> dotted config key, per subcommand
FLAG_KEYS = {
    "train": {"variant": "variant", "iterations": "train.iterations", "lr": "train.peak_lr",
              "precision": "train.precision", "seed": "train.seed", "model_seed": "model_seed",
              "count": "dataset.count"},
    "attack-patch": {"checkpoint": "checkpoint", "iterations": "attack.iterations", "lr": "attack.lr",
                     "size": "attack.size", "seed": "attack.seed", "count": "dataset.count"},
    "attack-stripes": {"checkpoint": "checkpoint", "size": "stripes.size", "width": "stripes.stripe_width",
                       "orientation": "stripes.orientation", "contrast": "stripes.contrast",
                       "stride": "stride", "count": "dataset.count"},
    "attack-fgsm": {"checkpoint": "checkpoint", "iterations": "iterations", "count": "dataset.count"},
    "eval-heatmap": {"checkpoint": "checkpoint", "patch": "patch", "stride": "stride", "seed": "seed",
                     "count": "dataset.count"},
    "eval-replace": {"checkpoint": "checkpoint", "patch": "patch", "noise_seed": "noise_seed",
                     "location": "location", "count": "dataset.count"},
    "eval-mmd": {"checkpoint": "checkpoint", "patch": "patch", "seed": "seed", "count": "dataset.count"},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowattack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config; flags override its values")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="maximum worker threads")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--variant", choices=["flownetc_mini", "robust_flownetc_mini", "flownets_mini"])
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--precision", choices=["f32", "f64"])
    p.add_argument("--seed", type=int)
    p.add_argument("--model-seed", dest="model_seed", type=int)
    p.add_argument("--count", type=int, help="number of training scenes")

    p = sub.add_parser("attack-patch", help="optimize an adversarial patch")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)

    p = sub.add_parser("attack-stripes", help="generate (and optionally evaluate) striped patches")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--size", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--orientation", type=float)
    p.add_argument("--contrast", type=float)
    p.add_argument("--stride", type=int)
    p.add_argument("--count", type=int)

    p = sub.add_parser("attack-fgsm", help="iterative FGSM over a dataset")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--iterations", type=int)
    p.add_argument("--count", type=int)

    p = sub.add_parser("eval-heatmap", help="placement heat map and report")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--patch")
    p.add_argument("--stride", type=int)
    p.add_argument("--moving", action="store_const", const=True, default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)

    p = sub.add_parser("eval-replace", help="feature replacement experiment")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--patch")
    p.add_argument("--noise-seed", dest="noise_seed", type=int)
    p.add_argument("--location", choices=["random", "worst"])
    p.add_argument("--count", type=int)

    p = sub.add_parser("eval-mmd", help="feature separability (MMD)")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--patch")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)

    p = sub.add_parser("rf", help="print the encoder receptive field")
    p.add_argument("--kernel", type=int, default=5)
    p.add_argument("--convs", type=int, default=1)
    p.add_argument("--dilation", type=int, default=1)
    p.add_argument("--levels", type=int, default=3)

    p = sub.add_parser("render", help="render a .flo file as a color PNG")
    p.add_argument("flo")
    p.add_argument("--out")
    p.add_argument("--max-magnitude", dest="max_magnitude", type=float)
    return parser


ERROR_CATEGORIES = (
    (ConfigError, "config"),
    (FloFormatError, "format"),
    (FileNotFoundError, "io"),
    (OSError, "io"),
    (PlacementError, "placement"),
    (T.ShapeError, "shape"),
    (TrainingDivergence, "divergence"),
    (ValueError, "value"),
)


def _category(exc: BaseException) -> str:
    for cls, name in ERROR_CATEGORIES:
        if isinstance(exc, cls):
            return name
    return "internal"


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rf":
            cmd_rf(args)
        elif args.command == "render":
            cmd_render(args)
        else:
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            overrides = {key: getattr(args, flag) for flag, key in FLAG_KEYS[args.command].items()}
            cfg = resolve_config(args.command, args.config, overrides)
            out = _outdir(args.out)
            _write_resolved(out, cfg)
            COMMANDS[args.command](cfg, out, args.jobs)
    except Exception as exc:  # noqa: BLE001 - top-level error reporting
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {_category(exc)}: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
