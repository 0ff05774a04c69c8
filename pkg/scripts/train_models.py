"""Train the three desk-scale checkpoints used by the acceptance suite.

Usage: python scripts/train_models.py [variant ...]
Writes artifacts/<variant>/{model.ckpt, metrics.csv, config.resolved.json}.
"""
import sys
import time
from pathlib import Path

from flowattack import cli

ROOT = Path(__file__).resolve().parents[1]
VARIANTS = ("flownetc_mini", "robust_flownetc_mini", "flownets_mini")


def main(argv):
    for variant in argv or VARIANTS:
        t0 = time.time()
        code = cli.run(["train", "--config", str(ROOT / "configs" / f"train_{variant}.json"),
                        "--out", str(ROOT / "artifacts" / variant)])
        print(f"{variant}: exit {code} after {time.time() - t0:.0f}s", flush=True)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
