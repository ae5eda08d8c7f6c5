#!/usr/bin/env python3
"""Profile layer sensitivity three ways and measure their agreement.

Runs the single-pass std ranking, the KL-divergence alternative and the
brute-force perturb-one-layer-at-a-time oracle on the same pretrained model,
then prints the per-layer numbers and the Spearman agreement of each cheap
metric with the oracle. The plot and CSV land in the config's output
directory.
"""

import argparse
import sys
from pathlib import Path

from saft.cli import cmd_oracle, cmd_sensitivity
from saft.config import apply_overrides, load_config

DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "blobs_cnn.yaml"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(DEFAULT_CONFIG))
    parser.add_argument("--seed", type=int, default=None, help="override run seeds")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument("--suggest-k", action="store_true",
                        help="print the knee-point k suggestion")
    args = parser.parse_args()
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, seed=args.seed, out_dir=args.out)
    cmd_sensitivity(cfg, want_suggestion=args.suggest_k)
    cmd_oracle(cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
