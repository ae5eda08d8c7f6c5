#!/usr/bin/env python3
"""Paired-training experiment: full noise-injection vs sensitivity-aware.

Pretrains a clean model, then for every noise configuration in the config's
grid trains it twice with identical seeds -- once with all eligible layers
trainable, once with only the top-k most noise-sensitive layers -- and prints
the comparison table (accuracies plus work and wall-time speedups).
"""

import argparse
import sys
from pathlib import Path

from saft.cli import cmd_compare
from saft.config import apply_overrides, load_config

DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "blobs_cnn.yaml"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(DEFAULT_CONFIG))
    parser.add_argument("--seed", type=int, default=None, help="override run seeds")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument("--k", type=int, default=None, help="override trainable layer count")
    args = parser.parse_args()
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, seed=args.seed, out_dir=args.out, k=args.k)
    cmd_compare(cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
