#!/usr/bin/env python3
"""Full desk-scale pipeline: synthesize, pretrain, train, evaluate, biomarker.

Usage: python scripts/run_desk.py [config.yaml]
Defaults to configs/desk.yaml; artifacts land under the config's out_dir.
"""

import sys

from fundusrisk.cli import main

if __name__ == "__main__":
    config = sys.argv[1] if len(sys.argv) > 1 else "configs/desk.yaml"
    for step in ("synth", "pretrain", "train", "biomarker"):
        print(f"--- {step} ---", flush=True)
        rc = main([step, "--config", config])
        if rc:
            sys.exit(rc)
