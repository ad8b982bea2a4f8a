#!/usr/bin/env python3
"""Ablation table runner: trains every configured variant over its seed list.

Usage: python scripts/run_ablation.py [config.yaml]
Needs a synthesized dataset (run scripts/run_desk.py or `fundusrisk synth`
first); writes ablation.csv / ablation.txt under <out_dir>/ablation.
"""

import sys

from fundusrisk.cli import main

if __name__ == "__main__":
    config = sys.argv[1] if len(sys.argv) > 1 else "configs/desk.yaml"
    sys.exit(main(["ablate", "--config", config, "--verbose"]))
