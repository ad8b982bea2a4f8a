"""Desk-scale multi-modal survival prognosis pipeline on synthetic fundus cohorts.

Subpackages/modules:
  synthdata  - synthetic cohort generation and the on-disk dataset format
  backbone   - selective-scan vision encoder emitting multi-scale feature maps
  pretrain   - stage 1: prototype-based metric classification pretraining
  fusion     - stage 2: multi-scale attention fusion + Cox survival head
  survstats  - survival statistics (C-index, KM, log-rank, Cox regression, CV)
  cli        - experiment runner commands
"""

__version__ = "0.1.0"
