"""Connectome-based phenotype prediction on multi-site cohorts.

The pipeline has four stages: region estimation (parcellation), region
signal extraction and cleaning (signals), connectivity parameterization
(connectivity) and linear classification (classify), evaluated under
site-aware cross-validation (evaluate). synthdata generates reproducible
lattice cohorts with planted ground truth for end-to-end verification,
and runner/cli bind everything into configuration-driven runs.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    classify,
    connectivity,
    evaluate,
    figures,
    parcellation,
    runner,
    signals,
    synthdata,
)
