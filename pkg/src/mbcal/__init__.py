"""Post-hoc probability calibration with multiple boosting calibration trees."""

from .core import (BinStats, CalibrationSample, Dataset, DivisionKind, DivisionScheme, aggregate_dataset,
                   compute_bin_stats, make_division, make_rng)
from .metrics import (MetricConfig, MetricReport, Monotonicity, auc, bfgpce, classify_monotonicity, ece_n,
                      ece_sweep, evaluate, mvce, pce, pud, tce)
from .calibrators import (BetaCalibrator, HistogramCalibrator, IdentityCalibrator, IsotonicCalibrator,
                          PlattCalibrator, ScalingBinningCalibrator)
from .mbct import MbctCalibrator, MbctConfig, MbctModel, export_rules, fit, solve_min_bin_size

__version__ = "0.1.0"
