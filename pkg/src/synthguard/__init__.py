"""Fully synthetic release of tabular microdata: CART synthesis, distance
filtering, ECAP-calibrated noise and privacy/utility scoring."""

__version__ = "0.1.0"

from .cart import CartParams, CartSynthesizer, Tree, build_tree, synthesize
from .distfilter import (
    DistanceFilter,
    DistanceSpec,
    NearSingularError,
    TargetNotReachedError,
    filter_rows,
    filtered_synthesize,
)
from .ecap import (
    CalibrationError,
    EcapQuery,
    NoiseCalibrator,
    NoiseSpec,
    PopulationModel,
    apply_noise,
    calibrate_noise,
    ecap,
    ecap_curve,
    estimate_neighbors,
)
from .metrics import (
    GtcapConfig,
    compare_marginals,
    mean_gtcap,
    pmse,
    replicate_estimates,
    standardized_pmse_ratio,
)
from .tabular import Dataset, Kind, Schema, Variable, load_csv, load_schema, split_holdout, write_csv

__all__ = [
    "CartParams",
    "CartSynthesizer",
    "Tree",
    "build_tree",
    "synthesize",
    "DistanceFilter",
    "DistanceSpec",
    "NearSingularError",
    "TargetNotReachedError",
    "filter_rows",
    "filtered_synthesize",
    "CalibrationError",
    "EcapQuery",
    "NoiseCalibrator",
    "NoiseSpec",
    "PopulationModel",
    "apply_noise",
    "calibrate_noise",
    "ecap",
    "ecap_curve",
    "estimate_neighbors",
    "GtcapConfig",
    "compare_marginals",
    "mean_gtcap",
    "pmse",
    "replicate_estimates",
    "standardized_pmse_ratio",
    "Dataset",
    "Kind",
    "Schema",
    "Variable",
    "load_csv",
    "load_schema",
    "split_holdout",
    "write_csv",
]
