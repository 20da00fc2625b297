"""Weighting estimators and sensitivity analysis for clustered observational studies."""

from .amplification import (AmplificationCurve, BenchmarkEntry, amplify_lambda, amplify_r2,
                            benchmark, benchmark_plot_data, compose_r2)
from .bootstrap import BootstrapCI, BootstrapSpec, Statistic, block_bootstrap
from .data import CosDataset, SchemaConfig, load_dataset, standardized_differences, write_dataset
from .decomposition import (DecompositionReport, WeightTriple, bias_decomposition,
                            nested_weight_triple, oracle_weight_factorization_check,
                            validity_conditions_check)
from .estimation import ClusterWeightingEstimator, EffectEstimate, group_moments, point_estimate
from .exceptions import (ConfigError, CosError, DataError, NumericalError,
                         UnsupportedEstimandError)
from .sensitivity import msm_bounds, msm_threshold, sensitivity_grid, vbm_bounds, vbm_threshold
from .simulation import DgpConfig, icc, oracle_parameters, run_sim1, run_sim2
from .weights import (Conditioning, EntropyBalancer, Estimand, LogisticPropensity,
                      StableBalancer, WeightPipeline, WeightSet, balancing_weights,
                      fit_propensity, stable_weights,
                      normalize, weights_from_propensity)

__version__ = "0.1.0"

_MODULES = {"amplification", "bootstrap", "data", "decomposition", "estimation", "exceptions",
            "sensitivity", "simulation", "weights"}

__all__ = [name for name in dir() if not name.startswith("_") and name not in _MODULES]
