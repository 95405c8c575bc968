"""Grant-free device activity detection in cell-free massive MIMO.

Simulates the uplink random-access slot (deployment, fading, pilots,
received signals), runs the covariance maximum-likelihood and deep-MLP
detectors, and evaluates ROC robustness under estimation error and
fixed-point quantization.
"""

from .clustering import gather_cluster_signals, select_clusters
from .config import (ConfigError, ExperimentConfig, default_experiment_config,
                     parse_config, write_config)
from .dataset import Dataset, generate_dataset, load_dataset, save_dataset
from .dmlp import (MlpHyperparams, MlpModel, bce_loss, featurize, forward,
                   hard_decision, load_checkpoint, predict_all, predict_batch,
                   save_checkpoint, train)
from .evaluation import (CalibrationResult, ErrorRates, RocCurve,
                         calibrate_threshold, compute_roc, error_rates)
from .impairments import (FixedPointFormat, PerturbationParams, perturb_beta,
                          quantize, quantize_beta, quantize_signal)
from .ml_detector import (MlProblem, SoftScores, build_ml_problem,
                          detect_ml_batch, ml_coordinate_descent, ml_cost)
from .simcore import (Deployment, LargeScaleFading, PlacementError,
                      SystemConfig, compute_beta, generate_pilots,
                      place_network, sample_activity, simulate_received,
                      torus_distance, trial_rng)

__version__ = "0.1.0"
