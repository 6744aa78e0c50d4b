"""Bayesian optimization of cascade processes with stage-wise suspension."""
from .acq_ci import CIParams, ci_recursion, ci_select, estimate_lf, q_t, sigma_lipschitz_bound
from .acq_ei import BaseSamples, EIContext, ei_scalar, maximize_ei, u_tilde, u_tilde_batch
from .baselines import CboParams, cbo_select, fb_select, random_select
from .benchmarks import REGISTRY, build_benchmark, get_benchmark, sample_path_cascade, true_optimum
from .cascade import CascadeModel, CascadeSpec, EvalRecord, ObservationLog, StageSpec
from .config import METHODS, RunConfig, parse_config, read_config
from .errors import (CascadeError, ConfigError, ConsistencyViolation, EvaluatorFailure, InvalidArgument,
                     NumericalFailure, OptimizerFailure, Unsupported)
from .gp import GPPosterior, KernelSpec, StageDataset, fit_hyperparams, fit_posterior, sample_path
from .harness import run_seed, summarize, write_outputs
from .optim import GridMaximizer, MultiStartMaximizer, OptBudget
from .suspension import CostVector, StockLedger, select_suspension, stock_reduction

__version__ = "0.1.0"
