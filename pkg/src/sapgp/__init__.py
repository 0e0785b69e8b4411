"""Matrix-free Gaussian-process inference with sketch-and-project solvers.

The package solves (K + lam I) W = Y through block access to the kernel
matrix only: exact sketch-and-project with optional tail averaging and exact
determinantal block sampling, an approximate accelerated variant built on
randomized Nystrom subspace preconditioning, stochastic dual descent and
Nystrom-preconditioned conjugate gradient baselines, pathwise-conditioning
posterior sampling, and a verification lab that certifies the solver's
subspace-convergence behavior empirically.
"""

__version__ = "0.1.0"

import os as _os

# Block-iterative solvers issue many small BLAS calls; a multi-threaded BLAS
# oversubscribes the package's own worker pool and slows those calls badly.
# Respected only if numpy has not been imported yet and the user has not set
# their own thread counts.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")
del _os, _var

from .config import RunConfig
from .data import Dataset, load_csv, standardize, train_test_split
from .dist import WorkerPool, col_dist_matmul, row_dist_matmul
from .dpp import DppModel, expected_projection_mc, lemma2_lower_bound, sample_kdpp, smoothed_condition
from .errors import (
    ConfigError,
    ContractError,
    NumericalError,
    ParseError,
    SapgpError,
    ValidationError,
    WorkerError,
)
from .gp import (
    ExactPrior,
    PosteriorSampleSet,
    RandomFeatureMap,
    RandomFeaturePrior,
    mean_nll,
    pathwise_sample,
    posterior_mean,
    rmse,
    sample_prior,
)
from .kernels import DenseOracle, KernelOracle, KernelSpec, block_block, block_rows_times, kernel_eval
from .randnla import NystromFactor, apply_inv, apply_inv_plain, apply_inv_sqrt, rand_nystrom, rand_nystrom_retry, rand_power_stepsize
from .solvers import (
    AccelParams,
    SolveResult,
    SolverState,
    adasap_solve,
    adasap_step,
    nesterov_update,
    pcg_solve,
    sap_solve,
    sap_step,
    sdd_solve,
    solve,
    tail_average,
)
from .theory import (
    SpectralBasis,
    SyntheticSpectrumProblem,
    effective_rank_check,
    subspace_error,
    verify_lemma2,
    verify_linear_rate,
    verify_sublinear_iterations,
    verify_theorem1,
)
