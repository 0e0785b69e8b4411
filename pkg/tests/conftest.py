"""Test-session setup.

Block-iterative solvers issue many small BLAS calls; multi-threaded BLAS
oversubscribes the worker pool and slows those calls by an order of
magnitude. Pin BLAS to one thread before numpy loads (the package's own
worker pool provides the parallelism under test).
"""

import os

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
