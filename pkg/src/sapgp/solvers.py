"""Iterative solvers for the regularized kernel system (K + lam I) W = Y.

All solvers consume an oracle (``kernels.KernelOracle`` or a dense test
oracle), touch the kernel matrix only through block products, and append to a
ConvergenceTrace. Budgets are expressed in passes over the kernel matrix;
one block iteration costs blocksize/n of a pass, one full matvec costs one.
"""

from __future__ import annotations

import math
import time
import zlib
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .dist import WorkerPool, col_dist_matmul, row_dist_matmul
from .errors import ConfigError, ContractError, NumericalError
from .randnla import NystromFactor, apply_inv, rand_nystrom_retry, rand_power_stepsize
from .rng import substream

DIVERGENCE_FACTOR = 1e6
SDD_MOMENTUM = 0.9


# ---------------------------------------------------------------------------
# acceleration parameters and the Nesterov recurrence


@dataclass(frozen=True)
class AccelParams:
    """Momentum pair (mu, nu) with the derived step mixing coefficients."""

    mu: float
    nu: float

    def __post_init__(self):
        if not (self.mu > 0.0 and self.nu > 0.0):
            raise ContractError("acceleration parameters must be positive")

    @property
    def beta(self):
        return 1.0 - math.sqrt(self.mu / self.nu)

    @property
    def gamma(self):
        return 1.0 / math.sqrt(self.mu * self.nu)

    @property
    def alpha(self):
        return 1.0 / (1.0 + self.gamma * self.nu)


@dataclass(frozen=True)
class RawAccel:
    """Direct mixing coefficients, for ablations such as (1, 0, 0), which
    turns the accelerated update into plain iteration on Z."""

    beta: float
    gamma: float
    alpha: float


NO_ACCELERATION = RawAccel(beta=1.0, gamma=0.0, alpha=0.0)


def resolve_accel(config, n, blocksize):
    """Defaults: mu = lam, nu = n / blocksize."""
    mu = config.lam if config.mu == "default" else float(config.mu)
    nu = n / blocksize if config.nu == "default" else float(config.nu)
    return AccelParams(mu, nu)


def nesterov_update(W, V, Z, direction, eta, beta, gamma, alpha):
    """One accelerated update; the Z blend uses the incoming V.

    W' = Z - eta D;  V' = beta V + (1-beta) Z - gamma eta D;
    Z' = alpha V + (1-alpha) W'.
    """
    W_next = Z - eta * direction
    V_next = beta * V + (1.0 - beta) * Z - (gamma * eta) * direction
    Z_next = alpha * V + (1.0 - alpha) * W_next
    return W_next, V_next, Z_next


# ---------------------------------------------------------------------------
# traces, tail averaging, state


@dataclass
class TraceRecord:
    iteration: int
    seconds: float
    passes: float
    residual: float
    stepsize: float
    block_hash: int
    subspace_err: float | None = None


class ConvergenceTrace:
    """Append-only per-iteration log; exports the documented CSV schema."""

    COLUMNS = ("iter", "seconds", "passes", "residual", "stepsize", "subspace_err_l")

    def __init__(self):
        self.records = []
        self._start = time.perf_counter()

    def record(self, iteration, passes, residual, stepsize, block_hash, subspace_err=None):
        self.records.append(
            TraceRecord(
                iteration=iteration,
                seconds=time.perf_counter() - self._start,
                passes=passes,
                residual=residual,
                stepsize=stepsize,
                block_hash=block_hash,
                subspace_err=subspace_err,
            )
        )

    def residuals(self):
        return np.array([rec.residual for rec in self.records])

    def passes(self):
        return np.array([rec.passes for rec in self.records])

    def final_residual(self):
        for rec in reversed(self.records):
            if np.isfinite(rec.residual):
                return rec.residual
        return math.nan

    def passes_to(self, tol):
        """Pass count at which the recorded residual first reaches ``tol``."""
        for rec in self.records:
            if np.isfinite(rec.residual) and rec.residual <= tol:
                return rec.passes
        return math.inf

    def to_csv(self, path):
        with open(path, "w") as handle:
            handle.write(",".join(self.COLUMNS) + "\n")
            for rec in self.records:
                sub = "" if rec.subspace_err is None else repr(rec.subspace_err)
                handle.write(
                    f"{rec.iteration},{rec.seconds!r},{rec.passes!r},"
                    f"{rec.residual!r},{rec.stepsize!r},{sub}\n"
                )


class TailAverager:
    """Streaming mean of iterates with indices in [ceil(T/2), T-1]."""

    def __init__(self, total_iters, shape):
        if total_iters < 2:
            raise ContractError("tail averaging needs at least two iterations")
        self.start = math.ceil(total_iters / 2)
        self.stop = total_iters - 1
        self._sum = np.zeros(shape)
        self.count = 0

    def add(self, index, iterate):
        if self.start <= index <= self.stop:
            self._sum += iterate
            self.count += 1

    def average(self):
        if self.count == 0:
            raise ContractError("empty tail-average window")
        return self._sum / self.count


def tail_average(iterates):
    """Arithmetic mean of an explicit window of iterates."""
    items = list(iterates)
    if not items:
        raise ContractError("empty tail-average window")
    total = np.zeros_like(np.asarray(items[0], dtype=np.float64))
    for item in items:
        total += item
    return total / len(items)


@dataclass
class SolverState:
    """Iterate triple; V and Z alias W whenever acceleration is off."""

    W: np.ndarray
    V: np.ndarray
    Z: np.ndarray
    iteration: int = 0

    @classmethod
    def zeros(cls, n, m, accelerated=False):
        W = np.zeros((n, m))
        if accelerated:
            return cls(W, W.copy(), W.copy())
        return cls(W, W, W)


@dataclass
class SolveResult:
    W: np.ndarray
    trace: ConvergenceTrace
    diverged: bool
    iterations: int
    passes: float


# ---------------------------------------------------------------------------
# shared plumbing


def resolve_blocksize(config, n):
    b = config.blocksize if config.blocksize is not None else max(1, n // 100)
    b = int(b)
    if not 1 <= b <= n:
        raise ConfigError(f"blocksize {b} outside [1, {n}]")
    return b


def resolve_rank(config, blocksize):
    r = config.nystrom_rank if config.nystrom_rank is not None else min(100, blocksize)
    r = int(r)
    if not 1 <= r <= blocksize:
        raise ConfigError(f"nystrom_rank {r} outside [1, {blocksize}]")
    return r


def budget_iterations(config, passes_per_iter):
    if config.max_iters is not None:
        return int(config.max_iters)
    passes = config.max_passes if config.max_passes is not None else 50.0
    return max(1, math.ceil(passes / passes_per_iter))


def _as_columns(Y, n):
    Y = np.asarray(Y, dtype=np.float64)
    vector = Y.ndim == 1
    Y2 = Y[:, None] if vector else Y
    if Y2.shape[0] != n:
        raise ContractError("right-hand side must have n rows")
    return np.ascontiguousarray(Y2), vector


def _block_hash(block):
    return zlib.crc32(np.ascontiguousarray(block).tobytes())


def _relative_residual(oracle, W, Y, ynorm):
    with np.errstate(over="ignore", invalid="ignore"):
        res = oracle.matmul(W) + oracle.lam * W - Y
        return float(np.linalg.norm(res) / ynorm)


def _uniform_block(seed, iteration, n, blocksize):
    rng = substream(seed, "block", iteration)
    return np.sort(rng.choice(n, size=blocksize, replace=False))


# ---------------------------------------------------------------------------
# exact sketch-and-project


def sap_step(oracle, state, block, Y, pool=None):
    """One exact projection step: zeroes the block rows of the residual.

    Solves (K[B,B] + lam I) d = (K[B,:] + lam I[B,:]) W - Y[B] with one dense
    Cholesky of size b and subtracts d from the block rows of W in place.
    """
    lam = oracle.lam
    W = state.W
    grad = col_dist_matmul(oracle, W, block, pool) + lam * W[block] - Y[block]
    H = oracle.block(block)
    H[np.diag_indices_from(H)] += lam
    try:
        chol = scipy.linalg.cho_factor(H, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(
            "block system factorization failed; lam may be too small for float64"
        ) from exc
    W[block] -= scipy.linalg.cho_solve(chol, grad)
    state.iteration += 1
    return state


def sap_solve(oracle, Y, config, sampler="uniform", dpp_model=None, pool=None, on_iterate=None):
    """Exact sketch-and-project from W0 = 0 with optional tail averaging.

    ``sampler`` is "uniform" (without replacement) or "kdpp" (requires an
    exact ``dpp_model`` whose sample size plays the role of the blocksize).
    """
    n = oracle.n
    Y2, vector = _as_columns(Y, n)
    if sampler not in ("uniform", "kdpp"):
        raise ConfigError(f"unknown sampler {sampler!r}")
    if sampler == "kdpp":
        if dpp_model is None:
            raise ConfigError("kdpp sampling needs a DppModel")
        blocksize = dpp_model.sample_size
        if config.blocksize is not None and config.blocksize != blocksize:
            raise ConfigError("config blocksize disagrees with the DPP sample size")
    else:
        blocksize = resolve_blocksize(config, n)
    total = budget_iterations(config, blocksize / n)
    state = SolverState.zeros(n, Y2.shape[1], accelerated=False)
    averager = TailAverager(total, Y2.shape) if config.tail_average else None
    ynorm = max(np.linalg.norm(Y2), np.finfo(np.float64).tiny)
    trace = ConvergenceTrace()
    diverged = False
    iters_done = 0
    for t in range(total):
        if sampler == "uniform":
            block = _uniform_block(config.seed, t, n, blocksize)
        else:
            block = dpp_model.sample(substream(config.seed, "block", t))
        sap_step(oracle, state, block, Y2, pool)
        iters_done = t + 1
        if averager is not None:
            averager.add(iters_done, state.W)
        if on_iterate is not None:
            on_iterate(iters_done, state.W)
        passes = iters_done * blocksize / n
        relres = math.nan
        if _due(config.residual_every, t, total):
            relres = _relative_residual(oracle, state.W, Y2, ynorm)
        trace.record(iters_done, passes, relres, 1.0, _block_hash(block))
        if np.isfinite(relres):
            if relres > DIVERGENCE_FACTOR or not np.all(np.isfinite(state.W)):
                diverged = True
                break
            if config.tol is not None and relres <= config.tol:
                break
    if averager is not None and averager.count > 0:
        W_out = averager.average()
    else:
        W_out = state.W
    return SolveResult(
        W_out[:, 0] if vector else W_out,
        trace,
        diverged,
        iters_done,
        iters_done * blocksize / n,
    )


def _due(every, t, total):
    if every <= 0:
        return t == total - 1
    return (t + 1) % every == 0 or t == total - 1


# ---------------------------------------------------------------------------
# approximate accelerated sketch-and-project


def adasap_step(oracle, state, Y, config, accel, pool=None, identity_precond=False):
    """One approximately preconditioned accelerated step.

    Phases: uniform block; block-row product at the acceleration midpoint
    (or at W when ``config.grad_eval_point == "w"``); Gaussian sketch of
    K[B,B]; Nystrom factor with damping S_r + lam; automatic stepsize by
    randomized powering; Nesterov update of (W, V, Z).

    Returns (state, stepsize, block).
    """
    n = oracle.n
    lam = oracle.lam
    t = state.iteration
    blocksize = resolve_blocksize(config, n)
    block = _uniform_block(config.seed, t, n, blocksize)
    point = state.Z if config.grad_eval_point == "z" else state.W
    grad = col_dist_matmul(oracle, point, block, pool) + lam * point[block] - Y[block]

    if identity_precond:
        factor = NystromFactor.empty(blocksize)
        rho = 1.0
    else:
        rank = resolve_rank(config, blocksize)
        omega = substream(config.seed, "omega", t).standard_normal((blocksize, rank))
        sketch = row_dist_matmul(oracle, omega, block, pool)
        factor = rand_nystrom_retry(sketch, omega, rank)
        rho = float(factor.S[-1]) + lam

    Kbb = oracle.block(block)

    def h_apply(v):
        return Kbb @ v + lam * v

    eta = rand_power_stepsize(
        h_apply, factor, rho, iters=10, seed=substream(config.seed, "power", t)
    )
    direction = np.zeros_like(state.W)
    direction[block] = apply_inv(factor, rho, grad)
    state.W, state.V, state.Z = nesterov_update(
        state.W, state.V, state.Z, direction, eta, accel.beta, accel.gamma, accel.alpha
    )
    state.iteration += 1
    return state, eta, block


def adasap_solve(oracle, Y, config, identity_precond=False, pool=None, on_iterate=None,
                 accel=None):
    """Accelerated approximate sketch-and-project from W0 = 0.

    ``identity_precond=True`` gives the accelerated block coordinate descent
    ablation (subspace preconditioner replaced by the identity). ``accel``
    overrides the config-derived momentum coefficients.
    """
    n = oracle.n
    Y2, vector = _as_columns(Y, n)
    blocksize = resolve_blocksize(config, n)
    if accel is None:
        accel = resolve_accel(config, n, blocksize)
    total = budget_iterations(config, blocksize / n)
    state = SolverState.zeros(n, Y2.shape[1], accelerated=True)
    averager = TailAverager(total, Y2.shape) if config.tail_average else None
    ynorm = max(np.linalg.norm(Y2), np.finfo(np.float64).tiny)
    trace = ConvergenceTrace()
    diverged = False
    iters_done = 0
    for t in range(total):
        state, eta, block = adasap_step(
            oracle, state, Y2, config, accel, pool, identity_precond
        )
        iters_done = t + 1
        if averager is not None:
            averager.add(iters_done, state.W)
        if on_iterate is not None:
            on_iterate(iters_done, state.W)
        passes = iters_done * blocksize / n
        relres = math.nan
        if _due(config.residual_every, t, total):
            relres = _relative_residual(oracle, state.W, Y2, ynorm)
        trace.record(iters_done, passes, relres, eta, _block_hash(block))
        if np.isfinite(relres):
            if relres > DIVERGENCE_FACTOR or not np.all(np.isfinite(state.W)):
                diverged = True
                break
            if config.tol is not None and relres <= config.tol:
                break
    if averager is not None and averager.count > 0:
        W_out = averager.average()
    else:
        W_out = state.W
    return SolveResult(
        W_out[:, 0] if vector else W_out,
        trace,
        diverged,
        iters_done,
        iters_done * blocksize / n,
    )


# ---------------------------------------------------------------------------
# stochastic dual descent baseline


def sdd_solve(oracle, Y, config, pool=None, on_iterate=None):
    """Block stochastic dual descent with heavy-ball momentum and geometric
    iterate averaging.

    The raw block gradient is applied with stepsize scale/n, momentum 0.9,
    and averaging parameter 100/T. A residual above 1e6 times the initial one
    (or a non-finite iterate) marks the run as diverged.
    """
    n = oracle.n
    lam = oracle.lam
    Y2, vector = _as_columns(Y, n)
    blocksize = resolve_blocksize(config, n)
    total = budget_iterations(config, blocksize / n)
    scale = float(config.stepsize_scale)
    eta = scale / n
    avg_weight = min(1.0, 100.0 / total)
    w = np.zeros_like(Y2)
    velocity = np.zeros_like(Y2)
    estimate = np.zeros_like(Y2)
    ynorm = max(np.linalg.norm(Y2), np.finfo(np.float64).tiny)
    trace = ConvergenceTrace()
    diverged = False
    iters_done = 0
    for t in range(total):
        block = _uniform_block(config.seed, t, n, blocksize)
        with np.errstate(over="ignore", invalid="ignore"):
            grad = col_dist_matmul(oracle, w, block, pool) + lam * w[block] - Y2[block]
            velocity *= SDD_MOMENTUM
            velocity[block] -= eta * grad
            w += velocity
            estimate += avg_weight * (w - estimate)
        iters_done = t + 1
        if on_iterate is not None:
            on_iterate(iters_done, estimate)
        passes = iters_done * blocksize / n
        relres = math.nan
        if _due(config.residual_every, t, total):
            if not np.all(np.isfinite(w)):
                relres = math.inf
            else:
                relres = _relative_residual(oracle, estimate, Y2, ynorm)
        trace.record(iters_done, passes, relres, eta, _block_hash(block))
        if not math.isnan(relres):
            if not np.isfinite(relres) or relres > DIVERGENCE_FACTOR:
                diverged = True
                break
            if config.tol is not None and relres <= config.tol:
                break
    return SolveResult(
        estimate[:, 0] if vector else estimate,
        trace,
        diverged,
        iters_done,
        iters_done * blocksize / n,
    )


# ---------------------------------------------------------------------------
# preconditioned conjugate gradient baseline


def pcg_solve(oracle, Y, config, pool=None, on_iterate=None):
    """Conjugate gradient on (K + lam I) W = Y with a global rank-r Nystrom
    preconditioner; standard recurrences run per right-hand side.

    ``nystrom_rank`` 0 gives plain CG. Stops when every column reaches the
    tolerance (default 1e-6) or the iteration budget (default n) runs out.
    """
    n = oracle.n
    lam = oracle.lam
    Y2, vector = _as_columns(Y, n)
    rank = config.nystrom_rank if config.nystrom_rank is not None else min(100, n)
    rank = int(rank)
    if rank < 0 or rank > n:
        raise ConfigError("pcg rank outside [0, n]")
    if rank > 0:
        omega = substream(config.seed, "omega").standard_normal((n, rank))
        sketch = oracle.matmul(omega)
        factor = rand_nystrom_retry(sketch, omega, rank)
        rho = float(factor.S[-1]) + lam
    else:
        factor = NystromFactor.empty(n)
        rho = 1.0

    tol = config.tol if config.tol is not None else 1e-6
    total = config.max_iters if config.max_iters is not None else n
    if config.max_iters is None and config.max_passes is not None:
        total = max(1, math.ceil(config.max_passes))

    X = np.zeros_like(Y2)
    R = Y2.copy()
    Zp = apply_inv(factor, rho, R)
    P = Zp.copy()
    rz = np.einsum("ij,ij->j", R, Zp)
    col_norms = np.maximum(np.linalg.norm(Y2, axis=0), np.finfo(np.float64).tiny)
    ynorm = max(np.linalg.norm(Y2), np.finfo(np.float64).tiny)
    trace = ConvergenceTrace()
    iters_done = 0
    for t in range(total):
        active = np.linalg.norm(R, axis=0) / col_norms > tol
        if not np.any(active):
            break
        AP = oracle.matmul(P) + lam * P
        pap = np.einsum("ij,ij->j", P, AP)
        if np.any(pap[active] <= 0.0):
            raise NumericalError("conjugate gradient breakdown: p^T A p <= 0")
        alpha = np.where(active, rz / np.where(pap > 0.0, pap, 1.0), 0.0)
        X += alpha * P
        R -= alpha * AP
        Zp = apply_inv(factor, rho, R)
        rz_new = np.einsum("ij,ij->j", R, Zp)
        beta = np.where(active, rz_new / np.where(rz > 0.0, rz, 1.0), 0.0)
        P = Zp + beta * P
        rz = rz_new
        iters_done = t + 1
        if on_iterate is not None:
            on_iterate(iters_done, X)
        relres = float(np.linalg.norm(R) / ynorm)
        trace.record(iters_done, float(iters_done), relres, math.nan, 0)
    return SolveResult(
        X[:, 0] if vector else X, trace, False, iters_done, float(iters_done)
    )


# ---------------------------------------------------------------------------
# dispatch


def solve(oracle, Y, config, dpp_model=None, pool=None, on_iterate=None):
    """Run the solver selected by ``config.solver_id``."""
    own_pool = None
    if pool is None and config.num_workers > 1:
        own_pool = pool = WorkerPool(config.num_workers)
    try:
        if config.solver_id == "sap":
            return sap_solve(
                oracle, Y, config, sampler=config.sampler, dpp_model=dpp_model,
                pool=pool, on_iterate=on_iterate,
            )
        if config.solver_id == "adasap":
            return adasap_solve(oracle, Y, config, pool=pool, on_iterate=on_iterate)
        if config.solver_id == "adasap_i":
            return adasap_solve(
                oracle, Y, config, identity_precond=True, pool=pool, on_iterate=on_iterate
            )
        if config.solver_id == "sdd":
            return sdd_solve(oracle, Y, config, pool=pool, on_iterate=on_iterate)
        if config.solver_id == "pcg":
            return pcg_solve(oracle, Y, config, pool=pool, on_iterate=on_iterate)
        raise ConfigError(f"unknown solver {config.solver_id!r}")
    finally:
        if own_pool is not None:
            own_pool.close()
