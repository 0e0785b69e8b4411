"""Randomized Nystrom factors, damped Woodbury applications, and powering.

The factor (U, S) approximates a PSD matrix M as U diag(S) U^T, following the
numerically stable sketch route of Tropp et al. (shift, Cholesky, triangular
solve, thin SVD, shift removal). Applications always damp the factor as
U diag(S) U^T + rho*I with rho > 0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ContractError, NumericalError
from .rng import as_generator


@dataclass(frozen=True)
class NystromFactor:
    """Eigenpair factor: U (dim x rank, orthonormal columns), S descending >= 0."""

    U: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        U = np.asarray(self.U, dtype=np.float64)
        S = np.asarray(self.S, dtype=np.float64).ravel()
        if U.ndim != 2 or U.shape[1] != S.shape[0]:
            raise ContractError("U columns must match S length")
        if S.size and (np.any(S < 0.0) or np.any(np.diff(S) > 0.0)):
            raise ContractError("S must be nonnegative and sorted descending")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "S", S)

    @property
    def dim(self):
        return self.U.shape[0]

    @property
    def rank(self):
        return self.S.shape[0]

    @classmethod
    def empty(cls, dim):
        """Rank-0 factor; damped applications reduce to scaling by rho."""
        return cls(np.zeros((dim, 0)), np.zeros(0))


def rand_nystrom(sketch, omega, rank, shift_scale=1.0):
    """Stable randomized Nystrom approximation from a sketch M @ omega.

    The caller guarantees ``sketch = M @ omega`` for a symmetric PSD M and a
    full-column-rank test matrix omega. Returns (U, S) with the stabilizing
    shift removed from S (clamped at zero). ``shift_scale`` multiplies the
    machine-epsilon trace shift; the default suffices unless M is numerically
    singular and omega is nearly square.
    """
    sketch = np.asarray(sketch, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if sketch.shape != omega.shape or sketch.ndim != 2:
        raise ContractError("sketch and omega must share shape (dim, columns)")
    dim, cols = omega.shape
    if not 1 <= rank <= cols or rank > dim:
        raise ContractError("need 1 <= rank <= number of sketch columns <= dim")
    sketch = sketch[:, :rank]
    omega = omega[:, :rank]

    gram = omega.T @ sketch
    gram = 0.5 * (gram + gram.T)
    shift = shift_scale * np.finfo(np.float64).eps * float(np.trace(gram))
    if shift < 0.0:
        raise NumericalError("sketch Gram has negative trace; M is not PSD")

    shifted = gram + shift * (omega.T @ omega)
    if not shifted.any():
        # M = 0 sketch: factor is exactly zero
        half = np.zeros((dim, rank))
    else:
        try:
            chol = scipy.linalg.cholesky(shifted)  # upper: chol.T @ chol = shifted
        except scipy.linalg.LinAlgError as exc:
            if np.linalg.matrix_rank(omega) < rank:
                raise ContractError("test matrix omega is rank deficient") from exc
            raise NumericalError(
                "Cholesky of the shifted Gram failed; retry with a larger shift"
            ) from exc
        half = scipy.linalg.solve_triangular(chol, sketch.T, trans="T", lower=False).T

    U, sig, _ = np.linalg.svd(half, full_matrices=False)
    S = np.maximum(sig * sig - shift, 0.0)
    return NystromFactor(U, S)


def rand_nystrom_retry(sketch, omega, rank, escalations=(1.0, 1e4, 1e8)):
    """rand_nystrom, escalating the stabilizing shift when the Gram Cholesky
    reports indefiniteness (numerically singular M with a near-square omega)."""
    last = None
    for scale in escalations:
        try:
            return rand_nystrom(sketch, omega, rank, shift_scale=scale)
        except NumericalError as exc:
            last = exc
    raise last


def apply_inv(factor, rho, g):
    """(U S U^T + rho I)^{-1} g via the Cholesky-stabilized Woodbury route.

    Zero modes of S are pruned from U first (they belong to the identity
    complement). If the small Cholesky fails the plain Woodbury identity is
    used instead and a RuntimeWarning flags the fallback.
    """
    if not rho > 0.0:
        raise ContractError("rho must be positive")
    g = np.asarray(g, dtype=np.float64)
    keep = factor.S > 0.0
    if not np.any(keep):
        return g / rho
    U = factor.U[:, keep]
    S = factor.S[keep]
    small = rho * np.diag(1.0 / S) + U.T @ U
    try:
        chol = scipy.linalg.cho_factor(small, lower=True)
    except scipy.linalg.LinAlgError:
        warnings.warn(
            "stabilized Woodbury Cholesky failed; falling back to the plain identity",
            RuntimeWarning,
        )
        return apply_inv_plain(factor, rho, g)
    core = scipy.linalg.cho_solve(chol, U.T @ g)
    return (g - U @ core) / rho


def apply_inv_plain(factor, rho, g):
    """Plain Woodbury: U (S + rho I)^{-1} U^T g + (g - U U^T g) / rho."""
    if not rho > 0.0:
        raise ContractError("rho must be positive")
    g = np.asarray(g, dtype=np.float64)
    if factor.rank == 0:
        return g / rho
    U, S = factor.U, factor.S
    Utg = U.T @ g
    scale = 1.0 / (S + rho)
    scaled = Utg * scale[:, None] if g.ndim == 2 else Utg * scale
    return U @ scaled + (g - U @ Utg) / rho


def apply_inv_sqrt(factor, rho, v):
    """(U S U^T + rho I)^{-1/2} v = U (S+rho)^{-1/2} U^T v + (v - U U^T v)/sqrt(rho)."""
    if not rho > 0.0:
        raise ContractError("rho must be positive")
    v = np.asarray(v, dtype=np.float64)
    if factor.rank == 0:
        return v / np.sqrt(rho)
    U, S = factor.U, factor.S
    Utv = U.T @ v
    scale = 1.0 / np.sqrt(S + rho)
    scaled = Utv * scale[:, None] if v.ndim == 2 else Utv * scale
    return U @ scaled + (v - U @ Utv) / np.sqrt(rho)


def rand_power_stepsize(h_apply, factor, rho, iters=10, seed=0):
    """Reciprocal top eigenvalue of (P + rho I)^{-1/2} H (P + rho I)^{-1/2}.

    ``h_apply`` is the symmetric PSD action v -> H v; the preconditioner P is
    the (damped) Nystrom factor. Runs normalized power iterations and takes
    the Rayleigh product of the last unit iterate with its image before
    normalization, per Kuczynski & Wozniakowski style randomized powering.
    """
    if iters < 1:
        raise ContractError("need at least one power iteration")
    rng = as_generator(seed)
    v = rng.standard_normal(factor.dim)
    norm = np.linalg.norm(v)
    if norm == 0.0:  # probability zero; reseed once
        v = rng.standard_normal(factor.dim)
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise NumericalError("power iteration start vector is zero")
    v = v / norm
    estimate = None
    for _ in range(iters):
        image = apply_inv_sqrt(factor, rho, v)
        image = h_apply(image)
        image = apply_inv_sqrt(factor, rho, image)
        estimate = float(v @ image)
        norm = np.linalg.norm(image)
        if norm == 0.0:
            raise NumericalError("power iteration collapsed to zero")
        v = image / norm
    if estimate is None or estimate <= 0.0:
        raise NumericalError("nonpositive Rayleigh estimate; H is not PSD")
    return 1.0 / estimate
