"""Exact fixed-size determinantal point process sampling over row indices.

The two-phase exact sampler follows Kulesza & Taskar: an eigenvector subset
of fixed size is drawn with the elementary-symmetric backward recursion, then
a sequential Gram-Schmidt chain rule samples the projection DPP on the chosen
eigenvectors. Subset probabilities are exactly proportional to the principal
minors det(A[B, B]).
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericalError
from .rng import as_generator

EXACT_LIMIT = 2048
LOG_SPREAD = 1e12


def elementary_symmetric(values, order):
    """Table E[l, m] = e_l(values[0..m-1]) for l <= order, m <= len(values)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    n = values.size
    table = np.zeros((order + 1, n + 1))
    table[0, :] = 1.0
    for m in range(1, n + 1):
        table[1:, m] = table[1:, m - 1] + values[m - 1] * table[:-1, m - 1]
    return table


def log_elementary_symmetric(log_values, order):
    """Log-space variant of the elementary-symmetric recursion."""
    log_values = np.asarray(log_values, dtype=np.float64).ravel()
    n = log_values.size
    table = np.full((order + 1, n + 1), -np.inf)
    table[0, :] = 0.0
    for m in range(1, n + 1):
        table[1:, m] = np.logaddexp(
            table[1:, m - 1], log_values[m - 1] + table[:-1, m - 1]
        )
    return table


def lemma2_lower_bound(spectrum, half_blocksize, index):
    """Lower bound lam_j / (lam_j + tail/b) on the j-th expected-projection
    eigenvalue under a 2b-sized determinantal sample (1-based j)."""
    spectrum = np.asarray(spectrum, dtype=np.float64).ravel()
    if not 1 <= index <= spectrum.size:
        raise ContractError("index out of range")
    tail = float(spectrum[half_blocksize:].sum())
    lam_j = float(spectrum[index - 1])
    return lam_j / (lam_j + tail / half_blocksize)


def smoothed_condition(spectrum, blocksize, index):
    """Smoothed condition number: mean tail mass below ``blocksize`` relative
    to the ``index``-th eigenvalue (1-based), i.e. (1/b) sum_{i>b} lam_i/lam_p."""
    spectrum = np.asarray(spectrum, dtype=np.float64).ravel()
    if not 1 <= index <= spectrum.size or blocksize < 1:
        raise ContractError("index or blocksize out of range")
    tail = float(spectrum[blocksize:].sum())
    return tail / (blocksize * float(spectrum[index - 1]))


class DppModel:
    """Eigendecomposition-backed exact fixed-size DPP sampler.

    ``eigvals``/``eigvecs`` describe the positive definite matrix A (columns
    of ``eigvecs`` are eigenvectors, eigenvalues sorted descending);
    ``sample_size`` is the fixed subset size.
    """

    def __init__(self, eigvals, eigvecs, sample_size, validate=True):
        eigvals = np.asarray(eigvals, dtype=np.float64).ravel()
        eigvecs = np.asarray(eigvecs, dtype=np.float64)
        n = eigvals.size
        if eigvecs.shape != (n, n):
            raise ContractError("eigvecs must be square and match eigvals")
        if np.any(eigvals <= 0.0):
            raise ContractError("eigenvalues must be positive (use K + lam I)")
        if np.any(np.diff(eigvals) > 0.0):
            raise ContractError("eigenvalues must be sorted descending")
        if not 1 <= int(sample_size) <= n:
            raise ContractError("sample size must lie in [1, n]")
        if validate:
            probe = np.random.default_rng(0).standard_normal((n, 3))
            err = np.abs(eigvecs @ (eigvecs.T @ probe) - probe).max()
            if err > 1e-8:
                raise ContractError("eigvecs are not orthonormal to 1e-8")
        self.eigvals = eigvals
        self.eigvecs = eigvecs
        self.sample_size = int(sample_size)
        self.es_values = None
        self.es_table = None
        self.log_es_table = None
        self._ratios = None
        self._half = {}

    @classmethod
    def from_matrix(cls, A, sample_size, validate=False):
        A = np.asarray(A, dtype=np.float64)
        n = A.shape[0]
        if n > EXACT_LIMIT:
            raise ContractError(f"exact sampling limited to n <= {EXACT_LIMIT}")
        w, V = np.linalg.eigh(0.5 * (A + A.T))
        if w[0] <= 0.0:
            raise NumericalError("matrix must be positive definite for DPP sampling")
        return cls(w[::-1].copy(), V[:, ::-1].copy(), sample_size, validate=validate)

    # -- phase 1: eigenvector-subset selection ------------------------------

    def _build_ratios(self):
        """Acceptance ratios R[l][m] = lam_m e_{l-1}(m-1) / e_l(m).

        Built once; scale-invariant, so values are normalized by the largest
        eigenvalue. Falls back to the log-space recursion for extreme spectra.
        """
        k = self.sample_size
        n = self.eigvals.size
        scaled = self.eigvals / self.eigvals[0]
        spread = self.eigvals[0] / self.eigvals[-1]
        self.es_values = scaled
        use_log = spread > LOG_SPREAD
        if not use_log:
            self.es_table = elementary_symmetric(scaled, k)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = (
                    scaled[None, :] * self.es_table[:-1, :-1] / self.es_table[1:, 1:]
                )
            ratios = np.vstack([np.zeros((1, n)), ratios])
            if not np.all(np.isfinite(ratios[1:, :][self.es_table[1:, 1:] > 0.0])):
                use_log = True
        if use_log:
            logs = np.log(scaled)
            self.es_table = None
            self.log_es_table = log_elementary_symmetric(logs, k)
            with np.errstate(invalid="ignore"):
                ratios = np.exp(
                    logs[None, :]
                    + self.log_es_table[:-1, :-1]
                    - self.log_es_table[1:, 1:]
                )
            ratios = np.vstack([np.zeros((1, n)), ratios])
        ratios = np.nan_to_num(ratios, nan=0.0, posinf=0.0)
        # pad so R[l][m] indexes with 1-based m; force the must-take boundary
        full = np.zeros((k + 1, n + 1))
        full[:, 1:] = ratios
        for l in range(1, k + 1):
            full[l, l] = 1.0
        self._ratios = [row.tolist() for row in full]

    def _select_eigenvectors(self, rng):
        if self._ratios is None:
            self._build_ratios()
        ratios = self._ratios
        n = self.eigvals.size
        remaining = self.sample_size
        uniforms = rng.random(n)
        selected = []
        m = n
        while remaining > 0:
            if m == remaining:
                selected.extend(range(m - 1, -1, -1))
                break
            if uniforms[n - m] < ratios[remaining][m]:
                selected.append(m - 1)
                remaining -= 1
            m -= 1
        return selected

    # -- phase 2: projection DPP on the selected eigenvectors ---------------

    def _sample_projection(self, rng, selected):
        V = self.eigvecs[:, selected]
        n, k = V.shape
        norms = np.einsum("ij,ij->i", V, V)
        coeffs = np.empty((n, k))
        chosen = np.empty(k, dtype=np.intp)
        for it in range(k):
            np.clip(norms, 0.0, None, out=norms)
            total = norms.sum()
            if total <= 0.0:
                raise NumericalError("projection sampler ran out of mass")
            cdf = np.cumsum(norms)
            j = int(np.searchsorted(cdf, rng.random() * total, side="right"))
            j = min(j, n - 1)
            if norms[j] <= 0.0:
                j = int(np.argmax(norms))
            chosen[it] = j
            denom = np.sqrt(norms[j])
            col = V @ V[j]
            if it:
                col -= coeffs[:, :it] @ coeffs[j, :it]
            col /= denom
            coeffs[:, it] = col
            norms -= col * col
            norms[j] = 0.0
        return np.sort(chosen)

    def sample(self, seed):
        """One exact sample: a sorted index array of size ``sample_size``."""
        rng = as_generator(seed)
        selected = self._select_eigenvectors(rng)
        return self._sample_projection(rng, selected)

    # -- projections ---------------------------------------------------------

    def _half_matrix(self, basis):
        if basis not in self._half:
            sqrt_vals = np.sqrt(self.eigvals)
            if basis == "standard":
                self._half[basis] = (self.eigvecs * sqrt_vals) @ self.eigvecs.T
            elif basis == "eigen":
                self._half[basis] = (self.eigvecs * sqrt_vals).T
            else:
                raise ContractError(f"unknown basis {basis!r}")
        return self._half[basis]

    def projection_matrix(self, block, basis="standard"):
        """A^{1/2} S^T (S A S^T)^+ S A^{1/2} for one index block (dense)."""
        block = np.asarray(block, dtype=np.intp)
        half = self._half_matrix(basis)[:, block]
        VB = self.eigvecs[block, :]
        core = (VB * self.eigvals) @ VB.T
        w, Q = np.linalg.eigh(0.5 * (core + core.T))
        cutoff = self.eigvals.size * np.finfo(np.float64).eps * max(w[-1], 0.0)
        keep = w > cutoff
        G = half @ (Q[:, keep] / np.sqrt(w[keep]))
        return G @ G.T


class ProjectionEstimate:
    """Monte-Carlo mean of the sampled projection with per-entry stderr."""

    def __init__(self, mean, stderr, num_samples, basis):
        self.mean = mean
        self.stderr = stderr
        self.num_samples = num_samples
        self.basis = basis

    def diagonal(self):
        return np.diag(self.mean)

    def diagonal_stderr(self):
        return np.diag(self.stderr)

    def min_diagonal_lcb(self, sigmas=3.0):
        """Conservative lower bound on the smallest expected-projection
        eigenvalue: min over diagonal entries minus ``sigmas`` stderr."""
        return float(np.min(self.diagonal() - sigmas * self.diagonal_stderr()))


def expected_projection_mc(model, num_samples, seed, basis="standard"):
    """Monte-Carlo average of the sampled projection over exact DPP draws.

    ``basis="eigen"`` accumulates V^T Pi V directly, which is what the
    expected-projection diagonalization checks need.
    """
    n = model.eigvals.size
    if n > 512:
        raise ContractError("expected projection estimation is dense work (n <= 512)")
    if num_samples < 2:
        raise ContractError("need at least two samples for standard errors")
    half = model._half_matrix(basis)
    total = np.zeros((n, n))
    total_sq = np.zeros((n, n))
    for i in range(num_samples):
        block = model.sample(as_generator(_spawn_seed(seed, i)))
        VB = model.eigvecs[block, :]
        core = (VB * model.eigvals) @ VB.T
        w, Q = np.linalg.eigh(0.5 * (core + core.T))
        cutoff = n * np.finfo(np.float64).eps * max(w[-1], 0.0)
        keep = w > cutoff
        G = half[:, block] @ (Q[:, keep] / np.sqrt(w[keep]))
        proj = G @ G.T
        total += proj
        total_sq += proj * proj
    mean = total / num_samples
    var = np.maximum(total_sq / num_samples - mean * mean, 0.0)
    stderr = np.sqrt(var / num_samples)
    return ProjectionEstimate(mean, stderr, num_samples, basis)


def sample_kdpp(model, seed):
    """Exact fixed-size DPP sample of row indices (sorted)."""
    return model.sample(seed)


def _spawn_seed(seed, index):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.SeedSequence((int(seed), int(index)))
