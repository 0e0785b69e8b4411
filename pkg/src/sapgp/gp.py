"""GP posterior mean, priors, pathwise-conditioning samples, and metrics.

Pathwise conditioning turns a prior draw f and noise zeta ~ N(0, lam I) into
a posterior sample via a single regularized solve:

    f_post(Xs) = f(Xs) + k(Xs, X) (K + lam I)^{-1} (y - f(X) - zeta)

using the prior cross-covariance k(Xs, X) in the update term (Wilson et al.,
"Efficiently sampling functions from Gaussian process posteriors").
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .kernels import cross_kernel
from .rng import as_generator, substream

VARIANCE_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# random features


@dataclass(frozen=True)
class RandomFeatureMap:
    """Cosine feature map whose inner products estimate the kernel.

    Frequencies follow the kernel's spectral density (Gaussian for the RBF
    family, multivariate-t with 3 or 5 degrees of freedom for the Matern
    halves), phases are uniform on [0, 2pi).
    """

    frequencies: np.ndarray
    phases: np.ndarray
    variance: float

    @property
    def num_features(self):
        return self.frequencies.shape[0]

    @classmethod
    def sample(cls, spec, num_features, seed):
        rng = as_generator(seed)
        d = spec.lengthscales.size
        normal = rng.standard_normal((num_features, d))
        if spec.family == "rbf":
            freq = normal
        elif spec.family == "matern32":
            freq = normal * np.sqrt(3.0 / rng.chisquare(3.0, size=(num_features, 1)))
        elif spec.family == "matern52":
            freq = normal * np.sqrt(5.0 / rng.chisquare(5.0, size=(num_features, 1)))
        else:
            raise ContractError(f"no spectral sampler for family {spec.family!r}")
        freq = freq / spec.lengthscales
        phases = rng.uniform(0.0, 2.0 * np.pi, size=num_features)
        return cls(freq, phases, spec.variance)

    def features(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.frequencies.shape[1]:
            raise ContractError("point dimension does not match the feature map")
        scale = math.sqrt(2.0 * self.variance / self.num_features)
        return scale * np.cos(X @ self.frequencies.T + self.phases)


def kernel_estimate(rfm, Xa, Xb):
    """Monte-Carlo kernel estimate phi(Xa) phi(Xb)^T from the feature map."""
    return rfm.features(Xa) @ rfm.features(Xb).T


class PriorFunction:
    """One prior draw f(.) = phi(.)^T theta; cheap to evaluate anywhere."""

    def __init__(self, rfm, weights):
        self.rfm = rfm
        self.weights = np.asarray(weights, dtype=np.float64)

    def __call__(self, X):
        return self.rfm.features(X) @ self.weights


def sample_prior(rfm, seed):
    """Draw a prior function with standard normal feature weights."""
    theta = as_generator(seed).standard_normal(rfm.num_features)
    return PriorFunction(rfm, theta)


# ---------------------------------------------------------------------------
# prior samplers over fixed train/test locations


class RandomFeaturePrior:
    """Batched prior draws at fixed train/test points via random features."""

    def __init__(self, rfm, X, Xstar):
        self.rfm = rfm
        self._phi_train = rfm.features(X)
        self._phi_test = rfm.features(Xstar)

    def draw_state(self, seed, num_samples):
        """(train values, test values, feature-space weights q x s)."""
        theta = as_generator(seed).standard_normal((self.rfm.num_features, num_samples))
        return self._phi_train @ theta, self._phi_test @ theta, theta

    def draw_values(self, seed, num_samples):
        train, test, _ = self.draw_state(seed, num_samples)
        return train, test


class ExactPrior:
    """Exact joint GP prior over train and test points (desk-scale only).

    Used where the pathwise identity is checked against the closed-form
    posterior: the random-feature approximation error would not be covered by
    Monte-Carlo error bars.
    """

    def __init__(self, spec, X, Xstar, jitter=1e-10):
        X = np.asarray(X, dtype=np.float64)
        Xstar = np.asarray(Xstar, dtype=np.float64)
        joint = np.vstack([X, Xstar])
        if joint.shape[0] > 4096:
            raise ContractError("exact prior is dense work")
        cov = cross_kernel(spec, joint, joint)
        cov[np.diag_indices_from(cov)] += jitter * spec.variance
        self._chol = np.linalg.cholesky(cov)
        self._n = X.shape[0]

    def draw_state(self, seed, num_samples):
        draws = self._chol @ as_generator(seed).standard_normal(
            (self._chol.shape[0], num_samples)
        )
        return draws[: self._n], draws[self._n :], None

    def draw_values(self, seed, num_samples):
        train, test, _ = self.draw_state(seed, num_samples)
        return train, test


# ---------------------------------------------------------------------------
# posterior mean and pathwise samples


class PosteriorMean:
    """Matrix-free evaluator m(Xs) = k(Xs, X) @ weights."""

    def __init__(self, oracle, weights):
        self.oracle = oracle
        self.weights = np.asarray(weights, dtype=np.float64)

    def __call__(self, Xstar):
        return self.oracle.cross_matmul(Xstar, self.weights)


def posterior_mean(oracle, solve_fn, y):
    """Fit the representer weights with ``solve_fn`` and wrap the evaluator."""
    weights = solve_fn(oracle, np.asarray(y, dtype=np.float64))
    return PosteriorMean(oracle, weights)


@dataclass
class PosteriorSampleSet:
    """Pathwise posterior draws at the test points plus the mean system.

    ``prior_weights`` holds the feature-space weights of the prior draws
    (q x s) when the prior is feature-based, so each posterior sample stays a
    function: sample_j(X) = phi(X) @ prior_weights[:, j] + k(X, .) @
    sample_weights[:, j]. Exact priors leave it None (samples are pinned to
    the test points).
    """

    mean_weights: np.ndarray        # (n,)
    sample_weights: np.ndarray      # (n, s)
    mean_values: np.ndarray         # (t,)
    sample_values: np.ndarray       # (t, s)
    prior_weights: np.ndarray | None = None

    @property
    def num_samples(self):
        return self.sample_values.shape[1]

    def sample_mean(self):
        return self.sample_values.mean(axis=1)

    def sample_variance(self):
        return self.sample_values.var(axis=1, ddof=1)

    def sample_covariance(self):
        return np.cov(self.sample_values, ddof=1)

    def predictive_variance(self, lam):
        """Per-point Gaussian predictive variance: sample variance plus the
        likelihood variance."""
        return self.sample_variance() + lam


def pathwise_sample(oracle, prior, y, num_samples, seed, solve_fn, Xstar=None, cross=None):
    """Draw pathwise-conditioned posterior samples at the test points.

    All sample systems and the mean system are solved as one multi-RHS batch
    (num_samples + 1 columns). ``prior`` provides batched train/test values;
    ``cross`` overrides the k(Xstar, X) product for oracles without points.
    """
    if num_samples < 1:
        raise ContractError("need at least one posterior sample")
    y = np.asarray(y, dtype=np.float64).ravel()
    n = y.shape[0]
    f_train, f_test, prior_weights = prior.draw_state(
        substream(seed, "prior"), num_samples
    )
    zeta = math.sqrt(oracle.lam) * substream(seed, "zeta").standard_normal(
        (n, num_samples)
    )
    rhs = np.concatenate([y[:, None], y[:, None] - f_train - zeta], axis=1)
    weights = solve_fn(oracle, rhs)
    if cross is None:
        def cross(W):
            return oracle.cross_matmul(Xstar, W)
    evals = cross(weights)
    return PosteriorSampleSet(
        mean_weights=weights[:, 0],
        sample_weights=weights[:, 1:],
        mean_values=evals[:, 0],
        sample_values=f_test + evals[:, 1:],
        prior_weights=prior_weights,
    )


# ---------------------------------------------------------------------------
# metrics


def rmse(pred, truth):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ContractError("prediction/truth lengths differ")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def mean_nll(mean_pred, var_pred, truth):
    """Mean Gaussian negative log-likelihood over test points.

    Non-positive variances are clamped at 1e-12 (a RuntimeWarning counts the
    clamped entries).
    """
    mean_pred = np.asarray(mean_pred, dtype=np.float64).ravel()
    var_pred = np.asarray(var_pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if not (mean_pred.shape == var_pred.shape == truth.shape):
        raise ContractError("metric inputs must share length")
    bad = var_pred < VARIANCE_FLOOR
    if np.any(bad):
        warnings.warn(
            f"clamped {int(bad.sum())} non-positive predictive variances",
            RuntimeWarning,
        )
        var_pred = np.maximum(var_pred, VARIANCE_FLOOR)
    nll = 0.5 * np.log(2.0 * np.pi * var_pred) + (truth - mean_pred) ** 2 / (2.0 * var_pred)
    return float(nll.mean())
