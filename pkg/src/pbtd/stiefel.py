"""Matrix von Mises-Fisher moments and Gamma/Gaussian bookkeeping.

The vMF distribution on the Stiefel manifold of ``I x D`` orthonormal frames
has density ``exp(tr(F^T U)) / 0F1(I/2; F^T F / 4)`` with respect to the
uniform measure. Everything depends on ``F`` only through its thin SVD
``F = L diag(sigma) R^T``, so the log-normalizer is a function ``f(sigma)`` and
the mean is ``L diag(df/dsigma) R^T``.

``f`` is the Laplace (saddlepoint) approximation of the matrix-argument
``0F1``, with its univariate factors replaced by the exact scalar ``0F1``
(a modified Bessel function). The approximation factorizes as

    log 0F1(b; X) ~ sum_i log 0F1(b; x_i) - 1/2 sum_{i<j} log(1 - a_i a_j)

with ``b = I/2``, ``x_i = sigma_i^2 / 4`` and
``a_i = sigma_i^2 / (b + sqrt(b^2 + sigma_i^2))^2``. The pairwise terms come
from the Hessian of the saddlepoint integrand. The result is exact for
``D = 1``, vanishes at ``F = 0``, and is convex in ``F``, which is what makes the
variational factor update a true coordinate maximizer.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, ive

ZERO_SINGULAR_VALUE = 1e-12
_TINY = 1e-290


def _log_bessel_i_debye(nu, k):
    # Uniform asymptotic expansion of log I_nu(k) for large order.
    z = k / nu
    root = np.sqrt(1.0 + z * z)
    p = 1.0 / root
    eta = root + np.log(z / (1.0 + root))
    u1 = (3 * p - 5 * p**3) / 24
    u2 = (81 * p**2 - 462 * p**4 + 385 * p**6) / 1152
    u3 = (30375 * p**3 - 369603 * p**5 + 765765 * p**7 - 425425 * p**9) / 414720
    series = 1 + u1 / nu + u2 / nu**2 + u3 / nu**3
    return nu * eta - 0.5 * np.log(2 * np.pi * nu) + 0.5 * np.log(p) + np.log(series)


def log_hyp0f1_scalar(b, k):
    """``log 0F1(b; k^2/4)`` for an array of nonnegative ``k``.

    This is the log-normalizer of the vector vMF on the sphere in ``2b``
    dimensions, relative to the uniform measure.
    """
    k = np.asarray(k, dtype=np.float64)
    out = np.zeros_like(k)
    x = 0.25 * k * k
    small = x < 1e-6 * b
    out[small] = np.log1p(x[small] / b + x[small] ** 2 / (2 * b * (b + 1)))
    big = ~small
    if np.any(big):
        kb = k[big]
        scaled = ive(b - 1, kb)
        logi = np.where(scaled > _TINY, np.log(np.maximum(scaled, _TINY)) + kb, np.nan)
        bad = ~np.isfinite(logi)
        if np.any(bad):
            logi[bad] = _log_bessel_i_debye(b - 1, kb[bad])
        out[big] = gammaln(b) + (1 - b) * np.log(0.5 * kb) + logi
    return out


def bessel_ratio(b, k):
    """``I_b(k) / I_{b-1}(k)``, the derivative of :func:`log_hyp0f1_scalar`."""
    k = np.asarray(k, dtype=np.float64)
    num = ive(b, k)
    den = ive(b - 1, k)
    ok = (num > _TINY) & (den > _TINY)
    out = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
    for i in np.flatnonzero(~ok & (k > 0)):
        # Tiny Bessel values only occur for order >> k, where the backward
        # continued fraction converges in a few dozen steps.
        # R_v = I_v / I_{v-1} = k / (2v + k R_{v+1}).
        ki = k.flat[i]
        order = b + 60
        r = ki / (order + np.sqrt(order * order + ki * ki))
        while order > b:
            order -= 1
            r = ki / (2 * order + ki * r)
        out.flat[i] = r
    return out


def _pair_terms(sigma, b):
    s = np.sqrt(b * b + sigma * sigma)
    a = (sigma / (s + b)) ** 2
    return s, a


def _log_normalizer_sv(sigma, b):
    base = log_hyp0f1_scalar(b, sigma).sum()
    if sigma.size < 2:
        return float(base)
    _, a = _pair_terms(sigma, b)
    iu = np.triu_indices(sigma.size, 1)
    return float(base - 0.5 * np.log1p(-a[iu[0]] * a[iu[1]]).sum())


def _mean_resultant_sv(sigma, b):
    rho = bessel_ratio(b, sigma)
    if sigma.size < 2:
        return rho
    s, a = _pair_terms(sigma, b)
    w = a[None, :] / (1.0 - np.outer(a, a))
    np.fill_diagonal(w, 0.0)
    rho = rho + b * sigma / (s * (s + b) ** 2) * w.sum(axis=1)
    return rho


def _svd(f):
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < f.shape[1]:
        raise ValueError(f"concentration must be a tall I x D matrix, got shape {f.shape}")
    left, sigma, right_t = np.linalg.svd(f, full_matrices=False)
    # Deterministic signs: largest-magnitude entry of each left vector positive.
    idx = np.argmax(np.abs(left), axis=0)
    signs = np.sign(left[idx, np.arange(left.shape[1])])
    signs[signs == 0] = 1.0
    left = left * signs
    right_t = right_t * signs[:, None]
    sigma = np.where(sigma < ZERO_SINGULAR_VALUE, 0.0, sigma)
    return left, sigma, right_t


def vmf_mode(f):
    """Mode of vMF(F): the orthonormal polar factor of ``F``."""
    left, sigma, right_t = _svd(f)
    if not np.any(sigma > 0):
        raise ValueError("mode of a vMF with zero concentration is undefined")
    return left @ right_t


def vmf_moments(f):
    """Return ``(E[U], log normalizer)`` of vMF(F) from a single SVD."""
    f = np.asarray(f, dtype=np.float64)
    b = 0.5 * f.shape[0]
    if f.ndim == 2 and f.shape[1] == 1:
        kappa = np.sqrt(np.sum(f * f))
        if kappa < ZERO_SINGULAR_VALUE:
            return np.zeros_like(f), 0.0
        kappa_arr = np.array([kappa])
        rho = bessel_ratio(b, kappa_arr)[0]
        return f * (rho / kappa), float(log_hyp0f1_scalar(b, kappa_arr)[0])
    left, sigma, right_t = _svd(f)
    rho = _mean_resultant_sv(sigma, b)
    return (left * rho) @ right_t, _log_normalizer_sv(sigma, b)


def vmf_expectation(f):
    """Approximate ``E[U]`` under vMF(F); its singular values lie in [0, 1)."""
    return vmf_moments(f)[0]


def vmf_log_normalizer(f):
    """Approximate ``log of the integral of exp(tr(F^T U)) dU`` (uniform dU)."""
    f = np.asarray(f, dtype=np.float64)
    _, sigma, _ = _svd(f)
    return _log_normalizer_sv(sigma, 0.5 * f.shape[0])


def vmf_resultant_lengths(f):
    """Singular values of ``E[U]`` (``rho_i`` in ``L diag(rho) R^T``)."""
    f = np.asarray(f, dtype=np.float64)
    _, sigma, _ = _svd(f)
    return _mean_resultant_sv(sigma, 0.5 * f.shape[0])


@dataclass
class GammaDist:
    """Shape-rate Gamma distribution(s); ``shape`` and ``rate`` broadcast."""

    shape: np.ndarray
    rate: np.ndarray

    def __post_init__(self):
        self.shape = np.asarray(self.shape, dtype=np.float64)
        self.rate = np.asarray(self.rate, dtype=np.float64)
        if np.any(self.shape <= 0) or np.any(self.rate <= 0):
            raise ValueError("Gamma shape and rate must be positive")

    @property
    def mean(self):
        return self.shape / self.rate

    @property
    def mean_log(self):
        return digamma(self.shape) - np.log(self.rate)

    @property
    def entropy(self):
        a = self.shape
        return a - np.log(self.rate) + gammaln(a) + (1 - a) * digamma(a)

    def expected_log_pdf(self, prior_shape, prior_rate):
        """``E_self[log Gamma(x | prior_shape, prior_rate)]``, elementwise."""
        return (
            prior_shape * np.log(prior_rate)
            - gammaln(prior_shape)
            + (prior_shape - 1) * self.mean_log
            - prior_rate * self.mean
        )


def gamma_stats(g):
    """``(mean, mean_log, entropy)`` of a :class:`GammaDist`."""
    return g.mean, g.mean_log, g.entropy


@dataclass
class DiagGaussian:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.variance = np.asarray(self.variance, dtype=np.float64)
        if self.mean.shape != self.variance.shape:
            raise ValueError("mean and variance must have the same shape")
        if np.any(self.variance <= 0):
            raise ValueError("variances must be positive")

    @property
    def entropy(self):
        return 0.5 * np.log(2 * np.pi * np.e * self.variance)


def diag_gaussian_second_moment(d):
    return d.mean**2 + d.variance
