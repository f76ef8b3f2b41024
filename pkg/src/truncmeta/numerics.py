"""Special functions, random streams and samplers used across the package.

The scalar functions accept floats or arrays and return a float for scalar
input.  Accuracy comes from ``scipy.special``; this module owns the input
validation and the conventions the rest of the package relies on.
"""

from __future__ import annotations

import hashlib
import logging

import numpy as np
from scipy import special

logger = logging.getLogger(__name__)

__all__ = [
    "make_rng",
    "stream_key",
    "feature_rng",
    "std_normal_cdf",
    "std_normal_sf",
    "std_normal_pdf",
    "std_normal_quantile",
    "chi_square_cdf",
    "chi_square_sf",
    "chi_square_quantile",
    "student_t_two_sided_p",
    "two_sample_t",
    "psd_factor",
    "sample_mvn",
    "sample_inverse_wishart",
    "cov_to_corr",
]


# ---------------------------------------------------------------------------
# random streams

def make_rng(seed: int | np.random.SeedSequence | list[int]) -> np.random.Generator:
    """PCG64 generator; the same seed gives the same stream on every platform."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def stream_key(feature_id: int | str) -> int:
    """Stable 64-bit key for a feature id.

    Non-negative integers (and their canonical decimal strings) map to
    themselves, so a feature read back from a binary store gets the same
    stream as the same feature read from CSV.
    """
    if isinstance(feature_id, (int, np.integer)) and feature_id >= 0:
        return int(feature_id)
    text = str(feature_id)
    if text.isdigit() and str(int(text)) == text and int(text) < 2**64:
        return int(text)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    # bit 64 keeps hashed keys apart from integer ids
    return int.from_bytes(digest, "little") | (1 << 64)


def feature_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Independent stream for one work unit, derived from ``(seed, *keys)``."""
    words = [int(seed)]
    for key in keys:
        value = stream_key(key)
        words.extend([value & 0xFFFFFFFF, (value >> 32) & 0xFFFFFFFF, value >> 64])
    return make_rng(words)


# ---------------------------------------------------------------------------
# helpers

def _finite(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def _out(arr: np.ndarray):
    return float(arr) if np.ndim(arr) == 0 else arr


def _check_df(df) -> None:
    if np.any(np.asarray(df) <= 0):
        raise ValueError("degrees of freedom must be positive")


# ---------------------------------------------------------------------------
# normal distribution

def std_normal_cdf(x):
    return _out(special.ndtr(_finite(x, "x")))


def std_normal_sf(x):
    return _out(special.ndtr(-_finite(x, "x")))


def std_normal_pdf(x):
    x = _finite(x, "x")
    return _out(np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi))


def std_normal_quantile(p):
    """Inverse of the standard normal CDF on the open interval (0, 1)."""
    p = np.asarray(p, dtype=float)
    if np.any(~(p > 0.0) | ~(p < 1.0)):
        raise ValueError("normal quantile needs 0 < p < 1")
    return _out(special.ndtri(p))


# ---------------------------------------------------------------------------
# chi-square distribution

def chi_square_cdf(x, df):
    x = _finite(x, "x")
    _check_df(df)
    if np.any(x < 0):
        raise ValueError("chi-square argument must be non-negative")
    return _out(special.gammainc(np.asarray(df, dtype=float) / 2.0, x / 2.0))


def chi_square_sf(x, df):
    x = _finite(x, "x")
    _check_df(df)
    if np.any(x < 0):
        raise ValueError("chi-square argument must be non-negative")
    return _out(special.gammaincc(np.asarray(df, dtype=float) / 2.0, x / 2.0))


def chi_square_quantile(p, df):
    p = np.asarray(p, dtype=float)
    _check_df(df)
    if np.any(~(p >= 0.0) | ~(p < 1.0)):
        raise ValueError("chi-square quantile needs 0 <= p < 1")
    return _out(2.0 * special.gammaincinv(np.asarray(df, dtype=float) / 2.0, p))


# ---------------------------------------------------------------------------
# t tests

def student_t_two_sided_p(t, df):
    """Two-sided p-value ``2 * P(T_df >= |t|)``."""
    t = _finite(t, "t")
    _check_df(df)
    return _out(2.0 * special.stdtr(np.asarray(df, dtype=float), -np.abs(t)))


def two_sample_t(x: np.ndarray, y: np.ndarray, axis: int = -1,
                 equal_var: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised two-sample t statistic and its degrees of freedom.

    ``equal_var=True`` is the pooled-variance test with ``n1 + n2 - 2``
    degrees of freedom; ``False`` gives Welch's test.
    """
    n1 = x.shape[axis]
    n2 = y.shape[axis]
    m1 = x.mean(axis=axis)
    m2 = y.mean(axis=axis)
    v1 = x.var(axis=axis, ddof=1)
    v2 = y.var(axis=axis, ddof=1)
    if equal_var:
        df = n1 + n2 - 2
        pooled = ((n1 - 1) * v1 + (n2 - 1) * v2) / df
        se = np.sqrt(pooled * (1.0 / n1 + 1.0 / n2))
        df = np.full(np.shape(m1), float(df))
    else:
        a, b = v1 / n1, v2 / n2
        se = np.sqrt(a + b)
        df = (a + b) ** 2 / (a * a / (n1 - 1) + b * b / (n2 - 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (m2 - m1) / se
    return t, df


# ---------------------------------------------------------------------------
# multivariate samplers

def psd_factor(cov: np.ndarray) -> np.ndarray:
    """Return ``L`` with ``L @ L.T == cov`` for a symmetric PSD matrix.

    Tries Cholesky, then Cholesky with a single ``1e-10 * trace / dim``
    jitter, then a clipped eigendecomposition for singular PSD input.
    Indefinite matrices raise ``ValueError`` with the offending eigenvalue.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"covariance must be square, got shape {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise ValueError("covariance has non-finite entries")
    scale = max(float(np.max(np.abs(cov))), 1e-300)
    if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
        raise ValueError("covariance matrix is not symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    dim = cov.shape[0]
    jitter = 1e-10 * np.trace(cov) / dim
    if jitter > 0:
        try:
            factor = np.linalg.cholesky(cov + jitter * np.eye(dim))
            logger.debug("covariance needed jitter %.3g for Cholesky", jitter)
            return factor
        except np.linalg.LinAlgError:
            pass
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() < -1e-10 * max(scale, 1.0):
        raise ValueError(
            f"covariance matrix is indefinite (smallest eigenvalue {vals.min():.3g})"
        )
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_mvn(mean, cov, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw from ``N(mean, cov)``; one vector, or ``size`` rows."""
    mean = np.asarray(mean, dtype=float)
    factor = psd_factor(cov)
    if factor.shape[0] != mean.shape[0]:
        raise ValueError("mean and covariance dimensions differ")
    shape = (mean.shape[0],) if size is None else (size, mean.shape[0])
    z = rng.standard_normal(shape)
    return mean + z @ factor.T


def sample_inverse_wishart(scale, dof: int, rng: np.random.Generator) -> np.ndarray:
    """One draw from the inverse Wishart with scale ``scale`` and ``dof``.

    The draw is the inverse of a Wishart(``scale^-1``, ``dof``) matrix built
    by the Bartlett decomposition, so ``E[result] = scale / (dof - dim - 1)``.
    """
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    dim = scale.shape[0]
    if dof <= dim + 1:
        raise ValueError(f"inverse Wishart needs dof > dim + 1 (dof={dof}, dim={dim})")
    chol_prec = np.linalg.cholesky(np.linalg.inv(scale))
    bartlett = np.zeros((dim, dim))
    bartlett[np.diag_indices(dim)] = np.sqrt(rng.chisquare(dof - np.arange(dim)))
    rows, cols = np.tril_indices(dim, -1)
    bartlett[rows, cols] = rng.standard_normal(rows.size)
    root = chol_prec @ bartlett
    inv_root = np.linalg.inv(root)
    draw = inv_root.T @ inv_root
    return (draw + draw.T) / 2.0


def cov_to_corr(cov: np.ndarray) -> np.ndarray:
    """Correlation matrix ``R`` with ``diag(sd) R diag(sd) == cov``."""
    sd = np.sqrt(np.diag(cov))
    corr = cov / np.outer(sd, sd)
    if np.max(np.abs(np.diag(corr) - 1.0)) > 1e-12:
        raise ValueError("correlation conversion lost the unit diagonal")
    return corr
