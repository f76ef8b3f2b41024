"""Per-feature meta-analysis over a features x studies matrix, with FDR control."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .imputation import (
    DEFAULT_D,
    Method,
    NullCdf,
    complete_null_cdf,
    draw_censored_component,
    mean_impute_rows,
    mean_null_cdf,
    multiple_null_cdf,
    observed_sums,
)
from .model import Schema, StudyMatrix, Transform
from .numerics import feature_rng


@dataclass(frozen=True)
class FeatureResult:
    feature_id: str
    statistic: float
    p_meta: float
    q_bh: float
    q_by: float
    method: str


def _check_pvalues(pvalues) -> np.ndarray:
    p = np.asarray(pvalues, dtype=float)
    if p.ndim != 1:
        raise ValueError("expected a 1-D sequence of p-values")
    if np.any(~((p >= 0.0) & (p <= 1.0))):
        raise ValueError("p-values must lie in [0, 1]")
    return p


def _step_up(p: np.ndarray) -> np.ndarray:
    m = p.size
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    ranked = np.minimum.accumulate(ranked[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(ranked, 1.0)
    return out


def bh_adjust(pvalues) -> np.ndarray:
    """Benjamini-Hochberg adjusted p-values, in input order."""
    return _step_up(_check_pvalues(pvalues))


def by_adjust(pvalues) -> np.ndarray:
    """Benjamini-Yekutieli adjusted p-values (B-H scaled by the harmonic sum)."""
    p = _check_pvalues(pvalues)
    c = float(np.sum(1.0 / np.arange(1, p.size + 1))) if p.size else 1.0
    return _step_up(np.minimum(p * c, 1.0))


def step_up_rejections(pvalues, level: float) -> np.ndarray:
    """Boolean rejection mask of the classical B-H step-up procedure."""
    p = _check_pvalues(pvalues)
    m = p.size
    order = np.argsort(p, kind="stable")
    passed = np.nonzero(p[order] <= level * np.arange(1, m + 1) / m)[0]
    mask = np.zeros(m, dtype=bool)
    if passed.size:
        mask[order[: passed[-1] + 1]] = True
    return mask


@functools.lru_cache(maxsize=64)
def build_null(method: Method, transform: Transform, thresholds: tuple, d: int = DEFAULT_D) -> NullCdf:
    """Null CDF for one schema; cached so a matrix builds it once."""
    schema = Schema(thresholds)
    if method is Method.COMPLETE:
        if schema.k2:
            raise ValueError("complete-case combination needs every study observed")
        return complete_null_cdf(transform, schema.k)
    if method is Method.SINGLE:
        return complete_null_cdf(transform, schema.k, Method.SINGLE)
    if method is Method.AVAILABLE:
        if schema.k1 == 0:
            raise ValueError("available-case combination has no observed studies")
        return complete_null_cdf(transform, schema.k1, Method.AVAILABLE)
    if method is Method.MEAN:
        return mean_null_cdf(transform, schema.k1, schema.groups())
    return multiple_null_cdf(transform, schema.k1, schema.groups(), d)


def matrix_statistics(matrix: StudyMatrix, method: Method, transform: Transform,
                      d: int = DEFAULT_D, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Statistic and meta p-value for every row.

    Random imputations for a row come from a stream keyed by
    ``(seed, feature_id)``, so results do not depend on row order.
    """
    method = Method(method)
    transform = Transform(transform)
    null = build_null(method, transform, matrix.schema.thresholds, d)
    n = len(matrix)
    if n == 0:
        return np.empty(0), np.empty(0)
    a = observed_sums(transform, matrix.observed)
    thresholds = matrix.schema.censored_thresholds
    if method in (Method.COMPLETE, Method.AVAILABLE):
        stats = a
    elif method is Method.MEAN:
        stats = mean_impute_rows(transform, matrix.observed, matrix.indicators, thresholds)
    else:
        draws = 1 if method is Method.SINGLE else d
        alphas = np.asarray(thresholds, dtype=float)
        extra = np.empty(n)
        for i, fid in enumerate(matrix.feature_ids):
            rng = feature_rng(seed, fid)
            extra[i] = draw_censored_component(transform, matrix.indicators[i], alphas, draws, rng)
        stats = a + extra
    return stats, np.asarray(null.pvalue(stats), dtype=float)


def meta_analyze_matrix(matrix: StudyMatrix, method: Method | str, transform: Transform | str,
                        d: int = DEFAULT_D, seed: int = 0) -> list[FeatureResult]:
    method = Method(method)
    stats, pvals = matrix_statistics(matrix, method, Transform(transform), d, seed)
    q_bh = bh_adjust(pvals)
    q_by = by_adjust(pvals)
    return [
        FeatureResult(fid, float(s), float(p), float(qb), float(qy), method.value)
        for fid, s, p, qb, qy in zip(matrix.feature_ids, stats, pvals, q_bh, q_by)
    ]


class FdrEstimate(NamedTuple):
    rate: float
    n_detected: int
    no_discoveries: bool


def true_fdr(detected: Iterable, true_nulls: Iterable) -> FdrEstimate:
    """Fraction of detections that are true nulls; 0 (flagged) when nothing is detected."""
    detected = set(detected)
    if not detected:
        return FdrEstimate(0.0, 0, True)
    false = len(detected & set(true_nulls))
    return FdrEstimate(false / len(detected), len(detected), False)


def empirical_type1(null_pvalues: Sequence[float], level: float = 0.05) -> float:
    p = np.asarray(null_pvalues, dtype=float)
    if p.size == 0:
        raise ValueError("no null p-values given")
    return float(np.mean(p <= level))
