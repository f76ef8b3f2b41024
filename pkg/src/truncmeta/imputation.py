"""Mean, single-random and multiple imputation of censored p-values.

Each estimator comes with the null distribution of its combined statistic.
A :class:`NullCdf` is a finite mixture over how many censored studies fall
below their threshold; every component is ``A + S`` where ``A`` is the sum
of the observed-study terms and ``S`` is either a constant (mean
imputation) or a normal variable (multiple imputation).
"""

from __future__ import annotations

import enum
import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from .model import StudyPanel, ThresholdGroups, Transform, group_thresholds

DEFAULT_D = 50
MIN_CLT_D = 30
DEFAULT_ENUMERATION_CAP = 10**7

_GL_ORDER = 129
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(_GL_ORDER)
_Z_RANGE = 8.0
_QUAD_TOL = 1e-10
_QUAD_MAX_PANELS = 64
_CHUNK = 512


class Method(enum.Enum):
    COMPLETE = "complete"
    AVAILABLE = "available"
    MEAN = "mean"
    SINGLE = "single"
    MULTIPLE = "multiple"


class CLTWarning(UserWarning):
    """Too few imputations for the normal approximation to be trusted."""


# ---------------------------------------------------------------------------
# moments of a transformed uniform on a censoring interval

@dataclass(frozen=True)
class TruncatedMoments:
    """Mean/variance of ``T(q)``, ``q ~ U(0, alpha)`` (w) and ``T(r)``, ``r ~ U(alpha, 1)`` (v)."""

    mu_w: float
    var_w: float
    mu_v: float
    var_v: float


def truncated_moments(transform: Transform, alpha: float) -> TruncatedMoments:
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if transform is Transform.FISHER:
        log_a = math.log(alpha)
        return TruncatedMoments(
            mu_w=2.0 * (1.0 - log_a),
            var_w=4.0,
            mu_v=2.0 + 2.0 * alpha / (1.0 - alpha) * log_a,
            var_v=4.0 - 4.0 * alpha / (1.0 - alpha) ** 2 * log_a**2,
        )
    z = float(special.ndtri(alpha))
    dens = math.exp(-z * z / 2.0) / math.sqrt(2.0 * math.pi)
    return TruncatedMoments(
        mu_w=-dens / alpha,
        var_w=1.0 - z * dens / alpha - (dens / alpha) ** 2,
        mu_v=dens / (1.0 - alpha),
        var_v=1.0 + z * dens / (1.0 - alpha) - (dens / (1.0 - alpha)) ** 2,
    )


# ---------------------------------------------------------------------------
# null distributions

def _fisher_tail_sum(k: int, y: np.ndarray) -> np.ndarray:
    """``P(chi2_{2k} >= 2y)`` for y >= 0, as the Poisson partial sum."""
    term = np.ones_like(y)
    total = np.ones_like(y)
    for i in range(1, k):
        term = term * y / i
        total = total + term
    return np.exp(-y) * total


def _fisher_normal_conv(t: np.ndarray, k: int, mean: np.ndarray, sd: np.ndarray,
                        upper: bool) -> np.ndarray:
    """``P(A + U <= t)`` (or ``>= t``) with ``A ~ chi2_{2k}``, ``U ~ N(mean, sd^2)``.

    Composite Gauss-Legendre over the standardised normal variable on
    ``[-8, z0]``, ``z0 = (t - mean) / sd`` being the point past which
    ``A <= t - U`` is impossible.  Panels double until two successive
    estimates agree to 1e-10; convergence is judged per ``t`` so a value
    does not depend on which other points share the call.  Returns an
    ``(len(mean), len(t))`` array.
    """
    z0 = (t[None, :] - mean[:, None]) / sd[:, None]
    lo = -_Z_RANGE
    hi = np.clip(z0, lo, _Z_RANGE)
    width = hi - lo

    def integrate(panels: int) -> np.ndarray:
        acc = np.zeros_like(z0)
        pw = width / panels
        for j in range(panels):
            a = lo + j * pw
            z = a[..., None] + (pw[..., None] / 2.0) * (_GL_NODES + 1.0)
            y = sd[:, None, None] * (z0[..., None] - z) / 2.0
            y = np.maximum(y, 0.0)
            tail = _fisher_tail_sum(k, y)
            f = tail if upper else 1.0 - tail
            dens = np.exp(-0.5 * z * z)
            acc += (pw / 2.0) * np.sum(f * dens * _GL_WEIGHTS, axis=-1)
        return acc / math.sqrt(2.0 * math.pi)

    prev = integrate(1)
    cur = np.empty_like(prev)
    pending = np.ones(z0.shape[1], dtype=bool)
    panels = 2
    while pending.any():
        est = integrate(panels)
        done = np.max(np.abs(est - prev), axis=0, initial=0.0) < _QUAD_TOL
        if panels >= _QUAD_MAX_PANELS:
            done[:] = True
        newly = pending & done
        cur[:, newly] = est[:, newly]
        pending &= ~done
        prev, panels = est, panels * 2
    if upper:
        cur = cur + special.ndtr(-z0)
    return cur


class NullCdf:
    """Null distribution of a combined statistic as a mixture.

    Component ``m`` has weight ``weights[m]`` and is the law of
    ``A + S_m`` where ``A`` sums ``base_k`` null study terms and ``S_m`` is
    ``N(shifts[m], variances[m])`` (a point mass when the variance is 0).
    """

    def __init__(self, method: Method, transform: Transform, base_k: int,
                 weights: Sequence[float], shifts: Sequence[float],
                 variances: Sequence[float] | None = None,
                 groups: ThresholdGroups = ThresholdGroups(), d: int | None = None,
                 convolution: str = "quadrature"):
        self.method = method
        self.transform = transform
        self.base_k = int(base_k)
        self.groups = groups
        self.d = d
        self.weights = np.asarray(weights, dtype=float)
        self.shifts = np.asarray(shifts, dtype=float)
        self.variances = (np.zeros_like(self.shifts) if variances is None
                          else np.asarray(variances, dtype=float))
        if convolution not in ("quadrature", "montecarlo"):
            raise ValueError(f"unknown convolution scheme {convolution!r}")
        self.convolution = convolution
        self._mc_samples = None
        for arr in (self.weights, self.shifts, self.variances):
            arr.setflags(write=False)

    def __repr__(self) -> str:
        return (f"NullCdf(method={self.method.value}, transform={self.transform.value}, "
                f"base_k={self.base_k}, components={self.weights.size}, d={self.d})")

    @property
    def k1(self) -> int:
        return self.base_k

    @property
    def has_atoms(self) -> bool:
        return self.base_k == 0 and bool(np.any(self.variances == 0.0))

    def atoms(self) -> tuple[np.ndarray, np.ndarray]:
        """Atom locations and their total masses (empty for continuous nulls)."""
        if not self.has_atoms:
            return np.empty(0), np.empty(0)
        mask = self.variances == 0.0
        locs, inv = np.unique(self.shifts[mask], return_inverse=True)
        mass = np.zeros(locs.size)
        np.add.at(mass, inv, self.weights[mask])
        return locs, mass

    def _component_probs(self, t: np.ndarray, upper: bool) -> np.ndarray:
        tr, k = self.transform, self.base_k
        out = np.empty((self.weights.size, t.size))
        point = self.variances == 0.0
        if point.any():
            diff = t[None, :] - self.shifts[point][:, None]
            out[point] = tr.combined_sf(diff, k) if upper else tr.combined_cdf(diff, k)
        spread = ~point
        if spread.any():
            mean = self.shifts[spread]
            var = self.variances[spread]
            if tr is Transform.STOUFFER or k == 0:
                sd = np.sqrt(var + (k if tr is Transform.STOUFFER else 0))
                z = (t[None, :] - mean[:, None]) / sd[:, None]
                out[spread] = special.ndtr(-z) if upper else special.ndtr(z)
            elif self.convolution == "montecarlo":
                out[spread] = self._mc_probs(t, spread, upper)
            else:
                out[spread] = _fisher_normal_conv(t, k, mean, np.sqrt(var), upper)
        return out

    def _mc_probs(self, t: np.ndarray, spread: np.ndarray, upper: bool) -> np.ndarray:
        if self._mc_samples is None:
            rng = np.random.Generator(np.random.PCG64(20240601))
            samples = []
            for mean, var in zip(self.shifts[spread], self.variances[spread]):
                a = rng.chisquare(2 * self.base_k, 10**6)
                u = rng.normal(mean, math.sqrt(var), 10**6)
                samples.append(np.sort(a + u))
            self._mc_samples = samples
        rows = []
        for s in self._mc_samples:
            if upper:
                rows.append(1.0 - np.searchsorted(s, t, side="left") / s.size)
            else:
                rows.append(np.searchsorted(s, t, side="right") / s.size)
        return np.array(rows)

    def _mix(self, t, upper: bool):
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        flat = t_arr.ravel()
        result = np.empty(flat.size)
        for start in range(0, flat.size, _CHUNK):
            block = flat[start:start + _CHUNK]
            # sum along a contiguous axis so the order never depends on the block size
            terms = np.ascontiguousarray((self.weights[:, None] * self._component_probs(block, upper)).T)
            result[start:start + _CHUNK] = terms.sum(axis=1)
        result = np.clip(result, 0.0, 1.0).reshape(t_arr.shape)
        return float(result[0]) if np.ndim(t) == 0 else result

    def evaluate(self, t):
        """``P(T <= t)`` under the null."""
        return self._mix(t, upper=False)

    def survival(self, t):
        """``P(T >= t)`` under the null, atom at ``t`` included."""
        return self._mix(t, upper=True)

    def evaluate_left(self, t):
        """``P(T < t)``."""
        if not self.has_atoms:
            return self.evaluate(t)
        s = self.survival(t)
        return 1.0 - s

    def pvalue(self, statistic):
        """Significance in the transform's tail, atoms at the statistic included."""
        return self.survival(statistic) if self.transform.right_tail else self.evaluate(statistic)


def _check_cap(groups: ThresholdGroups, cap: int) -> None:
    size = math.prod(n + 1 for n in groups.counts)
    if size > cap:
        raise ValueError(
            f"null enumeration needs {size} terms (cap {cap}); reduce the number of "
            "distinct thresholds or evaluate the null by Monte Carlo (mc_null_oracle)"
        )


def _count_vectors(groups: ThresholdGroups) -> np.ndarray:
    if groups.r == 0:
        return np.zeros((1, 0), dtype=int)
    return np.array(list(itertools.product(*(range(n + 1) for n in groups.counts))), dtype=int)


def _binomial_weights(groups: ThresholdGroups, counts: np.ndarray) -> np.ndarray:
    w = np.ones(counts.shape[0])
    for l, (beta, n) in enumerate(zip(groups.thresholds, groups.counts)):
        j = counts[:, l]
        comb = np.array([math.comb(n, int(x)) for x in j], dtype=float)
        w = w * comb * beta**j * (1.0 - beta) ** (n - j)
    return w


def _grouped_sum(counts, totals, below, above):
    """``sum_l counts_l * below_l + (totals_l - counts_l) * above_l``.

    Shared by the null's atom locations and the mean-imputation statistic so
    that both produce bit-identical floats.
    """
    acc = 0.0
    for l in range(len(totals)):
        acc = acc + (counts[..., l] * below[l] + (totals[l] - counts[..., l]) * above[l])
    return acc


def _mean_levels(transform: Transform, thresholds: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(thresholds, dtype=float)
    return transform.inverse(a / 2.0), transform.inverse((1.0 + a) / 2.0)


def complete_null_cdf(transform: Transform, k: int, method: Method = Method.COMPLETE) -> NullCdf:
    """Closed-form null of the sum of ``k`` transformed uniforms."""
    if k < 1:
        raise ValueError("the complete-case null needs at least one study")
    return NullCdf(method, transform, k, [1.0], [0.0])


def mean_null_cdf(transform: Transform, k1: int, groups: ThresholdGroups,
                  cap: int = DEFAULT_ENUMERATION_CAP) -> NullCdf:
    """Null of the mean-imputation statistic, one term per count vector."""
    _check_cap(groups, cap)
    counts = _count_vectors(groups)
    below, above = _mean_levels(transform, groups.thresholds)
    totals = np.asarray(groups.counts, dtype=float)
    shifts = _grouped_sum(counts.astype(float), totals, below, above)
    shifts = np.broadcast_to(np.asarray(shifts, dtype=float), (counts.shape[0],))
    return NullCdf(Method.MEAN, transform, k1, _binomial_weights(groups, counts), shifts,
                   groups=groups)


def mean_null_cdf_full(transform: Transform, k1: int, thresholds: Sequence[float],
                       cap: int = DEFAULT_ENUMERATION_CAP) -> NullCdf:
    """Mean-imputation null by enumerating all ``2^K2`` indicator vectors."""
    k2 = len(thresholds)
    if 2**k2 > cap:
        raise ValueError(f"full enumeration needs 2^{k2} terms (cap {cap})")
    a = np.asarray(thresholds, dtype=float)
    bits = np.array(list(itertools.product((0, 1), repeat=k2)), dtype=float).reshape(-1, k2)
    weights = np.prod(np.where(bits == 1, a, 1.0 - a), axis=1)
    below, above = _mean_levels(transform, a)
    shifts = np.sum(np.where(bits == 1, below, above), axis=1)
    return NullCdf(Method.MEAN, transform, k1, weights, shifts, groups=group_thresholds(thresholds))


def mean_expected_statistic(transform: Transform, k1: int, groups: ThresholdGroups) -> float:
    """Null expectation of the mean-imputation statistic."""
    base = 2.0 * k1 if transform is Transform.FISHER else 0.0
    total = 0.0
    for beta, n in zip(groups.thresholds, groups.counts):
        below, above = _mean_levels(transform, [beta])
        total += n * (beta * float(below[0]) + (1.0 - beta) * float(above[0]))
    return base + total


def _moment_arrays(transform: Transform, thresholds: Sequence[float]):
    moms = [truncated_moments(transform, a) for a in thresholds]
    return (np.array([m.mu_w for m in moms]), np.array([m.var_w for m in moms]),
            np.array([m.mu_v for m in moms]), np.array([m.var_v for m in moms]))


def _check_d(d: int) -> None:
    if d < 1:
        raise ValueError("the number of imputations must be at least 1")
    if d < MIN_CLT_D:
        warnings.warn(f"D={d} imputations is below {MIN_CLT_D}; the normal approximation "
                      "to the multiple-imputation null may be inaccurate", CLTWarning, stacklevel=3)


def multiple_null_cdf(transform: Transform, k1: int, groups: ThresholdGroups, d: int = DEFAULT_D,
                      cap: int = DEFAULT_ENUMERATION_CAP, convolution: str = "quadrature") -> NullCdf:
    """Normal-approximation null of the multiple-imputation average."""
    _check_d(d)
    _check_cap(groups, cap)
    if groups.k2 == 0:
        return NullCdf(Method.MULTIPLE, transform, k1, [1.0], [0.0], groups=groups, d=d)
    counts = _count_vectors(groups).astype(float)
    mu_w, var_w, mu_v, var_v = _moment_arrays(transform, groups.thresholds)
    totals = np.asarray(groups.counts, dtype=float)
    means = _grouped_sum(counts, totals, mu_w, mu_v)
    variances = _grouped_sum(counts, totals, var_w, var_v) / d
    return NullCdf(Method.MULTIPLE, transform, k1,
                   _binomial_weights(groups, counts.astype(int)), means, variances,
                   groups=groups, d=d, convolution=convolution)


def multiple_null_cdf_full(transform: Transform, k1: int, thresholds: Sequence[float],
                           d: int = DEFAULT_D, cap: int = DEFAULT_ENUMERATION_CAP) -> NullCdf:
    """Multiple-imputation null by enumerating all ``2^K2`` indicator vectors."""
    _check_d(d)
    k2 = len(thresholds)
    if 2**k2 > cap:
        raise ValueError(f"full enumeration needs 2^{k2} terms (cap {cap})")
    if k2 == 0:
        return NullCdf(Method.MULTIPLE, transform, k1, [1.0], [0.0], d=d)
    a = np.asarray(thresholds, dtype=float)
    bits = np.array(list(itertools.product((0, 1), repeat=k2)), dtype=float)
    weights = np.prod(np.where(bits == 1, a, 1.0 - a), axis=1)
    mu_w, var_w, mu_v, var_v = _moment_arrays(transform, thresholds)
    means = np.sum(np.where(bits == 1, mu_w, mu_v), axis=1)
    variances = np.sum(np.where(bits == 1, var_w, var_v), axis=1) / d
    return NullCdf(Method.MULTIPLE, transform, k1, weights, means, variances,
                   groups=group_thresholds(thresholds), d=d)


def method_pvalue(statistic, null_cdf: NullCdf, transform: Transform | None = None):
    """Convert a statistic into a p-value in the transform's significant tail."""
    if transform is not None and transform is not null_cdf.transform:
        raise ValueError("transform does not match the null distribution")
    return null_cdf.pvalue(statistic)


# ---------------------------------------------------------------------------
# statistics

def impute_mean(panel: StudyPanel) -> list[float]:
    """Observed p-values unchanged; censored ones at the midpoint of their interval."""
    out = []
    for o in panel.observations:
        if not o.is_censored:
            out.append(o.p)
        elif o.indicator == 1:
            out.append(o.threshold / 2.0)
        else:
            out.append((1.0 + o.threshold) / 2.0)
    return out


def observed_sums(transform: Transform, observed: np.ndarray) -> np.ndarray:
    """Row sums of the transformed observed p-values (the ``A`` term)."""
    return np.sum(transform.inverse(observed), axis=1)


def group_counts(indicators: np.ndarray, thresholds: Sequence[float],
                 groups: ThresholdGroups) -> np.ndarray:
    """Per-row number of below-threshold indicators in each threshold group."""
    thresholds = list(thresholds)
    cols = [[j for j, a in enumerate(thresholds) if a == b] for b in groups.thresholds]
    ind = np.asarray(indicators, dtype=float)
    if not cols:
        return np.zeros((ind.shape[0], 0))
    return np.stack([ind[:, c].sum(axis=1) for c in cols], axis=1)


def mean_impute_rows(transform: Transform, observed: np.ndarray, indicators: np.ndarray,
                     thresholds: Sequence[float]) -> np.ndarray:
    groups = group_thresholds(thresholds)
    counts = group_counts(indicators, thresholds, groups)
    below, above = _mean_levels(transform, groups.thresholds)
    shift = _grouped_sum(counts, np.asarray(groups.counts, dtype=float), below, above)
    return observed_sums(transform, observed) + shift


def mean_impute_statistic(panel: StudyPanel, transform: Transform) -> float:
    """Combined statistic after mean imputation.

    The censored contribution is accumulated per threshold group, in the
    same order as the null's atom locations.
    """
    return float(mean_impute_rows(transform, panel.observed_p.reshape(1, -1),
                                  panel.indicators.reshape(1, -1), panel.thresholds)[0])


def draw_censored_component(transform: Transform, indicators: np.ndarray,
                            thresholds: np.ndarray, d: int, rng: np.random.Generator) -> float:
    """Sum over censored studies of the mean of ``d`` transformed random imputations.

    Draw order: one ``(K2, d)`` block of uniforms, study-major, so ``d = 1``
    consumes the stream exactly as single imputation does.
    """
    k2 = len(thresholds)
    if k2 == 0:
        return 0.0
    u = rng.random((k2, d))
    a = np.asarray(thresholds, dtype=float)[:, None]
    below = np.asarray(indicators)[:, None] == 1
    p = np.where(below, a * u, a + (1.0 - a) * u)
    return float(np.sum(np.mean(transform.inverse(p), axis=1)))


def single_impute_statistic(panel: StudyPanel, transform: Transform,
                            rng: np.random.Generator) -> tuple[float, float]:
    """One uniform draw per censored study; the result is exactly the K-study null."""
    a = float(observed_sums(transform, panel.observed_p.reshape(1, -1))[0])
    stat = a + draw_censored_component(transform, panel.indicators, panel.thresholds, 1, rng)
    return stat, float(transform.combined_pvalue(stat, panel.k))


def multiple_impute_statistic(panel: StudyPanel, transform: Transform, d: int,
                              rng: np.random.Generator) -> float:
    """Average of ``d`` single-imputation statistics."""
    if d < 1:
        raise ValueError("the number of imputations must be at least 1")
    a = float(observed_sums(transform, panel.observed_p.reshape(1, -1))[0])
    return a + draw_censored_component(transform, panel.indicators, panel.thresholds, d, rng)
