"""Censored study observations and the Fisher / Stouffer evidence transforms."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

logger = logging.getLogger(__name__)

P_FLOOR = 1e-300
P_CEIL = 1.0 - 1e-16


class Transform(enum.Enum):
    """Per-study map ``p -> T_k`` and the null of the summed statistic.

    Fisher uses ``-2 ln p`` (chi-square with 2 df per study, large values
    significant).  Stouffer uses ``Phi^-1(p)`` (standard normal per study,
    small values significant).
    """

    FISHER = "fisher"
    STOUFFER = "stouffer"

    @property
    def right_tail(self) -> bool:
        return self is Transform.FISHER

    def inverse(self, p) -> np.ndarray:
        """Vectorised transform; p is clamped below at 1e-300 (and, for
        Stouffer, above at 1 - 1e-16) to keep the result finite."""
        p = np.asarray(p, dtype=float)
        clamped = np.clip(p, P_FLOOR, None if self is Transform.FISHER else P_CEIL)
        if logger.isEnabledFor(logging.DEBUG):
            n = int(np.count_nonzero(clamped != p))
            if n:
                logger.debug("clamped %d p-values before %s transform", n, self.value)
        if self is Transform.FISHER:
            return -2.0 * np.log(clamped)
        return special.ndtri(clamped)

    def combined_cdf(self, t, k: int) -> np.ndarray:
        """``P(sum of k null terms <= t)``; ``k == 0`` is a unit step at 0."""
        t = np.asarray(t, dtype=float)
        if k == 0:
            return (t >= 0.0).astype(float)
        if self is Transform.FISHER:
            return special.gammainc(k, np.maximum(t, 0.0) / 2.0)
        return special.ndtr(t / np.sqrt(k))

    def combined_sf(self, t, k: int) -> np.ndarray:
        """``P(sum of k null terms >= t)``, closed on the atom for ``k == 0``."""
        t = np.asarray(t, dtype=float)
        if k == 0:
            return (t <= 0.0).astype(float)
        if self is Transform.FISHER:
            return special.gammaincc(k, np.maximum(t, 0.0) / 2.0)
        return special.ndtr(-t / np.sqrt(k))

    def combined_pvalue(self, t, k: int) -> np.ndarray:
        return self.combined_sf(t, k) if self.right_tail else self.combined_cdf(t, k)


def transform_inverse(transform: Transform, p: float) -> float:
    """Transformed statistic of one p-value, rejecting values that would be infinite."""
    if not np.isfinite(p) or p <= 0.0 or p > 1.0:
        raise ValueError(f"p-value must lie in (0, 1], got {p}")
    if transform is Transform.STOUFFER and p >= 1.0:
        raise ValueError("Stouffer transform is infinite at p = 1")
    return float(transform.inverse(p))


@dataclass(frozen=True)
class StudyObservation:
    """One study's evidence: an observed p-value, or ``1{p < threshold}``."""

    p: float | None = None
    indicator: int | None = None
    threshold: float | None = None

    def __post_init__(self):
        if self.p is not None:
            if self.indicator is not None or self.threshold is not None:
                raise ValueError("an observed study carries no indicator or threshold")
            if not (0.0 < self.p <= 1.0):
                raise ValueError(f"observed p-value must lie in (0, 1], got {self.p}")
        else:
            if self.indicator not in (0, 1) or self.threshold is None:
                raise ValueError("a censored study needs indicator in {0, 1} and a threshold")
            if not (0.0 < self.threshold < 1.0):
                raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")

    @classmethod
    def observed(cls, p: float) -> StudyObservation:
        return cls(p=float(p))

    @classmethod
    def censored(cls, indicator: int, threshold: float) -> StudyObservation:
        return cls(indicator=int(indicator), threshold=float(threshold))

    @property
    def is_censored(self) -> bool:
        return self.p is None


@dataclass(frozen=True)
class ThresholdGroups:
    """Distinct censoring thresholds (ascending) and how many studies use each."""

    thresholds: tuple[float, ...] = ()
    counts: tuple[int, ...] = ()

    @property
    def k2(self) -> int:
        return sum(self.counts)

    @property
    def r(self) -> int:
        return len(self.thresholds)

    def expand(self) -> list[float]:
        return [b for b, n in zip(self.thresholds, self.counts) for _ in range(n)]


def group_thresholds(thresholds: Sequence[float]) -> ThresholdGroups:
    """Collapse a multiset of thresholds by exact equality."""
    distinct = sorted(set(float(a) for a in thresholds))
    counts = [sum(1 for a in thresholds if float(a) == b) for b in distinct]
    return ThresholdGroups(tuple(distinct), tuple(counts))


@dataclass(frozen=True)
class Schema:
    """Per-study censoring pattern shared by every feature of a matrix.

    ``thresholds[k]`` is ``None`` for an observed study and the threshold
    ``alpha_k`` for a censored one.
    """

    thresholds: tuple[float | None, ...]
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        if len(self.thresholds) == 0:
            raise ValueError("a schema needs at least one study")
        for a in self.thresholds:
            if a is not None and not (0.0 < a < 1.0):
                raise ValueError(f"threshold must lie in (0, 1), got {a}")
        if self.names is not None and len(self.names) != len(self.thresholds):
            raise ValueError("schema names and thresholds differ in length")

    @property
    def k(self) -> int:
        return len(self.thresholds)

    @property
    def observed_index(self) -> list[int]:
        return [i for i, a in enumerate(self.thresholds) if a is None]

    @property
    def censored_index(self) -> list[int]:
        return [i for i, a in enumerate(self.thresholds) if a is not None]

    @property
    def k1(self) -> int:
        return len(self.observed_index)

    @property
    def k2(self) -> int:
        return len(self.censored_index)

    @property
    def censored_thresholds(self) -> list[float]:
        return [a for a in self.thresholds if a is not None]

    def groups(self) -> ThresholdGroups:
        return group_thresholds(self.censored_thresholds)


@dataclass(frozen=True)
class StudyPanel:
    """The K observations of one feature, in study order."""

    observations: tuple[StudyObservation, ...]

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        if len(self.observations) == 0:
            raise ValueError("a panel needs at least one study")

    @classmethod
    def from_values(cls, pvalues: Sequence[float | None] = (),
                    censored: Sequence[tuple[int, float]] = ()) -> StudyPanel:
        """Observed p-values first, then ``(indicator, threshold)`` pairs."""
        obs = [StudyObservation.observed(p) for p in pvalues]
        obs += [StudyObservation.censored(x, a) for x, a in censored]
        return cls(tuple(obs))

    @property
    def k(self) -> int:
        return len(self.observations)

    @property
    def k1(self) -> int:
        return sum(1 for o in self.observations if not o.is_censored)

    @property
    def k2(self) -> int:
        return self.k - self.k1

    @property
    def schema(self) -> Schema:
        return Schema(tuple(o.threshold for o in self.observations))

    @property
    def observed_p(self) -> np.ndarray:
        return np.array([o.p for o in self.observations if not o.is_censored], dtype=float)

    @property
    def indicators(self) -> np.ndarray:
        return np.array([o.indicator for o in self.observations if o.is_censored], dtype=np.uint8)

    @property
    def thresholds(self) -> list[float]:
        return [o.threshold for o in self.observations if o.is_censored]

    def groups(self) -> ThresholdGroups:
        return group_thresholds(self.thresholds)


@dataclass(frozen=True, eq=False)
class StudyMatrix:
    """Features x studies sharing one schema, stored column-split.

    ``observed`` holds the p-values of the observed studies (n x K1) and
    ``indicators`` the 0/1 values of the censored studies (n x K2), both in
    study order.
    """

    schema: Schema
    feature_ids: tuple[str, ...]
    observed: np.ndarray
    indicators: np.ndarray

    def __post_init__(self):
        n = len(self.feature_ids)
        obs = np.ascontiguousarray(np.asarray(self.observed, dtype=float).reshape(n, self.schema.k1))
        ind = np.ascontiguousarray(np.asarray(self.indicators, dtype=np.uint8).reshape(n, self.schema.k2))
        object.__setattr__(self, "feature_ids", tuple(str(f) for f in self.feature_ids))
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "indicators", ind)
        bad = ~((obs > 0.0) & (obs <= 1.0))
        if bad.any():
            row, col = map(int, np.argwhere(bad)[0])
            raise ValueError(
                f"invalid p-value {obs[row, col]!r} for feature {self.feature_ids[row]!r} "
                f"in study {self.schema.observed_index[col]}"
            )
        if np.any(ind > 1):
            row, col = map(int, np.argwhere(ind > 1)[0])
            raise ValueError(f"indicator must be 0 or 1 for feature {self.feature_ids[row]!r}")

    def __len__(self) -> int:
        return len(self.feature_ids)

    @classmethod
    def from_panels(cls, feature_ids: Sequence, panels: Sequence[StudyPanel]) -> StudyMatrix:
        if len(feature_ids) != len(panels):
            raise ValueError("one feature id per panel is required")
        if not panels:
            raise ValueError("cannot infer a schema from zero panels; use StudyMatrix.empty")
        schema = panels[0].schema
        for fid, panel in zip(feature_ids, panels):
            if panel.k != schema.k:
                raise ValueError(f"feature {fid!r} has {panel.k} studies, expected {schema.k}")
            if panel.schema.thresholds != schema.thresholds:
                raise ValueError(f"feature {fid!r} has a different censoring schema")
        observed = np.array([p.observed_p for p in panels], dtype=float).reshape(len(panels), schema.k1)
        indicators = np.array([p.indicators for p in panels], dtype=np.uint8).reshape(len(panels), schema.k2)
        return cls(schema, tuple(feature_ids), observed, indicators)

    @classmethod
    def empty(cls, schema: Schema) -> StudyMatrix:
        return cls(schema, (), np.empty((0, schema.k1)), np.empty((0, schema.k2), dtype=np.uint8))

    @classmethod
    def from_full_pvalues(cls, pvalues: np.ndarray, schema: Schema,
                          feature_ids: Sequence | None = None) -> StudyMatrix:
        """Censor a complete n x K p-value matrix according to ``schema``."""
        pvalues = np.asarray(pvalues, dtype=float)
        if pvalues.ndim != 2 or pvalues.shape[1] != schema.k:
            raise ValueError(f"expected an n x {schema.k} matrix, got shape {pvalues.shape}")
        if feature_ids is None:
            feature_ids = [str(i) for i in range(pvalues.shape[0])]
        observed = pvalues[:, schema.observed_index]
        cens = schema.censored_index
        alphas = np.array(schema.censored_thresholds, dtype=float)
        indicators = (pvalues[:, cens] < alphas).astype(np.uint8)
        return cls(schema, tuple(feature_ids), observed, indicators)

    def panel(self, i: int) -> StudyPanel:
        obs_iter = iter(self.observed[i])
        ind_iter = iter(self.indicators[i])
        out = []
        for a in self.schema.thresholds:
            if a is None:
                out.append(StudyObservation.observed(float(next(obs_iter))))
            else:
                out.append(StudyObservation.censored(int(next(ind_iter)), a))
        return StudyPanel(tuple(out))

    def take(self, rows) -> StudyMatrix:
        rows = np.asarray(rows, dtype=int)
        return StudyMatrix(self.schema, tuple(self.feature_ids[i] for i in rows),
                           self.observed[rows], self.indicators[rows])


def combine_complete(transform: Transform, pvalues: Sequence[float]) -> tuple[float, float]:
    """Sum of transformed p-values and its meta p-value under the K-study null."""
    p = np.asarray(pvalues, dtype=float).reshape(1, -1)
    if p.shape[1] == 0:
        raise ValueError("need at least one p-value")
    stats, pvals = combine_complete_rows(transform, p)
    return float(stats[0]), float(pvals[0])


def combine_complete_rows(transform: Transform, pvalues: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`combine_complete` over an n x K array."""
    pvalues = np.asarray(pvalues, dtype=float)
    if np.any(~((pvalues > 0.0) & (pvalues <= 1.0))):
        raise ValueError("p-values must lie in (0, 1]")
    k = pvalues.shape[1]
    stats = np.sum(transform.inverse(pvalues), axis=1)
    return stats, transform.combined_pvalue(stats, k)


def combine_available(transform: Transform, panel: StudyPanel) -> tuple[float, float] | None:
    """Combine only the observed studies; ``None`` when none is observed."""
    if panel.k1 == 0:
        return None
    return combine_complete(transform, panel.observed_p)
