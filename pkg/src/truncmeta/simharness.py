"""Simulation studies for type I error, power/FDR and the choice of D.

Also hosts the brute-force Monte Carlo oracle used to check every analytic
null distribution in :mod:`truncmeta.imputation`.
"""

from __future__ import annotations

import configparser
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from .imputation import DEFAULT_D, Method, NullCdf
from .inference import bh_adjust, by_adjust, empirical_type1, matrix_statistics, true_fdr
from .model import Schema, StudyMatrix, ThresholdGroups, Transform
from .numerics import (
    cov_to_corr,
    make_rng,
    psd_factor,
    sample_inverse_wishart,
    student_t_two_sided_p,
    two_sample_t,
)

logger = logging.getLogger(__name__)

METHODS = (Method.COMPLETE, Method.AVAILABLE, Method.MEAN, Method.SINGLE, Method.MULTIPLE)
TRANSFORMS = (Transform.FISHER, Transform.STOUFFER)
DEFAULT_CENSORING = (None,) * 5 + (0.001, 0.001, 0.01, 0.01, 0.05)


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings; defaults are the reduced desk-scale design."""

    G: int = 2000
    N: int = 100
    K: int = 10
    n_clusters: int = 40
    cluster_size: int = 20
    n_de: int = 200
    effect_range: tuple[float, float] = (0.1, 0.5)
    wishart_dof: int = 60
    psi_diag: float = 1.0
    psi_offdiag: float = 0.5
    censor_pattern: tuple[float | None, ...] = DEFAULT_CENSORING
    reps: int = 10
    seed: int = 2014
    d: int = DEFAULT_D
    level: float = 0.05
    fdr_level: float = 0.05
    equal_var: bool = True

    def __post_init__(self):
        if self.n_clusters * self.cluster_size > self.G:
            raise ValueError("clustered genes exceed G")
        if not (0 <= self.n_de <= self.G):
            raise ValueError("n_de must lie in [0, G]")
        lo, hi = self.effect_range
        if not lo < hi:
            raise ValueError("effect_range must satisfy lo < hi")
        if len(self.censor_pattern) != self.K:
            raise ValueError("censor_pattern needs one entry per study")
        if self.N < 4 or self.N % 2:
            raise ValueError("N must be an even number >= 4")

    @classmethod
    def full_scale(cls, **overrides) -> SimConfig:
        base = dict(G=10000, n_clusters=200, n_de=1000, reps=50)
        base.update(overrides)
        return cls(**base)

    @property
    def schema(self) -> Schema:
        return Schema(tuple(self.censor_pattern))

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> SimConfig:
        """Read ``key = value`` lines; unknown keys are an error."""
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        parser.optionxform = str
        parser.read_string("[sim]\n" + Path(path).read_text(encoding="utf-8"))
        return cls.from_mapping(dict(parser["sim"]), **overrides)

    @classmethod
    def from_mapping(cls, values: dict[str, str], **overrides) -> SimConfig:
        kinds = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key == "scale":
                continue
            if key not in kinds:
                raise ValueError(f"unknown simulation setting {key!r}")
            kwargs[key] = _parse_setting(key, raw)
        kwargs.update(overrides)
        if values.get("scale", "desk").strip() == "full":
            return cls.full_scale(**kwargs)
        return cls(**kwargs)


def _parse_setting(key: str, raw: str):
    raw = raw.strip()
    if key == "effect_range":
        lo, hi = (float(x) for x in raw.split(","))
        return (lo, hi)
    if key == "censor_pattern":
        out = []
        for item in raw.split(","):
            item = item.strip().lower()
            out.append(None if item in ("", "none", "observed", "-") else float(item))
        return tuple(out)
    if key == "equal_var":
        return raw.lower() in ("1", "true", "yes", "pooled")
    if key in ("psi_diag", "psi_offdiag", "level", "fdr_level"):
        return float(raw)
    return int(raw)


@dataclass(frozen=True, eq=False)
class SimDataset:
    """Expression array ``(G, N, K)``; the first ``N/2`` samples are controls."""

    expression: np.ndarray
    truth: np.ndarray
    cluster_labels: np.ndarray
    effects: np.ndarray = field(repr=False)

    @property
    def n_controls(self) -> int:
        return self.expression.shape[1] // 2


def _cluster_labels(config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    labels = np.zeros(config.G, dtype=int)
    members = rng.permutation(config.G)[: config.n_clusters * config.cluster_size]
    labels[members] = np.repeat(np.arange(1, config.n_clusters + 1), config.cluster_size)
    return labels


def _add_effects(config: SimConfig, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    lo, hi = config.effect_range
    effects = np.zeros((config.G, config.K))
    effects[: config.n_de] = rng.uniform(lo, hi, size=(config.n_de, config.K))
    half = config.N // 2
    x[:, half:, :] += effects[:, None, :]
    return effects


def simulate_correlated(config: SimConfig, rng: np.random.Generator) -> SimDataset:
    """Clustered genes with inverse-Wishart correlation, then DE shifts in cases."""
    labels = _cluster_labels(config, rng)
    size = config.cluster_size
    psi = np.full((size, size), config.psi_offdiag)
    np.fill_diagonal(psi, config.psi_diag)
    x = np.empty((config.G, config.N, config.K))
    members = [np.nonzero(labels == c)[0] for c in range(1, config.n_clusters + 1)]
    for k in range(config.K):
        for idx in members:
            corr = cov_to_corr(sample_inverse_wishart(psi, config.wishart_dof, rng))
            factor = psd_factor(corr)
            x[idx, :, k] = factor @ rng.standard_normal((size, config.N))
        free = labels == 0
        x[free, :, k] = rng.standard_normal((int(free.sum()), config.N))
    effects = _add_effects(config, x, rng)
    truth = np.arange(config.G) < config.n_de
    return SimDataset(x, truth, labels, effects)


def simulate_independent(config: SimConfig, rng: np.random.Generator) -> SimDataset:
    """All genes independent standard normal, then DE shifts in cases."""
    x = rng.standard_normal((config.G, config.N, config.K))
    effects = _add_effects(config, x, rng)
    truth = np.arange(config.G) < config.n_de
    return SimDataset(x, truth, np.zeros(config.G, dtype=int), effects)


def dataset_pvalues(dataset: SimDataset, equal_var: bool = True) -> np.ndarray:
    """Two-sided two-sample t-test p-values, shape ``(G, K)``."""
    half = dataset.n_controls
    controls = dataset.expression[:, :half, :]
    cases = dataset.expression[:, half:, :]
    t, df = two_sample_t(controls, cases, axis=1, equal_var=equal_var)
    return student_t_two_sided_p(t, df)


# ---------------------------------------------------------------------------
# studies

def _rep_seed(seed: int, rep: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, rep, tag]).generate_state(1, np.uint64)[0])


def _rep_matrices(config: SimConfig, rep: int, correlated: bool):
    rng = make_rng([config.seed, rep])
    sim = simulate_correlated if correlated else simulate_independent
    dataset = sim(config, rng)
    p = dataset_pvalues(dataset, config.equal_var)
    ids = [str(g) for g in range(config.G)]
    full = StudyMatrix.from_full_pvalues(p, Schema((None,) * config.K), ids)
    censored = StudyMatrix.from_full_pvalues(p, config.schema, ids)
    return dataset, full, censored


def _method_pvalues(config: SimConfig, full: StudyMatrix, censored: StudyMatrix, method: Method,
                    transform: Transform, rep: int, d: int | None = None) -> np.ndarray:
    matrix = full if method is Method.COMPLETE else censored
    seed = _rep_seed(config.seed, rep, TRANSFORMS.index(transform))
    return matrix_statistics(matrix, method, transform, d or config.d, seed)[1]


def _mean_se(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    se = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), se


def run_type1_study(config: SimConfig, level: float | None = None) -> list[dict]:
    """Empirical type I error on non-DE genes of independent data."""
    level = config.level if level is None else level
    rates = {(t, m): [] for t in TRANSFORMS for m in METHODS}
    for rep in range(config.reps):
        dataset, full, censored = _rep_matrices(config, rep, correlated=False)
        nulls = ~dataset.truth
        for t in TRANSFORMS:
            for m in METHODS:
                p = _method_pvalues(config, full, censored, m, t, rep)
                rates[t, m].append(empirical_type1(p[nulls], level))
        logger.info("type I replicate %d/%d done", rep + 1, config.reps)
    rows = []
    for (t, m), vals in rates.items():
        mean, se = _mean_se(vals)
        rows.append(dict(transform=t.value, method=m.value, level=level, type1=mean, se=se))
    return rows


def run_power_study(config: SimConfig) -> list[dict]:
    """Detections and true FDR at nominal FDR under B-H and B-Y, correlated data."""
    records = {}
    for rep in range(config.reps):
        dataset, full, censored = _rep_matrices(config, rep, correlated=True)
        null_ids = set(np.nonzero(~dataset.truth)[0].tolist())
        for t in TRANSFORMS:
            for m in METHODS:
                p = _method_pvalues(config, full, censored, m, t, rep)
                for name, adjust in (("BH", bh_adjust), ("BY", by_adjust)):
                    detected = np.nonzero(adjust(p) <= config.fdr_level)[0].tolist()
                    fdr = true_fdr(detected, null_ids)
                    records.setdefault((name, t, m), []).append((fdr.n_detected, fdr.rate))
        logger.info("power replicate %d/%d done", rep + 1, config.reps)
    rows = []
    for (name, t, m), vals in records.items():
        det_mean, det_se = _mean_se([v[0] for v in vals])
        fdr_mean, fdr_se = _mean_se([v[1] for v in vals])
        rows.append(dict(fdr_method=name, transform=t.value, method=m.value,
                         detections=det_mean, detections_se=det_se,
                         true_fdr=fdr_mean, true_fdr_se=fdr_se))
    return rows


def run_d_robustness(config: SimConfig, d_values: Sequence[int] = (20, 30, 50, 100, 150, 200, 250, 300, 500),
                     reference_d: int = 1000, level: float | None = None) -> list[dict]:
    """Power of multiple imputation at significance ``level`` for each D.

    The same data sets serve every D; single imputation is reported
    alongside as the D-free baseline.
    """
    level = config.level if level is None else level
    ds = list(dict.fromkeys([*d_values, reference_d]))
    power = {}
    for rep in range(config.reps):
        dataset, full, censored = _rep_matrices(config, rep, correlated=True)
        de = dataset.truth
        for t in TRANSFORMS:
            p = _method_pvalues(config, full, censored, Method.SINGLE, t, rep)
            power.setdefault((t, "single", 1), []).append(float(np.mean(p[de] <= level)))
            for d in ds:
                p = _method_pvalues(config, full, censored, Method.MULTIPLE, t, rep, d)
                power.setdefault((t, "multiple", d), []).append(float(np.mean(p[de] <= level)))
        logger.info("D-robustness replicate %d/%d done", rep + 1, config.reps)
    rows = []
    for (t, m, d), vals in power.items():
        mean, se = _mean_se(vals)
        rows.append(dict(transform=t.value, method=m, d=d, reference=(d == reference_d and m == "multiple"),
                         power=mean, se=se))
    return rows


# ---------------------------------------------------------------------------
# Monte Carlo oracle

class EmpiricalCdf:
    """Right-continuous empirical CDF of a sample."""

    def __init__(self, sample: np.ndarray):
        self.sample = np.sort(np.asarray(sample, dtype=float))

    def __len__(self) -> int:
        return self.sample.size

    def evaluate(self, t):
        return np.searchsorted(self.sample, t, side="right") / self.sample.size

    def evaluate_left(self, t):
        return np.searchsorted(self.sample, t, side="left") / self.sample.size


def mc_null_oracle(method: Method | str, transform: Transform | str, k1: int, groups: ThresholdGroups,
                   d: int = DEFAULT_D, n_draws: int = 10**6, rng: np.random.Generator | None = None,
                   chunk: int = 20000) -> EmpiricalCdf:
    """Empirical null of a method's statistic by simulating the whole pipeline.

    Every study gets a uniform p-value; censored studies are reduced to
    their indicator, re-imputed the method's way, and summed.  Nothing from
    the analytic null code is used.
    """
    method, transform = Method(method), Transform(transform)
    if n_draws < 10**5:
        raise ValueError("the oracle needs at least 1e5 draws")
    rng = make_rng(0) if rng is None else rng
    alphas = np.array(groups.expand(), dtype=float)
    k2 = alphas.size
    if method is Method.COMPLETE:
        k1, alphas, k2 = k1 + k2, np.empty(0), 0
    out = []
    for start in range(0, n_draws, chunk):
        m = min(chunk, n_draws - start)
        obs = rng.random((m, k1))
        p_cens = rng.random((m, k2))
        stat = _apply(transform, obs).sum(axis=1)
        below = p_cens < alphas
        if method is Method.MEAN:
            imputed = np.where(below, alphas / 2.0, (1.0 + alphas) / 2.0)
            stat = stat + _apply(transform, imputed).sum(axis=1)
        elif method in (Method.SINGLE, Method.MULTIPLE):
            reps = 1 if method is Method.SINGLE else d
            u = rng.random((m, k2, reps))
            a = alphas[None, :, None]
            imputed = np.where(below[..., None], a * u, a + (1.0 - a) * u)
            stat = stat + _apply(transform, imputed).mean(axis=2).sum(axis=1)
        out.append(stat)
    return EmpiricalCdf(np.concatenate(out))


def _apply(transform: Transform, p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-300, None)
    return -2.0 * np.log(p) if transform is Transform.FISHER else ndtri(p)


def sup_distance(ecdf: EmpiricalCdf, null: NullCdf, grid_size: int = 20001) -> float:
    """Sup-distance between an empirical and an analytic CDF on a quantile grid.

    Evaluation points are midpoints between consecutive distinct support
    points (sample quantiles and null atoms, merged within a relative
    ``1e-9``), plus one point beyond each end.  Midpoints keep atoms that
    two float paths place an ulp apart on the same side of every probe.
    """
    x = ecdf.sample
    idx = np.unique(np.linspace(0, x.size - 1, grid_size).round().astype(int))
    support = np.concatenate([x[idx], null.atoms()[0]])
    support = np.unique(support)
    keep = np.ones(support.size, dtype=bool)
    keep[1:] = np.diff(support) > 1e-9 * (1.0 + np.abs(support[1:]))
    support = support[keep]
    span = max(1.0, float(support[-1] - support[0]))
    probes = np.concatenate([[support[0] - span], (support[1:] + support[:-1]) / 2.0,
                             [support[-1] + span]])
    return float(np.max(np.abs(ecdf.evaluate(probes) - null.evaluate(probes))))
