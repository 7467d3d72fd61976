"""Ratios, de-biasing scores, compliance, alignment, and two-sample / trend statistics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.optimize import isotonic_regression
from scipy.spatial.distance import cdist

from weakguide.codec import CondEmbedding
from weakguide.world import World


class EmptySampleError(ValueError):
    """A ratio was requested over zero samples."""


@dataclass(frozen=True)
class RatioReport:
    context: str
    attributes: tuple[str, ...]
    counts: tuple[int, ...]

    @property
    def n(self) -> int:
        return sum(self.counts)

    @property
    def ratios(self) -> dict[str, float]:
        return {a: c / self.n for a, c in zip(self.attributes, self.counts)}

    def ratio(self, attribute: str) -> float:
        return self.ratios[attribute]

    def minor(self) -> str:
        """The less frequent attribute of a binary report (ties go to the second)."""
        if len(self.attributes) != 2:
            raise ValueError("minor attribute is defined for binary attribute sets only")
        a, b = self.attributes
        return a if self.counts[0] < self.counts[1] else b


@dataclass(frozen=True)
class DiscrepancyReport:
    value: float
    deviations: dict[str, float]


def ratio_from_labels(labels: np.ndarray, attributes: Sequence[str], context: str = "") -> RatioReport:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptySampleError("no samples")
    counts = np.bincount(labels, minlength=len(attributes))
    return RatioReport(context, tuple(attributes), tuple(int(c) for c in counts))


def attribute_ratio(world: World, samples: np.ndarray, context: str, family: str | None = None) -> RatioReport:
    """Classify each sample with the uniform-prior Bayes rule and tally."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if len(samples) == 0:
        raise EmptySampleError("no samples")
    fam = family or next(iter(world.spec.families))
    labels = world.classify_many(samples, context, fam)
    return ratio_from_labels(labels, world.spec.families[fam], context)


def avg_delta(reports: Sequence[RatioReport], minors: Sequence[str] | None = None) -> float:
    """Mean over reports of |minor ratio - 0.5| for binary attribute sets.

    ``minors`` names each report's minor attribute (e.g. the context's prior
    minority); by default the empirically less frequent one is used.
    """
    if not reports:
        raise ValueError("need at least one report")
    vals = []
    for i, r in enumerate(reports):
        if len(r.attributes) != 2:
            raise ValueError("avg_delta needs a binary attribute set")
        minor = minors[i] if minors is not None else r.minor()
        vals.append(abs(r.ratio(minor) - 0.5))
    return float(np.mean(vals))


def discrepancy(report: RatioReport) -> DiscrepancyReport:
    """Mean absolute deviation of the attribute frequencies from uniform."""
    k = len(report.attributes)
    if k < 2:
        raise ValueError("discrepancy needs at least two attributes")
    dev = {a: abs(r - 1.0 / k) for a, r in report.ratios.items()}
    return DiscrepancyReport(float(np.mean(list(dev.values()))), dev)


def compliance(world: World, samples: np.ndarray, context: str, specified: str) -> float:
    """Fraction of samples classified as the attribute the prompt asked for."""
    fam = world.spec.family_of(specified)
    return attribute_ratio(world, samples, context, fam).ratio(specified)


def alignment_values(world: World, samples: np.ndarray, prompt: CondEmbedding, context: str) -> np.ndarray:
    """Per-sample log p(x | prompt) - log p(x): how much the prompt explains each sample."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    return world.log_density(x, prompt, context) - world.log_density(x, world.codec.empty(), context)


def alignment_score(world: World, samples: np.ndarray, prompt: CondEmbedding, context: str) -> float:
    """Mean pointwise log-likelihood ratio of the prompt's mixture over the unconditional one."""
    if len(samples) == 0:
        raise EmptySampleError("no samples")
    return float(np.mean(alignment_values(world, samples, prompt, context)))


# -- two-sample statistics -------------------------------------------------------


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """V-statistic energy distance 2E|a-b| - E|a-a'| - E|b-b'| (zero for identical sets)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptySampleError("energy distance needs two nonempty samples")
    if a.shape[1] != b.shape[1]:
        raise ValueError("samples must share their dimension")
    value = 2.0 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean()
    return max(float(value), 0.0)


@dataclass(frozen=True)
class PermutationResult:
    statistic: float
    threshold: float  # the (1 - level) quantile of the permutation null
    p_value: float

    @property
    def rejected(self) -> bool:
        return self.statistic > self.threshold


def energy_test(
    a: np.ndarray,
    b: np.ndarray,
    rng: np.random.Generator,
    n_perm: int = 199,
    level: float = 0.05,
    chunk: int = 1000,
) -> PermutationResult:
    """Permutation test of equal distributions using the energy distance.

    All permutations are scored in one pass over row chunks of the pooled
    distance matrix, so memory stays at ``chunk x (n_a + n_b)``.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptySampleError("energy test needs two nonempty samples")
    pooled = np.concatenate([a, b])
    na, n = len(a), len(pooled)
    nb = n - na
    base = np.zeros(n)
    base[:na] = 1.0
    # column 0 is the observed split; the rest are permutations. l is the group-a indicator:
    # sum_aa = l'Dl, sum_ab = l'D1 - l'Dl, sum_bb = 1'D1 - 2 sum_ab - sum_aa
    masks = np.stack([base] + [rng.permutation(base) for _ in range(n_perm)], axis=1)
    dl = np.empty_like(masks)
    row = np.empty(n)
    for i in range(0, n, chunk):
        d = cdist(pooled[i : i + chunk], pooled)
        dl[i : i + chunk] = d @ masks
        row[i : i + chunk] = d.sum(axis=1)
    total = row.sum()
    s_aa = np.einsum("np,np->p", masks, dl)
    s_ab = masks.T @ row - s_aa
    s_bb = total - 2.0 * s_ab - s_aa
    values = 2.0 * s_ab / (na * nb) - s_aa / na**2 - s_bb / nb**2
    observed, null = float(values[0]), values[1:]
    p = (1 + np.sum(null >= observed)) / (n_perm + 1)
    return PermutationResult(max(observed, 0.0), float(np.quantile(null, 1.0 - level)), float(p))


# -- proportions ----------------------------------------------------------------------


def binomial_ci(k: int, n: int, level: float = 0.99) -> tuple[float, float]:
    """Clopper-Pearson interval for a binomial proportion."""
    ci = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="exact")
    return float(ci.low), float(ci.high)


def proportion_test(k1: int, n1: int, k2: int, n2: int, alternative: str = "greater") -> float:
    """Pooled two-proportion z-test of p1 vs p2; returns the p-value.

    ``alternative`` is "greater" (p1 > p2), "less", or "two-sided".
    """
    p1, p2 = k1 / n1, k2 / n2
    pool = (k1 + k2) / (n1 + n2)
    se = np.sqrt(pool * (1.0 - pool) * (1.0 / n1 + 1.0 / n2))
    if se == 0.0:
        return 1.0 if alternative != "two-sided" or p1 == p2 else 0.0
    z = (p1 - p2) / se
    if alternative == "greater":
        return float(stats.norm.sf(z))
    if alternative == "less":
        return float(stats.norm.cdf(z))
    if alternative == "two-sided":
        return float(2.0 * stats.norm.sf(abs(z)))
    raise ValueError(f"unknown alternative {alternative!r}")


def mean_diff_test(x: np.ndarray, y: np.ndarray, alternative: str = "less") -> float:
    """Welch t-test p-value for mean(x) vs mean(y)."""
    with warnings.catch_warnings():
        # nearly constant groups (e.g. saturated ratios) trigger a precision warning; the p-value is still valid
        warnings.simplefilter("ignore", RuntimeWarning)
        p = stats.ttest_ind(x, y, equal_var=False, alternative=alternative).pvalue
    return 1.0 if np.isnan(p) else float(p)


# -- monotone trend ---------------------------------------------------------------


@dataclass(frozen=True)
class TrendResult:
    fitted: tuple[float, ...]  # isotonic (non-decreasing) fit of the group means
    statistic: float  # between-group variance explained by the isotonic fit
    p_value: float  # permutation p-value against "no trend"
    worst_drop_p: float  # smallest one-sided p-value for a decrease between adjacent groups

    def monotone(self, alpha: float = 0.01) -> bool:
        """Significant increasing trend and no significant adjacent decrease."""
        return self.p_value < alpha and self.worst_drop_p >= alpha


def isotonic_trend_test(
    groups: Sequence[np.ndarray],
    rng: np.random.Generator,
    n_perm: int = 999,
) -> TrendResult:
    """Test for a non-decreasing trend in the means of ordered groups.

    The statistic is the weighted sum of squares of the isotonic fit around
    the grand mean (large when the means rise in order); its null
    distribution comes from permuting group labels.
    """
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(groups) < 2 or any(len(g) < 2 for g in groups):
        raise ValueError("need at least two groups of at least two observations")
    sizes = np.array([len(g) for g in groups])
    pooled = np.concatenate(groups)
    grand = pooled.mean()
    bounds = np.cumsum(sizes)[:-1]

    def stat(values: np.ndarray) -> tuple[float, np.ndarray]:
        means = np.array([p.mean() for p in np.split(values, bounds)])
        fit = isotonic_regression(means, weights=sizes, increasing=True).x
        return float(np.sum(sizes * (fit - grand) ** 2)), fit

    observed, fit = stat(pooled)
    null = np.array([stat(rng.permutation(pooled))[0] for _ in range(n_perm)])
    p = (1 + np.sum(null >= observed)) / (n_perm + 1)
    drops = []
    for a, b in zip(groups[:-1], groups[1:]):
        if np.ptp(a) == 0 and np.ptp(b) == 0:
            drops.append(0.0 if b[0] < a[0] else 1.0)
        else:
            drops.append(mean_diff_test(b, a, alternative="less"))
    return TrendResult(tuple(float(v) for v in fit), observed, float(p), float(min(drops)))
