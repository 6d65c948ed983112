"""
Friedman omnibus test and Dunn-Bonferroni pairwise post-hoc comparisons.

Blocks are rows (images), treatments are columns (observer pairs).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy import special
from scipy.stats import rankdata

__all__ = [
    "BlockMatrix",
    "FriedmanResult",
    "DunnPair",
    "chi2_sf",
    "normal_sf",
    "within_block_ranks",
    "friedman",
    "dunn_bonferroni",
    "rank_treatments",
]


@dataclass(frozen=True)
class BlockMatrix:
    values: np.ndarray  # (n blocks, k treatments)
    labels: Tuple[str, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("values must be a 2-D block x treatment array")
        n, k = v.shape
        if n < 2 or k < 2:
            raise ValueError(f"need at least 2 blocks and 2 treatments, got {n}x{k}")
        if not np.isfinite(v).all():
            raise ValueError("missing or non-finite cells")
        labels = tuple(self.labels) if self.labels else tuple(f"t{j}" for j in range(k))
        if len(labels) != k:
            raise ValueError("one label per treatment column required")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FriedmanResult:
    statistic: float
    p_value: float
    mean_ranks: np.ndarray


@dataclass(frozen=True)
class DunnPair:
    a: str
    b: str
    z: float
    p_value: float
    p_adjusted: float
    significant: bool


def chi2_sf(x: float, dof: int) -> float:
    """Upper tail of the chi-square distribution (regularised upper gamma)."""
    if dof < 1 or int(dof) != dof:
        raise ValueError("dof must be a positive integer")
    if x <= 0:
        return 1.0
    return float(special.gammaincc(dof / 2.0, x / 2.0))


def normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def within_block_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..k inside each row, ties sharing their mean rank."""
    return rankdata(values, method="average", axis=1)


def friedman(matrix: BlockMatrix) -> FriedmanResult:
    """Tie-corrected Friedman chi-square with ``k - 1`` degrees of freedom."""
    n, k = matrix.n, matrix.k
    ranks = within_block_ranks(matrix.values)
    rank_sums = ranks.sum(axis=0)
    chi2 = 12.0 / (n * k * (k + 1)) * float(np.sum(rank_sums**2)) - 3.0 * n * (k + 1)
    ties = 0.0
    for row in matrix.values:
        _, t = np.unique(row, return_counts=True)
        ties += float(np.sum(t**3 - t))
    correction = 1.0 - ties / (n * (k**3 - k))
    if correction <= 0:
        # every block fully tied: no evidence of any difference
        return FriedmanResult(0.0, 1.0, rank_sums / n)
    stat = max(chi2 / correction, 0.0)
    return FriedmanResult(stat, chi2_sf(stat, k - 1), rank_sums / n)


def dunn_bonferroni(matrix: BlockMatrix, alpha: float = 0.05) -> List[DunnPair]:
    """All pairwise mean-rank comparisons, Bonferroni-adjusted."""
    n, k = matrix.n, matrix.k
    mean_ranks = within_block_ranks(matrix.values).mean(axis=0)
    se = math.sqrt(k * (k + 1) / (6.0 * n))
    m = k * (k - 1) // 2
    out = []
    for i, j in itertools.combinations(range(k), 2):
        z = (mean_ranks[i] - mean_ranks[j]) / se
        p = min(1.0, 2.0 * normal_sf(abs(z)))
        out.append(
            DunnPair(
                a=matrix.labels[i],
                b=matrix.labels[j],
                z=float(z),
                p_value=p,
                p_adjusted=min(1.0, p * m),
                significant=min(1.0, p * m) < alpha,
            )
        )
    return out


def rank_treatments(matrix: BlockMatrix) -> List[Tuple[str, float]]:
    """Treatments ordered by ascending column mean (stable for ties)."""
    means = matrix.values.mean(axis=0)
    order = np.argsort(means, kind="stable")
    return [(matrix.labels[j], float(means[j])) for j in order]
