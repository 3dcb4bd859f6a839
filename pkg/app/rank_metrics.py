"""
Kendall rank correlations with tie handling.
Pair counting is exact and O(n^2); benchmark sizes tolerate it.
"""

from dataclasses import dataclass
from math import sqrt
from typing import Sequence

import numpy as np

from app.exceptions import DegenerateInputError


@dataclass(frozen=True)
class PairCounts:
    """Classification of all n(n-1)/2 pairs of (x, y) observations"""

    concordant: int
    discordant: int
    ties_x_only: int
    ties_y_only: int
    ties_both: int
    n: int

    @property
    def total(self) -> int:
        return self.concordant + self.discordant + self.ties_x_only + self.ties_y_only + self.ties_both


def _as_vectors(x: Sequence[float], y: Sequence[float]):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"x and y must be 1-d and the same length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise DegenerateInputError(f"need at least 2 observations, got {x.size}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("x and y must be finite")
    return x, y


def pair_counts(x: Sequence[float], y: Sequence[float]) -> PairCounts:
    """Count concordant, discordant and tied pairs.

    Args:
        x (Sequence[float]): first ranking variable
        y (Sequence[float]): second ranking variable, same length

    Returns:
        PairCounts: pair classification
    """
    x, y = _as_vectors(x, y)
    n = x.size
    concordant = discordant = ties_x = ties_y = ties_both = 0
    for i in range(n - 1):
        dx = np.sign(x[i + 1:] - x[i])
        dy = np.sign(y[i + 1:] - y[i])
        product = dx * dy
        concordant += int(np.count_nonzero(product > 0))
        discordant += int(np.count_nonzero(product < 0))
        x_tied = dx == 0
        y_tied = dy == 0
        ties_both += int(np.count_nonzero(x_tied & y_tied))
        ties_x += int(np.count_nonzero(x_tied & ~y_tied))
        ties_y += int(np.count_nonzero(~x_tied & y_tied))
    return PairCounts(concordant, discordant, ties_x, ties_y, ties_both, n)


def kendall_tau_b(x: Sequence[float], y: Sequence[float]) -> float:
    """
    tau_b = (C - D) / sqrt((C + D + Tx) * (C + D + Ty)).

    Raises:
        DegenerateInputError: x or y is all ties
    """
    counts = pair_counts(x, y)
    c, d = counts.concordant, counts.discordant
    denominator = (c + d + counts.ties_x_only) * (c + d + counts.ties_y_only)
    if denominator == 0:
        raise DegenerateInputError("tau_b undefined: x or y has every value tied")
    return (c - d) / sqrt(denominator)


def kendall_tau_c(x: Sequence[float], y: Sequence[float]) -> float:
    """
    tau_c = 2m(C - D) / (n^2 (m - 1)), m = min(distinct levels of x, distinct levels of y).

    Raises:
        DegenerateInputError: m < 2
    """
    x_arr, y_arr = _as_vectors(x, y)
    m = min(np.unique(x_arr).size, np.unique(y_arr).size)
    if m < 2:
        raise DegenerateInputError("tau_c undefined: x or y has a single distinct level")
    counts = pair_counts(x_arr, y_arr)
    n = counts.n
    return 2 * m * (counts.concordant - counts.discordant) / (n * n * (m - 1))
