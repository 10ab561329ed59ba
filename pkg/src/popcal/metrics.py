"""Evaluation metrics: token-probability confidence, confidence/accuracy
alignment, rank correlation, co-occurrence mutual information, consistency
scoring, and popularity-binned performance curves.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

POPULARITY_SIGNALS = ("Pop_Q", "Pop_GT", "RPop_GT", "Pop_Ge", "RPop_Ge")
OUTCOMES = ("accuracy", "confidence", "alignment")


def mean_token_confidence(token_probs: Sequence[float]) -> float:
    """Arithmetic mean of the generated tokens' probabilities."""
    if len(token_probs) == 0:
        raise ValueError("token_probs must be non-empty")
    probs = np.asarray(token_probs, dtype=float)
    if np.any(probs < 0.0) or np.any(probs > 1.0):
        raise ValueError("token probabilities must lie in [0, 1]")
    return float(probs.mean())


def alignment(correct: int, confidence: float) -> float:
    """1 - |correct - confidence|: how well confidence tracks correctness."""
    if correct not in (0, 1):
        raise ValueError(f"correct must be 0 or 1, got {correct!r}")
    if not 0.0 <= confidence <= 1.0:
        raise ValueError(f"confidence must lie in [0, 1], got {confidence!r}")
    return 1.0 - abs(correct - confidence)


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties assigned the mean of their covered positions."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=float)
    sorted_v = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        # positions i..j (0-based) share the mean rank
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks."""
    if len(xs) != len(ys):
        raise ValueError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise ValueError("need at least 2 observations")
    rx = average_ranks(xs)
    ry = average_ranks(ys)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    denom = math.sqrt(float(np.dot(dx, dx)) * float(np.dot(dy, dy)))
    if denom == 0.0:
        raise ValueError("correlation undefined for constant input")
    rho = float(np.dot(dx, dy)) / denom
    # guard float excursions just outside [-1, 1]
    return max(-1.0, min(1.0, rho))


def nmi(pairs: Sequence[tuple[float, float, float]]) -> float:
    """Mutual information between paired entity occurrences, normalized by
    the geometric mean of the marginal entropies.

    Each element of ``pairs`` is (P(s_i), P(o_i), P(s_i, o_i)) as produced by
    an occurrence index; joints across different pairs are taken to be zero,
    so only the diagonal terms contribute. Zero-probability terms contribute
    nothing (0 * log 0 := 0).
    """
    if not pairs:
        raise ValueError("pairs must be non-empty")
    info = 0.0
    h_x = 0.0
    h_y = 0.0
    any_joint = False
    for p_s, p_o, p_so in pairs:
        for name, p in (("P(s)", p_s), ("P(o)", p_o), ("P(s,o)", p_so)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p!r}")
        if p_so > 0.0:
            any_joint = True
            if p_s <= 0.0 or p_o <= 0.0:
                raise ValueError("joint probability positive but a marginal is zero")
            info += p_so * math.log(p_so / (p_s * p_o))
        if p_s > 0.0:
            h_x -= p_s * math.log(p_s)
        if p_o > 0.0:
            h_y -= p_o * math.log(p_o)
    if not any_joint:
        raise ValueError("at least one joint probability must be nonzero")
    if h_x <= 0.0 or h_y <= 0.0:
        raise ValueError("degenerate entropy: a marginal distribution carries no information")
    return info / math.sqrt(h_x * h_y)


def consistency_score(
    greedy: str,
    samples: Sequence[str],
    judge: Callable[[str, str], int],
) -> float:
    """Fraction of sampled answers the judge deems equivalent to the greedy one."""
    if not samples:
        raise ValueError("samples must be non-empty")
    agree = sum(1 for s in samples if judge(greedy, s))
    return agree / len(samples)


@dataclass(frozen=True)
class PopularityBin:
    lo: float
    hi: float
    count: int
    mean_accuracy: float
    mean_confidence: float
    mean_alignment: float


@dataclass(frozen=True)
class BinnedCurve:
    signal: str
    bins: tuple[PopularityBin, ...]

    @property
    def n_bins(self) -> int:
        return len(self.bins)

    def rows(self) -> list[dict]:
        return [
            {
                "signal": self.signal,
                "bin": i,
                "pop_lo": b.lo,
                "pop_hi": b.hi,
                "count": b.count,
                "mean_accuracy": b.mean_accuracy,
                "mean_confidence": b.mean_confidence,
                "mean_alignment": b.mean_alignment,
            }
            for i, b in enumerate(self.bins)
        ]


def bin_by_popularity(
    populations: Sequence[float],
    accuracies: Sequence[int],
    confidences: Sequence[float],
    n_bins: int = 10,
    signal: str = "popularity",
) -> BinnedCurve:
    """Quantile-bin records by a popularity signal and average the per-sample
    metrics inside each bin.

    Bin edges are taken at equal-count quantile positions of the sorted
    values; repeated values can collapse edges, in which case fewer bins come
    back (a single bin when every value ties, with a warning).
    """
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    n = len(populations)
    if n != len(accuracies) or n != len(confidences):
        raise ValueError("populations, accuracies, confidences must be aligned")
    if n < n_bins:
        raise ValueError(f"need at least n_bins={n_bins} records, got {n}")
    pops = np.asarray(populations, dtype=float)
    accs = np.asarray(accuracies, dtype=float)
    confs = np.asarray(confidences, dtype=float)
    aligns = 1.0 - np.abs(accs - confs)

    sorted_pops = np.sort(pops)
    edges = []
    for i in range(1, n_bins):
        edge = sorted_pops[int(round(i * n / n_bins)) - 1]
        if not edges or edge > edges[-1]:
            edges.append(float(edge))
    # drop edges that would leave the last bin empty
    while edges and edges[-1] >= sorted_pops[-1]:
        edges.pop()
    if len(edges) + 1 < n_bins:
        logger.warning(
            "tied %s values collapsed %d requested bins to %d",
            signal, n_bins, len(edges) + 1,
        )

    bounds = [-math.inf] + edges + [math.inf]
    bins = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        mask = (pops > lo) & (pops <= hi)
        count = int(mask.sum())
        if count == 0:
            continue
        bins.append(
            PopularityBin(
                lo=float(pops[mask].min()),
                hi=float(pops[mask].max()),
                count=count,
                mean_accuracy=float(accs[mask].mean()),
                mean_confidence=float(confs[mask].mean()),
                mean_alignment=float(aligns[mask].mean()),
            )
        )
    return BinnedCurve(signal=signal, bins=tuple(bins))


@dataclass
class CorrelationReport:
    """Spearman correlations of each popularity signal against accuracy,
    confidence, and alignment, plus dataset-level means (in percent)."""

    mean_accuracy: float
    mean_confidence: float
    mean_alignment: float
    rho: dict[str, dict[str, float | None]] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for signal in POPULARITY_SIGNALS:
            cells = self.rho.get(signal, {})
            out.append(
                {
                    "signal": signal,
                    "rho_accuracy": cells.get("accuracy"),
                    "rho_confidence": cells.get("confidence"),
                    "rho_alignment": cells.get("alignment"),
                }
            )
        return out


def correlation_report(
    accuracies: Sequence[int],
    confidences: Sequence[float],
    popularity: Mapping[str, Sequence[float] | None],
) -> CorrelationReport:
    """Build the per-signal correlation matrix with dataset-level means.

    ``popularity`` maps signal name -> per-record values; a missing or None
    signal leaves its cells absent rather than failing the report.
    """
    n = len(accuracies)
    if n < 2:
        raise ValueError("need at least 2 records")
    if len(confidences) != n:
        raise ValueError("accuracies and confidences must be aligned")
    accs = np.asarray(accuracies, dtype=float)
    confs = np.asarray(confidences, dtype=float)
    aligns = 1.0 - np.abs(accs - confs)
    outcomes = {"accuracy": accs, "confidence": confs, "alignment": aligns}

    report = CorrelationReport(
        mean_accuracy=float(accs.mean()) * 100.0,
        mean_confidence=float(confs.mean()) * 100.0,
        mean_alignment=float(aligns.mean()) * 100.0,
    )
    for signal in POPULARITY_SIGNALS:
        values = popularity.get(signal)
        cells: dict[str, float | None] = {}
        for outcome, ys in outcomes.items():
            if values is None or len(values) != n:
                cells[outcome] = None
                continue
            try:
                cells[outcome] = spearman(values, ys)
            except ValueError:
                logger.warning("correlation undefined for %s vs %s", signal, outcome)
                cells[outcome] = None
        report.rho[signal] = cells
    return report
