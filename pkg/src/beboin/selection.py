"""End-of-stage dose selection: isotonic MTD fit and utility-based OBD pick.

Stage I closes with a weighted isotonic regression of the completed DLT rates
(weights = patient counts) and the MTD is the tried, non-eliminated dose whose
fitted rate is closest to the target.  Stage II compares the MTD and the dose
below it on a Dirichlet-smoothed mean utility over the four (toxicity,
response) outcome categories.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class IsotonicFit:
    """Weighted least-squares isotonic fit over the tried doses (in order)."""

    doses: tuple[int, ...]
    raw_rates: tuple[float, ...]
    fitted: tuple[float, ...]
    weights: tuple[float, ...]


@dataclass(frozen=True)
class UtilityPosterior:
    """Posterior mean utility of one dose.

    counts order: (no DLT & response, DLT & response, no DLT & no response,
    DLT & no response), matching the score vector.
    """

    dose: int
    counts: tuple[int, int, int, int]
    probs: tuple[float, float, float, float]
    utility: float


def pava(values: list[float], weights: list[float]) -> list[float]:
    """Pool-adjacent-violators: non-decreasing weighted least-squares fit."""
    if len(values) != len(weights):
        raise ValueError("values and weights must have equal length")
    # each block: [mean, weight, count]
    blocks: list[list[float]] = []
    for v, w in zip(values, weights):
        blocks.append([v, w, 1])
        while len(blocks) > 1 and blocks[-2][0] >= blocks[-1][0] - 1e-15:
            m2, w2, c2 = blocks.pop()
            m1, w1, c1 = blocks.pop()
            w = w1 + w2
            blocks.append([(m1 * w1 + m2 * w2) / w, w, c1 + c2])
    out: list[float] = []
    for mean, _, count in blocks:
        out.extend([mean] * count)
    return out


def isotonic_fit(dlt_counts: list[int], n_counts: list[int]) -> IsotonicFit:
    """Isotonic DLT-rate fit over the doses that treated at least one patient.

    dlt_counts / n_counts are indexed by dose (length = number of dose levels);
    untried doses (n = 0) are excluded from the fit.
    """
    if len(dlt_counts) != len(n_counts):
        raise ValueError("dlt_counts and n_counts must have equal length")
    doses = [d + 1 for d, n in enumerate(n_counts) if n > 0]
    rates = [dlt_counts[d - 1] / n_counts[d - 1] for d in doses]
    weights = [float(n_counts[d - 1]) for d in doses]
    fitted = pava(rates, weights) if doses else []
    return IsotonicFit(
        doses=tuple(doses),
        raw_rates=tuple(rates),
        fitted=tuple(fitted),
        weights=tuple(weights),
    )


def select_mtd(fit: IsotonicFit, phi: float, eliminated: set[int]) -> int | None:
    """MTD = tried, non-eliminated dose with fitted rate closest to phi.

    Ties on |fitted - phi| go to the highest tied dose when its fitted rate is
    below phi, otherwise to the lowest tied dose.  Returns None when no tried
    dose survives elimination.
    """
    candidates = [
        (dose, fit.fitted[i])
        for i, dose in enumerate(fit.doses)
        if dose not in eliminated
    ]
    if not candidates:
        return None
    best = min(abs(f - phi) for _, f in candidates)
    tied = [(dose, f) for dose, f in candidates if abs(abs(f - phi) - best) <= 1e-12]
    below = [dose for dose, f in tied if f < phi]
    if below:
        return max(below)
    return min(dose for dose, _ in tied)


def utility_posterior(
    dose: int,
    counts: tuple[int, int, int, int],
    scores: tuple[float, float, float, float] = (100.0, 60.0, 40.0, 0.0),
    prior_weight: float = 0.25,
) -> UtilityPosterior:
    """Dirichlet posterior mean utility for one dose.

    Category probabilities get a symmetric Dirichlet(prior_weight) prior, so
    the posterior mean utility is the exact closed form

        sum_k scores[k] * (prior_weight + counts[k]) / (4*prior_weight + n).

    With no data this is the prior mean (50 for the default scores).
    """
    if len(counts) != 4 or len(scores) != 4:
        raise ValueError("counts and scores must have four categories")
    if any(c < 0 for c in counts):
        raise ValueError(f"counts must be non-negative, got {counts}")
    total = 4 * prior_weight + sum(counts)
    probs = tuple((prior_weight + c) / total for c in counts)
    utility = sum(s * p for s, p in zip(scores, probs))
    return UtilityPosterior(dose=dose, counts=tuple(counts), probs=probs, utility=utility)


def select_obd(
    high: UtilityPosterior,
    low: UtilityPosterior | None,
) -> int:
    """OBD = utility argmax over the stage-II arms; ties go to the lower dose.

    low is None when the MTD is the lowest dose (single-arm stage II), in
    which case the MTD is the OBD.
    """
    if low is None:
        return high.dose
    if high.utility > low.utility + 1e-12:
        return high.dose
    return min(low.dose, high.dose)
