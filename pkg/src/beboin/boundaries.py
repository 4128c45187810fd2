"""Interval boundaries and the overly-toxic dose elimination rule.

The escalation/de-escalation boundaries are the optimal interval bounds for a
target DLT rate phi with indifference limits phi1 < phi < phi2: they minimize
the probability of incorrect decisions under the three-point hypothesis set.
Elimination is a beta-binomial posterior check with a Beta(1, 1) default prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class Boundaries:
    phi: float
    phi1: float
    phi2: float
    lambda_e: float
    lambda_d: float


def boin_boundaries(phi: float, phi1: float | None = None, phi2: float | None = None) -> Boundaries:
    """Escalation and de-escalation boundaries for a target DLT rate.

    lambda_e = log((1-phi1)/(1-phi)) / log(phi*(1-phi1) / (phi1*(1-phi)))
    lambda_d = log((1-phi)/(1-phi2)) / log(phi2*(1-phi) / (phi*(1-phi2)))

    For phi=0.25 (phi1=0.15, phi2=0.35): lambda_e=0.19680, lambda_d=0.29839.
    """
    if not 0.0 < phi < 1.0:
        raise ValueError(f"phi must be in (0, 1), got {phi}")
    if phi1 is None:
        phi1 = 0.6 * phi
    if phi2 is None:
        phi2 = 1.4 * phi
    if not 0.0 < phi1 < phi < phi2 < 1.0:
        raise ValueError(f"need 0 < phi1 < phi < phi2 < 1, got {phi1}, {phi}, {phi2}")
    lambda_e = math.log((1 - phi1) / (1 - phi)) / math.log(
        phi * (1 - phi1) / (phi1 * (1 - phi))
    )
    lambda_d = math.log((1 - phi) / (1 - phi2)) / math.log(
        phi2 * (1 - phi) / (phi * (1 - phi2))
    )
    return Boundaries(phi=phi, phi1=phi1, phi2=phi2, lambda_e=lambda_e, lambda_d=lambda_d)


def elimination_posterior(
    dlt: int,
    n: int,
    phi: float,
    prior: tuple[float, float] = (1.0, 1.0),
) -> float:
    """Pr(p > phi | dlt DLTs in n patients) under a Beta prior.

    The posterior is Beta(prior[0] + dlt, prior[1] + n - dlt).  With integer
    posterior parameters (the default prior) the survival function reduces to
    a binomial tail, I_phi(a, b) = Pr(Bin(a+b-1, phi) >= a), evaluated exactly
    without special-function libraries; non-integer priors fall back to the
    regularized incomplete beta.
    """
    if not 0 <= dlt <= n:
        raise ValueError(f"need 0 <= dlt <= n, got dlt={dlt}, n={n}")
    a = prior[0] + dlt
    b = prior[1] + (n - dlt)
    if a == int(a) and b == int(b):
        return _binomial_upper_tail(int(a), int(b), phi)
    from scipy.special import betainc  # pragma: no cover - non-default priors

    return float(1.0 - betainc(a, b, phi))


def _binomial_upper_tail(a: int, b: int, x: float) -> float:
    """1 - I_x(a, b) = Pr(Bin(a+b-1, x) <= a-1) for integer a, b >= 1."""
    m = a + b - 1
    q = 1.0 - x
    # term k of the binomial pmf, accumulated for k = 0..a-1
    term = q**m
    total = term
    for k in range(1, a):
        term *= (m - k + 1) / k * (x / q)
        total += term
    return min(max(total, 0.0), 1.0)


def eliminate_dose(
    dlt: int,
    n: int,
    phi: float,
    cutoff: float = 0.95,
    min_n: int = 3,
    prior: tuple[float, float] = (1.0, 1.0),
) -> bool:
    """True when the dose is unacceptably toxic and must be removed.

    n is the total number of patients treated at the dose (patients whose DLT
    window is still open count in the denominator with no DLT).  The rule only
    activates once min_n patients have been treated; removing a dose also
    removes every higher dose (enforced by the caller, which owns the dose
    ladder).

    eliminate_dose(3, 3, 0.25) -> True    (posterior 0.9961)
    eliminate_dose(3, 6, 0.25) -> False   (posterior 0.9294)
    eliminate_dose(4, 6, 0.25) -> True    (posterior 0.9871)
    """
    if n < min_n:
        return False
    return elimination_posterior(dlt, n, phi, prior) > cutoff
