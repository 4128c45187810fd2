"""Time-to-event DLT rate estimation with pending patients.

The imputed rate replaces each pending patient's unknown outcome with its
conditional expectation given the follow-up accrued so far, using the
approximation that the expected residual DLT mass is proportional to the
unobserved fraction of the assessment window.  All estimators are exact
closed forms; nothing here samples.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import DoseSummary


@dataclass(frozen=True)
class PendingFraction:
    """Expected probability that a pending patient will still have a DLT.

    exact conditions on no DLT by follow-up t; approximate drops that
    conditioning from the denominator and is what the imputation uses.
    """

    exact: float
    approximate: float


@dataclass(frozen=True)
class ToxEstimate:
    dose: int
    n: int
    dlt_observed: int
    pending: int
    posterior_mean: float
    imputed_rate: float


def expected_pending_fraction(follow_up: float, tau: float, p: float) -> PendingFraction:
    """Remaining DLT probability for a patient followed t of tau months.

    Under a uniform conditional time-to-DLT model, a patient DLT-free at t has
    residual DLT probability (1 - t/tau') * p where tau' = tau scaled by the
    event probability; exactly:

        exact = (1 - t/tau) p / ((1 - t/tau) p + (1 - p))

    and dropping the conditioning denominator gives the working approximation

        approximate = (1 - t/tau) p / (1 - p).
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if not 0.0 <= p < 1.0:
        raise ValueError(f"p must be in [0, 1), got {p}")
    remaining = max(0.0, 1.0 - follow_up / tau)
    exact = remaining * p / (remaining * p + (1.0 - p))
    approximate = remaining * p / (1.0 - p)
    return PendingFraction(exact=exact, approximate=approximate)


def posterior_mean_tox(dlt: int, n: int, pending: int, phi: float) -> float:
    """Posterior mean DLT rate from resolved patients only.

    Prior Beta(0.5*phi, 1 - 0.5*phi) (unit prior mass centred below phi);
    pending patients drop out of the posterior entirely:

        (0.5*phi + dlt) / (1 + n - pending)

    posterior_mean_tox(1, 6, 1, 0.25) -> 0.1875
    posterior_mean_tox(0, 0, 0, 0.25) -> 0.125
    """
    if not 0 <= pending <= n or dlt < 0 or dlt > n - pending:
        raise ValueError(f"inconsistent counts dlt={dlt}, n={n}, pending={pending}")
    return (0.5 * phi + dlt) / (1 + n - pending)


def imputed_dlt_rate(summary: DoseSummary, phi: float) -> ToxEstimate:
    """Dose-level DLT rate with pending outcomes imputed.

    Each pending patient contributes the odds-scaled unobserved window mass:

        p_hat = (dlt + r * (pending - tf)) / n,   r = ptilde / (1 - ptilde)

    where tf is the summed follow-up fraction of pending patients.  With no
    pending patients this is the observed fraction dlt / n.
    """
    if summary.n == 0:
        ptilde = posterior_mean_tox(0, 0, 0, phi)
        return ToxEstimate(
            dose=summary.dose, n=0, dlt_observed=0, pending=0,
            posterior_mean=ptilde, imputed_rate=0.0,
        )
    ptilde = posterior_mean_tox(summary.dlt_observed, summary.n, summary.pending, phi)
    odds = ptilde / (1.0 - ptilde)
    p_hat = (summary.dlt_observed + odds * (summary.pending - summary.tf)) / summary.n
    return ToxEstimate(
        dose=summary.dose,
        n=summary.n,
        dlt_observed=summary.dlt_observed,
        pending=summary.pending,
        posterior_mean=ptilde,
        imputed_rate=p_hat,
    )


def pooled_rate(summaries: list[DoseSummary], phi: float) -> float:
    """Imputed DLT rate pooling several doses.

    Numerators add per-dose (observed DLTs plus each dose's own odds-scaled
    pending mass, using that dose's posterior mean); denominator is the total
    patient count.  Doses with no patients contribute nothing.
    """
    num = 0.0
    den = 0
    for s in summaries:
        if s.n == 0:
            continue
        ptilde = posterior_mean_tox(s.dlt_observed, s.n, s.pending, phi)
        odds = ptilde / (1.0 - ptilde)
        num += s.dlt_observed + odds * (s.pending - s.tf)
        den += s.n
    if den == 0:
        return 0.0
    return num / den


def escalation_tf_threshold(
    n: int, dlt: int, pending: int, phi: float, lambda_e: float
) -> float:
    """Smallest summed follow-up fraction tf at which escalation opens.

    Solves p_hat(tf) = lambda_e for tf:

        tf* = pending - (n*lambda_e - dlt) * (1 - ptilde) / ptilde

    tf* <= 0 means any follow-up suffices; tf* >= pending means escalation is
    unreachable for this (n, dlt, pending) cell.

    escalation_tf_threshold(6, 1, 1, 0.25, 0.19680) -> 0.2165
    escalation_tf_threshold(9, 1, 4, 0.25, 0.19680) -> 0.6581
    """
    ptilde = posterior_mean_tox(dlt, n, pending, phi)
    return pending - (n * lambda_e - dlt) * (1.0 - ptilde) / ptilde
