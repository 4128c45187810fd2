"""Decision engine: dose-transition verdicts, conflicts, backfill, and events.

The engine is pure with respect to trial state: every operation takes a
``TrialState`` plus a clock time and computes from the observation views in
``core``.  State changes happen only through events; ``advance`` validates and
applies an event to a copy, ``apply_event`` mutates in place for the single
owner (the simulator's inner loop, or the service's per-trial lock holder).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .boundaries import Boundaries, boin_boundaries, elimination_posterior, eliminate_dose
from .core import (
    TIME_EPS,
    DesignConfig,
    DoseSummary,
    Origin,
    PatientRecord,
    Phase,
    ResponseStatus,
    ToxStatus,
    TrialState,
    dlt_windows_complete_time,
    observed_response,
    summarize_all,
)
from .estimator import imputed_dlt_rate, pooled_rate
from .selection import isotonic_fit, select_mtd, select_obd, utility_posterior


class StateError(ValueError):
    """An event is inconsistent with the current trial state."""


class Verdict(str, enum.Enum):
    ESCALATE = "escalate"
    STAY = "stay"
    DE_ESCALATE = "de_escalate"
    ELIMINATE = "eliminate"
    SUSPEND = "suspend"
    TERMINATE = "terminate"


class DecisionClass(str, enum.Enum):
    """What a dose's own data says, before dose-ladder mapping."""

    ESCALATE_CLASS = "escalate_class"
    STAY_CLASS = "stay_class"
    DE_ESCALATE_CLASS = "de_escalate_class"
    ELIMINATE_CLASS = "eliminate_class"


# conservatism rank; de-escalate and eliminate share the top row of the
# conflict matrix ("De-escalate or Eliminate").
_RANK = {
    DecisionClass.ESCALATE_CLASS: 0,
    DecisionClass.STAY_CLASS: 1,
    DecisionClass.DE_ESCALATE_CLASS: 2,
    DecisionClass.ELIMINATE_CLASS: 2,
}

SUSPEND_RULE_1 = "rule_1_insufficient_observed"
SUSPEND_RULE_2 = "rule_2_insufficient_followup"


@dataclass(frozen=True)
class ConflictReport:
    """Outcome of comparing backfilled-dose classes against the current dose."""

    current_dose: int
    current_class: DecisionClass
    backfilled_classes: tuple[tuple[int, DecisionClass], ...]
    conflicting_doses: tuple[int, ...]
    b_star: int | None

    @property
    def conflict(self) -> bool:
        return self.b_star is not None


def conflict_to_dict(report: ConflictReport) -> dict:
    """JSON-ready view of a conflict report (enums flattened to strings)."""
    return {
        "current_dose": report.current_dose,
        "current_class": report.current_class.value,
        "backfilled_classes": [
            [dose, cls.value] for dose, cls in report.backfilled_classes
        ],
        "conflicting_doses": list(report.conflicting_doses),
        "b_star": report.b_star,
        "conflict": report.conflict,
    }


@dataclass(frozen=True)
class BackfillEligibility:
    dose: int
    eligible: bool
    safety_ok: bool
    efficacy_ok: bool
    cap_ok: bool
    eliminated: bool
    imputed_rate: float
    rescue_rate: float | None
    responses_at_or_below: int
    n: int


@dataclass(frozen=True)
class Routing:
    kind: str  # "dose_escalation" | "backfill" | "turned_away"
    dose: int | None
    reason: str
    eligibility: tuple[BackfillEligibility, ...] = ()


@dataclass
class Decision:
    verdict: Verdict
    target_dose: int | None
    current_dose: int
    at_time: float
    suspend_reason: str | None = None
    conflict: ConflictReport | None = None
    pooled_estimate: float | None = None
    trace: list[dict] = field(default_factory=list)


def design_boundaries(config: DesignConfig) -> Boundaries:
    return boin_boundaries(config.phi, config.phi1, config.phi2)


def decision_class(
    summary: DoseSummary, bounds: Boundaries, config: DesignConfig
) -> DecisionClass:
    """Classify one dose's data on the conflict-matrix axes.

    Elimination first (posterior check over the dose's total n), then the
    observed-fraction de-escalation test, then the imputed rate against the
    escalation boundary.
    """
    if summary.n == 0:
        raise StateError(f"dose {summary.dose} has no patients to classify")
    if eliminate_dose(
        summary.dlt_observed,
        summary.n,
        config.phi,
        config.elimination_cutoff,
        config.elimination_min_n,
        config.elimination_prior,
    ):
        return DecisionClass.ELIMINATE_CLASS
    if summary.dlt_observed / summary.n > bounds.lambda_d:
        return DecisionClass.DE_ESCALATE_CLASS
    p_hat = imputed_dlt_rate(summary, config.phi).imputed_rate
    if p_hat <= bounds.lambda_e:
        return DecisionClass.ESCALATE_CLASS
    return DecisionClass.STAY_CLASS


def detect_conflict(
    state: TrialState,
    at_time: float,
    observed_only: bool = False,
    summaries: list[DoseSummary] | None = None,
) -> ConflictReport:
    """Find backfilled doses below the current dose with a more conservative class.

    A conflict exists when a dose carrying at least one backfill patient ranks
    strictly more conservative than the current dose, or when both land in the
    de-escalate/eliminate row.  b* is the lowest conflicting dose.
    """
    if summaries is None:
        summaries = summarize_all(state, at_time, include_pending=not observed_only)
    bounds = design_boundaries(state.config)
    c = state.current_dose
    cls_c = decision_class(summaries[c - 1], bounds, state.config)
    backfilled: list[tuple[int, DecisionClass]] = []
    conflicting: list[int] = []
    for b in range(1, c):
        s = summaries[b - 1]
        if s.backfilled == 0 or s.n == 0:
            continue
        cls_b = decision_class(s, bounds, state.config)
        backfilled.append((b, cls_b))
        if _RANK[cls_b] > _RANK[cls_c] or (_RANK[cls_b] == 2 and _RANK[cls_c] == 2):
            conflicting.append(b)
    return ConflictReport(
        current_dose=c,
        current_class=cls_c,
        backfilled_classes=tuple(backfilled),
        conflicting_doses=tuple(conflicting),
        b_star=min(conflicting) if conflicting else None,
    )


def resolve_conflict(
    state: TrialState,
    b_star: int,
    at_time: float,
    observed_only: bool = False,
    summaries: list[DoseSummary] | None = None,
) -> Decision:
    """Re-decide from the pooled estimate over doses b*..c.

    q_hat <= lambda_e escalates, q_hat <= lambda_d stays, and above lambda_d
    the trial de-escalates to the highest dose k in [b*, c) whose pooled
    estimate over b*..k is acceptable (b* - 1 when none is).  The returned
    decision is raw: ladder mapping and the follow-up gate on escalation are
    applied by de_decision.
    """
    if summaries is None:
        summaries = summarize_all(state, at_time, include_pending=not observed_only)
    cfg = state.config
    bounds = design_boundaries(cfg)
    c = state.current_dose
    if not 1 <= b_star < c:
        raise StateError(f"b_star must lie below the current dose, got {b_star} vs {c}")
    pooled = pooled_rate(summaries[b_star - 1 : c], cfg.phi)
    trace = [
        {
            "step": "conflict_resolution",
            "b_star": b_star,
            "current_dose": c,
            "pooled_rate": pooled,
            "lambda_e": bounds.lambda_e,
            "lambda_d": bounds.lambda_d,
        }
    ]
    if pooled <= bounds.lambda_e:
        verdict, target = Verdict.ESCALATE, c + 1
    elif pooled <= bounds.lambda_d:
        verdict, target = Verdict.STAY, c
    else:
        target = b_star - 1
        for k in range(c - 1, b_star - 1, -1):
            q_k = pooled_rate(summaries[b_star - 1 : k], cfg.phi)
            trace.append(
                {
                    "step": "conflict_deescalation_search",
                    "k": k,
                    "pooled_rate": q_k,
                    "lambda_d": bounds.lambda_d,
                }
            )
            if q_k <= bounds.lambda_d:
                target = k
                break
        verdict = Verdict.DE_ESCALATE
    trace[0]["verdict"] = verdict.value
    return Decision(
        verdict=verdict,
        target_dose=target,
        current_dose=c,
        at_time=at_time,
        pooled_estimate=pooled,
        trace=trace,
    )


def de_decision(
    state: TrialState, at_time: float, observed_only: bool = False
) -> Decision:
    """Dose-transition verdict for the current dose at a decision point.

    Order: unilateral elimination at c; conflict detection and resolution
    (which bypasses the observed-fraction suspension but keeps the follow-up
    gate on escalation); the observed-fraction de-escalation test; suspension
    rule 1 (insufficient resolved patients); the imputed-rate escalation test
    gated by suspension rule 2 (insufficient pending follow-up); stay.
    Escalation at the top dose maps to stay; de-escalation below dose 1 maps
    to stay unless dose 1 is eliminated, which terminates the trial.
    """
    summaries = summarize_all(state, at_time, include_pending=not observed_only)
    return _de_decision(state, summaries, at_time)


def _de_decision(
    state: TrialState, summaries: list[DoseSummary], at_time: float
) -> Decision:
    cfg = state.config
    bounds = design_boundaries(cfg)
    c = state.current_dose
    s = summaries[c - 1]
    if s.n == 0:
        raise StateError(f"no patients at current dose {c}")
    trace: list[dict] = []

    # unilateral elimination at the current dose
    posterior = None
    if s.n >= cfg.elimination_min_n:
        posterior = elimination_posterior(
            s.dlt_observed, s.n, cfg.phi, cfg.elimination_prior
        )
    fired = posterior is not None and posterior > cfg.elimination_cutoff
    trace.append(
        {
            "step": "elimination_check",
            "dose": c,
            "dlt_observed": s.dlt_observed,
            "n": s.n,
            "posterior": posterior,
            "cutoff": cfg.elimination_cutoff,
            "fired": fired,
        }
    )
    if fired:
        if c == 1:
            trace.append({"step": "dose_ladder", "note": "dose 1 eliminated"})
            return Decision(
                verdict=Verdict.TERMINATE,
                target_dose=None,
                current_dose=c,
                at_time=at_time,
                trace=trace,
            )
        return Decision(
            verdict=Verdict.ELIMINATE,
            target_dose=c - 1,
            current_dose=c,
            at_time=at_time,
            trace=trace,
        )

    # backfill data conflicts
    report = detect_conflict(state, at_time, summaries=summaries)
    trace.append(
        {
            "step": "conflict_detection",
            "current_class": report.current_class.value,
            "backfilled_classes": [
                (b, cls.value) for b, cls in report.backfilled_classes
            ],
            "conflicting_doses": list(report.conflicting_doses),
            "b_star": report.b_star,
        }
    )
    if report.conflict:
        resolved = resolve_conflict(
            state, report.b_star, at_time, summaries=summaries
        )
        trace.extend(resolved.trace)
        resolved.trace = trace
        resolved.conflict = report
        return _finalize(state, resolved, s, bounds, trace)

    # observed DLT fraction (pending included in the denominator)
    observed_rate = s.dlt_observed / s.n
    fired = observed_rate > bounds.lambda_d
    trace.append(
        {
            "step": "observed_rate_check",
            "rate": observed_rate,
            "lambda_d": bounds.lambda_d,
            "fired": fired,
        }
    )
    if fired:
        return _finalize(
            state,
            Decision(
                verdict=Verdict.DE_ESCALATE,
                target_dose=c - 1,
                current_dose=c,
                at_time=at_time,
            ),
            s,
            bounds,
            trace,
        )

    # suspension rule 1: too few resolved patients to decide
    observed_fraction = s.observed_fraction
    fired = observed_fraction < cfg.suspension_min_observed_fraction
    trace.append(
        {
            "step": "suspension_rule_1",
            "observed_fraction": observed_fraction,
            "threshold": cfg.suspension_min_observed_fraction,
            "fired": fired,
        }
    )
    if fired:
        return Decision(
            verdict=Verdict.SUSPEND,
            target_dose=None,
            current_dose=c,
            at_time=at_time,
            suspend_reason=SUSPEND_RULE_1,
            trace=trace,
        )

    # imputed rate against the escalation boundary
    p_hat = imputed_dlt_rate(s, cfg.phi).imputed_rate
    escalates = p_hat <= bounds.lambda_e
    trace.append(
        {
            "step": "imputed_rate_check",
            "p_hat": p_hat,
            "lambda_e": bounds.lambda_e,
            "escalate": escalates,
        }
    )
    verdict = Verdict.ESCALATE if escalates else Verdict.STAY
    target = c + 1 if escalates else c
    return _finalize(
        state,
        Decision(verdict=verdict, target_dose=target, current_dose=c, at_time=at_time),
        s,
        bounds,
        trace,
    )


def _finalize(
    state: TrialState,
    decision: Decision,
    s: DoseSummary,
    bounds: Boundaries,
    trace: list[dict],
) -> Decision:
    """Dose-ladder mapping plus the follow-up gate on escalation."""
    cfg = state.config
    c = decision.current_dose
    decision.trace = trace
    if decision.verdict is Verdict.ESCALATE:
        above = c + 1
        if above > cfg.num_doses or above in state.eliminated:
            trace.append(
                {
                    "step": "dose_ladder",
                    "note": "escalation blocked at ladder top",
                    "verdict": "stay",
                }
            )
            decision.verdict = Verdict.STAY
            decision.target_dose = c
            return decision
        fired = s.pending > 0 and s.mf < cfg.suspension_min_followup_fraction
        trace.append(
            {
                "step": "suspension_rule_2",
                "mf": s.mf if s.pending else 1.0,
                "threshold": cfg.suspension_min_followup_fraction,
                "fired": fired,
            }
        )
        if fired:
            decision.verdict = Verdict.SUSPEND
            decision.target_dose = None
            decision.suspend_reason = SUSPEND_RULE_2
            return decision
        decision.target_dose = above
        return decision
    if decision.verdict is Verdict.DE_ESCALATE and (decision.target_dose or 0) < 1:
        if 1 in state.eliminated:
            trace.append({"step": "dose_ladder", "note": "dose 1 eliminated"})
            decision.verdict = Verdict.TERMINATE
            decision.target_dose = None
            return decision
        trace.append(
            {
                "step": "dose_ladder",
                "note": "de-escalation blocked at ladder bottom",
                "verdict": "stay",
            }
        )
        decision.verdict = Verdict.STAY
        decision.target_dose = 1
        return decision
    return decision


def backfill_eligibility(
    state: TrialState,
    at_time: float,
    observed_only: bool = False,
    summaries: list[DoseSummary] | None = None,
) -> list[BackfillEligibility]:
    """Eligibility of every dose below the current dose, re-checked per arrival.

    A dose b qualifies when all three hold: safety (its imputed rate is within
    the de-escalation boundary, or the pooled estimate with the next higher
    dose rescues it), efficacy (at least one observed response at or below b),
    and the cap (room for one more patient under backfill_cap).  Eliminated
    doses never qualify.
    """
    if summaries is None:
        summaries = summarize_all(state, at_time, include_pending=not observed_only)
    cfg = state.config
    bounds = design_boundaries(cfg)
    c = state.current_dose
    # the cap and tried checks count every enrolled patient, and efficacy
    # counts every response assessed by now, regardless of which toxicity
    # view (imputed or observed-only) feeds the safety estimates
    assess = cfg.efficacy_assess_months or cfg.dlt_window_months
    enrolled = [0] * cfg.num_doses
    assessed_responses = [0] * cfg.num_doses
    for rec in state.patients:
        enrolled[rec.dose - 1] += 1
        if observed_response(rec, at_time, assess) is ResponseStatus.RESPONSE:
            assessed_responses[rec.dose - 1] += 1
    out: list[BackfillEligibility] = []
    responses_below = 0
    for b in range(1, c):
        s = summaries[b - 1]
        responses_below += assessed_responses[b - 1]
        p_hat = imputed_dlt_rate(s, cfg.phi).imputed_rate if s.n else 0.0
        rescue = None
        safety = s.n > 0 and p_hat <= bounds.lambda_d
        if s.n > 0 and not safety and b + 1 <= cfg.num_doses:
            rescue = pooled_rate(summaries[b - 1 : b + 1], cfg.phi)
            safety = rescue <= bounds.lambda_d
        efficacy = responses_below >= 1
        cap = enrolled[b - 1] < cfg.backfill_cap
        is_eliminated = b in state.eliminated
        out.append(
            BackfillEligibility(
                dose=b,
                eligible=safety and efficacy and cap
                and not is_eliminated and enrolled[b - 1] > 0,
                safety_ok=safety,
                efficacy_ok=efficacy,
                cap_ok=cap,
                eliminated=is_eliminated,
                imputed_rate=p_hat,
                rescue_rate=rescue,
                responses_at_or_below=responses_below,
                n=enrolled[b - 1],
            )
        )
    return out


def allocate_backfill(
    eligibility: list[BackfillEligibility],
    strategy: str,
    rng=None,
) -> int | None:
    """Pick the backfill dose: the highest eligible, or uniformly at random."""
    doses = [e.dose for e in eligibility if e.eligible]
    if not doses:
        return None
    if strategy == "randomize_eligible":
        if rng is None:
            raise ValueError("randomize_eligible allocation needs an rng")
        return doses[int(rng.integers(len(doses)))]
    return max(doses)


def route_arrival(
    state: TrialState,
    at_time: float,
    rng=None,
    observed_only: bool = False,
    backfill_enabled: bool = True,
) -> Routing:
    """Assign an arriving patient: open DE slot first, then backfill.

    The DE slot is open while stage I is accruing (not suspended), the current
    cohort has room, and the stage-I DE total has not been reached.  Otherwise
    an eligible backfill dose takes the patient; with none, they are turned
    away.  Stage-II arms are assigned explicitly by the caller, never here.
    """
    cfg = state.config
    if state.phase not in (Phase.STAGE_ONE_ACCRUING, Phase.STAGE_ONE_SUSPENDED):
        return Routing(kind="turned_away", dose=None, reason="not_accruing_stage_one")
    if state.de_count >= cfg.n_stage1:
        return Routing(kind="turned_away", dose=None, reason="stage_one_tail")
    if state.phase is Phase.STAGE_ONE_ACCRUING and state.cohort_remaining > 0:
        return Routing(kind="dose_escalation", dose=state.current_dose, reason="de_slot_open")
    if not backfill_enabled:
        return Routing(kind="turned_away", dose=None, reason="backfill_disabled")
    eligibility = backfill_eligibility(state, at_time, observed_only)
    dose = allocate_backfill(eligibility, cfg.backfill_strategy, rng)
    if dose is None:
        return Routing(
            kind="turned_away",
            dose=None,
            reason="no_eligible_backfill",
            eligibility=tuple(eligibility),
        )
    return Routing(
        kind="backfill",
        dose=dose,
        reason=cfg.backfill_strategy,
        eligibility=tuple(eligibility),
    )


def decision_due(state: TrialState) -> bool:
    """True when stage I is waiting on a dose-transition verdict."""
    return (
        state.phase in (Phase.STAGE_ONE_ACCRUING, Phase.STAGE_ONE_SUSPENDED)
        and state.cohort_remaining == 0
    )


# --------------------------------------------------------------------------
# events


def decision_event(decision: Decision) -> dict:
    event = {
        "type": "decision",
        "time": decision.at_time,
        "verdict": decision.verdict.value,
        "target_dose": decision.target_dose,
    }
    if decision.suspend_reason:
        event["suspend_reason"] = decision.suspend_reason
    if decision.verdict in (Verdict.ELIMINATE, Verdict.TERMINATE):
        event["eliminate_from"] = decision.current_dose if decision.verdict is Verdict.ELIMINATE else 1
    if decision.pooled_estimate is not None:
        event["pooled_estimate"] = decision.pooled_estimate
    return event


def apply_event(state: TrialState, event: dict) -> None:
    """Append the event to the log and fold it into the state (owner-only).

    No validation happens here; ``advance`` is the validating wrapper.  Phase
    transitions that depend on the clock (stage-I close, stage-II close) are
    recomputed after every event so that replaying the log reproduces them at
    the same positions.
    """
    state.events.append(event)
    t = event["time"]
    if t > state.clock:
        state.clock = t
    kind = event["type"]
    if kind == "enrolled":
        origin = Origin(event["origin"])
        rec = PatientRecord(
            id=event["patient"],
            dose=event["dose"],
            origin=origin,
            enroll_time=t,
        )
        if "dlt" in event:  # fate known at enrollment (simulated trial)
            if event["dlt"]:
                rec.tox_status = ToxStatus.DLT
                rec.time_to_dlt = event["dlt_time"]
            else:
                rec.tox_status = ToxStatus.NO_DLT
            rec.response_status = (
                ResponseStatus.RESPONSE if event["response"] else ResponseStatus.NO_RESPONSE
            )
            rec.response_time = t + (
                state.config.efficacy_assess_months or state.config.dlt_window_months
            )
        state.patients.append(rec)
        if origin is Origin.DOSE_ESCALATION:
            state.de_count += 1
            if state.cohort_remaining > 0:
                state.cohort_remaining -= 1
    elif kind == "outcome":
        rec = state.find_patient(event["patient"])
        if "tox" in event:
            if event["tox"] == "dlt":
                rec.tox_status = ToxStatus.DLT
                rec.time_to_dlt = event["time_to_dlt"]
            else:
                rec.tox_status = ToxStatus.NO_DLT
        if "response" in event:
            rec.response_status = ResponseStatus(event["response"])
            rec.response_time = t
    elif kind == "decision":
        _apply_decision(state, event)
    elif kind == "turned_away":
        state.turned_away += 1
    # "clock" events only move time
    _recompute_phase(state)


def _apply_decision(state: TrialState, event: dict) -> None:
    verdict = event["verdict"]
    if verdict == "suspend":
        state.phase = Phase.STAGE_ONE_SUSPENDED
        state.suspension_reason = event.get("suspend_reason")
        return
    state.suspension_reason = None
    if verdict == "terminate":
        state.eliminated.update(range(1, state.config.num_doses + 1))
        state.phase = Phase.TERMINATED_ALL_DOSES_TOXIC
        return
    if verdict == "eliminate":
        start = event["eliminate_from"]
        state.eliminated.update(range(start, state.config.num_doses + 1))
    state.current_dose = event["target_dose"]
    if state.phase is Phase.STAGE_ONE_SUSPENDED:
        state.phase = Phase.STAGE_ONE_ACCRUING
    state.cohort_remaining = state.config.cohort_size


def _recompute_phase(state: TrialState) -> None:
    cfg = state.config
    if state.phase in (Phase.STAGE_ONE_ACCRUING, Phase.STAGE_ONE_SUSPENDED):
        if state.de_count < cfg.n_stage1:
            return
        if state.clock + TIME_EPS < dlt_windows_complete_time(state):
            return
        if any(p.tox_status is ToxStatus.PENDING for p in state.patients):
            return  # conducted trial awaiting posted outcomes
        _close_stage_one(state)
    elif state.phase is Phase.STAGE_TWO:
        _maybe_close_stage_two(state)


def stage_one_counts(state: TrialState) -> tuple[list[int], list[int]]:
    """Per-dose (DLT, treated) counts over stage-I patients (DE + backfill)."""
    cfg = state.config
    dlt = [0] * cfg.num_doses
    n = [0] * cfg.num_doses
    for p in state.patients:
        if p.origin is Origin.STAGE_TWO:
            continue
        n[p.dose - 1] += 1
        if p.tox_status is ToxStatus.DLT:
            dlt[p.dose - 1] += 1
    return dlt, n


def _close_stage_one(state: TrialState) -> None:
    cfg = state.config
    dlt, n = stage_one_counts(state)
    fit = isotonic_fit(dlt, n)
    mtd = select_mtd(fit, cfg.phi, state.eliminated)
    state.suspension_reason = None
    if mtd is None:
        state.phase = Phase.TERMINATED_ALL_DOSES_TOXIC
        return
    state.mtd = mtd
    state.phase = Phase.STAGE_TWO


def stage_two_arms(state: TrialState) -> tuple[int, int | None]:
    """(d_high, d_low) for stage II; d_low is None when the MTD is dose 1."""
    if state.mtd is None:
        raise StateError("stage-two arms are undefined before MTD selection")
    high = state.mtd
    low = high - 1 if high > 1 else None
    return high, low


def outcome_counts(state: TrialState, dose: int) -> tuple[int, int, int, int]:
    """(no DLT & resp, DLT & resp, no DLT & no resp, DLT & no resp) at a dose."""
    cfg = state.config
    counts = [0, 0, 0, 0]
    for p in state.patients:
        if p.dose != dose:
            continue
        if cfg.obd_counts_stage2_only and p.origin is not Origin.STAGE_TWO:
            continue
        tox = p.tox_status is ToxStatus.DLT
        resp = p.response_status is ResponseStatus.RESPONSE
        counts[(0 if resp else 2) + (1 if tox else 0)] += 1
    return tuple(counts)


def selection_report(state: TrialState) -> dict:
    """MTD/OBD selection view: isotonic fit, arm utilities, picks (JSON-ready).

    Uses the MTD/OBD the trial has already committed to when present;
    otherwise computes them fresh from the current data, so the report is
    advisory on an unfinished trial.
    """
    cfg = state.config
    dlt, n = stage_one_counts(state)
    fit = isotonic_fit(dlt, n)
    mtd = (
        state.mtd
        if state.mtd is not None
        else select_mtd(fit, cfg.phi, state.eliminated)
    )
    obd = state.obd
    utilities: list[dict] = []
    if mtd is not None:
        high, low = mtd, (mtd - 1 if mtd > 1 else None)
        high_post = utility_posterior(
            high, outcome_counts(state, high), cfg.utility_scores, cfg.obd_prior_weight
        )
        low_post = None
        if low is not None:
            low_post = utility_posterior(
                low, outcome_counts(state, low), cfg.utility_scores, cfg.obd_prior_weight
            )
        if obd is None:
            obd = select_obd(high_post, low_post)
        for post in [p for p in (low_post, high_post) if p is not None]:
            utilities.append(
                {
                    "dose": post.dose,
                    "counts": list(post.counts),
                    "probs": list(post.probs),
                    "utility": post.utility,
                }
            )
    return {
        "mtd": mtd,
        "obd": obd,
        "dlt": list(dlt),
        "n": list(n),
        "fit": {
            "doses": list(fit.doses),
            "raw_rates": list(fit.raw_rates),
            "fitted": list(fit.fitted),
            "weights": list(fit.weights),
        },
        "utilities": utilities,
    }


def _maybe_close_stage_two(state: TrialState) -> None:
    cfg = state.config
    high, low = stage_two_arms(state)
    need_high = cfg.stage2_per_arm
    need_low = cfg.stage2_per_arm if low is not None else 0
    n_high = sum(
        1 for p in state.patients if p.origin is Origin.STAGE_TWO and p.dose == high
    )
    n_low = sum(
        1 for p in state.patients if p.origin is Origin.STAGE_TWO and p.dose == low
    )
    if n_high < need_high or n_low < need_low:
        return
    stage2 = [p for p in state.patients if p.origin is Origin.STAGE_TWO]
    if any(
        p.tox_status is ToxStatus.PENDING or p.response_status is ResponseStatus.PENDING
        for p in stage2
    ):
        return
    horizon = max(cfg.dlt_window_months, cfg.efficacy_assess_months or 0.0)
    last_assessment = max((p.enroll_time + horizon for p in state.patients), default=0.0)
    if state.clock + TIME_EPS < last_assessment:
        return
    high_post = utility_posterior(
        high, outcome_counts(state, high), cfg.utility_scores, cfg.obd_prior_weight
    )
    low_post = (
        utility_posterior(
            low, outcome_counts(state, low), cfg.utility_scores, cfg.obd_prior_weight
        )
        if low is not None
        else None
    )
    state.obd = select_obd(high_post, low_post)
    state.phase = Phase.COMPLETED


# --------------------------------------------------------------------------
# validated, pure advancement (HTTP service and replay)


def advance(state: TrialState, event: dict) -> TrialState:
    """Validate the event against the state and return the advanced copy."""
    _validate_event(state, event)
    new_state = state.copy()
    apply_event(new_state, event)
    return new_state


def _validate_event(state: TrialState, event: dict) -> None:
    if "type" not in event or "time" not in event:
        raise StateError("event needs type and time")
    t = event["time"]
    if not isinstance(t, (int, float)):
        raise StateError("event time must be a number")
    if t + TIME_EPS < state.clock:
        raise StateError(
            f"event time {t} is before the trial clock {state.clock}"
        )
    kind = event["type"]
    if kind == "enrolled":
        _validate_enrollment(state, event)
    elif kind == "outcome":
        _validate_outcome(state, event)
    elif kind == "decision":
        if event.get("verdict") not in {v.value for v in Verdict}:
            raise StateError(f"unknown verdict {event.get('verdict')!r}")
    elif kind not in ("turned_away", "clock"):
        raise StateError(f"unknown event type {kind!r}")


def _validate_enrollment(state: TrialState, event: dict) -> None:
    cfg = state.config
    if state.phase in (Phase.COMPLETED, Phase.TERMINATED_ALL_DOSES_TOXIC):
        raise StateError(f"cannot enroll in phase {state.phase.value}")
    dose = event.get("dose")
    if not isinstance(dose, int) or not 1 <= dose <= cfg.num_doses:
        raise StateError(f"dose must be in 1..{cfg.num_doses}, got {dose}")
    if dose in state.eliminated:
        raise StateError(f"dose {dose} is eliminated")
    if state.find_patient(event.get("patient", "")) is not None:
        raise StateError(f"duplicate patient id {event['patient']!r}")
    origin = event.get("origin")
    if origin not in {o.value for o in Origin}:
        raise StateError(f"unknown origin {origin!r}")
    if origin == Origin.STAGE_TWO.value:
        if state.phase is not Phase.STAGE_TWO:
            raise StateError("stage-two enrollment outside stage II")
        high, low = stage_two_arms(state)
        if dose not in {high, low}:
            raise StateError(f"dose {dose} is not a stage-two arm")
        already = sum(
            1
            for p in state.patients
            if p.origin is Origin.STAGE_TWO and p.dose == dose
        )
        if already >= cfg.stage2_per_arm:
            raise StateError(f"stage-two arm at dose {dose} is full")
        return
    if state.phase not in (Phase.STAGE_ONE_ACCRUING, Phase.STAGE_ONE_SUSPENDED):
        raise StateError(f"stage-one enrollment in phase {state.phase.value}")
    if origin == Origin.DOSE_ESCALATION.value:
        if state.phase is Phase.STAGE_ONE_SUSPENDED:
            raise StateError("accrual to the escalation cohort is suspended")
        if dose != state.current_dose:
            raise StateError(
                f"escalation enrollment must use the current dose {state.current_dose}"
            )
        if state.cohort_remaining <= 0:
            raise StateError("current cohort is full; a decision is due")
        if state.de_count >= cfg.n_stage1:
            raise StateError("stage-one escalation sample size reached")
        return
    # backfill
    if dose >= state.current_dose:
        raise StateError("backfill must use a dose below the current dose")
    if state.de_count >= cfg.n_stage1:
        raise StateError("backfill closed: stage-one escalation complete")
    eligibility = backfill_eligibility(state, event["time"])
    entry = next((e for e in eligibility if e.dose == dose), None)
    if entry is None or not entry.eligible:
        raise StateError(f"dose {dose} is not backfill-eligible")


def _validate_outcome(state: TrialState, event: dict) -> None:
    cfg = state.config
    rec = state.find_patient(event.get("patient", ""))
    if rec is None:
        raise StateError(f"unknown patient id {event.get('patient')!r}")
    if "tox" not in event and "response" not in event:
        raise StateError("outcome event carries neither tox nor response")
    t = event["time"]
    if "tox" in event:
        if rec.tox_status is not ToxStatus.PENDING:
            raise StateError(f"patient {rec.id} toxicity already resolved")
        tox = event["tox"]
        if tox == "dlt":
            ttd = event.get("time_to_dlt")
            if not isinstance(ttd, (int, float)) or not 0 < ttd <= cfg.dlt_window_months + TIME_EPS:
                raise StateError(
                    f"time_to_dlt must be in (0, {cfg.dlt_window_months}], got {ttd}"
                )
            if rec.enroll_time + ttd > t + TIME_EPS:
                raise StateError("DLT cannot be reported before it occurs")
        elif tox == "no_dlt":
            if t + TIME_EPS < rec.enroll_time + cfg.dlt_window_months:
                raise StateError("no_dlt cannot be posted before the window closes")
        else:
            raise StateError(f"tox must be dlt or no_dlt, got {tox!r}")
    if "response" in event:
        if rec.response_status is not ResponseStatus.PENDING:
            raise StateError(f"patient {rec.id} response already resolved")
        if event["response"] not in ("response", "no_response"):
            raise StateError(f"bad response value {event['response']!r}")
        if t + TIME_EPS < rec.enroll_time:
            raise StateError("response cannot precede enrollment")
