"""Trial configuration, patient records, and time-indexed dose summaries.

Everything downstream (decision engine, simulator, HTTP service) works off the
two value types defined here: an immutable ``DesignConfig`` and a ``TrialState``
that is advanced by applying events.  Dose-level data enters the decision rules
only through ``DoseSummary``, which is always computed *as of* a clock time so
that pending DLT windows resolve by the passage of time rather than by separate
bookkeeping events.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

# Tolerance for closed-boundary time comparisons: a DLT window of tau months is
# complete at follow-up == tau, and float arithmetic on enrollment times must
# not push that patient back into "pending".
TIME_EPS = 1e-9

BACKFILL_STRATEGIES = ("highest_eligible", "randomize_eligible")


class Phase(str, enum.Enum):
    STAGE_ONE_ACCRUING = "stage_one_accruing"
    STAGE_ONE_SUSPENDED = "stage_one_suspended"
    STAGE_TWO = "stage_two"
    COMPLETED = "completed"
    TERMINATED_ALL_DOSES_TOXIC = "terminated_all_doses_toxic"


class Origin(str, enum.Enum):
    DOSE_ESCALATION = "dose_escalation"
    BACKFILL = "backfill"
    STAGE_TWO = "stage_two"


class ToxStatus(str, enum.Enum):
    PENDING = "pending"
    DLT = "dlt"
    NO_DLT = "no_dlt"


class ResponseStatus(str, enum.Enum):
    PENDING = "pending"
    RESPONSE = "response"
    NO_RESPONSE = "no_response"


class ConfigError(ValueError):
    """Raised by validate_config with every violation, not just the first."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class DesignConfig:
    """Design parameters.  ``validate_config`` resolves the derived defaults.

    phi1/phi2 default to 0.6*phi and 1.4*phi; n_stage1 defaults to
    6 * num_doses; efficacy_assess_months defaults to the DLT window.
    """

    num_doses: int
    phi: float = 0.25
    phi1: float | None = None
    phi2: float | None = None
    cohort_size: int = 3
    n_stage1: int | None = None
    backfill_cap: int = 12
    dlt_window_months: float = 3.0
    suspension_min_observed_fraction: float = 0.51
    suspension_min_followup_fraction: float = 0.25
    elimination_cutoff: float = 0.95
    elimination_min_n: int = 3
    elimination_prior: tuple[float, float] = (1.0, 1.0)
    backfill_strategy: str = "highest_eligible"
    start_dose: int = 1
    stage2_per_arm: int = 20
    utility_scores: tuple[float, float, float, float] = (100.0, 60.0, 40.0, 0.0)
    obd_prior_weight: float = 0.25
    efficacy_assess_months: float | None = None
    obd_counts_stage2_only: bool = False


def validate_config(config: DesignConfig) -> DesignConfig:
    """Resolve derived defaults and check every constraint.

    Returns the fully resolved config (phi1/phi2/n_stage1/efficacy window all
    concrete).  Raises ConfigError listing all violations at once.
    """
    errors: list[str] = []
    phi = config.phi
    if not 0.0 < phi < 1.0:
        errors.append(f"phi must be in (0, 1), got {phi}")
    phi1 = 0.6 * phi if config.phi1 is None else config.phi1
    phi2 = 1.4 * phi if config.phi2 is None else config.phi2
    if not 0.0 < phi1 < phi:
        errors.append(f"phi1 must satisfy 0 < phi1 < phi, got {phi1}")
    if not phi < phi2 < 1.0:
        errors.append(f"phi2 must satisfy phi < phi2 < 1, got {phi2}")
    if config.num_doses < 1:
        errors.append(f"num_doses must be >= 1, got {config.num_doses}")
    if config.cohort_size < 1:
        errors.append(f"cohort_size must be >= 1, got {config.cohort_size}")
    n_stage1 = 6 * config.num_doses if config.n_stage1 is None else config.n_stage1
    if n_stage1 < config.cohort_size:
        errors.append(f"n_stage1 must be >= cohort_size, got {n_stage1}")
    if config.backfill_cap < 0:
        errors.append(f"backfill_cap must be >= 0, got {config.backfill_cap}")
    if config.dlt_window_months <= 0:
        errors.append(f"dlt_window_months must be > 0, got {config.dlt_window_months}")
    if not 0.0 <= config.suspension_min_observed_fraction <= 1.0:
        errors.append("suspension_min_observed_fraction must be in [0, 1]")
    if not 0.0 <= config.suspension_min_followup_fraction <= 1.0:
        errors.append("suspension_min_followup_fraction must be in [0, 1]")
    if not 0.0 < config.elimination_cutoff < 1.0:
        errors.append("elimination_cutoff must be in (0, 1)")
    if config.elimination_min_n < 1:
        errors.append("elimination_min_n must be >= 1")
    if config.elimination_prior[0] <= 0 or config.elimination_prior[1] <= 0:
        errors.append("elimination_prior parameters must be > 0")
    if config.backfill_strategy not in BACKFILL_STRATEGIES:
        errors.append(
            f"backfill_strategy must be one of {BACKFILL_STRATEGIES}, "
            f"got {config.backfill_strategy!r}"
        )
    if not 1 <= config.start_dose <= max(config.num_doses, 1):
        errors.append(f"start_dose must be in 1..num_doses, got {config.start_dose}")
    if config.stage2_per_arm < 1:
        errors.append(f"stage2_per_arm must be >= 1, got {config.stage2_per_arm}")
    if len(config.utility_scores) != 4:
        errors.append("utility_scores must list the four outcome-category scores")
    if config.obd_prior_weight <= 0:
        errors.append("obd_prior_weight must be > 0")
    efficacy = (
        config.dlt_window_months
        if config.efficacy_assess_months is None
        else config.efficacy_assess_months
    )
    if efficacy <= 0:
        errors.append(f"efficacy_assess_months must be > 0, got {efficacy}")
    if errors:
        raise ConfigError(errors)
    return replace(
        config,
        phi1=phi1,
        phi2=phi2,
        n_stage1=n_stage1,
        efficacy_assess_months=efficacy,
        elimination_prior=tuple(config.elimination_prior),
        utility_scores=tuple(config.utility_scores),
    )


@dataclass(slots=True)
class PatientRecord:
    """One enrolled patient.

    tox_status / response_status record *knowledge*: in a simulated trial the
    fate is known at enrollment and the observation views below gate when it
    becomes visible; in a conducted trial the status stays PENDING until an
    outcome is posted.  time_to_dlt is months from enrollment to DLT onset.
    """

    id: str
    dose: int
    origin: Origin
    enroll_time: float
    tox_status: ToxStatus = ToxStatus.PENDING
    time_to_dlt: float | None = None
    response_status: ResponseStatus = ResponseStatus.PENDING
    response_time: float | None = None

    def copy(self) -> "PatientRecord":
        return replace(self)


@dataclass(slots=True, frozen=True)
class DoseSummary:
    """Dose-level data as of a clock time.

    n counts every patient on the dose (pending included unless the summary was
    built observed-only).  tf is the summed follow-up fraction of pending
    patients (each capped at 1); mf is the minimum pending follow-up fraction,
    defined as 1.0 when nothing is pending.
    """

    dose: int
    n: int
    dlt_observed: int
    pending: int
    completed: int
    tf: float
    mf: float
    responses: int
    backfilled: int

    @property
    def observed_fraction(self) -> float:
        """Fraction of patients with resolved DLT status ((n - m) / n)."""
        if self.n == 0:
            return 1.0
        return (self.n - self.pending) / self.n


def observed_tox(
    rec: PatientRecord, at_time: float, tau: float
) -> tuple[ToxStatus, float]:
    """Patient's DLT status as visible at ``at_time``.

    Returns (status, follow_fraction); follow_fraction is meaningful only for
    PENDING results (capped at 1.0).  A fated DLT is visible once its onset
    time has passed; a no-DLT resolves when follow-up reaches the window.
    """
    follow = at_time - rec.enroll_time
    if rec.tox_status is ToxStatus.DLT:
        if rec.time_to_dlt is not None and follow + TIME_EPS >= rec.time_to_dlt:
            return ToxStatus.DLT, 1.0
        return ToxStatus.PENDING, min(max(follow, 0.0) / tau, 1.0)
    if rec.tox_status is ToxStatus.NO_DLT and follow + TIME_EPS >= tau:
        return ToxStatus.NO_DLT, 1.0
    return ToxStatus.PENDING, min(max(follow, 0.0) / tau, 1.0)


def observed_response(rec: PatientRecord, at_time: float, assess_months: float) -> ResponseStatus:
    """Patient's efficacy status as visible at ``at_time``."""
    if rec.response_status is ResponseStatus.PENDING:
        return ResponseStatus.PENDING
    when = rec.response_time
    if when is None:
        when = rec.enroll_time + assess_months
    if at_time + TIME_EPS >= when:
        return rec.response_status
    return ResponseStatus.PENDING


@dataclass(slots=True)
class TrialState:
    """Mutable trial snapshot; advanced by applying events (see engine).

    cohort_remaining, suspension_reason, de_count and turned_away are derived
    bookkeeping: they are recomputed during replay from the event log and are
    not part of the serialized document's identity fields.
    """

    config: DesignConfig
    patients: list[PatientRecord] = field(default_factory=list)
    current_dose: int = 1
    phase: Phase = Phase.STAGE_ONE_ACCRUING
    eliminated: set[int] = field(default_factory=set)
    clock: float = 0.0
    mtd: int | None = None
    obd: int | None = None
    events: list[dict] = field(default_factory=list)
    cohort_remaining: int = 0
    suspension_reason: str | None = None
    de_count: int = 0
    turned_away: int = 0

    def copy(self) -> "TrialState":
        return TrialState(
            config=self.config,
            patients=[p.copy() for p in self.patients],
            current_dose=self.current_dose,
            phase=self.phase,
            eliminated=set(self.eliminated),
            clock=self.clock,
            mtd=self.mtd,
            obd=self.obd,
            events=list(self.events),
            cohort_remaining=self.cohort_remaining,
            suspension_reason=self.suspension_reason,
            de_count=self.de_count,
            turned_away=self.turned_away,
        )

    def next_patient_id(self) -> str:
        return f"p{len(self.patients) + 1:03d}"

    def find_patient(self, patient_id: str) -> PatientRecord | None:
        for rec in self.patients:
            if rec.id == patient_id:
                return rec
        return None


def new_trial(config: DesignConfig) -> TrialState:
    """Fresh stage-I trial with the first cohort open at the start dose."""
    config = validate_config(config)
    return TrialState(
        config=config,
        current_dose=config.start_dose,
        cohort_remaining=config.cohort_size,
    )


def summarize_dose(
    state: TrialState,
    dose: int,
    at_time: float,
    include_pending: bool = True,
) -> DoseSummary:
    """Summary for one dose as of ``at_time`` (see summarize_all)."""
    return summarize_all(state, at_time, include_pending)[dose - 1]


def summarize_all(
    state: TrialState,
    at_time: float,
    include_pending: bool = True,
) -> list[DoseSummary]:
    """Per-dose summaries as of ``at_time`` in a single pass over patients.

    include_pending=False gives the observed-only view used by the staggered
    designs: pending patients are excluded from every count, so n = resolved
    patients, pending = 0, tf = 0 and mf = 1.
    """
    cfg = state.config
    tau = cfg.dlt_window_months
    assess = cfg.efficacy_assess_months if cfg.efficacy_assess_months else tau
    j = cfg.num_doses
    n = [0] * j
    dlt = [0] * j
    pend = [0] * j
    tf = [0.0] * j
    mf = [1.0] * j
    resp = [0] * j
    backf = [0] * j
    for rec in state.patients:
        d = rec.dose - 1
        status, frac = observed_tox(rec, at_time, tau)
        if status is ToxStatus.PENDING:
            if not include_pending:
                continue
            pend[d] += 1
            tf[d] += frac
            if frac < mf[d]:
                mf[d] = frac
        elif status is ToxStatus.DLT:
            dlt[d] += 1
        n[d] += 1
        if rec.origin is Origin.BACKFILL:
            backf[d] += 1
        if observed_response(rec, at_time, assess) is ResponseStatus.RESPONSE:
            resp[d] += 1
    return [
        DoseSummary(
            dose=d + 1,
            n=n[d],
            dlt_observed=dlt[d],
            pending=pend[d],
            completed=n[d] - pend[d] - dlt[d],
            tf=tf[d],
            mf=mf[d] if pend[d] else 1.0,
            responses=resp[d],
            backfilled=backf[d],
        )
        for d in range(j)
    ]


def dlt_windows_complete_time(state: TrialState) -> float:
    """Clock time at which every enrolled patient's DLT window has closed."""
    tau = state.config.dlt_window_months
    return max((p.enroll_time + tau for p in state.patients), default=0.0)


def last_assessment_time(state: TrialState) -> float:
    """Clock time of the final safety-or-efficacy assessment (trial duration)."""
    cfg = state.config
    horizon = max(cfg.dlt_window_months, cfg.efficacy_assess_months or 0.0)
    return max((p.enroll_time + horizon for p in state.patients), default=0.0)
