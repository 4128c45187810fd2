"""BE-BOIN dose-finding: decision engine, simulator, tables, CLI, and service."""

from .boundaries import Boundaries, boin_boundaries, elimination_posterior, eliminate_dose
from .core import (
    ConfigError,
    DesignConfig,
    DoseSummary,
    Origin,
    PatientRecord,
    Phase,
    ResponseStatus,
    ToxStatus,
    TrialState,
    new_trial,
    summarize_all,
    summarize_dose,
    validate_config,
)
from .engine import (
    BackfillEligibility,
    ConflictReport,
    Decision,
    DecisionClass,
    Routing,
    StateError,
    Verdict,
    advance,
    allocate_backfill,
    apply_event,
    backfill_eligibility,
    de_decision,
    decision_class,
    detect_conflict,
    resolve_conflict,
    route_arrival,
)
from .estimator import (
    PendingFraction,
    ToxEstimate,
    escalation_tf_threshold,
    expected_pending_fraction,
    imputed_dlt_rate,
    pooled_rate,
    posterior_mean_tox,
)
from .selection import (
    IsotonicFit,
    UtilityPosterior,
    isotonic_fit,
    pava,
    select_mtd,
    select_obd,
    utility_posterior,
)

__version__ = "0.1.0"
