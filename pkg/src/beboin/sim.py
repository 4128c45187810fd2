"""Monte Carlo trial simulator and operating characteristics.

The simulator plays the investigator: it enrolls arrivals through the routing
rules, evaluates dose-transition decisions at the design's decision points,
and runs stage II at the selected MTD.  Three modes share one loop:

* ``be-boin``   - real-time decisions with pending-data imputation, both
                  suspension rules, and backfilling.
* ``tite-boin`` - the same decision machinery with backfilling disabled;
                  arrivals that cannot join the escalation cohort are turned
                  away.
* ``bf-boin``   - backfilling with fully staggered escalation: each decision
                  waits for the cohort's DLT windows and uses observed data
                  only (pending patients are excluded from the summaries).

Outcome observability is view-based (see core), so the event loop only needs
patient arrivals and a few scheduled clock marks.
"""

from __future__ import annotations

import heapq
import json
import math
import os
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from .core import (
    DesignConfig,
    Origin,
    Phase,
    TrialState,
    dlt_windows_complete_time,
    last_assessment_time,
    new_trial,
    validate_config,
)
from .engine import (
    Verdict,
    apply_event,
    de_decision,
    decision_due,
    decision_event,
    route_arrival,
    stage_two_arms,
)

MODE_BE_BOIN = "be-boin"
MODE_TITE_BOIN = "tite-boin"
MODE_BF_BOIN = "bf-boin"
MODES = (MODE_BE_BOIN, MODE_TITE_BOIN, MODE_BF_BOIN)

TTE_MODELS = ("weibull", "loglogistic", "uniform")


class CalibrationError(ValueError):
    """The time-to-event model cannot hit the requested late fraction."""


@dataclass(frozen=True)
class TteParams:
    """Calibrated time-to-DLT distribution (marginal CDF hits F(tau) = p)."""

    model: str
    shape: float | None
    scale: float | None


@dataclass(frozen=True)
class Accrual:
    kind: str = "poisson"  # "poisson" | "deterministic"
    rate: float = 3.0  # patients per month


@dataclass(frozen=True)
class Scenario:
    id: str
    p_tox: tuple[float, ...]
    p_eff: tuple[float, ...]
    true_mtd: int | None
    true_obd: int | None
    tte_model: str = "weibull"
    late_fraction: float = 0.5
    accrual: Accrual = Accrual()
    dlt_window_months: float | None = None


@dataclass(frozen=True)
class TrialResult:
    mtd: int | None
    obd: int | None
    duration_months: float
    patients_per_dose: tuple[int, ...]
    total_patients: int
    backfill_patients: int
    stage2_patients: int
    turned_away: int
    state: TrialState | None = None


@dataclass(frozen=True)
class OperatingCharacteristics:
    scenario_id: str
    mode: str
    replicates: int
    seed: int
    mtd_selection_pct: tuple[float, ...]  # per dose
    mtd_none_pct: float
    correct_mtd_pct: float
    obd_selection_pct: tuple[float, ...]
    correct_obd_pct: float
    patients_per_dose: tuple[float, ...]
    patients_at_mtd: float
    patients_at_obd: float
    patients_overdosed: float
    total_patients: float
    duration_months: float
    backfill_patients: float
    turned_away: float


# --------------------------------------------------------------------------
# time-to-event calibration and sampling


def calibrate_tte(p: float, tau: float, rho: float, model: str) -> TteParams:
    """Fit the model so F(tau) = p and F(tau/2) = (1 - rho) * p.

    rho is the late fraction: the share of DLTs that occur in the second half
    of the assessment window.  Closed forms:

    * weibull:      a = -ln(1-p), b = -ln(1-(1-rho)p),
                    shape = log2(a/b), scale = tau / a**(1/shape)
    * loglogistic:  s = p/(1-p), s2 = (1-rho)p/(1-(1-rho)p),
                    shape = log2(s/s2), scale = tau / s**(1/shape)
    * uniform:      conditional Uniform(0, tau); only rho = 0.5 is attainable.

    calibrate_tte(0.25, 3, 0.5, "weibull") -> shape 1.10730, scale 9.24224
    (F(3) = 0.25 and F(1.5) = 0.125 hold to machine precision).
    """
    if not 0.0 < p < 1.0:
        raise CalibrationError(f"p must be in (0, 1), got {p}")
    if tau <= 0:
        raise CalibrationError(f"tau must be > 0, got {tau}")
    if not 0.0 < rho < 1.0:
        raise CalibrationError(f"late fraction must be in (0, 1), got {rho}")
    if model == "uniform":
        if abs(rho - 0.5) > 1e-12:
            raise CalibrationError(
                f"uniform times put half the events in each half-window; "
                f"late fraction {rho} is unattainable"
            )
        return TteParams(model=model, shape=None, scale=tau)
    if model == "weibull":
        a = -math.log1p(-p)
        b = -math.log1p(-(1.0 - rho) * p)
        shape = math.log2(a / b)
        scale = tau / a ** (1.0 / shape)
        return TteParams(model=model, shape=shape, scale=scale)
    if model == "loglogistic":
        s = p / (1.0 - p)
        s2 = (1.0 - rho) * p / (1.0 - (1.0 - rho) * p)
        shape = math.log2(s / s2)
        scale = tau / s ** (1.0 / shape)
        return TteParams(model=model, shape=shape, scale=scale)
    raise CalibrationError(f"unknown time-to-event model {model!r}")


def tte_cdf(t: float, params: TteParams, p: float, tau: float) -> float:
    """Marginal DLT CDF of the calibrated model (reaches p at tau)."""
    if params.model == "uniform":
        return p * min(max(t / tau, 0.0), 1.0)
    if params.model == "weibull":
        return -math.expm1(-((t / params.scale) ** params.shape))
    s = (t / params.scale) ** params.shape
    return s / (1.0 + s)


def sample_dlt_time(params: TteParams, p: float, tau: float, u: float) -> float:
    """Inverse-CDF draw of the DLT time conditional on DLT within the window."""
    q = u * p
    if q <= 0.0:
        return 1e-9
    if params.model == "uniform":
        return max(u * tau, 1e-9)
    if params.model == "weibull":
        return params.scale * (-math.log1p(-q)) ** (1.0 / params.shape)
    return params.scale * (q / (1.0 - q)) ** (1.0 / params.shape)


# --------------------------------------------------------------------------
# scenarios


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "id": s.id,
        "p_tox": list(s.p_tox),
        "p_eff": list(s.p_eff),
        "true_mtd": s.true_mtd,
        "true_obd": s.true_obd,
        "tte_model": s.tte_model,
        "late_fraction": s.late_fraction,
        "accrual": {"kind": s.accrual.kind, "rate": s.accrual.rate},
        "dlt_window_months": s.dlt_window_months,
    }


def scenario_from_dict(data: dict) -> Scenario:
    accrual = data.get("accrual") or {}
    s = Scenario(
        id=str(data["id"]),
        p_tox=tuple(float(x) for x in data["p_tox"]),
        p_eff=tuple(float(x) for x in data["p_eff"]),
        true_mtd=data.get("true_mtd"),
        true_obd=data.get("true_obd"),
        tte_model=data.get("tte_model", "weibull"),
        late_fraction=float(data.get("late_fraction", 0.5)),
        accrual=Accrual(
            kind=accrual.get("kind", "poisson"),
            rate=float(accrual.get("rate", 3.0)),
        ),
        dlt_window_months=data.get("dlt_window_months"),
    )
    if len(s.p_tox) != len(s.p_eff):
        raise ValueError(f"scenario {s.id}: p_tox and p_eff lengths differ")
    if any(not 0.0 <= p < 1.0 for p in s.p_tox):
        raise ValueError(f"scenario {s.id}: toxicity rates must be in [0, 1)")
    if any(not 0.0 <= p <= 1.0 for p in s.p_eff):
        raise ValueError(f"scenario {s.id}: response rates must be in [0, 1]")
    if s.tte_model not in TTE_MODELS:
        raise ValueError(f"scenario {s.id}: unknown tte model {s.tte_model!r}")
    if s.accrual.kind not in ("poisson", "deterministic"):
        raise ValueError(f"scenario {s.id}: unknown accrual kind {s.accrual.kind!r}")
    return s


def scenario_library() -> dict[str, Scenario]:
    """Packaged scenarios: eight bases plus one-factor variants each.

    Variants swap the time-to-event model (uniform, loglogistic), slow the
    accrual to one patient per month, or move the late fraction to 0.3 / 0.7.
    """
    text = resources.files("beboin.data").joinpath("scenarios.json").read_text()
    return {
        sid: scenario_from_dict(raw) for sid, raw in json.loads(text).items()
    }


def load_scenario(id_or_path: str) -> Scenario:
    """Library id (e.g. "4", "4-uniform") or a path to a scenario JSON file."""
    library = scenario_library()
    if id_or_path in library:
        return library[id_or_path]
    if os.path.exists(id_or_path):
        with open(id_or_path) as f:
            return scenario_from_dict(json.load(f))
    raise KeyError(
        f"unknown scenario {id_or_path!r}; library ids: {', '.join(sorted(library))}"
    )


# --------------------------------------------------------------------------
# single trial


def run_trial(
    config: DesignConfig,
    scenario: Scenario,
    mode: str = MODE_BE_BOIN,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
    stagger_de: bool | None = None,
    stage2: bool = True,
    keep_state: bool = False,
) -> TrialResult:
    """Simulate one trial.

    stagger_de overrides the mode default (bf-boin staggers, the others do
    not); observed-only summaries are tied to bf-boin itself.  stage2=False
    stops at stage-I close with the MTD selected (stage-I-only operating
    characteristics).  A scenario-level DLT window overrides the config's.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if rng is None:
        rng = np.random.default_rng(seed)
    if scenario.dlt_window_months is not None:
        config = replace(config, dlt_window_months=scenario.dlt_window_months)
    cfg = validate_config(config)
    if len(scenario.p_tox) != cfg.num_doses:
        raise ValueError(
            f"scenario has {len(scenario.p_tox)} doses, config {cfg.num_doses}"
        )
    tau = cfg.dlt_window_months
    backfill_enabled = mode != MODE_TITE_BOIN
    observed_only = mode == MODE_BF_BOIN
    stagger = (mode == MODE_BF_BOIN) if stagger_de is None else stagger_de
    rho = scenario.late_fraction
    tte = [
        calibrate_tte(p, tau, rho, scenario.tte_model) if p > 0 else None
        for p in scenario.p_tox
    ]
    poisson = scenario.accrual.kind == "poisson"
    mean_gap = 1.0 / scenario.accrual.rate

    state = new_trial(cfg)
    # heap of (time, sequence, kind); kinds: 0 arrival, 1 de_ready, 2 stage-I
    # close, 3 stage-II close
    heap: list[tuple[float, int, int]] = [(0.0, 0, 0)]
    seq = 1
    scheduling = True
    stage2_slots: list[int] = []
    stage2_built = False
    rnd = rng.random

    def enroll(dose: int, origin: str, t: float, u_tox: float, u_time: float, u_eff: float) -> None:
        p = scenario.p_tox[dose - 1]
        dlt = u_tox < p
        event = {
            "type": "enrolled",
            "time": t,
            "patient": state.next_patient_id(),
            "dose": dose,
            "origin": origin,
            "dlt": bool(dlt),
            "dlt_time": sample_dlt_time(tte[dose - 1], p, tau, u_time) if dlt else None,
            "response": bool(u_eff < scenario.p_eff[dose - 1]),
        }
        apply_event(state, event)

    while heap:
        t, _, kind = heapq.heappop(heap)
        # any event can close stage I (decisions re-check phase on apply), so
        # arm stage II here rather than inside one specific handler
        if state.phase is Phase.STAGE_TWO and not stage2_built:
            if not stage2:
                break
            stage2_built = True
            high, low = stage_two_arms(state)
            stage2_slots = [high] * cfg.stage2_per_arm
            if low is not None:
                stage2_slots += [low] * cfg.stage2_per_arm
        if kind == 0:  # arrival
            if state.phase in (Phase.COMPLETED, Phase.TERMINATED_ALL_DOSES_TOXIC):
                continue
            # fixed draw order per arrival: next gap, then this patient's fates
            if scheduling:
                gap = rng.exponential(mean_gap) if poisson else mean_gap
                heapq.heappush(heap, (t + gap, seq, 0))
                seq += 1
            u_tox = rnd()
            u_time = rnd()
            u_eff = rnd()
            if state.phase is Phase.STAGE_TWO:
                if not stage2_slots:
                    continue
                pick = int(rng.integers(len(stage2_slots)))
                dose = stage2_slots.pop(pick)
                enroll(dose, Origin.STAGE_TWO.value, t, u_tox, u_time, u_eff)
                if not stage2_slots:
                    scheduling = False
                    heapq.heappush(heap, (last_assessment_time(state), seq, 3))
                    seq += 1
                continue
            # stage I: lift a suspension first if the data now supports it
            if state.phase is Phase.STAGE_ONE_SUSPENDED and decision_due(state):
                decision = de_decision(state, t, observed_only)
                if decision.verdict is not Verdict.SUSPEND:
                    apply_event(state, decision_event(decision))
                    if state.phase is Phase.TERMINATED_ALL_DOSES_TOXIC:
                        continue
            routing = route_arrival(
                state, t,
                rng=rng if cfg.backfill_strategy == "randomize_eligible" else None,
                observed_only=observed_only,
                backfill_enabled=backfill_enabled,
            )
            if routing.kind == "turned_away":
                apply_event(state, {"type": "turned_away", "time": t})
                continue
            enroll(routing.dose, routing.kind, t, u_tox, u_time, u_eff)
            if routing.kind == "dose_escalation":
                if state.cohort_remaining == 0:
                    if stagger:
                        heapq.heappush(heap, (t + tau, seq, 1))
                        seq += 1
                    else:
                        decision = de_decision(state, t, observed_only)
                        apply_event(state, decision_event(decision))
                if state.de_count >= cfg.n_stage1 and state.phase in (
                    Phase.STAGE_ONE_ACCRUING,
                    Phase.STAGE_ONE_SUSPENDED,
                ):
                    heapq.heappush(
                        heap, (dlt_windows_complete_time(state), seq, 2)
                    )
                    seq += 1
        elif kind == 1:  # staggered cohort windows complete
            if state.phase is Phase.STAGE_ONE_ACCRUING and decision_due(state):
                decision = de_decision(state, t, observed_only)
                apply_event(state, decision_event(decision))
        elif kind == 2:  # stage-I close mark
            if state.phase not in (Phase.STAGE_ONE_ACCRUING, Phase.STAGE_ONE_SUSPENDED):
                continue
            apply_event(state, {"type": "clock", "time": t})
        else:  # stage-II close mark
            apply_event(state, {"type": "clock", "time": t})
            break

    counts = [0] * cfg.num_doses
    backfill = 0
    stage2_n = 0
    for p in state.patients:
        counts[p.dose - 1] += 1
        if p.origin is Origin.BACKFILL:
            backfill += 1
        elif p.origin is Origin.STAGE_TWO:
            stage2_n += 1
    duration = max(state.clock, last_assessment_time(state))
    return TrialResult(
        mtd=state.mtd,
        obd=state.obd,
        duration_months=duration,
        patients_per_dose=tuple(counts),
        total_patients=len(state.patients),
        backfill_patients=backfill,
        stage2_patients=stage2_n,
        turned_away=state.turned_away,
        state=state if keep_state else None,
    )


# --------------------------------------------------------------------------
# operating characteristics


def _replicate_stats(args) -> list[tuple]:
    config, scenario, mode, stagger_de, stage2, seed, indices = args
    out = []
    for i in indices:
        rng = np.random.default_rng([seed, i])
        r = run_trial(
            config, scenario, mode, rng=rng, stagger_de=stagger_de, stage2=stage2
        )
        out.append(
            (
                r.mtd or 0,
                r.obd or 0,
                r.patients_per_dose,
                r.total_patients,
                r.duration_months,
                r.backfill_patients,
                r.turned_away,
            )
        )
    return out


def default_workers() -> int:
    env = os.environ.get("BEBION_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def run_oc(
    config: DesignConfig,
    scenario: Scenario,
    mode: str = MODE_BE_BOIN,
    replicates: int = 1000,
    seed: int = 0,
    stagger_de: bool | None = None,
    stage2: bool = True,
    workers: int | None = None,
) -> OperatingCharacteristics:
    """Monte Carlo operating characteristics over independent replicates.

    Replicate i uses the stream seeded [seed, i], and aggregation runs in
    replicate order, so results do not depend on the worker count (capped by
    the BEBION_THREADS environment variable when set).
    """
    cfg = validate_config(config)
    if workers is None:
        workers = default_workers()
    workers = max(1, min(workers, replicates))
    indices = list(range(replicates))
    if workers == 1:
        stats = _replicate_stats(
            (cfg, scenario, mode, stagger_de, stage2, seed, indices)
        )
    else:
        import multiprocessing as mp

        chunks = [
            (cfg, scenario, mode, stagger_de, stage2, seed, indices[k::workers])
            for k in range(workers)
        ]
        with mp.Pool(processes=workers) as pool:
            parts = pool.map(_replicate_stats, chunks)
        # round-robin chunks: restitch into replicate order
        stats = [None] * replicates
        for k, part in enumerate(parts):
            for j, row in enumerate(part):
                stats[k + j * workers] = row
    j = cfg.num_doses
    mtd = np.array([s[0] for s in stats])
    obd = np.array([s[1] for s in stats])
    per_dose = np.array([s[2] for s in stats], dtype=float)
    totals = np.array([s[3] for s in stats], dtype=float)
    durations = np.array([s[4] for s in stats], dtype=float)
    backfills = np.array([s[5] for s in stats], dtype=float)
    turned = np.array([s[6] for s in stats], dtype=float)
    over_mask = np.array([p > cfg.phi for p in scenario.p_tox], dtype=float)
    mtd_pct = tuple(float(np.mean(mtd == d) * 100) for d in range(1, j + 1))
    obd_pct = tuple(float(np.mean(obd == d) * 100) for d in range(1, j + 1))
    return OperatingCharacteristics(
        scenario_id=scenario.id,
        mode=mode,
        replicates=replicates,
        seed=seed,
        mtd_selection_pct=mtd_pct,
        mtd_none_pct=float(np.mean(mtd == 0) * 100),
        correct_mtd_pct=(
            float(np.mean(mtd == scenario.true_mtd) * 100)
            if scenario.true_mtd
            else 0.0
        ),
        obd_selection_pct=obd_pct,
        correct_obd_pct=(
            float(np.mean(obd == scenario.true_obd) * 100)
            if scenario.true_obd
            else 0.0
        ),
        patients_per_dose=tuple(float(x) for x in per_dose.mean(axis=0)),
        patients_at_mtd=(
            float(per_dose[:, scenario.true_mtd - 1].mean()) if scenario.true_mtd else 0.0
        ),
        patients_at_obd=(
            float(per_dose[:, scenario.true_obd - 1].mean()) if scenario.true_obd else 0.0
        ),
        patients_overdosed=float((per_dose * over_mask).sum(axis=1).mean()),
        total_patients=float(totals.mean()),
        duration_months=float(durations.mean()),
        backfill_patients=float(backfills.mean()),
        turned_away=float(turned.mean()),
    )


def oc_to_dict(oc: OperatingCharacteristics) -> dict:
    return {
        "scenario": oc.scenario_id,
        "mode": oc.mode,
        "replicates": oc.replicates,
        "seed": oc.seed,
        "mtd_selection_pct": list(oc.mtd_selection_pct),
        "mtd_none_pct": oc.mtd_none_pct,
        "correct_mtd_pct": oc.correct_mtd_pct,
        "obd_selection_pct": list(oc.obd_selection_pct),
        "correct_obd_pct": oc.correct_obd_pct,
        "patients_per_dose": list(oc.patients_per_dose),
        "patients_at_mtd": oc.patients_at_mtd,
        "patients_at_obd": oc.patients_at_obd,
        "patients_overdosed": oc.patients_overdosed,
        "total_patients": oc.total_patients,
        "duration_months": oc.duration_months,
        "backfill_patients": oc.backfill_patients,
        "turned_away": oc.turned_away,
    }
