"""Trial-conduct HTTP service.

Each trial lives in its own directory under the data root: a config
document written at creation plus an append-only JSONL event log, with a
snapshot every few mutations so restarts are cheap.  The version of a
trial is the number of accepted mutations (= event-log lines); mutations
carry an optional expected version for optimistic concurrency and are
serialized per trial.  Decisions are advisory: GET .../decision computes
one fresh from the persisted state and nothing changes until it is
applied through POST .../advance.

Build the app with ``create_app(data_dir)`` or point uvicorn at the
factory: ``uvicorn beboin.api:create_app --factory`` (data root from
BEBOIN_DATA_DIR, default ./beboin-data).
"""

from __future__ import annotations

import dataclasses
import json
import os
import threading
import uuid
from pathlib import Path

import numpy as np
from fastapi import Body, FastAPI, HTTPException, Query, Request
from fastapi.responses import JSONResponse, PlainTextResponse

from .boundaries import boin_boundaries
from .core import (
    ConfigError,
    DesignConfig,
    Phase,
    TrialState,
    new_trial,
    summarize_all,
    validate_config,
)
from .document import (
    config_from_dict,
    config_to_dict,
    document_to_state,
    replay,
    state_to_document,
)
from .engine import (
    StateError,
    advance,
    backfill_eligibility,
    conflict_to_dict,
    de_decision,
    decision_due,
    decision_event,
    route_arrival,
    selection_report,
)
from .estimator import imputed_dlt_rate
from .sim import load_scenario, oc_to_dict, run_oc
from .tablegen import generate_table, parse_csv, render_csv, render_markdown

SNAPSHOT_EVERY = 20


# --------------------------------------------------------------------------
# persistence


class TrialRecord:
    """In-memory handle: current state snapshot + version + writer lock."""

    def __init__(self, trial_id: str, state: TrialState, version: int):
        self.trial_id = trial_id
        self.state = state
        self.version = version
        self.lock = threading.Lock()


class TrialStore:
    """File-backed trial registry: one directory per trial.

    Layout: ``{root}/{trial_id}/config.json`` (written once),
    ``events.jsonl`` (append-only), ``snapshot.json`` (periodic).  The log
    is authoritative; a snapshot is only trusted when its version matches
    the log length.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._registry: dict[str, TrialRecord] = {}
        self._registry_lock = threading.Lock()
        for entry in sorted(self.root.iterdir()):
            if entry.is_dir() and (entry / "config.json").exists():
                self._registry[entry.name] = self._load(entry.name)

    # -- loading ------------------------------------------------------------

    def _dir(self, trial_id: str) -> Path:
        return self.root / trial_id

    def _read_events(self, trial_id: str) -> list[dict]:
        path = self._dir(trial_id) / "events.jsonl"
        if not path.exists():
            return []
        events = []
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    events.append(json.loads(line))
        return events

    def _load(self, trial_id: str) -> TrialRecord:
        folder = self._dir(trial_id)
        config_doc = json.loads((folder / "config.json").read_text(encoding="utf-8"))
        config = config_from_dict(config_doc["config"])
        events = self._read_events(trial_id)
        snap_path = folder / "snapshot.json"
        state = None
        if snap_path.exists():
            snap = json.loads(snap_path.read_text(encoding="utf-8"))
            if snap.get("version") == len(events):
                state = document_to_state(snap["document"])
        if state is None:
            state = replay(config, events)
        return TrialRecord(trial_id, state, len(events))

    # -- public -------------------------------------------------------------

    def create(self, config: DesignConfig) -> TrialRecord:
        trial_id = uuid.uuid4().hex[:12]
        folder = self._dir(trial_id)
        folder.mkdir(parents=True)
        (folder / "config.json").write_text(
            json.dumps(
                {"trial_id": trial_id, "config": config_to_dict(config)},
                sort_keys=True,
                indent=1,
            ),
            encoding="utf-8",
        )
        record = TrialRecord(trial_id, new_trial(config), 0)
        with self._registry_lock:
            self._registry[trial_id] = record
        return record

    def get(self, trial_id: str) -> TrialRecord:
        with self._registry_lock:
            record = self._registry.get(trial_id)
        if record is None:
            raise HTTPException(404, f"unknown trial {trial_id!r}")
        return record

    def commit(self, record: TrialRecord, event: dict, new_state: TrialState) -> None:
        """Persist one accepted mutation (caller holds record.lock)."""
        path = self._dir(record.trial_id) / "events.jsonl"
        with path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        record.state = new_state
        record.version += 1
        if record.version % SNAPSHOT_EVERY == 0:
            self._write_snapshot(record)

    def _write_snapshot(self, record: TrialRecord) -> None:
        snap = {
            "version": record.version,
            "document": state_to_document(record.state),
        }
        path = self._dir(record.trial_id) / "snapshot.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(snap, sort_keys=True), encoding="utf-8")
        tmp.replace(path)


# --------------------------------------------------------------------------
# payload helpers


def _summaries(state: TrialState, at_time: float | None = None) -> list[dict]:
    phi = state.config.phi
    at = state.clock if at_time is None else at_time
    out = []
    for s in summarize_all(state, at, include_pending=True):
        est = imputed_dlt_rate(s, phi)
        out.append(
            {
                "dose": s.dose,
                "n": s.n,
                "dlt_observed": s.dlt_observed,
                "pending": s.pending,
                "completed": s.completed,
                "tf": s.tf,
                "mf": s.mf,
                "responses": s.responses,
                "observed_fraction": s.observed_fraction,
                "posterior_mean": est.posterior_mean,
                "imputed_rate": est.imputed_rate,
            }
        )
    return out


def _trial_payload(record: TrialRecord) -> dict:
    state = record.state
    return {
        "trial_id": record.trial_id,
        "version": record.version,
        "phase": state.phase.value,
        "document": state_to_document(state),
        "summaries": _summaries(state),
    }


def _routing_payload(routing) -> dict:
    return {
        "kind": routing.kind,
        "dose": routing.dose,
        "reason": routing.reason,
        "eligibility": [dataclasses.asdict(e) for e in routing.eligibility],
    }


def _check_version(record: TrialRecord, payload: dict, request: Request) -> None:
    expected = payload.get("version")
    if expected is None:
        header = request.headers.get("if-match")
        if header is not None:
            try:
                expected = int(header.strip().strip('"'))
            except ValueError:
                raise HTTPException(400, "If-Match must be an integer version")
    if expected is None:
        return
    if not isinstance(expected, int):
        raise HTTPException(400, "version must be an integer")
    if expected != record.version:
        raise HTTPException(
            409,
            f"version conflict: expected {expected}, trial is at {record.version}",
        )


def _require_number(payload: dict, field: str) -> float:
    value = payload.get(field)
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise HTTPException(400, f"{field} must be a number")
    return float(value)


def _apply(store: TrialStore, record: TrialRecord, event: dict) -> TrialState:
    """Validate + apply + persist one event (caller holds record.lock)."""
    try:
        new_state = advance(record.state, event)
    except StateError as exc:
        raise HTTPException(422, str(exc))
    store.commit(record, event, new_state)
    return new_state


def _decision_payload(record: TrialRecord, at: float) -> dict:
    state = record.state
    decision = de_decision(state, at) if decision_due(state) else None
    eligibility = backfill_eligibility(state, at)
    rng = np.random.default_rng(record.version)
    routing = route_arrival(state, at, rng=rng)
    payload = {
        "trial_id": record.trial_id,
        "version": record.version,
        "phase": state.phase.value,
        "at": at,
        "due": decision_due(state),
        "verdict": None,
        "target_dose": None,
        "current_dose": state.current_dose,
        "suspend_reason": None,
        "pooled_estimate": None,
        "trace": [],
        "conflict_report": None,
        "backfill_eligibility": [dataclasses.asdict(e) for e in eligibility],
        "summaries": _summaries(state, at),
        "routing_preview": _routing_payload(routing),
        "decision_event": None,
    }
    if decision is not None:
        payload.update(
            verdict=decision.verdict.value,
            target_dose=decision.target_dose,
            suspend_reason=decision.suspend_reason,
            pooled_estimate=decision.pooled_estimate,
            trace=list(decision.trace),
            conflict_report=(
                conflict_to_dict(decision.conflict) if decision.conflict else None
            ),
            decision_event=decision_event(decision),
        )
    return payload


# --------------------------------------------------------------------------
# app factory


def create_app(data_dir: str | Path | None = None) -> FastAPI:
    if data_dir is None:
        data_dir = os.environ.get("BEBOIN_DATA_DIR", "beboin-data")
    store = TrialStore(data_dir)
    jobs: dict[str, dict] = {}
    jobs_lock = threading.Lock()

    app = FastAPI(title="beboin trial conduct service")
    app.state.store = store

    @app.exception_handler(ConfigError)
    def _config_error(request: Request, exc: ConfigError) -> JSONResponse:
        errors = [
            {"field": message.split(" ", 1)[0], "message": message}
            for message in exc.errors
        ]
        return JSONResponse(status_code=400, content={"detail": errors})

    # -- trials -------------------------------------------------------------

    @app.post("/trials", status_code=201)
    def create_trial(payload: dict = Body(...)) -> dict:
        data = payload.get("config", payload)
        if not isinstance(data, dict):
            raise HTTPException(400, "config must be an object")
        try:
            config = config_from_dict(data)
        except TypeError as exc:
            raise HTTPException(400, f"bad config field: {exc}")
        record = store.create(config)
        return _trial_payload(record)

    @app.get("/trials/{trial_id}")
    def get_trial(trial_id: str) -> dict:
        return _trial_payload(store.get(trial_id))

    # -- enrollment ----------------------------------------------------------

    @app.post("/trials/{trial_id}/patients", status_code=201)
    def enroll_patient(
        trial_id: str, request: Request, payload: dict = Body(...)
    ) -> dict:
        record = store.get(trial_id)
        with record.lock:
            _check_version(record, payload, request)
            state = record.state
            if state.phase in (Phase.COMPLETED, Phase.TERMINATED_ALL_DOSES_TOXIC):
                raise HTTPException(409, f"trial is {state.phase.value}")
            enroll_time = _require_number(payload, "enroll_time")
            dose = payload.get("dose")
            origin = payload.get("origin")
            routing = None
            if dose is None:
                rng = np.random.default_rng(record.version)
                routing = route_arrival(state, enroll_time, rng=rng)
                if routing.kind == "turned_away":
                    raise HTTPException(
                        409,
                        {
                            "message": f"no open slot: {routing.reason}",
                            "routing": _routing_payload(routing),
                        },
                    )
                dose = routing.dose
                origin = routing.kind
            elif origin is None:
                raise HTTPException(400, "origin is required when dose is given")
            patient_id = payload.get("patient_id") or f"p{len(state.patients) + 1}"
            if not isinstance(patient_id, str):
                raise HTTPException(400, "patient_id must be a string")
            event = {
                "type": "enrolled",
                "time": enroll_time,
                "patient": patient_id,
                "dose": dose,
                "origin": origin,
            }
            new_state = _apply(store, record, event)
            return {
                "trial_id": record.trial_id,
                "version": record.version,
                "phase": new_state.phase.value,
                "patient_id": patient_id,
                "dose": dose,
                "origin": origin,
                "routing": _routing_payload(routing) if routing else None,
                "summaries": _summaries(new_state),
            }

    # -- outcomes ------------------------------------------------------------

    @app.post("/trials/{trial_id}/outcomes")
    def record_outcome(
        trial_id: str, request: Request, payload: dict = Body(...)
    ) -> dict:
        record = store.get(trial_id)
        with record.lock:
            _check_version(record, payload, request)
            patient_id = payload.get("patient_id")
            if not isinstance(patient_id, str):
                raise HTTPException(400, "patient_id must be a string")
            time = _require_number(payload, "time")
            tox_status = payload.get("tox_status")
            response_status = payload.get("response_status")
            if tox_status is None and response_status is None:
                raise HTTPException(
                    400, "at least one of tox_status/response_status is required"
                )
            event: dict = {"type": "outcome", "time": time, "patient": patient_id}
            if tox_status is not None:
                event["tox"] = tox_status
                if tox_status == "dlt":
                    event["time_to_dlt"] = _require_number(payload, "time_to_dlt")
            if response_status is not None:
                event["response"] = response_status
            if record.state.find_patient(patient_id) is None:
                raise HTTPException(404, f"unknown patient {patient_id!r}")
            new_state = _apply(store, record, event)
            return {
                "trial_id": record.trial_id,
                "version": record.version,
                "phase": new_state.phase.value,
                "clock": new_state.clock,
                "summaries": _summaries(new_state),
            }

    # -- decisions -----------------------------------------------------------

    @app.get("/trials/{trial_id}/decision")
    def get_decision(trial_id: str, at: str = Query("now")) -> dict:
        record = store.get(trial_id)
        state = record.state
        if state.phase not in (Phase.STAGE_ONE_ACCRUING, Phase.STAGE_ONE_SUSPENDED):
            raise HTTPException(
                409, f"dose-transition decisions are undefined in {state.phase.value}"
            )
        if at == "now":
            at_time = state.clock
        else:
            try:
                at_time = float(at)
            except ValueError:
                raise HTTPException(400, "at must be 'now' or a time in months")
            if at_time < state.clock:
                raise HTTPException(
                    400, f"at={at_time} is before the trial clock {state.clock}"
                )
        return _decision_payload(record, at_time)

    @app.post("/trials/{trial_id}/advance")
    def advance_trial(
        trial_id: str, request: Request, payload: dict = Body(...)
    ) -> dict:
        record = store.get(trial_id)
        with record.lock:
            _check_version(record, payload, request)
            state = record.state
            if "advance_clock" in payload:
                t = _require_number(payload, "advance_clock")
                new_state = _apply(
                    store, record, {"type": "clock", "time": t}
                )
                return {
                    "trial_id": record.trial_id,
                    "version": record.version,
                    "phase": new_state.phase.value,
                    "clock": new_state.clock,
                    "applied": {"type": "clock", "time": t},
                    "summaries": _summaries(new_state),
                }
            accepted = payload.get("accept_decision")
            if accepted is None:
                raise HTTPException(
                    400, "body must carry accept_decision or advance_clock"
                )
            if not decision_due(state):
                raise HTTPException(
                    409,
                    f"no dose-transition decision is due (phase {state.phase.value},"
                    f" cohort_remaining {state.cohort_remaining})",
                )
            if isinstance(accepted, dict):
                at = accepted.get("time", state.clock)
                if not isinstance(at, (int, float)):
                    raise HTTPException(400, "accept_decision.time must be a number")
                decision = de_decision(state, float(at))
                if (
                    decision.verdict.value != accepted.get("verdict")
                    or decision.target_dose != accepted.get("target_dose")
                ):
                    raise HTTPException(
                        409,
                        {
                            "message": "accepted decision is stale: the state now"
                            " yields a different verdict",
                            "current": {
                                "verdict": decision.verdict.value,
                                "target_dose": decision.target_dose,
                            },
                        },
                    )
            elif accepted is True:
                at = payload.get("time", state.clock)
                if not isinstance(at, (int, float)):
                    raise HTTPException(400, "time must be a number")
                decision = de_decision(state, float(at))
            else:
                raise HTTPException(400, "accept_decision must be true or an object")
            event = decision_event(decision)
            new_state = _apply(store, record, event)
            return {
                "trial_id": record.trial_id,
                "version": record.version,
                "phase": new_state.phase.value,
                "clock": new_state.clock,
                "applied": event,
                "verdict": decision.verdict.value,
                "target_dose": decision.target_dose,
                "current_dose": new_state.current_dose,
                "summaries": _summaries(new_state),
            }

    # -- selection -----------------------------------------------------------

    @app.get("/trials/{trial_id}/selection")
    def get_selection(trial_id: str) -> dict:
        record = store.get(trial_id)
        state = record.state
        if state.phase in (Phase.STAGE_ONE_ACCRUING, Phase.STAGE_ONE_SUSPENDED):
            raise HTTPException(
                409, f"selection is undefined while stage I runs ({state.phase.value})"
            )
        report = selection_report(state)
        return {
            "trial_id": record.trial_id,
            "version": record.version,
            "phase": state.phase.value,
            **report,
        }

    # -- decision table -------------------------------------------------------

    @app.get("/decision-table")
    def decision_table(
        phi: float = Query(0.25),
        cohort: int = Query(3),
        nmax: int = Query(9),
        format: str = Query("json"),
    ):
        config = validate_config(
            DesignConfig(num_doses=1, phi=phi, cohort_size=cohort, n_stage1=nmax)
        )
        rows = generate_table(config, n_max=nmax)
        if format == "csv":
            return PlainTextResponse(render_csv(rows))
        if format == "md":
            return PlainTextResponse(render_markdown(rows))
        if format != "json":
            raise HTTPException(400, "format must be json, csv, or md")
        bounds = boin_boundaries(config.phi, config.phi1, config.phi2)
        return {
            "phi": config.phi,
            "cohort": cohort,
            "nmax": nmax,
            "lambda_e": bounds.lambda_e,
            "lambda_d": bounds.lambda_d,
            "rows": parse_csv(render_csv(rows)),
        }

    # -- simulations ----------------------------------------------------------

    def _run_job(job_id: str, config: DesignConfig, scenario, mode, reps, seed):
        try:
            oc = run_oc(config, scenario, mode, replicates=reps, seed=seed)
            result = {"status": "done", "result": oc_to_dict(oc)}
        except Exception as exc:  # surfaced via the job status endpoint
            result = {"status": "failed", "error": str(exc)}
        with jobs_lock:
            jobs[job_id] = result

    @app.post("/simulations", status_code=202)
    def start_simulation(payload: dict = Body(...)) -> dict:
        scenario_id = payload.get("scenario")
        if not isinstance(scenario_id, str):
            raise HTTPException(400, "scenario must be a library id or file path")
        try:
            scenario = load_scenario(scenario_id)
        except (KeyError, FileNotFoundError) as exc:
            raise HTTPException(404, f"unknown scenario: {exc}")
        mode = payload.get("mode", "be-boin")
        if mode not in ("be-boin", "tite-boin", "bf-boin"):
            raise HTTPException(400, f"unknown mode {mode!r}")
        reps = payload.get("reps", 1000)
        seed = payload.get("seed", 0)
        if not isinstance(reps, int) or reps < 1:
            raise HTTPException(400, "reps must be a positive integer")
        if not isinstance(seed, int):
            raise HTTPException(400, "seed must be an integer")
        overrides = payload.get("config", {})
        if not isinstance(overrides, dict):
            raise HTTPException(400, "config must be an object")
        overrides = {"num_doses": len(scenario.p_tox), **overrides}
        try:
            config = config_from_dict(overrides)
        except TypeError as exc:
            raise HTTPException(400, f"bad config field: {exc}")
        job_id = uuid.uuid4().hex[:12]
        with jobs_lock:
            jobs[job_id] = {"status": "running"}
        thread = threading.Thread(
            target=_run_job,
            args=(job_id, config, scenario, mode, reps, seed),
            daemon=True,
        )
        thread.start()
        return {"job_id": job_id}

    @app.get("/simulations/{job_id}")
    def get_simulation(job_id: str):
        with jobs_lock:
            job = jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown simulation job {job_id!r}")
        if job["status"] == "running":
            return JSONResponse(status_code=202, content={"status": "running"})
        if job["status"] == "failed":
            raise HTTPException(500, job["error"])
        return job

    return app


def main() -> None:
    """Serve the app: data root from BEBOIN_DATA_DIR, port from BEBOIN_PORT."""
    import uvicorn

    uvicorn.run(
        create_app(),
        host=os.environ.get("BEBOIN_HOST", "127.0.0.1"),
        port=int(os.environ.get("BEBOIN_PORT", "8008")),
    )


if __name__ == "__main__":
    main()
