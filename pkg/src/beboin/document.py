"""Canonical trial-state documents: versioned schema, serialization, replay.

A document snapshots the trial as of its clock: the patient list shows what
was *observable* then (a fated-but-unseen DLT serializes as pending), while
the event log carries the full knowledge needed to replay.  Replaying the log
and re-serializing yields byte-identical JSON, which is the persistence
contract of the HTTP service.
"""

from __future__ import annotations

import json
from dataclasses import asdict

import jsonschema

from .core import (
    DesignConfig,
    Origin,
    PatientRecord,
    Phase,
    ResponseStatus,
    ToxStatus,
    TrialState,
    new_trial,
    observed_response,
    observed_tox,
    validate_config,
)
from .engine import apply_event

SCHEMA_VERSION = 1

_CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "num_doses": {"type": "integer", "minimum": 1},
        "phi": {"type": "number"},
        "phi1": {"type": "number"},
        "phi2": {"type": "number"},
        "cohort_size": {"type": "integer", "minimum": 1},
        "n_stage1": {"type": "integer", "minimum": 1},
        "backfill_cap": {"type": "integer", "minimum": 0},
        "dlt_window_months": {"type": "number", "exclusiveMinimum": 0},
        "suspension_min_observed_fraction": {"type": "number"},
        "suspension_min_followup_fraction": {"type": "number"},
        "elimination_cutoff": {"type": "number"},
        "elimination_min_n": {"type": "integer"},
        "elimination_prior": {
            "type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2,
        },
        "backfill_strategy": {"enum": ["highest_eligible", "randomize_eligible"]},
        "start_dose": {"type": "integer", "minimum": 1},
        "stage2_per_arm": {"type": "integer", "minimum": 1},
        "utility_scores": {
            "type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4,
        },
        "obd_prior_weight": {"type": "number", "exclusiveMinimum": 0},
        "efficacy_assess_months": {"type": "number", "exclusiveMinimum": 0},
        "obd_counts_stage2_only": {"type": "boolean"},
    },
    "required": ["num_doses", "phi"],
    "additionalProperties": False,
}

_PATIENT_SCHEMA = {
    "type": "object",
    "properties": {
        "id": {"type": "string"},
        "dose": {"type": "integer", "minimum": 1},
        "origin": {"enum": [o.value for o in Origin]},
        "enroll_time": {"type": "number"},
        "tox_status": {"enum": [s.value for s in ToxStatus]},
        "time_to_dlt": {"type": ["number", "null"]},
        "response_status": {"enum": [s.value for s in ResponseStatus]},
    },
    "required": ["id", "dose", "origin", "enroll_time", "tox_status", "response_status"],
    "additionalProperties": False,
}

DOCUMENT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "config": _CONFIG_SCHEMA,
        "patients": {"type": "array", "items": _PATIENT_SCHEMA},
        "current_dose": {"type": "integer", "minimum": 1},
        "phase": {"enum": [p.value for p in Phase]},
        "eliminated_doses": {"type": "array", "items": {"type": "integer"}},
        "clock_months": {"type": "number"},
        "mtd": {"type": ["integer", "null"]},
        "obd": {"type": ["integer", "null"]},
        "events": {"type": "array", "items": {"type": "object"}},
    },
    "required": [
        "schema_version", "config", "patients", "current_dose", "phase",
        "eliminated_doses", "clock_months", "mtd", "obd", "events",
    ],
    "additionalProperties": False,
}


def config_to_dict(config: DesignConfig) -> dict:
    out = asdict(config)
    out["elimination_prior"] = list(config.elimination_prior)
    out["utility_scores"] = list(config.utility_scores)
    return out


def config_from_dict(data: dict) -> DesignConfig:
    kwargs = dict(data)
    if "elimination_prior" in kwargs:
        kwargs["elimination_prior"] = tuple(kwargs["elimination_prior"])
    if "utility_scores" in kwargs:
        kwargs["utility_scores"] = tuple(kwargs["utility_scores"])
    return validate_config(DesignConfig(**kwargs))


def _patient_to_dict(rec: PatientRecord, clock: float, tau: float, assess: float) -> dict:
    status, _ = observed_tox(rec, clock, tau)
    out = {
        "id": rec.id,
        "dose": rec.dose,
        "origin": rec.origin.value,
        "enroll_time": rec.enroll_time,
        "tox_status": status.value,
        "response_status": observed_response(rec, clock, assess).value,
    }
    if status is ToxStatus.DLT:
        out["time_to_dlt"] = rec.time_to_dlt
    return out


def state_to_document(state: TrialState) -> dict:
    """Observable snapshot plus the full event log."""
    cfg = state.config
    assess = cfg.efficacy_assess_months or cfg.dlt_window_months
    return {
        "schema_version": SCHEMA_VERSION,
        "config": config_to_dict(cfg),
        "patients": [
            _patient_to_dict(p, state.clock, cfg.dlt_window_months, assess)
            for p in state.patients
        ],
        "current_dose": state.current_dose,
        "phase": state.phase.value,
        "eliminated_doses": sorted(state.eliminated),
        "clock_months": state.clock,
        "mtd": state.mtd,
        "obd": state.obd,
        "events": list(state.events),
    }


def canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def validate_document(doc: dict) -> None:
    jsonschema.validate(doc, DOCUMENT_SCHEMA)


def replay(config: DesignConfig, events: list[dict]) -> TrialState:
    """Rebuild the state by folding the event log over a fresh trial."""
    state = new_trial(config)
    for event in events:
        apply_event(state, event)
    return state


def document_to_state(doc: dict, validate: bool = True) -> TrialState:
    """Load a document: replay its event log when present.

    Documents without events (hand-written snapshots fed to the CLI) build
    patient records directly from the patient list, trusting the recorded
    statuses as current knowledge.
    """
    if validate:
        validate_document(doc)
    config = config_from_dict(doc["config"])
    if doc["events"]:
        state = replay(config, doc["events"])
        if doc.get("clock_months", 0.0) > state.clock:
            apply_event(state, {"type": "clock", "time": doc["clock_months"]})
        return state
    state = new_trial(config)
    for p in doc["patients"]:
        rec = PatientRecord(
            id=p["id"],
            dose=p["dose"],
            origin=Origin(p["origin"]),
            enroll_time=p["enroll_time"],
            tox_status=ToxStatus(p["tox_status"]),
            time_to_dlt=p.get("time_to_dlt"),
            response_status=ResponseStatus(p["response_status"]),
        )
        if rec.tox_status is ToxStatus.DLT and rec.time_to_dlt is None:
            rec.time_to_dlt = 0.0
        state.patients.append(rec)
        if rec.origin is Origin.DOSE_ESCALATION:
            state.de_count += 1
    state.current_dose = doc["current_dose"]
    state.phase = Phase(doc["phase"])
    state.eliminated = set(doc["eliminated_doses"])
    state.clock = doc["clock_months"]
    state.mtd = doc["mtd"]
    state.obd = doc["obd"]
    state.cohort_remaining = 0
    return state
