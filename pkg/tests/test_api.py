"""HTTP trial-conduct service: lifecycle, concurrency, persistence, jobs."""

import json
import time as time_mod

import pytest
from fastapi.testclient import TestClient

from beboin.api import SNAPSHOT_EVERY, create_app
from beboin.core import DesignConfig
from beboin.document import canonical_json, validate_document
from beboin.sim import load_scenario, oc_to_dict, run_oc
from beboin.tablegen import generate_table, render_csv

BASE_CONFIG = {"num_doses": 3, "phi": 0.25, "cohort_size": 3, "n_stage1": 12}


@pytest.fixture()
def data_dir(tmp_path):
    return tmp_path / "trials"


@pytest.fixture()
def client(data_dir):
    with TestClient(create_app(data_dir)) as c:
        yield c


def make_trial(client, **overrides):
    resp = client.post("/trials", json={"config": {**BASE_CONFIG, **overrides}})
    assert resp.status_code == 201, resp.text
    return resp.json()["trial_id"]


def enroll(client, trial_id, t, dose, origin, pid=None, expect=201):
    body = {"enroll_time": t, "dose": dose, "origin": origin}
    if pid is not None:
        body["patient_id"] = pid
    resp = client.post(f"/trials/{trial_id}/patients", json=body)
    assert resp.status_code == expect, resp.text
    return resp.json()


def outcome(client, trial_id, pid, t, tox=None, time_to_dlt=None, response=None,
            expect=200):
    body = {"patient_id": pid, "time": t}
    if tox is not None:
        body["tox_status"] = tox
    if time_to_dlt is not None:
        body["time_to_dlt"] = time_to_dlt
    if response is not None:
        body["response_status"] = response
    resp = client.post(f"/trials/{trial_id}/outcomes", json=body)
    assert resp.status_code == expect, resp.text
    return resp.json()


def clean_cohort(client, trial_id, dose, t0, pids):
    """Enroll a cohort at `dose` and resolve everyone DLT-free."""
    for pid in pids:
        enroll(client, trial_id, t0, dose, "dose_escalation", pid=pid)
    for pid in pids:
        outcome(client, trial_id, pid, t0 + 3.0, tox="no_dlt",
                response="response")


# --------------------------------------------------------------------------
# trial creation and retrieval


def test_create_and_fetch_trial(client):
    resp = client.post("/trials", json={"config": BASE_CONFIG})
    assert resp.status_code == 201
    body = resp.json()
    assert body["version"] == 0
    assert body["phase"] == "stage_one_accruing"
    validate_document(body["document"])
    assert len(body["summaries"]) == 3
    assert body["summaries"][0]["n"] == 0

    again = client.get(f"/trials/{body['trial_id']}")
    assert again.status_code == 200
    assert again.json() == body


def test_create_trial_field_level_errors(client):
    resp = client.post("/trials", json={"config": {**BASE_CONFIG, "phi": 1.5,
                                                   "cohort_size": 0}})
    assert resp.status_code == 400
    detail = resp.json()["detail"]
    fields = {entry["field"] for entry in detail}
    assert {"phi", "cohort_size"} <= fields
    for entry in detail:
        assert entry["message"].startswith(entry["field"])


def test_create_trial_unknown_field(client):
    resp = client.post("/trials", json={"config": {**BASE_CONFIG, "bogus": 1}})
    assert resp.status_code == 400
    assert "bad config field" in resp.json()["detail"]


def test_unknown_trial_404(client):
    assert client.get("/trials/nope").status_code == 404
    assert client.post("/trials/nope/patients", json={}).status_code == 404
    assert client.post("/trials/nope/outcomes", json={}).status_code == 404
    assert client.get("/trials/nope/decision").status_code == 404
    assert client.post("/trials/nope/advance", json={}).status_code == 404
    assert client.get("/trials/nope/selection").status_code == 404


# --------------------------------------------------------------------------
# enrollment


def test_enroll_explicit_and_auto(client):
    trial_id = make_trial(client)
    body = enroll(client, trial_id, 0.0, 1, "dose_escalation", pid="p001")
    assert body["version"] == 1
    assert body["patient_id"] == "p001"
    assert body["routing"] is None

    resp = client.post(f"/trials/{trial_id}/patients",
                       json={"enroll_time": 0.5})
    assert resp.status_code == 201
    body = resp.json()
    assert body["dose"] == 1
    assert body["origin"] == "dose_escalation"
    assert body["routing"]["kind"] == "dose_escalation"
    assert body["patient_id"] == "p2"
    assert body["version"] == 2


def test_enroll_validation_errors(client):
    trial_id = make_trial(client)
    resp = client.post(f"/trials/{trial_id}/patients",
                       json={"enroll_time": 0.0, "dose": 1})
    assert resp.status_code == 400
    assert "origin is required" in resp.json()["detail"]

    resp = client.post(f"/trials/{trial_id}/patients", json={"dose": 1})
    assert resp.status_code == 400
    assert "enroll_time must be a number" in resp.json()["detail"]

    resp = client.post(f"/trials/{trial_id}/patients",
                       json={"enroll_time": 0.0, "patient_id": 7})
    assert resp.status_code == 400
    assert "patient_id must be a string" in resp.json()["detail"]


def test_enroll_domain_violation_422(client):
    trial_id = make_trial(client)
    resp = client.post(
        f"/trials/{trial_id}/patients",
        json={"enroll_time": 0.0, "dose": 9, "origin": "dose_escalation"},
    )
    assert resp.status_code == 422
    assert "dose must be in 1..3" in resp.json()["detail"]


def test_full_cohort_turns_arrivals_away(client):
    trial_id = make_trial(client)
    for t in (0.0, 0.1, 0.2):
        client.post(f"/trials/{trial_id}/patients", json={"enroll_time": t})
    resp = client.post(f"/trials/{trial_id}/patients", json={"enroll_time": 0.3})
    assert resp.status_code == 409
    detail = resp.json()["detail"]
    assert detail["message"].startswith("no open slot")
    assert detail["routing"]["kind"] == "turned_away"
    assert detail["routing"]["reason"] == "no_eligible_backfill"


def test_version_conflict_on_enroll(client):
    trial_id = make_trial(client)
    enroll(client, trial_id, 0.0, 1, "dose_escalation")
    resp = client.post(
        f"/trials/{trial_id}/patients",
        json={"enroll_time": 0.1, "version": 0},
    )
    assert resp.status_code == 409
    assert "version conflict" in resp.json()["detail"]

    resp = client.post(
        f"/trials/{trial_id}/patients",
        json={"enroll_time": 0.1},
        headers={"If-Match": '"0"'},
    )
    assert resp.status_code == 409

    resp = client.post(
        f"/trials/{trial_id}/patients",
        json={"enroll_time": 0.1},
        headers={"If-Match": "latest"},
    )
    assert resp.status_code == 400

    resp = client.post(
        f"/trials/{trial_id}/patients",
        json={"enroll_time": 0.1, "version": 1},
    )
    assert resp.status_code == 201


# --------------------------------------------------------------------------
# outcomes


def test_outcome_validation(client):
    trial_id = make_trial(client)
    enroll(client, trial_id, 0.0, 1, "dose_escalation", pid="p001")

    resp = client.post(f"/trials/{trial_id}/outcomes",
                       json={"patient_id": "p001", "time": 1.0})
    assert resp.status_code == 400
    assert "at least one of" in resp.json()["detail"]

    resp = client.post(f"/trials/{trial_id}/outcomes",
                       json={"patient_id": "p001", "tox_status": "dlt"})
    assert resp.status_code == 400  # missing time

    resp = client.post(
        f"/trials/{trial_id}/outcomes",
        json={"patient_id": "p001", "time": 1.0, "tox_status": "dlt"},
    )
    assert resp.status_code == 400
    assert "time_to_dlt must be a number" in resp.json()["detail"]

    resp = client.post(
        f"/trials/{trial_id}/outcomes",
        json={"patient_id": "ghost", "time": 1.0, "tox_status": "no_dlt"},
    )
    assert resp.status_code == 404

    # domain rule: no_dlt only after the observation window closes
    resp = client.post(
        f"/trials/{trial_id}/outcomes",
        json={"patient_id": "p001", "time": 1.0, "tox_status": "no_dlt"},
    )
    assert resp.status_code == 422
    assert "window closes" in resp.json()["detail"]


def test_outcome_moves_clock_and_double_resolution_409_free(client):
    trial_id = make_trial(client)
    enroll(client, trial_id, 0.0, 1, "dose_escalation", pid="p001")
    body = outcome(client, trial_id, "p001", 1.25, tox="dlt", time_to_dlt=0.75)
    assert body["clock"] == 1.25
    assert body["summaries"][0]["dlt_observed"] == 1
    # resolving toxicity twice is a state violation
    resp = client.post(
        f"/trials/{trial_id}/outcomes",
        json={"patient_id": "p001", "time": 2.0, "tox_status": "no_dlt"},
    )
    assert resp.status_code == 422
    assert "already resolved" in resp.json()["detail"]


# --------------------------------------------------------------------------
# decisions over HTTP


def test_decision_mid_cohort_not_due(client):
    trial_id = make_trial(client)
    enroll(client, trial_id, 0.0, 1, "dose_escalation")
    resp = client.get(f"/trials/{trial_id}/decision")
    assert resp.status_code == 200
    body = resp.json()
    assert body["due"] is False
    assert body["verdict"] is None
    assert body["decision_event"] is None
    assert body["trace"] == []
    assert body["routing_preview"]["kind"] == "dose_escalation"


def test_decision_at_parameter_validation(client):
    trial_id = make_trial(client)
    enroll(client, trial_id, 2.0, 1, "dose_escalation")
    resp = client.get(f"/trials/{trial_id}/decision", params={"at": "soon"})
    assert resp.status_code == 400
    resp = client.get(f"/trials/{trial_id}/decision", params={"at": "1.0"})
    assert resp.status_code == 400
    assert "before the trial clock" in resp.json()["detail"]
    resp = client.get(f"/trials/{trial_id}/decision", params={"at": "2.5"})
    assert resp.status_code == 200
    assert resp.json()["at"] == 2.5


def test_escalation_decision_with_late_onset_gating(client):
    """One DLT in six, last patient still in follow-up: the call flips from
    suspend to escalate purely by letting follow-up accumulate."""
    trial_id = make_trial(client)
    for pid in ("p1", "p2", "p3"):
        enroll(client, trial_id, 0.0, 1, "dose_escalation", pid=pid)
    outcome(client, trial_id, "p1", 1.0, tox="dlt", time_to_dlt=1.0)
    outcome(client, trial_id, "p2", 3.0, tox="no_dlt")
    outcome(client, trial_id, "p3", 3.0, tox="no_dlt")
    # 1/3 observed exceeds the de-escalation boundary; at the bottom of the
    # ladder that becomes a stay
    resp = client.post(f"/trials/{trial_id}/advance",
                       json={"accept_decision": True})
    assert resp.status_code == 200
    assert resp.json()["verdict"] == "stay"
    assert resp.json()["target_dose"] == 1

    for pid, t in (("p4", 3.0), ("p5", 3.0), ("p6", 5.31)):
        enroll(client, trial_id, t, 1, "dose_escalation", pid=pid)
    outcome(client, trial_id, "p4", 6.0, tox="no_dlt")
    outcome(client, trial_id, "p5", 6.0, tox="no_dlt")

    # p6 has 23% of the window: escalation is indicated but gated
    early = client.get(f"/trials/{trial_id}/decision", params={"at": "6.0"}).json()
    assert early["due"] is True
    assert early["verdict"] == "suspend"
    assert early["suspend_reason"] == "rule_2_insufficient_followup"
    assert early["target_dose"] is None
    steps = [t["step"] for t in early["trace"]]
    assert "imputed_rate_check" in steps
    assert "suspension_rule_2" in steps
    dose1 = early["summaries"][0]
    assert (dose1["n"], dose1["dlt_observed"], dose1["pending"]) == (6, 1, 1)
    assert dose1["mf"] == pytest.approx(0.23, abs=1e-9)

    # at 26% follow-up both gates clear and the same state escalates
    late = client.get(f"/trials/{trial_id}/decision", params={"at": "6.1"}).json()
    assert late["verdict"] == "escalate"
    assert late["target_dose"] == 2
    assert late["suspend_reason"] is None
    assert late["decision_event"]["verdict"] == "escalate"


def test_backfill_conflict_resolved_by_pooling(client):
    """Backfilled dose 1 turns toxic while dose 2 looks clean: pooled
    estimate lands in the stay band, so the trial holds at dose 2."""
    trial_id = make_trial(client)
    clean_cohort(client, trial_id, 1, 0.0, ("p1", "p2", "p3"))
    resp = client.post(f"/trials/{trial_id}/advance",
                       json={"accept_decision": True})
    assert resp.json()["verdict"] == "escalate"
    assert resp.json()["current_dose"] == 2

    for pid in ("p4", "p5", "p6"):
        enroll(client, trial_id, 3.0, 2, "dose_escalation", pid=pid)
    # dose 1 is backfill-eligible: safe so far, responses seen, under cap
    b1 = enroll(client, trial_id, 3.1, 1, "backfill", pid="b1")
    assert b1["origin"] == "backfill"
    enroll(client, trial_id, 3.2, 1, "backfill", pid="b2")
    outcome(client, trial_id, "b1", 3.6, tox="dlt", time_to_dlt=0.5)
    outcome(client, trial_id, "b2", 3.7, tox="dlt", time_to_dlt=0.5)
    for pid in ("p4", "p5", "p6"):
        outcome(client, trial_id, pid, 6.0, tox="no_dlt")

    body = client.get(f"/trials/{trial_id}/decision").json()
    assert body["due"] is True
    assert body["verdict"] == "stay"
    assert body["target_dose"] == 2
    assert body["pooled_estimate"] == pytest.approx(0.25, abs=1e-12)
    report = body["conflict_report"]
    assert report["conflict"] is True
    assert report["b_star"] == 1
    assert report["current_class"] == "escalate_class"
    assert report["backfilled_classes"] == [[1, "de_escalate_class"]]
    assert report["conflicting_doses"] == [1]
    steps = [t["step"] for t in body["trace"]]
    assert steps[:3] == ["elimination_check", "conflict_detection",
                         "conflict_resolution"]


def test_backfill_requires_eligibility(client):
    trial_id = make_trial(client)
    clean_cohort(client, trial_id, 1, 0.0, ("p1", "p2", "p3"))
    client.post(f"/trials/{trial_id}/advance", json={"accept_decision": True})
    # dose 2 is the current dose: not a backfill target
    resp = client.post(
        f"/trials/{trial_id}/patients",
        json={"enroll_time": 3.1, "dose": 2, "origin": "backfill"},
    )
    assert resp.status_code == 422
    assert "below the current dose" in resp.json()["detail"]


# --------------------------------------------------------------------------
# advancing


def test_advance_requires_instruction(client):
    trial_id = make_trial(client)
    resp = client.post(f"/trials/{trial_id}/advance", json={})
    assert resp.status_code == 400

    due_id = make_trial(client)
    clean_cohort(client, due_id, 1, 0.0, ("p1", "p2", "p3"))
    resp = client.post(f"/trials/{due_id}/advance",
                       json={"accept_decision": False})
    assert resp.status_code == 400
    assert "must be true or an object" in resp.json()["detail"]

    resp = client.post(f"/trials/{trial_id}/advance",
                       json={"advance_clock": 1.5})
    assert resp.status_code == 200
    assert resp.json()["clock"] == 1.5
    assert resp.json()["version"] == 1


def test_advance_when_not_due_409(client):
    trial_id = make_trial(client)
    enroll(client, trial_id, 0.0, 1, "dose_escalation")
    resp = client.post(f"/trials/{trial_id}/advance",
                       json={"accept_decision": True})
    assert resp.status_code == 409
    assert "no dose-transition decision is due" in resp.json()["detail"]


def test_accepting_a_stale_decision_409(client):
    trial_id = make_trial(client)
    clean_cohort(client, trial_id, 1, 0.0, ("p1", "p2", "p3"))
    resp = client.post(
        f"/trials/{trial_id}/advance",
        json={"accept_decision": {"verdict": "stay", "target_dose": 1}},
    )
    assert resp.status_code == 409
    detail = resp.json()["detail"]
    assert "stale" in detail["message"]
    assert detail["current"] == {"verdict": "escalate", "target_dose": 2}

    resp = client.post(
        f"/trials/{trial_id}/advance",
        json={"accept_decision": {"verdict": "escalate", "target_dose": 2}},
    )
    assert resp.status_code == 200
    assert resp.json()["current_dose"] == 2
    assert resp.json()["applied"]["type"] == "decision"


def test_advance_version_conflict(client):
    trial_id = make_trial(client)
    clean_cohort(client, trial_id, 1, 0.0, ("p1", "p2", "p3"))
    resp = client.post(
        f"/trials/{trial_id}/advance",
        json={"accept_decision": True, "version": 2},
    )
    assert resp.status_code == 409
    assert "version conflict" in resp.json()["detail"]


# --------------------------------------------------------------------------
# whole-trial lifecycle and selection


def test_lifecycle_through_selection(client):
    trial_id = make_trial(client, num_doses=2, cohort_size=1, n_stage1=2,
                          stage2_per_arm=1)
    sel = client.get(f"/trials/{trial_id}/selection")
    assert sel.status_code == 409  # undefined while stage I runs

    enroll(client, trial_id, 0.0, 1, "dose_escalation", pid="p1")
    outcome(client, trial_id, "p1", 3.0, tox="no_dlt", response="response")
    body = client.post(f"/trials/{trial_id}/advance",
                       json={"accept_decision": True}).json()
    assert body["verdict"] == "escalate" and body["current_dose"] == 2

    auto = client.post(f"/trials/{trial_id}/patients",
                       json={"enroll_time": 3.0}).json()
    assert auto["dose"] == 2
    body = outcome(client, trial_id, auto["patient_id"], 6.0, tox="no_dlt",
                   response="response")
    assert body["phase"] == "stage_two"

    resp = client.get(f"/trials/{trial_id}/decision")
    assert resp.status_code == 409  # dose-transition machinery is closed

    sel = client.get(f"/trials/{trial_id}/selection").json()
    assert sel["phase"] == "stage_two"
    assert sel["mtd"] == 2
    assert sel["fit"]["fitted"] == [0.0, 0.0]

    enroll(client, trial_id, 6.0, 2, "stage_two", pid="s-high")
    enroll(client, trial_id, 6.0, 1, "stage_two", pid="s-low")
    resp = client.post(
        f"/trials/{trial_id}/patients",
        json={"enroll_time": 6.0, "dose": 2, "origin": "stage_two"},
    )
    assert resp.status_code == 422
    assert "full" in resp.json()["detail"]

    outcome(client, trial_id, "s-high", 9.0, tox="no_dlt",
            response="no_response")
    body = outcome(client, trial_id, "s-low", 9.0, tox="no_dlt",
                   response="response")
    assert body["phase"] == "completed"

    sel = client.get(f"/trials/{trial_id}/selection").json()
    assert sel["phase"] == "completed"
    assert sel["mtd"] == 2
    assert sel["obd"] == 1
    utils = {u["dose"]: u["utility"] for u in sel["utilities"]}
    assert utils[1] > utils[2]

    resp = client.post(f"/trials/{trial_id}/patients",
                       json={"enroll_time": 9.0})
    assert resp.status_code == 409
    assert "completed" in resp.json()["detail"]


# --------------------------------------------------------------------------
# persistence: crash replay and snapshots


def test_restart_rebuilds_identical_state(client, data_dir):
    trial_id = make_trial(client)
    clean_cohort(client, trial_id, 1, 0.0, ("p1", "p2", "p3"))
    client.post(f"/trials/{trial_id}/advance", json={"accept_decision": True})
    before = client.get(f"/trials/{trial_id}").json()

    with TestClient(create_app(data_dir)) as reborn:
        after = reborn.get(f"/trials/{trial_id}").json()
    assert after["version"] == before["version"] == 7
    assert canonical_json(after["document"]) == canonical_json(before["document"])
    assert after == before


def test_snapshot_written_and_stale_snapshot_ignored(client, data_dir):
    trial_id = make_trial(client)
    for k in range(SNAPSHOT_EVERY):
        resp = client.post(f"/trials/{trial_id}/advance",
                           json={"advance_clock": 0.1 * (k + 1)})
        assert resp.status_code == 200
    snap_path = data_dir / trial_id / "snapshot.json"
    assert snap_path.exists()
    snap = json.loads(snap_path.read_text())
    assert snap["version"] == SNAPSHOT_EVERY

    # one more mutation leaves the snapshot behind the log; a restart must
    # fall back to replay rather than trust it
    client.post(f"/trials/{trial_id}/advance",
                json={"advance_clock": 0.1 * (SNAPSHOT_EVERY + 1)})
    with TestClient(create_app(data_dir)) as reborn:
        body = reborn.get(f"/trials/{trial_id}").json()
    assert body["version"] == SNAPSHOT_EVERY + 1
    assert body["document"]["clock_months"] == pytest.approx(
        0.1 * (SNAPSHOT_EVERY + 1))


# --------------------------------------------------------------------------
# decision table endpoint


def test_decision_table_json(client):
    resp = client.get("/decision-table")
    assert resp.status_code == 200
    body = resp.json()
    assert body["phi"] == 0.25
    assert body["lambda_e"] == pytest.approx(0.19680087055548712, abs=1e-15)
    assert body["lambda_d"] == pytest.approx(0.2983921523754597, abs=1e-15)
    assert len(body["rows"]) == 25


def test_decision_table_csv_and_errors(client):
    resp = client.get("/decision-table", params={"format": "csv"})
    assert resp.status_code == 200
    cfg = DesignConfig(num_doses=1, phi=0.25, cohort_size=3, n_stage1=9)
    assert resp.text == render_csv(generate_table(cfg, n_max=9))

    assert client.get("/decision-table", params={"format": "md"}).status_code == 200
    assert client.get("/decision-table", params={"format": "xml"}).status_code == 400
    resp = client.get("/decision-table", params={"phi": 1.5})
    assert resp.status_code == 400
    assert resp.json()["detail"][0]["field"] == "phi"


# --------------------------------------------------------------------------
# simulation jobs


def poll_job(client, job_id, timeout=120.0):
    deadline = time_mod.monotonic() + timeout
    while time_mod.monotonic() < deadline:
        resp = client.get(f"/simulations/{job_id}")
        if resp.status_code != 202:
            return resp
        time_mod.sleep(0.1)
    raise AssertionError("simulation job did not finish in time")


def test_simulation_job_lifecycle(client):
    resp = client.post(
        "/simulations",
        json={"scenario": "1", "reps": 3, "seed": 7,
              "config": {"n_stage1": 9, "stage2_per_arm": 3}},
    )
    assert resp.status_code == 202
    job_id = resp.json()["job_id"]

    resp = poll_job(client, job_id)
    assert resp.status_code == 200
    body = resp.json()
    assert body["status"] == "done"

    cfg = DesignConfig(num_doses=5, phi=0.25, cohort_size=3, n_stage1=9,
                       stage2_per_arm=3)
    expected = oc_to_dict(run_oc(cfg, load_scenario("1"), "be-boin",
                                 replicates=3, seed=7))
    assert body["result"] == json.loads(json.dumps(expected))


def test_simulation_request_validation(client):
    assert client.post("/simulations", json={}).status_code == 400
    assert client.post("/simulations",
                       json={"scenario": "no-such"}).status_code == 404
    assert client.post("/simulations",
                       json={"scenario": "1", "mode": "crm"}).status_code == 400
    assert client.post("/simulations",
                       json={"scenario": "1", "reps": 0}).status_code == 400
    assert client.post("/simulations",
                       json={"scenario": "1", "seed": "x"}).status_code == 400
    assert client.post("/simulations",
                       json={"scenario": "1", "config": {"zap": 1}}).status_code == 400
    assert client.get("/simulations/missing").status_code == 404
