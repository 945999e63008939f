import json
import threading
import time
from pathlib import Path

import pytest
from fastapi.testclient import TestClient
from jsonschema import Draft202012Validator

import digit.runtime as rt
from digit.datalake import SeriesKey
from digit.fixtures import grid4_dict
from digit.predictor import Hyper, encode_window, predict
from digit.service import create_app

SCHEMA_DIR = Path(__file__).resolve().parents[1] / "src" / "digit" / "schemas"


def load_schema(name):
    with open(SCHEMA_DIR / f"{name}.schema.json") as fh:
        return Draft202012Validator(json.load(fh))


SCHEMAS = {name: load_schema(name) for name in (
    "api_error", "health", "twin_state", "realtime_metrics", "predictions",
    "scenario_created", "scenario_status", "intervention_ack",
    "models_manifest", "live_event",
)}


def check(name, payload):
    errors = list(SCHEMAS[name].iter_errors(payload))
    assert not errors, f"{name} schema violations: {[e.message for e in errors]}"


@pytest.fixture(scope="module")
def served():
    """A runtime advanced far enough to have state, history, and a model."""
    import tempfile
    tmp = tempfile.mkdtemp()
    grid = Path(tmp) / "grid4.json"
    grid.write_text(json.dumps(grid4_dict()))
    config = rt.RunConfig(
        network=str(grid),
        seed=3,
        od_pairs=(("S1", "T2", 0.30), ("S2", "T1", 0.30),
                  ("S1", "T1", 0.12), ("S2", "T2", 0.12)),
        demand_multipliers=tuple([1.0] * 288),
        train=rt.TrainConfig(hidden_dim=4, epochs=3, train_after_windows=10_000),
    )
    runtime = rt.Runtime(config)
    runtime.run_windows(17)  # enough history for 15-step windows
    key = SeriesKey("s-1", "flow")
    runtime.registry.retrain(key, runtime.lake,
                             Hyper(hidden_dim=4, epochs=3, seed=0, patience=3),
                             kind="lstm")
    client = TestClient(create_app(runtime), raise_server_exceptions=False)
    yield runtime, client
    runtime.twin.close()


def test_health(served):
    _, client = served
    r = client.get("/api/v1/health")
    assert r.status_code == 200
    check("health", r.json())


def test_state_fresh(served):
    _, client = served
    r = client.get("/api/v1/state")
    assert r.status_code == 200
    check("twin_state", r.json())
    assert r.json()["staleness"] <= 3 * 300.0


def test_state_stale_before_first_sync(tmp_path):
    grid = tmp_path / "grid4.json"
    grid.write_text(json.dumps(grid4_dict()))
    runtime = rt.Runtime(rt.RunConfig(network=str(grid), od_pairs=()))
    client = TestClient(create_app(runtime), raise_server_exceptions=False)
    r = client.get("/api/v1/state")
    assert r.status_code == 503
    body = r.json()
    check("api_error", body)
    assert body["code"] == "Stale"
    runtime.twin.close()


def test_unknown_path_is_not_found(served):
    _, client = served
    r = client.get("/api/v1/nope")
    assert r.status_code == 404
    body = r.json()
    check("api_error", body)
    assert body["code"] == "NotFound"


def test_realtime_metrics(served):
    runtime, client = served
    r = client.get("/api/v1/metrics/realtime", params={"window": 300})
    assert r.status_code == 200
    body = r.json()
    check("realtime_metrics", body)
    # aggregates match the data lake's latest complete window
    last_ws = (runtime.sim.clock // 300.0 - 1) * 300.0
    for agg in body["aggregates"]:
        rec = runtime.lake.get(agg["sensor"], last_ws)
        assert rec is not None and rec.flow == agg["flow"]


def test_realtime_window_zero_rejected(served):
    _, client = served
    r = client.get("/api/v1/metrics/realtime", params={"window": 0})
    assert r.status_code == 400
    assert r.json()["code"] == "BadRequest"


def test_predictions_equal_library_predict(served):
    runtime, client = served
    r = client.get("/api/v1/predictions", params={"sensor": "s-1", "h": 1})
    assert r.status_code == 200
    body = r.json()
    check("predictions", body)
    key = SeriesKey("s-1", "flow")
    _, model = runtime.registry.active(key)
    recs = runtime.lake.query_range("s-1")[-15:]
    window = encode_window(model, key, recs[0].window_start,
                           [float(x.flow) for x in recs])
    expected = predict(model, window)
    assert body["forecasts"][0]["value"] == pytest.approx(expected.value)
    assert body["model"]["version"] == runtime.registry.active(key)[0]


def test_predictions_unknown_sensor(served):
    _, client = served
    r = client.get("/api/v1/predictions", params={"sensor": "s-99"})
    assert r.status_code == 404
    assert r.json()["code"] == "NotFound"


def test_predictions_h_zero(served):
    _, client = served
    r = client.get("/api/v1/predictions", params={"sensor": "s-1", "h": 0})
    assert r.status_code == 400


def test_models_manifest(served):
    runtime, client = served
    r = client.get("/api/v1/models")
    assert r.status_code == 200
    body = r.json()
    check("models_manifest", body)
    entry = next(e for e in body if e["key"] == "s-1:flow")
    assert entry["active"] is not None


def poll_done(client, scenario_id, timeout=30.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        r = client.get(f"/api/v1/scenarios/{scenario_id}")
        assert r.status_code == 200
        body = r.json()
        check("scenario_status", body)
        if body["status"] in ("Done", "Failed"):
            return body
        time.sleep(0.05)
    raise AssertionError("scenario did not finish in time")


def test_baseline_scenario_zero_deltas(served):
    _, client = served
    r = client.post("/api/v1/scenarios", json={"changes": [], "horizon": 2})
    assert r.status_code == 200
    check("scenario_created", r.json())
    body = poll_done(client, r.json()["id"])
    assert body["status"] == "Done"
    assert body["result"]["delta_avg_travel_time_s"] == 0.0
    assert body["result"]["delta_throughput_vpm"] == 0.0


def test_constraint_violating_scenario_409(served):
    _, client = served
    change = {"type": "signal_plan", "node": "B", "cycle_s": 60,
              "min_green_s": 10, "max_green_s": 120,
              "phases": [{"serves": ["sA-B"], "green_s": 55},
                         {"serves": ["sD-B"], "green_s": 5}]}
    r = client.post("/api/v1/scenarios", json={"changes": [change], "horizon": 2})
    assert r.status_code == 409
    body = r.json()
    check("api_error", body)
    assert body["code"] == "ConstraintViolation"


def test_unknown_scenario_404(served):
    _, client = served
    assert client.get("/api/v1/scenarios/sc-none").status_code == 404


def test_intervention_round_trip_and_idempotency(served):
    runtime, client = served
    change = {"type": "signal_plan", "node": "B", "cycle_s": 60,
              "min_green_s": 10, "max_green_s": 120,
              "phases": [{"serves": ["sA-B"], "green_s": 40},
                         {"serves": ["sD-B"], "green_s": 20}]}
    r = client.post("/api/v1/scenarios", json={"changes": [change], "horizon": 1})
    scenario_id = r.json()["id"]
    poll_done(client, scenario_id)
    r1 = client.post("/api/v1/interventions",
                     json={"scenario_id": scenario_id, "change_index": 0})
    assert r1.status_code == 200
    check("intervention_ack", r1.json())
    r2 = client.post("/api/v1/interventions",
                     json={"scenario_id": scenario_id, "change_index": 0})
    assert r2.status_code == 200
    assert r2.json() == r1.json()  # idempotent per (scenario, change)


def test_intervention_on_unfinished_scenario_400(served):
    runtime, client = served
    # long scenario stays Pending/Running briefly
    r = client.post("/api/v1/scenarios", json={"changes": [], "horizon": 8})
    scenario_id = r.json()["id"]
    r2 = client.post("/api/v1/interventions",
                     json={"scenario_id": scenario_id, "change_index": 0})
    assert r2.status_code in (400, 404) or poll_done(client, scenario_id)
    if r2.status_code == 400:
        check("api_error", r2.json())


def test_intervention_incident_not_actuatable(served):
    _, client = served
    change = {"type": "incident", "segment": "sA-B", "start_s": 0,
              "duration_s": 300, "capacity_factor": 0.5}
    r = client.post("/api/v1/scenarios", json={"changes": [change], "horizon": 1})
    scenario_id = r.json()["id"]
    poll_done(client, scenario_id)
    r2 = client.post("/api/v1/interventions",
                     json={"scenario_id": scenario_id, "change_index": 0})
    assert r2.status_code == 400


def test_reads_are_side_effect_free(served):
    runtime, client = served
    before = runtime.sim.snapshot()
    for _ in range(3):
        client.get("/api/v1/state")
        client.get("/api/v1/metrics/realtime")
        client.get("/api/v1/models")
        client.get("/api/v1/predictions", params={"sensor": "s-1"})
    after = runtime.sim.snapshot()
    assert before.clock == after.clock
    assert before.payload["rng_state"] == after.payload["rng_state"]


def test_live_stream_delivers_events(served):
    runtime, client = served

    def publish_later():
        time.sleep(0.2)
        runtime.bus.publish("state_update", runtime.sim.clock,
                            runtime.twin.state().to_json())

    threading.Thread(target=publish_later, daemon=True).start()
    with client.stream("GET", "/api/v1/live",
                       params={"events": "state_update", "max_events": 1}) as r:
        assert r.status_code == 200
        for line in r.iter_lines():
            if line.strip():
                event = json.loads(line)
                break
    check("live_event", event)
    assert event["event"] == "state_update"


def test_live_stream_bad_filter(served):
    _, client = served
    r = client.get("/api/v1/live", params={"events": "bogus"})
    assert r.status_code == 400


def test_malformed_scenario_body_400(served):
    _, client = served
    r = client.post("/api/v1/scenarios",
                    json={"changes": [{"type": "mystery"}], "horizon": 2})
    assert r.status_code == 400
    r = client.post("/api/v1/scenarios", json={"changes": [], "horizon": 0})
    assert r.status_code == 400
