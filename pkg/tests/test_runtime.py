import json
import queue

import pytest

from digit.audit import AuditLog, read_audit_log
from digit.datalake import SeriesKey
from digit.errors import ParseError
from digit.fixtures import grid4_dict
import digit.runtime as rt


@pytest.fixture()
def grid_config(tmp_path):
    grid = tmp_path / "grid4.json"
    grid.write_text(json.dumps(grid4_dict()))
    return rt.RunConfig(
        network=str(grid),
        seed=5,
        od_pairs=(("S1", "T2", 0.25), ("S2", "T1", 0.25)),
        demand_multipliers=tuple([1.0] * 288),
        train=rt.TrainConfig(hidden_dim=4, epochs=2, train_after_windows=10_000),
    )


def test_loop_ingests_and_syncs(grid_config):
    runtime = rt.Runtime(grid_config)
    runtime.run_windows(3)
    assert runtime.sim.clock == 3 * 300.0
    for sensor in runtime.net.sensors:
        recs = runtime.lake.query_range(sensor)
        assert [r.window_start for r in recs] == [0.0, 300.0, 600.0]
    state = runtime.twin.state()
    assert state.last_sync == 600.0
    runtime.twin.close()


def test_subscriber_receives_state_update_within_one_window(grid_config):
    runtime = rt.Runtime(grid_config)
    q = runtime.bus.subscribe()
    runtime.run_windows(1)
    events = []
    while True:
        try:
            events.append(q.get_nowait())
        except queue.Empty:
            break
    kinds = [e["event"] for e in events]
    assert "state_update" in kinds
    assert "new_aggregate" in kinds
    runtime.twin.close()


def test_latency_delays_ingestion(grid_config):
    grid_config.sensing = rt.SensingConfig(latency_s=300.0)
    runtime = rt.Runtime(grid_config)
    runtime.run_windows(1)
    assert runtime.lake.query_range("s-1") == []  # still in flight
    runtime.run_windows(1)
    recs = runtime.lake.query_range("s-1")
    assert [r.window_start for r in recs] == [0.0]
    runtime.twin.close()


def test_demand_shift_applies(grid_config):
    grid_config.demand_shift = (300.0, 4.0)
    runtime = rt.Runtime(grid_config)
    runtime.run_windows(2)
    assert runtime.sim.demand_scale == 4.0
    runtime.twin.close()


def test_persistent_outputs(tmp_path, grid_config):
    out = tmp_path / "run"
    grid_config.out_dir = str(out)
    runtime = rt.Runtime(grid_config)
    runtime.run_windows(2)
    runtime.stop()
    lines = (out / "aggregates.jsonl").read_text().strip().splitlines()
    assert len(lines) == 2 * len(runtime.net.sensors)


# -- config loading ---------------------------------------------------------------


def test_load_config_rejects_missing_network(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"network": "nope.json"}))
    with pytest.raises(ParseError):
        rt.load_config(cfg)


def test_load_config_round_trip(tmp_path):
    grid = tmp_path / "grid4.json"
    grid.write_text(json.dumps(grid4_dict()))
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "network": "grid4.json",
        "seed": 9,
        "demand": {"od": [["S1", "T2", 0.1]], "scale": 2.0,
                   "shift": {"at_s": 600, "factor": 1.5}},
        "sensing": {"noise_sigma": 0.5, "p_drop": 0.01, "latency_s": 300},
        "drift": {"window_size": 12, "kappa": 2.0},
        "train": {"hidden_dim": 8, "epochs": 5},
        "serve": {"host": "127.0.0.1", "port": 9999, "pace": 0},
        "duration_s": 3600,
    }))
    config = rt.load_config(cfg)
    assert config.seed == 9
    assert config.demand().od_pairs == (("S1", "T2", 0.2),)  # rate x scale
    assert config.demand_shift == (600.0, 1.5)
    assert config.drift.window_size == 12
    assert config.port == 9999


# -- audit log ----------------------------------------------------------------------


def test_audit_append_and_read(tmp_path):
    path = tmp_path / "audit.jsonl"
    log = AuditLog(str(path))
    log.append(1.0, "drift", {"key": "s-1:flow"})
    log.append(2.0, "promote", {"key": "s-1:flow", "version": 2})
    log.close()
    entries = read_audit_log(path)
    assert [e["event"] for e in entries] == ["drift", "promote"]


def test_audit_rejects_unknown_event():
    log = AuditLog()
    with pytest.raises(ValueError):
        log.append(0.0, "party", {})


def test_audit_malformed_line_names_lineno(tmp_path):
    path = tmp_path / "audit.jsonl"
    path.write_text('{"t": 1, "event": "drift", "detail": {}}\nnot json\n')
    with pytest.raises(ValueError) as err:
        read_audit_log(path)
    assert "line 2" in str(err.value)
