import json
import os
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

import httpx
import numpy as np
import pytest

from digit.audit import read_audit_log
from digit.datalake import DataLake, Normalization, SeriesKey, make_dataset
from digit.fixtures import grid4_dict, synthetic_flow_records
from digit.predictor import (
    EvalMetrics,
    Hyper,
    TrainedModel,
    evaluate,
    load_checkpoint,
    save_checkpoint,
)

CLI = [sys.executable, "-m", "digit.cli"]


def run_cli(*args, **kw):
    return subprocess.run([*CLI, *args], capture_output=True, text=True,
                          timeout=kw.pop("timeout", 300), **kw)


def write_config(tmp_path, **overrides):
    grid = tmp_path / "grid4.json"
    grid.write_text(json.dumps(grid4_dict()))
    doc = {
        "network": "grid4.json",
        "seed": 11,
        "demand": {"od": [["S1", "T2", 0.25], ["S2", "T1", 0.25]],
                   "multipliers": [1.0] * 288},
    }
    doc.update(overrides)
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(doc))
    return cfg


def write_training_data(tmp_path, days=2, seed=3):
    data = tmp_path / "data"
    data.mkdir(exist_ok=True)
    with open(data / "aggregates.jsonl", "w") as fh:
        for rec in synthetic_flow_records(days=days, seed=seed):
            fh.write(rec.to_wire() + "\n")
    return data


# -- simulate ------------------------------------------------------------------------


def test_simulate_day_produces_288_windows_per_sensor(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    r = run_cli("simulate", "--config", str(cfg), "--days", "1", "--out", str(out))
    assert r.returncode == 0, r.stderr
    lines = (out / "aggregates.jsonl").read_text().strip().splitlines()
    assert len(lines) == 288 * 6  # windows x sensors
    assert (out / "exits.jsonl").exists()


def test_simulate_reproducible_byte_for_byte(tmp_path):
    cfg = write_config(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert run_cli("simulate", "--config", str(cfg), "--days", "0.05",
                   "--out", str(out_a)).returncode == 0
    assert run_cli("simulate", "--config", str(cfg), "--days", "0.05",
                   "--out", str(out_b)).returncode == 0
    assert (out_a / "aggregates.jsonl").read_bytes() == \
           (out_b / "aggregates.jsonl").read_bytes()
    assert (out_a / "exits.jsonl").read_bytes() == (out_b / "exits.jsonl").read_bytes()


def test_simulate_bad_config_fails(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text("{")
    r = run_cli("simulate", "--config", str(cfg), "--days", "1",
                "--out", str(tmp_path / "x"))
    assert r.returncode != 0
    assert r.stderr.strip()


# -- train / evaluate -----------------------------------------------------------------


def test_train_writes_checkpoint_and_metrics(tmp_path):
    data = write_training_data(tmp_path)
    ckpt = tmp_path / "model.json"
    r = run_cli("train", "--data", str(data), "--model", "lstm",
                "--out", str(ckpt), "--hidden-dim", "4", "--epochs", "3")
    assert r.returncode == 0, r.stderr
    metrics = json.loads((tmp_path / "model.json.metrics.json").read_text())
    for key in ("rmse", "mae", "mape"):
        assert key in metrics
    stdout_metrics = json.loads(r.stdout.strip().splitlines()[-1])
    assert stdout_metrics["rmse"] == metrics["rmse"]
    model = load_checkpoint(ckpt)
    assert model.kind == "lstm"
    assert model.val_metrics is not None


def test_train_insufficient_data_fails(tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    with open(data / "aggregates.jsonl", "w") as fh:
        for rec in synthetic_flow_records(days=1, seed=3)[:10]:
            fh.write(rec.to_wire() + "\n")
    r = run_cli("train", "--data", str(data), "--model", "lstm",
                "--out", str(tmp_path / "m.json"))
    assert r.returncode != 0
    assert "error" in r.stderr.lower()


def test_evaluate_matches_library(tmp_path):
    data = write_training_data(tmp_path)
    ckpt = tmp_path / "model.json"
    run_cli("train", "--data", str(data), "--model", "lstm",
            "--out", str(ckpt), "--hidden-dim", "4", "--epochs", "3")
    r = run_cli("evaluate", "--ckpt", str(ckpt), "--data", str(data),
                "--split", "test")
    assert r.returncode == 0, r.stderr
    cli_metrics = json.loads(r.stdout.strip())
    model = load_checkpoint(ckpt)
    lake = DataLake()
    lake.import_jsonl(data / "aggregates.jsonl")
    ds = make_dataset(lake, [SeriesKey("s-1", "flow")])
    lib = evaluate(model, ds.test, encoded_with=ds.normalization)
    assert cli_metrics["rmse"] == pytest.approx(lib.rmse)
    assert cli_metrics["mae"] == pytest.approx(lib.mae)
    assert cli_metrics["mape"] == pytest.approx(lib.mape)


def test_evaluate_missing_data_fails(tmp_path):
    data = write_training_data(tmp_path)
    ckpt = tmp_path / "model.json"
    run_cli("train", "--data", str(data), "--model", "lstm",
            "--out", str(ckpt), "--hidden-dim", "4", "--epochs", "2")
    r = run_cli("evaluate", "--ckpt", str(ckpt), "--data",
                str(tmp_path / "nothing"), "--split", "test")
    assert r.returncode != 0


# -- drift-report ----------------------------------------------------------------------


def test_drift_report_empty(tmp_path):
    log = tmp_path / "audit.jsonl"
    log.write_text("")
    r = run_cli("drift-report", "--audit", str(log))
    assert r.returncode == 0
    summary = json.loads(r.stdout)
    assert summary["drift_events"] == 0 and summary["promotions"] == 0


def test_drift_report_counts(tmp_path):
    log = tmp_path / "audit.jsonl"
    rows = [
        {"t": 1.0, "event": "drift", "detail": {}},
        {"t": 2.0, "event": "drift", "detail": {}},
        {"t": 3.0, "event": "promote", "detail": {}},
        {"t": 4.0, "event": "act", "detail": {}},
    ]
    log.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    r = run_cli("drift-report", "--audit", str(log))
    summary = json.loads(r.stdout)
    assert summary["entries"] == 4
    assert summary["drift_events"] == 2
    assert summary["promotions"] == 1


def test_drift_report_malformed_line(tmp_path):
    log = tmp_path / "audit.jsonl"
    log.write_text('{"t": 1, "event": "drift", "detail": {}}\n{broken\n')
    r = run_cli("drift-report", "--audit", str(log))
    assert r.returncode != 0
    assert "line 2" in r.stderr


# -- serve -------------------------------------------------------------------------------


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def zero_checkpoint(tmp_path, key, val_rmse=5.0):
    """A deliberately wrong model: predicts 0 everywhere, tight epsilon."""
    from tests.test_predictor_forward import zero_params
    model = TrainedModel(
        kind="lstm", params=(zero_params(4),),
        norm=Normalization({key: (0.0, 1000.0)}),
        hyper=Hyper(hidden_dim=4),
        val_metrics=EvalMetrics(rmse=val_rmse, mae=4.0, mape=5.0, n=100),
    )
    path = tmp_path / "initial.json"
    save_checkpoint(model, path)
    return path


@pytest.mark.slow
def test_serve_health_drift_and_clean_shutdown(tmp_path):
    """End-to-end serve run: health within 5 s, drift + promotion land in the
    audit log, SIGTERM shuts down cleanly with the manifest intact."""
    port = free_port()
    key = SeriesKey("s-1", "flow")
    ckpt = zero_checkpoint(tmp_path, key)
    out = tmp_path / "run"
    cfg = write_config(
        tmp_path,
        initial_checkpoint="initial.json",
        out=str(out),
        drift={"window_size": 12, "kappa": 1.5, "cooldown": 1000,
               "min_regime_windows": 12},
        train={"hidden_dim": 4, "epochs": 4, "train_after_windows": 100000},
        serve={"host": "127.0.0.1", "port": port, "pace": 0.0},
        duration_s=80 * 300.0,
    )
    proc = subprocess.Popen([*CLI, "serve", "--config", str(cfg)],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                            text=True)
    try:
        base = f"http://127.0.0.1:{port}/api/v1"
        deadline = time.time() + 5.0
        up = False
        while time.time() < deadline:
            try:
                if httpx.get(base + "/health", timeout=1.0).status_code == 200:
                    up = True
                    break
            except httpx.TransportError:
                time.sleep(0.1)
        assert up, "health endpoint did not come up within 5 s"

        deadline = time.time() + 120.0
        promoted = False
        while time.time() < deadline:
            manifest = httpx.get(base + "/models", timeout=2.0).json()
            entry = next((e for e in manifest if e["key"] == "s-1:flow"), None)
            if entry and entry["active"] and entry["active"] > 1:
                promoted = True
                break
            time.sleep(0.5)
        assert promoted, "retrained model was never promoted"
    finally:
        proc.send_signal(signal.SIGTERM)
        try:
            proc.wait(timeout=90)
        except subprocess.TimeoutExpired:
            proc.kill()
            raise
    assert proc.returncode == 0
    manifest = json.loads((out / "registry" / "manifest.json").read_text())
    entry = next(e for e in manifest if e["key"] == "s-1:flow")
    assert entry["active"] is not None and entry["active"] > 1
    events = [e["event"] for e in read_audit_log(out / "audit.jsonl")]
    assert "drift" in events
    assert "promote" in events
