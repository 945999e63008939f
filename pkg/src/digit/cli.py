"""Operator/developer entry points.

Diagnostics go to stderr through logging; machine-readable output goes to
stdout or files. Exit code 0 iff no error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading

from . import runtime as rt
from .audit import read_audit_log
from .datalake import DataLake, SeriesKey, make_dataset
from .errors import DigitError
from .network import load_network
from .predictor import evaluate, load_checkpoint, save_checkpoint, train
from .sensing import aggregate, observe, window_of
from .simulator import WINDOW_S, Simulation, write_exit_log

log = logging.getLogger("digit")


def _setup_logging():
    level = os.environ.get("DIGIT_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        level=levels.get(level, logging.WARNING),
        stream=sys.stderr,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def cmd_simulate(args) -> int:
    config = rt.load_config(args.config)
    net = load_network(config.network)
    demand = config.demand()
    sim = Simulation(net, demand, config.seed)
    os.makedirs(args.out, exist_ok=True)
    agg_path = os.path.join(args.out, "aggregates.jsonl")
    exits_path = os.path.join(args.out, "exits.jsonl")
    import numpy as np
    sensor_rng = np.random.default_rng(config.sensing.seed)
    windows = int(args.days * 86400 / WINDOW_S)
    shift = config.demand_shift
    with open(agg_path, "w", encoding="utf-8") as fh:
        buckets = {s: {} for s in net.sensors}
        for w in range(windows):
            for _ in range(int(WINDOW_S)):
                if shift is not None and sim.clock >= shift[0]:
                    sim.set_demand_scale(shift[1])
                    shift = None
                sim.step(1.0)
                for rec in observe(sim, net.sensors,
                                   noise_sigma=config.sensing.noise_sigma,
                                   p_drop=config.sensing.p_drop,
                                   rng=sensor_rng):
                    ws = window_of(rec.timestamp)
                    buckets[rec.sensor].setdefault(ws, []).append(rec)
            ws = sim.clock - WINDOW_S
            for sensor in sorted(net.sensors):
                agg = aggregate(buckets[sensor].pop(ws, []), ws, sensor=sensor,
                                expected_ticks=int(WINDOW_S))
                fh.write(agg.to_wire() + "\n")
            if (w + 1) % 72 == 0:
                log.info("simulated %d/%d windows", w + 1, windows)
    write_exit_log(exits_path, sim.exit_log)
    log.info("wrote %s and %s", agg_path, exits_path)
    return 0


def _dataset_from_dir(data_dir, sensors=None):
    lake = DataLake()
    path = os.path.join(data_dir, "aggregates.jsonl")
    if not os.path.exists(path):
        raise DigitError(f"no aggregates.jsonl under {data_dir}")
    lake.import_jsonl(path)
    keys = [SeriesKey(s, "flow") for s in (sensors or lake.sensors())]
    return lake, make_dataset(lake, keys)


def cmd_train(args) -> int:
    sensors = args.sensor or None
    _, dataset = _dataset_from_dir(args.data, sensors)
    hyper = rt.TrainConfig(
        kind=args.model, hidden_dim=args.hidden_dim, epochs=args.epochs,
        seed=args.seed,
    ).hyper()
    model, logbook = train(args.model, dataset, hyper)
    save_checkpoint(model, args.out)
    test_metrics = evaluate(model, dataset.test or dataset.val or dataset.train)
    metrics = {
        "val": model.val_metrics.to_json(),
        "test": test_metrics.to_json(),
        "rmse": test_metrics.rmse,
        "mae": test_metrics.mae,
        "mape": test_metrics.mape,
        "epochs_run": len(logbook),
    }
    with open(args.out + ".metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=1)
    print(json.dumps(metrics))
    return 0


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.ckpt)
    sensors = [k.sensor for k in model.norm.bounds]
    _, dataset = _dataset_from_dir(args.data, sensors)
    split = dataset.split(args.split)
    metrics = evaluate(model, split, encoded_with=dataset.normalization)
    print(json.dumps(metrics.to_json()))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    config = rt.load_config(args.config)
    if args.port is not None:
        config.port = args.port
    runtime = rt.Runtime(config)
    app = create_app(runtime, start_runtime=True)
    server = uvicorn.Server(uvicorn.Config(
        app, host=config.host, port=config.port, log_level="warning",
    ))

    def shutdown(_signum=None, _frame=None):
        server.should_exit = True

    signal.signal(signal.SIGTERM, shutdown)
    signal.signal(signal.SIGINT, shutdown)
    log.info("serving on %s:%d", config.host, config.port)
    server.run()
    runtime.stop()
    log.info("clean shutdown complete")
    return 0


def cmd_drift_report(args) -> int:
    entries = read_audit_log(args.audit)
    drift = [e for e in entries if e["event"] == "drift"]
    promotions = [e for e in entries if e["event"] == "promote"]
    summary = {
        "entries": len(entries),
        "drift_events": len(drift),
        "promotions": len(promotions),
        "last_drift": drift[-1] if drift else None,
        "last_promotion": promotions[-1] if promotions else None,
    }
    print(json.dumps(summary, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="digit",
        description="Road-network digital twin: simulate, forecast, retrain, steer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the physical sim + sensing, write aggregates")
    p.add_argument("--config", required=True)
    p.add_argument("--days", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="build a dataset from aggregates and train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=["lstm", "bilstm"], default="lstm")
    p.add_argument("--out", required=True)
    p.add_argument("--sensor", action="append", help="restrict to sensor id (repeatable)")
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="run the full closed loop with the HTTP API")
    p.add_argument("--config", required=True)
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("drift-report", help="summarize drift/promotion audit events")
    p.add_argument("--audit", required=True)
    p.set_defaults(func=cmd_drift_report)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DigitError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
