"""The closed-loop runtime behind `digit serve`: steps the physical simulation,
feeds virtual sensors through the delayed channel into the data lake,
synchronizes the twin, serves/records forecasts, and drives drift-triggered or
scheduled retraining in the background."""
from __future__ import annotations

import json
import logging
import os
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .audit import AuditLog
from .datalake import SEQ_LEN, DataLake, SeriesKey
from .errors import NoActiveModel, ParseError
from .fixtures import WINDOWS_PER_DAY
from .mlops import DriftConfig, Registry, RetrainPolicy
from .network import load_network
from .predictor import Hyper, encode_window, load_checkpoint, predict
from .sensing import CommChannel, aggregate, observe, window_of
from .simulator import WINDOW_S, DemandProfile, Simulation, double_peak_multipliers
from .twin import TwinManager

log = logging.getLogger("digit.runtime")


class EventBus:
    """Fan-out of platform events to stream subscribers."""

    def __init__(self, maxsize: int = 1000):
        self._subs: list[queue.Queue] = []
        self._lock = threading.Lock()
        self.maxsize = maxsize

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue(self.maxsize)
        with self._lock:
            self._subs.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._lock:
            if q in self._subs:
                self._subs.remove(q)

    def publish(self, event: str, t: float, data: dict) -> None:
        msg = {"event": event, "t": t, "data": data}
        with self._lock:
            subs = list(self._subs)
        for q in subs:
            try:
                q.put_nowait(msg)
            except queue.Full:
                pass  # slow subscriber drops events rather than stalling the loop


@dataclass
class SensingConfig:
    noise_sigma: float = 0.0
    p_drop: float = 0.0
    latency_s: float = 0.0
    seed: int = 1


@dataclass
class TrainConfig:
    kind: str = "lstm"
    hidden_dim: int = 16
    epochs: int = 60
    learning_rate: float = 1e-3
    batch: int = 32
    seed: int = 0
    patience: int = 10
    train_after_windows: int = WINDOWS_PER_DAY
    retrain_every_windows: int | None = None

    def hyper(self) -> Hyper:
        return Hyper(hidden_dim=self.hidden_dim, epochs=self.epochs,
                     learning_rate=self.learning_rate, batch=self.batch,
                     seed=self.seed, patience=self.patience)


@dataclass
class RunConfig:
    network: str
    seed: int = 42
    od_pairs: tuple = ()
    demand_multipliers: tuple | None = None
    demand_scale: float = 1.0
    demand_shift: tuple[float, float] | None = None  # (at_s, factor)
    sensing: SensingConfig = field(default_factory=SensingConfig)
    drift: DriftConfig = field(default_factory=DriftConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    host: str = "127.0.0.1"
    port: int = 8099
    pace: float = 0.0            # sim seconds per wall second; 0 = free-running
    duration_s: float | None = None
    out_dir: str | None = None
    initial_checkpoint: str | None = None

    def demand(self) -> DemandProfile:
        mult = (tuple(self.demand_multipliers) if self.demand_multipliers
                else double_peak_multipliers())
        od = tuple((o, d, r * self.demand_scale) for o, d, r in self.od_pairs)
        return DemandProfile(od_pairs=od, multipliers=mult)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed config {path}: {exc}") from exc
    try:
        base = os.path.dirname(os.path.abspath(path))

        def resolve(p):
            return p if os.path.isabs(p) else os.path.join(base, p)

        network = resolve(doc["network"])
        if not os.path.exists(network):
            raise ParseError(f"network file {network} does not exist")
        demand = doc.get("demand", {})
        shift = demand.get("shift")
        sensing = SensingConfig(**doc.get("sensing", {}))
        drift = DriftConfig(**doc.get("drift", {}))
        train = TrainConfig(**doc.get("train", {}))
        serve = doc.get("serve", {})
        ckpt = doc.get("initial_checkpoint")
        if ckpt is not None:
            ckpt = resolve(ckpt)
            if not os.path.exists(ckpt):
                raise ParseError(f"initial checkpoint {ckpt} does not exist")
        return RunConfig(
            network=network,
            seed=int(doc.get("seed", 42)),
            od_pairs=tuple(tuple(x) for x in demand.get("od", ())),
            demand_multipliers=demand.get("multipliers"),
            demand_scale=float(demand.get("scale", 1.0)),
            demand_shift=(float(shift["at_s"]), float(shift["factor"])) if shift else None,
            sensing=sensing,
            drift=drift,
            train=train,
            host=serve.get("host", "127.0.0.1"),
            port=int(serve.get("port", 8099)),
            pace=float(serve.get("pace", 0.0)),
            duration_s=doc.get("duration_s"),
            out_dir=doc.get("out"),
            initial_checkpoint=ckpt,
        )
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"config missing or ill-typed field: {exc}") from exc


class Runtime:
    """Owns every component of one running twin deployment."""

    def __init__(self, config: RunConfig, data_dir: str | None = None):
        self.config = config
        self.net = load_network(config.network)
        self.demand = config.demand()
        self.sim = Simulation(self.net, self.demand, config.seed)
        data_dir = data_dir or config.out_dir
        lake_path = registry_dir = audit_path = None
        if data_dir:
            os.makedirs(data_dir, exist_ok=True)
            lake_path = os.path.join(data_dir, "aggregates.jsonl")
            registry_dir = os.path.join(data_dir, "registry")
            audit_path = os.path.join(data_dir, "audit.jsonl")
        self.lake = DataLake(lake_path)
        self.audit = AuditLog(audit_path)
        self.registry = Registry(registry_dir, drift=config.drift, audit=self.audit)
        self.twin = TwinManager(self.net, self.sim, self.demand, seed=config.seed,
                                registry=self.registry, lake=self.lake,
                                audit=self.audit)
        self.bus = EventBus()
        self.twin.on_scenario_done = self._scenario_done
        self.channel = CommChannel(config.sensing.latency_s)
        self._sensor_rng = np.random.default_rng(config.sensing.seed)
        # per sensor, per window_start buffers of tick records
        self._buckets: dict[str, dict[float, list]] = {s: {} for s in self.net.sensors}
        self._pending: dict[SeriesKey, dict[float, float]] = {}
        self._policies: dict[SeriesKey, RetrainPolicy] = {}
        self._windows_done = 0
        self._retraining: set[SeriesKey] = set()
        self._training_lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.started_at = time.monotonic()
        if config.initial_checkpoint:
            self._bootstrap_checkpoint(config.initial_checkpoint)

    # -- bootstrap ----------------------------------------------------------------

    def _bootstrap_checkpoint(self, path: str) -> None:
        model = load_checkpoint(path)
        from .predictor import checkpoint_to_dict
        for key in model.norm.bounds:
            mv = self.registry.register(checkpoint_to_dict(model),
                                        model.val_metrics, key=key)
            self.registry.promote(mv.version, key=key)

    def _scenario_done(self, scenario) -> None:
        self.bus.publish("scenario_done", self.sim.clock,
                         {"id": scenario.id, "status": scenario.status.value})

    # -- main loop ------------------------------------------------------------------

    def run_windows(self, n: int) -> None:
        """Advance the platform by n aggregation windows (synchronous)."""
        for _ in range(n):
            if self._stop.is_set():
                break
            self._run_one_window()

    def _run_one_window(self) -> None:
        cfg = self.config
        shift = cfg.demand_shift
        wall_start = time.monotonic()
        for _ in range(int(WINDOW_S)):
            with self.twin.sim_lock:
                if shift is not None and self.sim.clock >= shift[0]:
                    self.sim.set_demand_scale(shift[1])
                    shift = None
                    self.config.demand_shift = None
                self.sim.step(1.0)
                records = observe(
                    self.sim, self.net.sensors,
                    noise_sigma=cfg.sensing.noise_sigma,
                    p_drop=cfg.sensing.p_drop,
                    rng=self._sensor_rng,
                )
            for rec in records:
                ws = window_of(rec.timestamp)
                self._buckets[rec.sensor].setdefault(ws, []).append(rec)
        now = self.sim.clock
        window_start = now - WINDOW_S
        for sensor in sorted(self.net.sensors):
            recs = self._buckets[sensor].pop(window_start, [])
            agg = aggregate(recs, window_start, sensor=sensor,
                            expected_ticks=int(WINDOW_S))
            self.channel.send(agg, now)
        delivered = self.channel.poll(now)
        by_window: dict[float, list] = {}
        for rec in delivered:
            self.lake.ingest(rec)
            self.bus.publish("new_aggregate", now, json.loads(rec.to_wire()))
            by_window.setdefault(rec.window_start, []).append(rec)
        for ws in sorted(by_window):
            state = self.twin.sync(by_window[ws])
            self.bus.publish("state_update", now, state.to_json())
            self._score_and_forecast(ws, by_window[ws])
        self._windows_done += 1
        self._maybe_train()
        if cfg.pace > 0:
            wall_budget = WINDOW_S / cfg.pace
            remaining = wall_budget - (time.monotonic() - wall_start)
            if remaining > 0:
                self._stop.wait(remaining)

    def _score_and_forecast(self, ws: float, records: list) -> None:
        for rec in records:
            key = SeriesKey(rec.sensor, "flow")
            pending = self._pending.setdefault(key, {})
            predicted = pending.pop(ws, None)
            if predicted is not None:
                try:
                    report = self.registry.record_outcome(
                        key, float(rec.flow), predicted, t=ws)
                except NoActiveModel:
                    continue
                if report.triggered:
                    self.bus.publish("drift", ws,
                                     {"key": str(key), **report.to_json()})
                policy = self._policies.setdefault(
                    key, RetrainPolicy(self.config.drift))
                if policy.observe(report):
                    # the policy re-arms only once the retrain completes, so a
                    # failed attempt (e.g. too little data yet) retries with a
                    # range that keeps growing from the same onset
                    self._spawn_retrain(key, policy.data_range(), policy)
            self._issue_forecast(key)

    def _issue_forecast(self, key: SeriesKey) -> None:
        try:
            _, model = self.registry.active(key)
        except NoActiveModel:
            return
        recs = self.lake.query_range(key.sensor)[-SEQ_LEN:]
        if len(recs) < SEQ_LEN:
            return
        window = encode_window(model, key, recs[0].window_start,
                               [float(r.flow) for r in recs])
        fc = predict(model, window)
        target = recs[-1].window_start + WINDOW_S
        self._pending.setdefault(key, {})[target] = fc.value

    def _maybe_train(self) -> None:
        cfg = self.config.train
        for sensor in sorted(self.net.sensors):
            key = SeriesKey(sensor, "flow")
            has_active = True
            try:
                self.registry.active(key)
            except NoActiveModel:
                has_active = False
            if not has_active and self._windows_done >= cfg.train_after_windows:
                self._spawn_retrain(key, (None, None))
            elif (has_active and cfg.retrain_every_windows
                  and self._windows_done % cfg.retrain_every_windows == 0):
                self._spawn_retrain(key, (None, None))

    def _spawn_retrain(self, key: SeriesKey, data_range, policy=None) -> None:
        with self._training_lock:
            if key in self._retraining:
                return
            self._retraining.add(key)

        def job():
            try:
                outcome = self.registry.retrain(
                    key, self.lake, self.config.train.hyper(),
                    kind=self.config.train.kind, data_range=data_range,
                    now=self.sim.clock,
                )
                if policy is not None:
                    policy.reset()
                self.bus.publish("promotion", self.sim.clock, {
                    "key": str(key), "version": outcome.new_version,
                    "promoted": outcome.promoted,
                })
                log.info("retrained %s -> v%d promoted=%s",
                         key, outcome.new_version, outcome.promoted)
            except Exception as exc:
                log.warning("retrain for %s failed: %s", key, exc)
            finally:
                with self._training_lock:
                    self._retraining.discard(key)

        threading.Thread(target=job, name=f"retrain-{key}", daemon=True).start()

    # -- lifecycle -------------------------------------------------------------------

    def start(self) -> None:
        def loop():
            while not self._stop.is_set():
                if (self.config.duration_s is not None
                        and self.sim.clock >= self.config.duration_s):
                    break
                self._run_one_window()

        self._thread = threading.Thread(target=loop, name="twin-loop", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=30)
        # wait for in-flight retrains so the manifest lands intact
        deadline = time.monotonic() + 60
        while time.monotonic() < deadline:
            with self._training_lock:
                if not self._retraining:
                    break
            time.sleep(0.05)
        self.twin.close()
        self.audit.close()
        self.lake.close()
