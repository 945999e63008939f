"""HTTP + event-stream boundary consumed by the dashboards.

All payloads are JSON; the stream is newline-delimited JSON events. Each error
code maps to exactly one transport status. Read endpoints are side-effect-free;
every twin mutation funnels through the twin manager's serialized channel.
"""
from __future__ import annotations

import json
import queue
from dataclasses import dataclass

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, StreamingResponse
from starlette.exceptions import HTTPException as StarletteHTTPException

from .datalake import SEQ_LEN, SeriesKey
from .errors import (
    ConstraintViolation,
    DigitError,
    EmptyWindow,
    InvalidRoute,
    NoActiveModel,
    ReconstructionUnavailable,
)
from .network import Phase, Route, SignalPlan
from .simulator import WINDOW_S, Incident
from .twin import RerouteChange, ScenarioStatus

STATUS_FOR_CODE = {
    "BadRequest": 400,
    "NotFound": 404,
    "ConstraintViolation": 409,
    "Stale": 503,
    "Internal": 500,
}

STALE_AFTER_WINDOWS = 3
LIVE_EVENTS = ("state_update", "new_aggregate", "drift", "promotion", "scenario_done")


@dataclass
class ApiError(Exception):
    code: str
    message: str
    detail: dict | list | None = None

    def body(self) -> dict:
        return {"code": self.code, "message": self.message, "detail": self.detail}

    @property
    def status(self) -> int:
        return STATUS_FOR_CODE[self.code]


def parse_change(doc: dict):
    kind = doc.get("type")
    try:
        if kind == "incident":
            return Incident(
                segment=doc["segment"],
                start=float(doc.get("start_s", 0.0)),
                duration=float(doc["duration_s"]),
                capacity_factor=float(doc["capacity_factor"]),
            )
        if kind == "signal_plan":
            return SignalPlan(
                intersection=doc["node"],
                cycle_length=float(doc["cycle_s"]),
                phases=tuple(
                    Phase(serves=frozenset(p["serves"]), green=float(p["green_s"]))
                    for p in doc["phases"]
                ),
                min_green=float(doc.get("min_green_s", 10.0)),
                max_green=float(doc.get("max_green_s", 120.0)),
            )
        if kind == "reroute":
            return RerouteChange(
                origin=doc["origin"], dest=doc["dest"],
                route=Route(tuple(doc["segments"])),
            )
    except ApiError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ApiError("BadRequest", f"malformed change: {exc}") from exc
    raise ApiError("BadRequest", f"unknown change type {kind!r}")


def create_app(runtime, start_runtime: bool = False) -> FastAPI:
    """Build the API over a runtime. With start_runtime, the twin loop begins
    only after the server is listening, so health is reachable immediately."""
    from contextlib import asynccontextmanager

    @asynccontextmanager
    async def lifespan(_app):
        if start_runtime:
            runtime.start()
        yield

    app = FastAPI(title="digit twin api", openapi_url=None, lifespan=lifespan)
    twin = runtime.twin
    lake = runtime.lake
    registry = runtime.registry
    sim = runtime.sim
    bus = runtime.bus

    @app.exception_handler(ApiError)
    async def _api_error(_req: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content=exc.body())

    @app.exception_handler(StarletteHTTPException)
    async def _http_error(_req: Request, exc: StarletteHTTPException):
        code = "NotFound" if exc.status_code == 404 else "BadRequest"
        if exc.status_code >= 500:
            code = "Internal"
        return JSONResponse(
            status_code=STATUS_FOR_CODE[code],
            content=ApiError(code, str(exc.detail)).body(),
        )

    @app.exception_handler(RequestValidationError)
    async def _validation_error(_req: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400,
            content=ApiError("BadRequest", "invalid request", detail=exc.errors()).body(),
        )

    @app.exception_handler(Exception)
    async def _internal(_req: Request, exc: Exception):
        return JSONResponse(
            status_code=500, content=ApiError("Internal", str(exc)).body()
        )

    @app.get("/api/v1/health")
    def health():
        return {"status": "ok", "clock": sim.clock}

    @app.get("/api/v1/state")
    def state():
        st = twin.state()
        if st.staleness > STALE_AFTER_WINDOWS * WINDOW_S:
            import math
            raise ApiError(
                "Stale",
                "no sync yet" if not math.isfinite(st.staleness)
                else f"twin state stale by {st.staleness:g}s",
                detail={"staleness": st.staleness if math.isfinite(st.staleness) else None},
            )
        return st.to_json()

    @app.get("/api/v1/metrics/realtime")
    def realtime(window: float = WINDOW_S):
        if window <= 0:
            raise ApiError("BadRequest", "window must be > 0")
        with twin.sim_lock:
            try:
                metrics = sim.metrics(min(window, sim.clock)).to_json()
            except (EmptyWindow, ValueError):
                metrics = {"window_s": window, "avg_travel_time_s": None,
                           "throughput_vpm": {}, "occupancy": {}, "trips": 0}
            clock = sim.clock
        last_ws = (clock // WINDOW_S - 1) * WINDOW_S
        aggregates = []
        for sensor in sorted(runtime.net.sensors):
            rec = lake.get(sensor, last_ws)
            if rec is not None:
                aggregates.append(json.loads(rec.to_wire()))
        return {"metrics": metrics, "aggregates": aggregates}

    @app.get("/api/v1/predictions")
    def predictions(sensor: str, h: int = 1):
        if h < 1:
            raise ApiError("BadRequest", "h must be >= 1")
        if sensor not in runtime.net.sensors:
            raise ApiError("NotFound", f"unknown sensor {sensor}")
        key = SeriesKey(sensor, "flow")
        try:
            version, model = registry.active(key)
        except NoActiveModel as exc:
            raise ApiError("NotFound", str(exc)) from exc
        recs = lake.query_range(sensor)[-SEQ_LEN:]
        if len(recs) < SEQ_LEN:
            raise ApiError("NotFound",
                           f"not enough history for {sensor} ({len(recs)}/{SEQ_LEN})")
        from .predictor import encode_window, metrics_from_predictions, predict_multi
        window = encode_window(model, key, recs[0].window_start,
                               [float(r.flow) for r in recs])
        forecasts = predict_multi(model, window, h)
        pairs = registry.rolling_pairs(key)
        recent = None
        if pairs:
            actuals = [a for _, a, _ in pairs]
            preds = [p for _, _, p in pairs]
            recent = metrics_from_predictions(actuals, preds).to_json()
        return {
            "sensor": sensor,
            "key": str(key),
            "h": h,
            "forecasts": [f.to_json() for f in forecasts],
            "model": {
                "key": str(key),
                "version": version,
                "status": "Active",
                "val_rmse": model.val_metrics.rmse if model.val_metrics else None,
            },
            "recent_metrics": recent,
        }

    @app.post("/api/v1/scenarios", status_code=200)
    def post_scenario(body: dict):
        horizon = body.get("horizon", 15)
        if not isinstance(horizon, int) or horizon < 1:
            raise ApiError("BadRequest", "horizon must be a positive integer")
        if horizon > twin.max_horizon:
            raise ApiError("BadRequest",
                           f"horizon exceeds maximum {twin.max_horizon}")
        changes = [parse_change(c) for c in body.get("changes", [])]
        try:
            scenario = twin.submit_scenario(
                changes, horizon=horizon, requested_by=body.get("requested_by", ""))
        except ConstraintViolation as exc:
            raise ApiError("ConstraintViolation", str(exc),
                           detail={"violations": exc.violations}) from exc
        except (InvalidRoute, ValueError) as exc:
            raise ApiError("BadRequest", str(exc)) from exc
        return {"id": scenario.id}

    @app.get("/api/v1/scenarios/{scenario_id}")
    def get_scenario(scenario_id: str):
        try:
            scenario, result = twin.get_scenario(scenario_id)
        except KeyError as exc:
            raise ApiError("NotFound", f"unknown scenario {scenario_id}") from exc
        body = {"id": scenario.id, "status": scenario.status.value,
                "horizon": scenario.horizon, "result": None, "error": None}
        if scenario.status is ScenarioStatus.Done and result is not None:
            body["result"] = result.to_json()
        elif scenario.status is ScenarioStatus.Failed:
            body["error"] = result if isinstance(result, str) else "failed"
        return body

    @app.post("/api/v1/interventions")
    def post_intervention(body: dict):
        scenario_id = body.get("scenario_id")
        change_index = body.get("change_index")
        if not isinstance(scenario_id, str) or not isinstance(change_index, int):
            raise ApiError("BadRequest",
                           "scenario_id (string) and change_index (integer) required")
        try:
            ack = twin.apply_scenario_change(scenario_id, change_index)
        except KeyError as exc:
            raise ApiError("NotFound", f"unknown scenario {scenario_id}") from exc
        except ConstraintViolation as exc:
            raise ApiError("ConstraintViolation", str(exc),
                           detail={"violations": exc.violations}) from exc
        except (ValueError, InvalidRoute) as exc:
            raise ApiError("BadRequest", str(exc)) from exc
        except DigitError as exc:
            raise ApiError("Internal", str(exc)) from exc
        return {
            "scenario_id": scenario_id,
            "change_index": change_index,
            "kind": ack.kind,
            "effective_t": ack.effective_t,
        }

    @app.get("/api/v1/models")
    def models():
        return registry.manifest()

    @app.get("/api/v1/live")
    def live(events: str | None = None, max_events: int | None = None):
        if events is not None:
            wanted = tuple(e for e in events.split(",") if e)
            bad = [e for e in wanted if e not in LIVE_EVENTS]
            if bad or not wanted:
                raise ApiError("BadRequest",
                               f"unknown event filter {','.join(bad) or '(empty)'}")
        else:
            wanted = LIVE_EVENTS
        if max_events is not None and max_events < 1:
            raise ApiError("BadRequest", "max_events must be >= 1")

        def stream():
            q = bus.subscribe()
            sent = 0
            try:
                while max_events is None or sent < max_events:
                    try:
                        msg = q.get(timeout=0.5)
                    except queue.Empty:
                        yield "\n"  # keepalive; clients skip blank lines
                        continue
                    if msg["event"] not in wanted:
                        continue
                    yield json.dumps(msg, separators=(",", ":")) + "\n"
                    sent += 1
            finally:
                bus.unsubscribe(q)

        return StreamingResponse(stream(), media_type="application/x-ndjson")

    return app
