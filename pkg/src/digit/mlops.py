"""Model lifecycle: versioned registry, rolling-error drift detection, and
automated retrain/promote.

Drift is measured as the RMSE over a rolling window of (actual, predicted)
pairs; it trips when that error exceeds a threshold derived from the active
model's validation RMSE. A tripped detector leads to retraining a candidate,
which is promoted only if it matches or beats the active model on a fresh
validation split — a failure never leaves the key without an Active model.
"""
from __future__ import annotations

import json
import math
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .audit import AuditLog
from .datalake import DataLake, SeriesKey, make_dataset
from .errors import (
    InsufficientData,
    NoActiveModel,
    NotCandidate,
    StorageError,
    UnknownVersion,
)
from .predictor import (
    EvalMetrics,
    Hyper,
    TrainedModel,
    checkpoint_from_dict,
    checkpoint_to_dict,
    evaluate,
    train,
)
from .simulator import WINDOW_S

RETRAIN_CAP_DAYS = 30  # retraining never reaches further back than this


class Status(Enum):
    Active = "Active"
    Archived = "Archived"
    Candidate = "Candidate"


@dataclass
class ModelVersion:
    version: int
    key: SeriesKey
    checkpoint: dict
    val_metrics: EvalMetrics
    created_at: float
    status: Status
    trained_on: tuple[float | None, float | None] | None = None


@dataclass(frozen=True)
class DriftConfig:
    window_size: int = 48          # pairs in the rolling error window (4 h)
    kappa: float = 1.5             # threshold = kappa * active val RMSE
    epsilon: float | None = None   # absolute threshold override (vehicles)
    cooldown: int = 288            # outcome windows between retrains
    min_regime_windows: int = 576  # new-regime data required before retraining

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        if self.kappa <= 1.0:
            raise ValueError("kappa must be > 1")
        if self.cooldown < 0:
            raise ValueError("cooldown must be >= 0")


@dataclass(frozen=True)
class DriftReport:
    rolling_rmse: float
    epsilon: float
    triggered: bool
    window: tuple[float, float]  # covered [first, last] outcome times
    pairs: int

    def to_json(self) -> dict:
        return {
            "rolling_rmse": self.rolling_rmse,
            "epsilon": self.epsilon,
            "triggered": self.triggered,
            "window": list(self.window),
            "pairs": self.pairs,
        }


@dataclass
class RetrainOutcome:
    promoted: bool
    new_version: int
    candidate_metrics: EvalMetrics
    active_metrics: EvalMetrics | None

    def to_json(self) -> dict:
        return {
            "promoted": self.promoted,
            "new_version": self.new_version,
            "candidate_rmse": self.candidate_metrics.rmse,
            "active_rmse": self.active_metrics.rmse if self.active_metrics else None,
        }


class _KeyState:
    def __init__(self, window_size: int):
        self.versions: list[ModelVersion] = []
        self.active: tuple[int, TrainedModel] | None = None
        self.window: deque = deque(maxlen=window_size)
        self.outcomes = 0
        self.outcomes_at_retrain: int | None = None


class Registry:
    """Versioned model store. Register/promote serialize through one lock;
    readers get the (version, model) pair atomically."""

    def __init__(self, root=None, drift: DriftConfig = DriftConfig(),
                 audit: AuditLog | None = None):
        self.root = root
        self.drift = drift
        self.audit = audit
        self._lock = threading.Lock()
        self._keys: dict[SeriesKey, _KeyState] = {}
        if root is not None:
            os.makedirs(root, exist_ok=True)
            self._load()

    # -- persistence -----------------------------------------------------------

    def _manifest_path(self):
        return os.path.join(self.root, "manifest.json")

    def _ckpt_path(self, key: SeriesKey, version: int):
        safe = str(key).replace(":", "_").replace("/", "_")
        return os.path.join(self.root, f"{safe}-v{version}.json")

    def _load(self):
        path = self._manifest_path()
        if not os.path.exists(path):
            return
        with open(path, "r", encoding="utf-8") as fh:
            entries = json.load(fh)
        for entry in entries:
            key = SeriesKey.parse(entry["key"])
            st = self._state(key)
            for vdoc in entry["versions"]:
                ckpt_path = self._ckpt_path(key, vdoc["v"])
                with open(ckpt_path, "r", encoding="utf-8") as fh:
                    ckpt = json.load(fh)
                model_metrics = (EvalMetrics.from_json(vdoc["val_metrics"])
                                 if vdoc.get("val_metrics") else None)
                st.versions.append(ModelVersion(
                    version=vdoc["v"], key=key, checkpoint=ckpt,
                    val_metrics=model_metrics,
                    created_at=vdoc.get("created_at", 0.0),
                    status=Status(vdoc["status"]),
                ))
            if entry.get("active") is not None:
                mv = self._find(st, entry["active"])
                st.active = (mv.version, self._materialize(mv))

    def _flush(self):
        if self.root is None:
            return
        tmp = self._manifest_path() + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.manifest(locked=False), fh, indent=1)
        os.replace(tmp, self._manifest_path())

    def _write_ckpt(self, mv: ModelVersion):
        if self.root is None:
            return
        with open(self._ckpt_path(mv.key, mv.version), "w", encoding="utf-8") as fh:
            json.dump(mv.checkpoint, fh)

    # -- helpers ---------------------------------------------------------------

    def _state(self, key: SeriesKey) -> _KeyState:
        if key not in self._keys:
            self._keys[key] = _KeyState(self.drift.window_size)
        return self._keys[key]

    @staticmethod
    def _find(st: _KeyState, version: int) -> ModelVersion:
        for mv in st.versions:
            if mv.version == version:
                return mv
        raise UnknownVersion(f"version {version} not found")

    @staticmethod
    def _materialize(mv: ModelVersion) -> TrainedModel:
        model = checkpoint_from_dict(mv.checkpoint)
        model.version = f"v{mv.version}"
        if mv.val_metrics is not None:
            model.val_metrics = mv.val_metrics  # registered metrics win
        return model

    def _resolve_key(self, key) -> SeriesKey:
        if key is not None:
            return key if isinstance(key, SeriesKey) else SeriesKey.parse(key)
        with self._lock:
            known = list(self._keys)
        if len(known) == 1:
            return known[0]
        raise UnknownVersion("key required: registry tracks multiple series")

    # -- operations ------------------------------------------------------------

    def register(self, checkpoint: dict, val_metrics: EvalMetrics,
                 key=None, trained_on=None) -> ModelVersion:
        """Persist a checkpoint as the next Candidate version for its key."""
        model = checkpoint_from_dict(checkpoint)  # validates; StorageError if corrupt
        if key is None:
            norm_keys = list(model.norm.bounds)
            if len(norm_keys) != 1:
                raise StorageError(
                    "key required: checkpoint normalizes multiple series"
                )
            key = norm_keys[0]
        key = key if isinstance(key, SeriesKey) else SeriesKey.parse(key)
        with self._lock:
            st = self._state(key)
            version = st.versions[-1].version + 1 if st.versions else 1
            ckpt = dict(checkpoint)
            ckpt["version"] = f"v{version}"
            mv = ModelVersion(
                version=version, key=key, checkpoint=ckpt,
                val_metrics=val_metrics, created_at=time.time(),
                status=Status.Candidate, trained_on=trained_on,
            )
            st.versions.append(mv)
            self._write_ckpt(mv)
            self._flush()
            return mv

    def promote(self, version: int, key=None) -> None:
        key = self._resolve_key(key)
        with self._lock:
            st = self._state(key)
            mv = self._find(st, version)
            if mv.status is not Status.Candidate:
                raise NotCandidate(f"version {version} is {mv.status.value}")
            model = self._materialize(mv)
            if st.active is not None:
                old = self._find(st, st.active[0])
                old.status = Status.Archived
            mv.status = Status.Active
            st.active = (version, model)
            self._flush()
        if self.audit is not None:
            self.audit.append(time.time(), "promote",
                              {"key": str(key), "version": version})

    def active(self, key) -> tuple[int, TrainedModel]:
        key = key if isinstance(key, SeriesKey) else SeriesKey.parse(key)
        with self._lock:
            st = self._keys.get(key)
            if st is None or st.active is None:
                raise NoActiveModel(f"no active model for {key}")
            return st.active

    def versions(self, key) -> list[ModelVersion]:
        key = key if isinstance(key, SeriesKey) else SeriesKey.parse(key)
        with self._lock:
            st = self._keys.get(key)
            return list(st.versions) if st else []

    def keys(self) -> list[SeriesKey]:
        with self._lock:
            return sorted(self._keys, key=str)

    def manifest(self, locked: bool = True) -> list[dict]:
        if locked:
            with self._lock:
                return self._manifest_unlocked()
        return self._manifest_unlocked()

    def _manifest_unlocked(self):
        out = []
        for key in sorted(self._keys, key=str):
            st = self._keys[key]
            out.append({
                "key": str(key),
                "active": st.active[0] if st.active else None,
                "versions": [
                    {
                        "v": mv.version,
                        "status": mv.status.value,
                        "val_rmse": mv.val_metrics.rmse if mv.val_metrics else None,
                        "val_metrics": mv.val_metrics.to_json() if mv.val_metrics else None,
                        "created_at": mv.created_at,
                    }
                    for mv in st.versions
                ],
            })
        return out

    # -- drift -----------------------------------------------------------------

    def record_outcome(self, key, actual: float, predicted: float,
                       t: float | None = None) -> DriftReport:
        """Append an (actual, predicted) pair to the rolling window and
        evaluate the drift condition."""
        key = key if isinstance(key, SeriesKey) else SeriesKey.parse(key)
        with self._lock:
            st = self._keys.get(key)
            if st is None or st.active is None:
                raise NoActiveModel(f"no active model for {key}")
            st.outcomes += 1
            when = float(t) if t is not None else float(st.outcomes)
            st.window.append((when, float(actual), float(predicted)))
            sq = [(a - p) ** 2 for _, a, p in st.window]
            rolling = math.sqrt(sum(sq) / len(sq))
            if self.drift.epsilon is not None:
                eps = self.drift.epsilon
            else:
                _, model = st.active
                eps = self.drift.kappa * model.val_metrics.rmse
            full = len(st.window) == self.drift.window_size
            in_cooldown = (
                st.outcomes_at_retrain is not None
                and st.outcomes - st.outcomes_at_retrain < self.drift.cooldown
            )
            triggered = full and rolling > eps and not in_cooldown
            report = DriftReport(
                rolling_rmse=rolling, epsilon=eps, triggered=triggered,
                window=(st.window[0][0], st.window[-1][0]), pairs=len(st.window),
            )
        if triggered and self.audit is not None:
            self.audit.append(when, "drift", {"key": str(key), **report.to_json()})
        return report

    def rolling_pairs(self, key) -> list[tuple[float, float, float]]:
        key = key if isinstance(key, SeriesKey) else SeriesKey.parse(key)
        with self._lock:
            st = self._keys.get(key)
            return list(st.window) if st else []

    # -- retraining ------------------------------------------------------------

    def retrain(self, key, lake: DataLake, hyper: Hyper | None = None, *,
                kind: str | None = None,
                data_range: tuple[float | None, float | None] | None = None,
                now: float | None = None) -> RetrainOutcome:
        """Train a fresh candidate on the lake and promote it iff it matches or
        beats the active model on the same fresh validation split. The old
        Active model survives any failure."""
        key = key if isinstance(key, SeriesKey) else SeriesKey.parse(key)
        active_model = None
        try:
            _, active_model = self.active(key)
        except NoActiveModel:
            pass
        if kind is None:
            kind = active_model.kind if active_model else "lstm"
        if hyper is None:
            hyper = active_model.hyper if active_model else Hyper()
        if data_range is None:
            start = None
            if now is not None:
                start = now - RETRAIN_CAP_DAYS * 86400.0
            data_range = (start, None)
        dataset = make_dataset(lake, [key], data_range[0], data_range[1])
        candidate, _ = train(kind, dataset, hyper)
        mv = self.register(checkpoint_to_dict(candidate), candidate.val_metrics,
                           key=key, trained_on=data_range)
        fresh_val = dataset.val or dataset.test or dataset.train
        active_metrics = None
        promote = True
        if active_model is not None:
            active_metrics = evaluate(active_model, fresh_val,
                                      encoded_with=dataset.normalization)
            promote = candidate.val_metrics.rmse <= active_metrics.rmse
        outcome = RetrainOutcome(
            promoted=promote, new_version=mv.version,
            candidate_metrics=candidate.val_metrics, active_metrics=active_metrics,
        )
        if promote:
            self.promote(mv.version, key=key)
            with self._lock:
                st = self._state(key)
                st.window.clear()  # stale errors belong to the replaced model
                st.outcomes_at_retrain = st.outcomes
        else:
            with self._lock:
                st = self._state(key)
                self._find(st, mv.version).status = Status.Archived
                st.outcomes_at_retrain = st.outcomes
                self._flush()
            if self.audit is not None:
                # negative promotion decisions are part of the audit trail too
                self.audit.append(now if now is not None else time.time(),
                                  "promote",
                                  {"key": str(key), **outcome.to_json()})
        return outcome


class RetrainPolicy:
    """Defers a drift-triggered retrain until enough of the new regime has been
    observed, and anchors the retraining range at the drift onset so the new
    regime dominates the training span."""

    def __init__(self, config: DriftConfig):
        self.config = config
        self.onset_t: float | None = None
        self._onset_index: int | None = None
        self._index = 0

    def observe(self, report: DriftReport) -> bool:
        """Feed every drift report; True means retrain now."""
        self._index += 1
        if self._onset_index is None:
            if report.triggered:
                self._onset_index = self._index
                self.onset_t = report.window[0]
            else:
                return False
        return self._index - self._onset_index >= self.config.min_regime_windows

    def data_range(self) -> tuple[float | None, float | None]:
        if self.onset_t is None:
            return (None, None)
        margin = self.config.window_size * WINDOW_S
        return (self.onset_t - margin, None)

    def reset(self) -> None:
        self.onset_t = None
        self._onset_index = None
