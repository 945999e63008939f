"""Time-series store and preprocessing: cleaning, min-max normalization,
15-step windowing, and chronological 75/15/10 splits.

Storage is an embedded append-only JSON Lines log with an in-memory index;
ingestion is idempotent on (sensor, window_start) with latest-write-wins.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientData, UnknownKey
from .sensing import AggregatedRecord, CongestionLevel
from .simulator import WINDOW_S

SEQ_LEN = 15            # input timesteps per training window
NORM_EPS = 1e-6         # denominator guard for constant series
MAX_GAP_FILL = 3        # longest run of missing windows linear-fill repairs
SPLIT_FRACTIONS = (0.75, 0.15, 0.10)

VARIABLES = ("flow", "speed", "occupancy")
_FIELD_FOR = {"flow": "flow", "speed": "mean_speed", "occupancy": "mean_occupancy"}


@dataclass(frozen=True)
class SeriesKey:
    sensor: str
    variable: str

    def __post_init__(self):
        if self.variable not in VARIABLES:
            raise ValueError(f"variable must be one of {VARIABLES}")

    def __str__(self):
        return f"{self.sensor}:{self.variable}"

    @staticmethod
    def parse(text: str) -> "SeriesKey":
        sensor, _, variable = text.rpartition(":")
        return SeriesKey(sensor, variable)


@dataclass(frozen=True)
class SequenceWindow:
    inputs: tuple[float, ...]   # 15 consecutive normalized values
    target: float               # the 16th value, normalized
    key: SeriesKey
    start: float                # window_start of the first input

    def __post_init__(self):
        if len(self.inputs) != SEQ_LEN:
            raise ValueError(f"inputs must have exactly {SEQ_LEN} values")

    @property
    def origin(self) -> tuple[SeriesKey, float]:
        return (self.key, self.start)

    @property
    def target_time(self) -> float:
        return self.start + SEQ_LEN * WINDOW_S


class Normalization:
    """Per-series (min, max) fitted on the training span only."""

    def __init__(self, bounds: dict[SeriesKey, tuple[float, float]]):
        self.bounds = dict(bounds)

    def normalize(self, value: float, key: SeriesKey) -> float:
        lo, hi = self._bounds(key)
        return (value - lo) / max(hi - lo, NORM_EPS)

    def denormalize(self, value: float, key: SeriesKey) -> float:
        lo, hi = self._bounds(key)
        return value * max(hi - lo, NORM_EPS) + lo

    def _bounds(self, key: SeriesKey) -> tuple[float, float]:
        if key not in self.bounds:
            raise UnknownKey(f"no normalization fitted for {key}")
        return self.bounds[key]

    def to_json(self) -> dict:
        return {str(k): {"min": lo, "max": hi} for k, (lo, hi) in self.bounds.items()}

    @staticmethod
    def from_json(doc: dict) -> "Normalization":
        return Normalization(
            {SeriesKey.parse(k): (v["min"], v["max"]) for k, v in doc.items()}
        )


@dataclass
class Dataset:
    train: list[SequenceWindow]
    val: list[SequenceWindow]
    test: list[SequenceWindow]
    normalization: Normalization

    def split(self, name: str) -> list[SequenceWindow]:
        if name not in ("train", "val", "test"):
            raise KeyError(name)
        return getattr(self, name)


class DataLake:
    """Aggregated-record store. Multiple readers, one writer; readers see a
    consistent prefix because the index is swapped per record."""

    def __init__(self, path=None):
        self.path = path
        self._index: dict[tuple[str, float], AggregatedRecord] = {}
        self._log = None
        if path is not None:
            try:
                with open(path, "r", encoding="utf-8") as fh:
                    for line in fh:
                        line = line.strip()
                        if line:
                            rec = AggregatedRecord.from_wire(line)
                            self._index[(rec.sensor, rec.window_start)] = rec
            except FileNotFoundError:
                pass
            self._log = open(path, "a", encoding="utf-8")

    def close(self):
        if self._log is not None:
            self._log.close()
            self._log = None

    def ingest(self, rec: AggregatedRecord) -> None:
        if rec.window_start % WINDOW_S != 0:
            raise ValueError("window_start must be a multiple of 300 s")
        self._index[(rec.sensor, rec.window_start)] = rec
        if self._log is not None:
            self._log.write(rec.to_wire() + "\n")
            self._log.flush()

    def get(self, sensor: str, window_start: float) -> AggregatedRecord | None:
        return self._index.get((sensor, window_start))

    def query_range(self, sensor: str, start: float | None = None,
                    end: float | None = None) -> list[AggregatedRecord]:
        out = [
            rec for (s, ws), rec in self._index.items()
            if s == sensor
            and (start is None or ws >= start)
            and (end is None or ws < end)
        ]
        out.sort(key=lambda r: r.window_start)
        return out

    def sensors(self) -> list[str]:
        return sorted({s for s, _ in self._index})

    def series(self, key: SeriesKey, start: float | None = None,
               end: float | None = None) -> list[tuple[float, float | None]]:
        """Grid-aligned series; None marks absent or missing-flagged windows."""
        recs = self.query_range(key.sensor, start, end)
        if not recs:
            return []
        field_name = _FIELD_FOR[key.variable]
        by_ws = {r.window_start: r for r in recs}
        lo = recs[0].window_start
        hi = recs[-1].window_start
        out = []
        ws = lo
        while ws <= hi:
            rec = by_ws.get(ws)
            if rec is None or rec.missing:
                out.append((ws, None))
            else:
                out.append((ws, float(getattr(rec, field_name))))
            ws += WINDOW_S
        return out

    # -- import/export --------------------------------------------------------

    def export_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for (_, _), rec in sorted(self._index.items()):
                fh.write(rec.to_wire() + "\n")

    def import_jsonl(self, path) -> int:
        n = 0
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    self.ingest(AggregatedRecord.from_wire(line))
                    n += 1
        return n

    def export_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["sensor", "window_start_s", "flow", "speed_mps", "occ", "level", "missing"]
            )
            for (_, _), rec in sorted(self._index.items()):
                writer.writerow([
                    rec.sensor, rec.window_start, rec.flow, rec.mean_speed,
                    rec.mean_occupancy, rec.congestion_level.value, rec.missing,
                ])

    def import_csv(self, path) -> int:
        n = 0
        with open(path, "r", encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                self.ingest(AggregatedRecord(
                    sensor=row["sensor"],
                    window_start=float(row["window_start_s"]),
                    flow=int(float(row["flow"])),
                    mean_speed=float(row["speed_mps"]),
                    mean_occupancy=float(row["occ"]),
                    congestion_level=CongestionLevel(row["level"]),
                    missing=row["missing"] in ("True", "true", "1"),
                ))
                n += 1
        return n


def clean(series: list[tuple[float, float | None]],
          max_gap: int = MAX_GAP_FILL) -> list[tuple[float, float | None]]:
    """Fill gaps of <= max_gap consecutive missing windows by linear
    interpolation between the flanking values; longer (or edge) gaps stay
    missing and are excluded from windowing later."""
    out = list(series)
    n = len(out)
    i = 0
    while i < n:
        if out[i][1] is not None:
            i += 1
            continue
        j = i
        while j < n and out[j][1] is None:
            j += 1
        gap = j - i
        if gap <= max_gap and i > 0 and j < n:
            left = out[i - 1][1]
            right = out[j][1]
            for k in range(gap):
                frac = (k + 1) / (gap + 1)
                out[i + k] = (out[i + k][0], left + (right - left) * frac)
        i = j
    return out


def _contiguous_runs(series):
    """Yield lists of (ws, value) with no missing entries."""
    run = []
    for ws, v in series:
        if v is None:
            if run:
                yield run
            run = []
        else:
            run.append((ws, v))
    if run:
        yield run


def make_dataset(lake: DataLake, keys: list[SeriesKey],
                 start: float | None = None, end: float | None = None,
                 fractions: tuple[float, float, float] = SPLIT_FRACTIONS) -> Dataset:
    """Windows of 15 inputs + 16th target, normalized per series with bounds
    fitted on the training span, split chronologically per series."""
    train: list[SequenceWindow] = []
    val: list[SequenceWindow] = []
    test: list[SequenceWindow] = []
    bounds: dict[SeriesKey, tuple[float, float]] = {}
    for key in keys:
        cleaned = clean(lake.series(key, start, end))
        raw_windows = []  # (start, [16 raw values])
        for run in _contiguous_runs(cleaned):
            if len(run) < SEQ_LEN + 1:
                continue
            for i in range(len(run) - SEQ_LEN):
                chunk = run[i:i + SEQ_LEN + 1]
                raw_windows.append((chunk[0][0], [v for _, v in chunk]))
        if not raw_windows:
            raise InsufficientData(
                f"{key}: need at least {SEQ_LEN + 1} clean consecutive windows"
            )
        raw_windows.sort(key=lambda w: w[0])
        n = len(raw_windows)
        n_train = int(n * fractions[0])
        n_val = int(n * fractions[1])
        # normalization sees only values covered by the training partition
        if n_train > 0:
            span_end = raw_windows[n_train - 1][0] + SEQ_LEN * WINDOW_S
            span_values = [v for ws, v in cleaned
                           if v is not None and ws <= span_end]
        else:
            span_values = [v for _, v in cleaned if v is not None]
        lo, hi = min(span_values), max(span_values)
        bounds[key] = (float(lo), float(hi))
        scale = max(hi - lo, NORM_EPS)
        for idx, (ws, values) in enumerate(raw_windows):
            normed = [(v - lo) / scale for v in values]
            window = SequenceWindow(
                inputs=tuple(normed[:SEQ_LEN]), target=normed[SEQ_LEN],
                key=key, start=ws,
            )
            if idx < n_train:
                train.append(window)
            elif idx < n_train + n_val:
                val.append(window)
            else:
                test.append(window)
    return Dataset(train=train, val=val, test=test,
                   normalization=Normalization(bounds))


def denormalize(normalization: Normalization, value: float, key: SeriesKey) -> float:
    return normalization.denormalize(value, key)
