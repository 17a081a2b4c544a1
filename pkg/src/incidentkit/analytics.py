"""Geospatial and temporal evaluation of in-the-wild detections.

Covers the downstream monitoring pipelines: confidence filtering of
detections, distance-to-event curves (Accuracy@XKm), radius-gated event
studies with a random-shuffle AP baseline, relative increase of daily
detection counts around event days (RTI/mRTI), smoothed-histogram IoU
between two daily series, and burst-onset flagging.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import date, datetime, timedelta, timezone
from math import asin, cos, radians, sin, sqrt
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .evaluation import average_precision

EARTH_RADIUS_KM = 6371.0  # mean radius; fixed constant, not config


class UndefinedRti(ValueError):
    """Raised when the pre-event window has zero total count."""


@dataclass(frozen=True)
class GeoEvent:
    name: str
    timestamp: date
    lat: float
    lon: float
    category: str
    magnitude: float | None = None

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise DataError(f"event {self.name!r}: latitude {self.lat} out of range")
        if not -180.0 <= self.lon <= 180.0:
            raise DataError(f"event {self.name!r}: longitude {self.lon} out of range")


@dataclass(frozen=True)
class Detection:
    id: str
    category: str
    confidence: float
    lat: float | None = None
    lon: float | None = None
    timestamp: datetime | None = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise DataError(f"detection {self.id!r}: confidence {self.confidence} not in [0,1]")
        if (self.lat is None) != (self.lon is None):
            raise DataError(f"detection {self.id!r}: lat and lon must come together")

    @property
    def has_geo(self) -> bool:
        return self.lat is not None


@dataclass(frozen=True)
class DailySeries:
    """Contiguous per-day detection counts starting at `start` (no gaps)."""

    start: date
    counts: np.ndarray
    category: str = ""

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 1 or (c < 0).any():
            raise DataError("daily counts must be a 1-D non-negative vector")
        object.__setattr__(self, "counts", c)

    def __len__(self) -> int:
        return len(self.counts)

    @property
    def end(self) -> date:
        return self.start + timedelta(days=len(self.counts) - 1)

    def index_of(self, day: date) -> int:
        return (day - self.start).days

    def day_at(self, index: int) -> date:
        return self.start + timedelta(days=index)


@dataclass(frozen=True)
class EventApResult:
    ap: float
    baseline_ap: float
    n_shuffles: int
    seed: int


@dataclass(frozen=True)
class MrtiResult:
    mean: float | None
    per_event: dict[str, float]
    undefined_events: tuple[str, ...]


def filter_by_confidence(
    detections: Sequence[Detection], category: str | None, threshold: float
) -> list[Detection]:
    """Detections of `category` with confidence strictly above `threshold`,
    original order preserved. `category=None` keeps all categories."""
    if not 0.0 <= threshold <= 1.0:
        raise DataError(f"threshold {threshold} not in [0,1]")
    return [
        d
        for d in detections
        if (category is None or d.category == category) and d.confidence > threshold
    ]


def haversine_km(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in kilometers between (lat, lon) points in degrees."""
    lat1, lon1 = radians(a[0]), radians(a[1])
    lat2, lon2 = radians(b[0]), radians(b[1])
    s = sin((lat2 - lat1) / 2.0) ** 2 + cos(lat1) * cos(lat2) * sin((lon2 - lon1) / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * asin(min(1.0, sqrt(s)))


def nearest_event_km(detection: Detection, events: Sequence[GeoEvent]) -> float:
    if not detection.has_geo:
        raise DataError(f"detection {detection.id!r} has no coordinates")
    return min(haversine_km((detection.lat, detection.lon), (e.lat, e.lon)) for e in events)


def accuracy_at_km(
    detections: Sequence[Detection],
    events: Sequence[GeoEvent],
    x_values: Sequence[float],
) -> dict[float, float]:
    """For each X, the fraction of detections within X km of the nearest event."""
    if not events:
        raise DataError("accuracy_at_km needs at least one event")
    geo = [d for d in detections if d.has_geo]
    if not geo:
        raise DataError("no geo-tagged detections")
    dists = np.array([nearest_event_km(d, events) for d in geo])
    return {float(x): float(np.mean(dists <= x)) for x in x_values}


def radius_gate(
    detections: Sequence[Detection],
    center: tuple[float, float],
    radius_km: float = 250.0,
) -> list[Detection]:
    """Detections within `radius_km` of `center` (order preserved)."""
    return [
        d
        for d in detections
        if d.has_geo and haversine_km((d.lat, d.lon), center) <= radius_km
    ]


def event_ap(
    detections: Sequence[Detection],
    labels: Sequence[int],
    n_shuffles: int = 100,
    seed: int = 0,
) -> EventApResult:
    """AP of confidence-ranked detections against human labels, plus the mean
    AP of randomly shuffled rankings as a chance baseline."""
    if len(detections) != len(labels):
        raise DataError("labels must parallel detections")
    y = np.asarray(labels, dtype=np.int64)
    if y.sum() == 0:
        raise DataError("event_ap needs at least one positive label")
    scores = [d.confidence for d in detections]
    ids = [d.id for d in detections]
    ap = average_precision(scores, y, ids)

    rng = np.random.default_rng(seed)
    baseline = []
    for _ in range(n_shuffles):
        perm = rng.permutation(len(y))
        # a shuffled ranking: positions are the ranks, labels follow the permutation
        baseline.append(average_precision(-np.arange(len(y)), y[perm]))
    return EventApResult(
        ap=float(ap),
        baseline_ap=float(np.mean(baseline)),
        n_shuffles=n_shuffles,
        seed=seed,
    )


def rti(series: DailySeries, event_day: date, w: int = 7) -> float:
    """Relative increase of daily counts around an event day.

    Sum of counts over [event, event + w] divided by the sum over
    [event - w, event]; both windows include the event day itself, following
    the index bounds of the defining formula. Raises UndefinedRti when the
    pre-event window is all zero.
    """
    if w < 1:
        raise DataError(f"rti window must be >= 1, got {w}")
    e = series.index_of(event_day)
    if e - w < 0 or e + w >= len(series):
        raise DataError(
            f"series does not cover [{event_day} - {w}d, {event_day} + {w}d]"
        )
    after = int(series.counts[e : e + w + 1].sum())
    before = int(series.counts[e - w : e + 1].sum())
    if before == 0:
        raise UndefinedRti(f"zero detection count in the {w} days before {event_day}")
    return after / before


def mrti(
    series: DailySeries | Sequence[DailySeries],
    events: Sequence[GeoEvent],
    w: int = 7,
) -> MrtiResult:
    """Mean RTI over events; events with undefined RTI are reported separately.

    Pass one series (shared by all events, the usual per-category setup) or
    one series per event.
    """
    if isinstance(series, DailySeries):
        per_event_series = [series] * len(events)
    else:
        per_event_series = list(series)
        if len(per_event_series) != len(events):
            raise DataError(f"{len(per_event_series)} series for {len(events)} events")
    values: dict[str, float] = {}
    undefined: list[str] = []
    for s, ev in zip(per_event_series, events):
        try:
            values[ev.name] = rti(s, ev.timestamp, w)
        except UndefinedRti:
            undefined.append(ev.name)
    mean = float(np.mean(list(values.values()))) if values else None
    return MrtiResult(mean=mean, per_event=values, undefined_events=tuple(undefined))


def _align(a: DailySeries, b: DailySeries) -> tuple[np.ndarray, np.ndarray]:
    """Zero-fill both series onto the union of their date ranges."""
    start = min(a.start, b.start)
    end = max(a.end, b.end)
    n = (end - start).days + 1
    out = []
    for s in (a, b):
        v = np.zeros(n, dtype=np.float64)
        off = (s.start - start).days
        v[off : off + len(s)] = s.counts
        out.append(v)
    return out[0], out[1]


def _smooth(v: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average, truncated at the edges, renormalized to sum 1."""
    if window == 1:
        return v
    half = window // 2
    out = np.empty_like(v)
    for i in range(len(v)):
        lo, hi = max(0, i - half), min(len(v), i + half + 1)
        out[i] = v[lo:hi].mean()
    total = out.sum()
    return out / total if total > 0 else out


def histogram_iou(a: DailySeries, b: DailySeries, smooth_window: int = 7) -> float:
    """Intersection-over-union of two normalized, low-pass-smoothed series."""
    if smooth_window < 1 or smooth_window % 2 == 0:
        raise DataError(f"smooth_window must be odd and >= 1, got {smooth_window}")
    va, vb = _align(a, b)
    if va.sum() == 0 and vb.sum() == 0:
        raise DataError("both series are all-zero")
    va = va / va.sum() if va.sum() > 0 else va
    vb = vb / vb.sum() if vb.sum() > 0 else vb
    va = _smooth(va, smooth_window)
    vb = _smooth(vb, smooth_window)
    return float(np.minimum(va, vb).sum() / np.maximum(va, vb).sum())


def flag_peaks(
    series: DailySeries, w: int = 7, rti_threshold: float = 2.0
) -> list[date]:
    """Days whose post/pre count ratio clears the threshold and that are local
    maxima against their immediate neighbors."""
    if len(series) <= 2 * w:
        raise DataError(f"series of {len(series)} days too short for w={w}")
    counts = series.counts
    flagged = []
    for i in range(w, len(series) - w):
        if counts[i] < counts[i - 1] or counts[i] < counts[i + 1]:
            continue
        day = series.day_at(i)
        try:
            if rti(series, day, w) >= rti_threshold:
                flagged.append(day)
        except UndefinedRti:
            continue
    return flagged


# ---------------------------------------------------------------------------
# file formats: events CSV (name,date,lat,lon,category,magnitude),
# series CSV (date,count), detections CSV (id,category,confidence,lat,lon,
# timestamp[,label])


def load_events_csv(path: str | Path) -> list[GeoEvent]:
    events = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"name", "date", "lat", "lon", "category"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"{path}: events CSV must have columns {sorted(required)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                mag = row.get("magnitude", "")
                events.append(
                    GeoEvent(
                        name=row["name"],
                        timestamp=date.fromisoformat(row["date"]),
                        lat=float(row["lat"]),
                        lon=float(row["lon"]),
                        category=row["category"],
                        magnitude=float(mag) if mag else None,
                    )
                )
            except (ValueError, KeyError) as exc:
                raise DataError(f"{path} line {lineno}: {exc}") from exc
    return events


def write_events_csv(path: str | Path, events: Sequence[GeoEvent]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "date", "lat", "lon", "category", "magnitude"])
        for e in events:
            writer.writerow(
                [
                    e.name,
                    e.timestamp.isoformat(),
                    repr(e.lat),
                    repr(e.lon),
                    e.category,
                    "" if e.magnitude is None else repr(e.magnitude),
                ]
            )


def load_series_csv(path: str | Path, category: str = "") -> DailySeries:
    """Read (date,count) rows; missing days in between are zero-filled."""
    rows: dict[date, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"date", "count"}.issubset(reader.fieldnames):
            raise DataError(f"{path}: series CSV must have columns date,count")
        for lineno, row in enumerate(reader, start=2):
            try:
                d = date.fromisoformat(row["date"])
                c = int(row["count"])
            except (ValueError, KeyError) as exc:
                raise DataError(f"{path} line {lineno}: {exc}") from exc
            if d in rows:
                raise DataError(f"{path} line {lineno}: duplicate date {d}")
            if c < 0:
                raise DataError(f"{path} line {lineno}: negative count")
            rows[d] = c
    if not rows:
        raise DataError(f"{path}: empty series")
    start, end = min(rows), max(rows)
    counts = np.zeros((end - start).days + 1, dtype=np.int64)
    for d, c in rows.items():
        counts[(d - start).days] = c
    return DailySeries(start=start, counts=counts, category=category)


def write_series_csv(path: str | Path, series: DailySeries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "count"])
        for i, c in enumerate(series.counts):
            writer.writerow([series.day_at(i).isoformat(), int(c)])


def load_detections_csv(path: str | Path) -> tuple[list[Detection], list[int] | None]:
    """Read detections; returns (detections, labels) where labels is present
    only when the optional human-label column exists."""
    detections = []
    labels: list[int] = []
    has_labels = False
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"id", "category", "confidence"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"{path}: detections CSV must have columns {sorted(required)}")
        has_labels = "label" in (reader.fieldnames or [])
        for lineno, row in enumerate(reader, start=2):
            try:
                lat = row.get("lat", "")
                lon = row.get("lon", "")
                ts = row.get("timestamp", "")
                detections.append(
                    Detection(
                        id=row["id"],
                        category=row["category"],
                        confidence=float(row["confidence"]),
                        lat=float(lat) if lat else None,
                        lon=float(lon) if lon else None,
                        timestamp=datetime.fromisoformat(ts.replace("Z", "+00:00")).astimezone(
                            timezone.utc
                        )
                        if ts
                        else None,
                    )
                )
                if has_labels:
                    labels.append(int(row["label"]))
            except (ValueError, KeyError) as exc:
                raise DataError(f"{path} line {lineno}: {exc}") from exc
    return detections, (labels if has_labels else None)


def write_detections_csv(
    path: str | Path, detections: Sequence[Detection], labels: Sequence[int] | None = None
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["id", "category", "confidence", "lat", "lon", "timestamp"]
        if labels is not None:
            header.append("label")
        writer.writerow(header)
        for i, d in enumerate(detections):
            row = [
                d.id,
                d.category,
                repr(d.confidence),
                "" if d.lat is None else repr(d.lat),
                "" if d.lon is None else repr(d.lon),
                d.timestamp.isoformat().replace("+00:00", "Z") if d.timestamp else "",
            ]
            if labels is not None:
                row.append(int(labels[i]))
            writer.writerow(row)
