"""Deterministic synthetic scenarios for desk-scale benchmarks.

Three coupled scenarios come out of one seed:

* an embedding benchmark with Gaussian class clusters and hard negatives
  parked just off each incident cluster (the fireplace-next-to-"on fire"
  situation), which is what makes the masked-loss-vs-softmax comparison
  testable without the real image corpus;
* a geospatial scenario with detections clustered around ground-truth
  events plus far-away low-confidence background;
* a temporal scenario with a flat baseline and ramp-up/decay bursts at the
  event days, built so that burst onsets are exactly the days a peak
  scanner should flag.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from datetime import date, datetime, timedelta, timezone
from math import asin, atan2, cos, degrees, radians, sin
from pathlib import Path

import numpy as np

from . import dataset as ds
from .analytics import (
    DailySeries,
    Detection,
    GeoEvent,
    EARTH_RADIUS_KM,
    write_detections_csv,
    write_events_csv,
    write_series_csv,
)
from .errors import ConfigError
from .taxonomy import Taxonomy, parse_taxonomy

SERIES_START = date(2017, 9, 1)
DECAY_CAP_DAYS = 30


@dataclass(frozen=True)
class SynthSpec:
    """Generator knobs; defaults are the acceptance-benchmark configuration."""

    # embedding benchmark
    n_incident_classes: int = 4
    n_place_classes: int = 3
    dim: int = 32
    sigma: float = 1.0
    separation: float = 6.0  # cluster center norm, in sigmas
    hard_offset: float = 2.5  # hard-negative displacement off the center, in sigmas
    hard_noise: float = 0.5  # isotropic jitter around the displaced point
    train_per_class: int = 60
    test_per_class: int = 40
    hard_negative_fraction: float = 0.5
    places_aug: int = 60
    test_places_aug: int = 30  # incident-free scene images for the augmented test set
    duplicate_pairs: int = 6  # near-exact copies, so dedup has work to do
    # geo scenario
    n_events: int = 3
    near_per_event: int = 40
    background_detections: int = 120
    near_radius_km: float = 40.0
    background_min_km: float = 500.0
    # temporal scenario
    n_days: int = 240
    burst_window: int = 7
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.hard_negative_fraction <= 1.0:
            raise ConfigError("hard_negative_fraction must be in [0,1]")
        if self.separation <= 0:
            raise ConfigError("separation must be positive")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.dim % 2 != 0:
            raise ConfigError("dim must be even (incident and place halves)")
        if self.dim // 2 < max(self.n_incident_classes, self.n_place_classes):
            raise ConfigError("dim//2 must be >= the class count of each task")
        if min(self.n_incident_classes, self.n_place_classes) < 1:
            raise ConfigError("need at least one class per task")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("per-class counts must be >= 1")
        if self.burst_window < 1:
            raise ConfigError("burst_window must be >= 1")
        if not 0.0 < self.near_radius_km < self.background_min_km:
            # separation is what makes the filtered curve dominate everywhere
            raise ConfigError("near_radius_km must be positive and below background_min_km")
        if self._onset_slot_width() < self._min_onset_gap():
            raise ConfigError(
                f"n_days={self.n_days} too short for {self.n_events} separated bursts"
            )

    def _min_onset_gap(self) -> int:
        # previous decay must die out before the next ramp's lookback window
        return DECAY_CAP_DAYS + 2 * self.burst_window + 2

    def _onset_slot_width(self) -> int:
        lo = self.burst_window + 2
        hi = self.n_days - self.burst_window - DECAY_CAP_DAYS - 2
        return max(0, (hi - lo) // self.n_events)

    def incident_names(self) -> list[str]:
        return [f"incident-{i}" for i in range(self.n_incident_classes)]

    def place_names(self) -> list[str]:
        return [f"place-{i}" for i in range(self.n_place_classes)]


@dataclass
class SynthData:
    taxonomy: Taxonomy
    train_records: list[ds.PartialLabelRecord]
    test_records: list[ds.PartialLabelRecord]
    store: ds.EmbeddingStore
    events: list[GeoEvent]
    series: DailySeries
    detections: list[Detection]
    detection_labels: list[int]
    burst_onsets: list[date]
    meta: dict


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)))


def _orthonormal_directions(rng: np.random.Generator, dim: int, n: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(dim, n)))
    return q.T  # n rows, each a unit direction


def _synth_taxonomy(spec: SynthSpec) -> Taxonomy:
    lines = ["[incidents]"] + spec.incident_names() + ["[places]"] + spec.place_names()
    return parse_taxonomy("\n".join(lines))


def _destination(lat: float, lon: float, bearing_rad: float, dist_km: float) -> tuple[float, float]:
    """Exact great-circle destination point, so planted distances are exact."""
    delta = dist_km / EARTH_RADIUS_KM
    phi1, lam1 = radians(lat), radians(lon)
    phi2 = asin(sin(phi1) * cos(delta) + cos(phi1) * sin(delta) * cos(bearing_rad))
    lam2 = lam1 + atan2(
        sin(bearing_rad) * sin(delta) * cos(phi1),
        cos(delta) - sin(phi1) * sin(phi2),
    )
    lon2 = (degrees(lam2) + 540.0) % 360.0 - 180.0
    return degrees(phi2), lon2


def _haversine(a: tuple[float, float], b: tuple[float, float]) -> float:
    lat1, lon1 = radians(a[0]), radians(a[1])
    lat2, lon2 = radians(b[0]), radians(b[1])
    s = sin((lat2 - lat1) / 2.0) ** 2 + cos(lat1) * cos(lat2) * sin((lon2 - lon1) / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * asin(min(1.0, s**0.5))


def _pick_onsets(rng: np.random.Generator, spec: SynthSpec) -> list[int]:
    """Burst onset day indices, spaced so the scenarios never interact."""
    lo = spec.burst_window + 2
    gap = spec._onset_slot_width()
    min_gap = spec._min_onset_gap()
    if gap < min_gap:
        raise ConfigError("n_days too short for the requested burst count")
    return [
        lo + k * gap + int(rng.integers(0, gap - min_gap + 1))
        for k in range(spec.n_events)
    ]


def _temporal_counts(
    rng: np.random.Generator, spec: SynthSpec, onsets: list[int]
) -> tuple[np.ndarray, dict]:
    """Flat baseline plus, per onset: a strict ramp over the w prior days, a
    peak at the onset, and a geometric decay.

    The ramp removes local maxima from the onset's lookback window, which is
    what lets a ratio-threshold peak scanner flag the onset and nothing else.
    """
    w = spec.burst_window
    baseline = int(rng.integers(4, 10))
    counts = np.full(spec.n_days, baseline, dtype=np.int64)
    amplitudes, decays = [], []
    for e in onsets:
        amp = int(rng.integers(60, 91))
        decay = float(rng.uniform(0.88, 0.92))
        amplitudes.append(amp)
        decays.append(decay)
        for j in range(1, w + 1):
            counts[e - j] += w + 1 - j
        counts[e] += amp
        for k in range(1, DECAY_CAP_DAYS + 1):
            bump = round(amp * decay**k)
            if bump == 0 or e + k >= spec.n_days:
                break
            counts[e + k] += bump
    params = {"baseline": baseline, "amplitudes": amplitudes, "decays": decays}
    return counts, params


def _embedding_scenario(
    rng: np.random.Generator, spec: SynthSpec, taxonomy: Taxonomy
) -> tuple[list[ds.PartialLabelRecord], list[ds.PartialLabelRecord], ds.EmbeddingStore, dict]:
    half = spec.dim // 2
    s = spec.sigma
    inc_centers = spec.separation * s * _orthonormal_directions(rng, half, spec.n_incident_classes)
    pl_centers = spec.separation * s * _orthonormal_directions(rng, half, spec.n_place_classes)
    hard_dirs = rng.normal(size=(spec.n_incident_classes, half))
    hard_dirs /= np.linalg.norm(hard_dirs, axis=1, keepdims=True)

    incidents = taxonomy.incidents
    places = taxonomy.places
    rows: list[np.ndarray] = []
    train: list[ds.PartialLabelRecord] = []
    test: list[ds.PartialLabelRecord] = []

    def emit(
        out: list[ds.PartialLabelRecord], rid: str, inc_part: np.ndarray, place_class: int, **kw
    ) -> None:
        pl_part = pl_centers[place_class] + s * rng.normal(size=half)
        rows.append(np.concatenate([inc_part, pl_part]))
        out.append(
            ds.PartialLabelRecord(
                id=rid,
                embedding_index=len(rows) - 1,
                place_pos=places[place_class],
                **kw,
            )
        )

    n_hard_train = round(spec.hard_negative_fraction * spec.train_per_class)
    n_hard_test = round(spec.hard_negative_fraction * spec.test_per_class)
    for split, out, n_pos, n_hard in (
        ("train", train, spec.train_per_class, n_hard_train),
        ("test", test, spec.test_per_class, n_hard_test),
    ):
        for c in range(spec.n_incident_classes):
            for i in range(n_pos):
                emit(
                    out,
                    f"syn-{split}-pos-{c}-{i:04d}",
                    inc_centers[c] + s * rng.normal(size=half),
                    int(rng.integers(spec.n_place_classes)),
                    incident_pos=incidents[c],
                )
        for c in range(spec.n_incident_classes):
            for i in range(n_hard):
                emit(
                    out,
                    f"syn-{split}-hard-{c}-{i:04d}",
                    inc_centers[c]
                    + spec.hard_offset * s * hard_dirs[c]
                    + spec.hard_noise * s * rng.normal(size=half),
                    int(rng.integers(spec.n_place_classes)),
                    incident_neg=frozenset([incidents[c]]),
                )
    for split, out, n_aug in (("train", train, spec.places_aug), ("test", test, spec.test_places_aug)):
        for i in range(n_aug):
            emit(
                out,
                f"syn-{split}-aug-{i:04d}",
                s * rng.normal(size=half),
                int(rng.integers(spec.n_place_classes)),
                source="places_aug",
            )
    for i in range(min(spec.duplicate_pairs, len(train))):
        src = train[i]
        rows.append(rows[src.embedding_index] + 0.001 * s * rng.normal(size=spec.dim))
        train.append(
            ds.PartialLabelRecord(
                id=f"syn-train-dup-{i:04d}",
                embedding_index=len(rows) - 1,
                incident_pos=src.incident_pos,
                place_pos=src.place_pos,
                source=src.source,
            )
        )

    store = ds.EmbeddingStore(np.asarray(rows, dtype=np.float32))
    meta = {
        "incident_centers": inc_centers.tolist(),
        "place_centers": pl_centers.tolist(),
        "hard_directions": hard_dirs.tolist(),
        "incident_dims": [0, half],
        "place_dims": [half, spec.dim],
        "cluster_rms_radius": s * half**0.5,
    }
    return train, test, store, meta


def _geo_scenario(
    rng: np.random.Generator, spec: SynthSpec, taxonomy: Taxonomy, onsets: list[int]
) -> tuple[list[GeoEvent], list[Detection], list[int]]:
    incidents = taxonomy.incidents
    events = []
    for k, onset in enumerate(onsets):
        events.append(
            GeoEvent(
                name=f"event-{k}",
                timestamp=SERIES_START + timedelta(days=onset),
                lat=float(rng.uniform(-55.0, 55.0)),
                lon=float(rng.uniform(-175.0, 175.0)),
                category=incidents[k % len(incidents)],
                magnitude=float(np.round(rng.uniform(5.0, 8.0), 1)),
            )
        )

    detections: list[Detection] = []
    labels: list[int] = []
    for k, ev in enumerate(events):
        for i in range(spec.near_per_event):
            dist = spec.near_radius_km * float(np.sqrt(rng.uniform()))  # disk-uniform
            lat, lon = _destination(ev.lat, ev.lon, float(rng.uniform(0, 2 * np.pi)), dist)
            when = datetime.combine(
                ev.timestamp, datetime.min.time(), tzinfo=timezone.utc
            ) + timedelta(hours=float(rng.uniform(0, 24 * spec.burst_window)))
            detections.append(
                Detection(
                    id=f"det-near-{k}-{i:04d}",
                    category=ev.category,
                    confidence=float(rng.uniform(0.7, 0.99)),
                    lat=lat,
                    lon=lon,
                    timestamp=when,
                )
            )
            labels.append(1)
    n_bg = 0
    while n_bg < spec.background_detections:
        lat = float(rng.uniform(-70.0, 70.0))
        lon = float(rng.uniform(-180.0, 180.0))
        if min(_haversine((lat, lon), (e.lat, e.lon)) for e in events) < spec.background_min_km:
            continue
        when = datetime.combine(
            SERIES_START, datetime.min.time(), tzinfo=timezone.utc
        ) + timedelta(hours=float(rng.uniform(0, 24 * spec.n_days)))
        detections.append(
            Detection(
                id=f"det-bg-{n_bg:04d}",
                category=incidents[int(rng.integers(len(incidents)))],
                confidence=float(rng.uniform(0.01, 0.45)),
                lat=lat,
                lon=lon,
                timestamp=when,
            )
        )
        labels.append(0)
        n_bg += 1
    return events, detections, labels


def temporal_scenario(spec: SynthSpec) -> tuple[DailySeries, list[date]]:
    """Just the daily series and its burst onset dates (cheaper than generate)."""
    spec.validate()
    rng = _rng(spec.seed, 2)
    onsets = _pick_onsets(rng, spec)
    counts, _ = _temporal_counts(rng, spec, onsets)
    series = DailySeries(
        start=SERIES_START, counts=counts, category=spec.incident_names()[0]
    )
    return series, [SERIES_START + timedelta(days=e) for e in onsets]


def generate(spec: SynthSpec) -> SynthData:
    """All three scenarios from one seed; same spec twice gives identical data."""
    spec.validate()
    taxonomy = _synth_taxonomy(spec)

    train, test, store, emb_meta = _embedding_scenario(_rng(spec.seed, 0), spec, taxonomy)

    rng_t = _rng(spec.seed, 2)
    onsets = _pick_onsets(rng_t, spec)
    counts, temporal_meta = _temporal_counts(rng_t, spec, onsets)
    series = DailySeries(start=SERIES_START, counts=counts, category=taxonomy.incidents[0])

    events, detections, labels = _geo_scenario(_rng(spec.seed, 1), spec, taxonomy, onsets)

    meta = {
        "spec": asdict(spec),
        "embedding": emb_meta,
        "temporal": {
            **temporal_meta,
            "onset_indices": onsets,
            "onset_dates": [(SERIES_START + timedelta(days=e)).isoformat() for e in onsets],
            "start": SERIES_START.isoformat(),
        },
        "counts": {
            "train_records": len(train),
            "test_records": len(test),
            "embeddings": store.count,
            "detections": len(detections),
        },
    }
    return SynthData(
        taxonomy=taxonomy,
        train_records=train,
        test_records=test,
        store=store,
        events=events,
        series=series,
        detections=detections,
        detection_labels=labels,
        burst_onsets=[SERIES_START + timedelta(days=e) for e in onsets],
        meta=meta,
    )


def write_outputs(data: SynthData, out_dir: str | Path) -> dict[str, Path]:
    """Write every artifact the CLI pipeline consumes; returns name -> path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "taxonomy": out / "taxonomy.txt",
        "train_manifest": out / "train.jsonl",
        "test_manifest": out / "test.jsonl",
        "embeddings": out / "embeddings.bin",
        "events": out / "events.csv",
        "series": out / "series.csv",
        "detections": out / "detections.csv",
        "meta": out / "meta.json",
    }
    with open(paths["taxonomy"], "w", encoding="utf-8") as fh:
        fh.write("[incidents]\n")
        fh.writelines(f"{n}\n" for n in data.taxonomy.incidents)
        fh.write("[places]\n")
        fh.writelines(f"{n}\n" for n in data.taxonomy.places)
    ds.write_manifest(paths["train_manifest"], data.train_records)
    ds.write_manifest(paths["test_manifest"], data.test_records)
    ds.write_embeddings(data.store, paths["embeddings"])
    write_events_csv(paths["events"], data.events)
    write_series_csv(paths["series"], data.series)
    write_detections_csv(paths["detections"], data.detections, data.detection_labels)
    with open(paths["meta"], "w", encoding="utf-8") as fh:
        json.dump(data.meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return paths
