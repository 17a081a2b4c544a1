"""Partial-label records, per-task target/weight vectors, embeddings, and splits.

Labeling semantics for one task (incident or place):

* a class-positive record is one-hot supervised with all weights 1 -- the
  single-label assumption makes it a known negative for every other class;
* a record with only class-negative labels gets zero targets and weights
  set on exactly the negated classes, leaving the rest unsupervised;
* a scene-augmentation record (source "places_aug") gets all-zero incident
  weights so the incident loss never back-propagates through it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError
from .taxonomy import Taxonomy

SOURCES = ("dataset", "places_aug", "stream")
TASKS = ("incident", "place")

EMBEDDING_MAGIC = b"INCEMB01"


@dataclass(frozen=True)
class PartialLabelRecord:
    """One image: id, embedding row, partial labels, optional geo/time metadata."""

    id: str
    embedding_index: int
    incident_pos: str | None = None
    incident_neg: frozenset[str] = frozenset()
    place_pos: str | None = None
    place_neg: frozenset[str] = frozenset()
    source: str = "dataset"
    lat_lon: tuple[float, float] | None = None
    timestamp: datetime | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise DataError(f"record {self.id!r}: unknown source {self.source!r}")
        if self.embedding_index < 0:
            raise DataError(f"record {self.id!r}: negative embedding_index")
        if self.incident_pos is not None and self.incident_pos in self.incident_neg:
            raise DataError(f"record {self.id!r}: incident_pos also listed as negative")
        if self.place_pos is not None and self.place_pos in self.place_neg:
            raise DataError(f"record {self.id!r}: place_pos also listed as negative")
        if self.source == "places_aug" and self.incident_pos is not None:
            raise DataError(
                f"record {self.id!r}: places_aug records cannot carry an incident positive"
            )

    def positive(self, task: str) -> str | None:
        return self.incident_pos if task == "incident" else self.place_pos

    def negatives(self, task: str) -> frozenset[str]:
        return self.incident_neg if task == "incident" else self.place_neg


@dataclass(frozen=True)
class LabelView:
    """Dense {0,1} target and known-mask weight vectors for one task."""

    targets: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True)
class EmbeddingStore:
    """count x dim float32 matrix of precomputed image embeddings."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2:
            raise DataError("embedding data must be a 2-D matrix")
        if self.data.dtype != np.float32:
            object.__setattr__(self, "data", self.data.astype(np.float32))
        if self.data.size and not np.isfinite(self.data).all():
            bad = np.where(~np.isfinite(self.data).all(axis=1))[0]
            raise DataError(f"non-finite embedding rows: {bad[:8].tolist()}")

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def count(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class SplitManifest:
    train: frozenset[str]
    val: frozenset[str]
    test: frozenset[str]

    def subset(self, records: Sequence[PartialLabelRecord], name: str):
        ids = getattr(self, name)
        return [r for r in records if r.id in ids]


@dataclass(frozen=True)
class Batch:
    embeddings: np.ndarray
    incident: LabelView
    place: LabelView
    records: tuple[PartialLabelRecord, ...]


def _parse_timestamp(value: str, lineno: int) -> datetime:
    try:
        ts = datetime.fromisoformat(value.replace("Z", "+00:00"))
    except ValueError:
        raise DataError(f"manifest line {lineno}: bad timestamp {value!r}") from None
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def record_from_json(obj: dict, taxonomy: Taxonomy, lineno: int = 0) -> PartialLabelRecord:
    def check(task: str, name):
        if name is not None:
            taxonomy.index_of(task, name)  # raises DataError on unknown category
        return name

    try:
        rec_id = obj["id"]
        emb = int(obj["embedding_index"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"manifest line {lineno}: missing/invalid id or embedding_index ({exc})")
    lat, lon = obj.get("lat"), obj.get("lon")
    if (lat is None) != (lon is None):
        raise DataError(f"manifest line {lineno}: lat and lon must come together")
    ts = obj.get("timestamp")
    return PartialLabelRecord(
        id=str(rec_id),
        embedding_index=emb,
        incident_pos=check("incident", obj.get("incident_pos")),
        incident_neg=frozenset(check("incident", n) for n in obj.get("incident_neg", [])),
        place_pos=check("place", obj.get("place_pos")),
        place_neg=frozenset(check("place", n) for n in obj.get("place_neg", [])),
        source=obj.get("source", "dataset"),
        lat_lon=(float(lat), float(lon)) if lat is not None else None,
        timestamp=_parse_timestamp(ts, lineno) if ts else None,
    )


def record_to_json(r: PartialLabelRecord) -> dict:
    obj: dict = {
        "id": r.id,
        "embedding_index": r.embedding_index,
        "incident_pos": r.incident_pos,
        "incident_neg": sorted(r.incident_neg),
        "place_pos": r.place_pos,
        "place_neg": sorted(r.place_neg),
        "source": r.source,
    }
    if r.lat_lon is not None:
        obj["lat"], obj["lon"] = r.lat_lon
    if r.timestamp is not None:
        obj["timestamp"] = r.timestamp.astimezone(timezone.utc).isoformat().replace(
            "+00:00", "Z"
        )
    return obj


def load_manifest(path: str | Path, taxonomy: Taxonomy) -> list[PartialLabelRecord]:
    """Read a JSON-lines manifest, validating categories against the taxonomy."""
    records = []
    seen: set[str] = set()
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest line {lineno}: invalid JSON ({exc.msg})") from exc
        rec = record_from_json(obj, taxonomy, lineno)
        if rec.id in seen:
            raise DataError(f"manifest line {lineno}: duplicate id {rec.id!r}")
        seen.add(rec.id)
        records.append(rec)
    return records


def write_manifest(path: str | Path, records: Sequence[PartialLabelRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(record_to_json(r), sort_keys=True) + "\n")


def label_view(record: PartialLabelRecord, task: str, taxonomy: Taxonomy) -> LabelView:
    """Materialize the target/weight vectors implementing the partial-label regimes."""
    if task not in TASKS:
        raise ValueError(f"unknown task: {task!r}")
    n = taxonomy.n_incidents if task == "incident" else taxonomy.n_places
    targets = np.zeros(n, dtype=np.float64)
    weights = np.zeros(n, dtype=np.float64)

    if task == "incident" and record.source == "places_aug":
        # scene-augmentation images never drive the incident loss
        return LabelView(targets=targets, weights=weights)

    pos = record.positive(task)
    if pos is not None:
        targets[taxonomy.index_of(task, pos)] = 1.0
        weights[:] = 1.0  # single label: every other class is a known negative
        return LabelView(targets=targets, weights=weights)

    for name in record.negatives(task):
        weights[taxonomy.index_of(task, name)] = 1.0
    return LabelView(targets=targets, weights=weights)


def _split_key(record_id: str, seed: int) -> int:
    digest = hashlib.blake2b(
        f"{record_id}\x1f{seed}".encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def split(
    records: Sequence[PartialLabelRecord],
    seed: int,
    ratios: tuple[float, float, float] = (0.90, 0.05, 0.05),
) -> SplitManifest:
    """Deterministic train/val/test partition with sizes within 1 of n*ratio.

    Records are ordered by a stable 64-bit hash of (id, seed) and the sorted
    sequence is cut at the cumulative ratio boundaries, so re-running with the
    same ids and seed reproduces the same partition exactly.
    """
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate record ids in split input")
    order = sorted(ids, key=lambda i: (_split_key(i, seed), i))

    n = len(order)
    counts = [int(np.floor(n * r)) for r in ratios]
    remainders = [n * r - c for r, c in zip(ratios, counts)]
    for _ in range(n - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    cut1, cut2 = counts[0], counts[0] + counts[1]
    return SplitManifest(
        train=frozenset(order[:cut1]),
        val=frozenset(order[cut1:cut2]),
        test=frozenset(order[cut2:]),
    )


def write_embeddings(store: EmbeddingStore, path: str | Path) -> None:
    """Bit-exact binary format: magic, u32 dim, u64 count, f32 rows (all LE)."""
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<IQ", store.dim, store.count))
        fh.write(np.ascontiguousarray(store.data, dtype="<f4").tobytes())


def load_embeddings(path: str | Path) -> EmbeddingStore:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read embeddings {path}: {exc}") from exc
    header = len(EMBEDDING_MAGIC) + 12
    if len(blob) < header:
        raise DataError(f"{path}: truncated embedding header")
    if blob[: len(EMBEDDING_MAGIC)] != EMBEDDING_MAGIC:
        raise DataError(f"{path}: bad magic bytes (not an embedding file)")
    dim, count = struct.unpack_from("<IQ", blob, len(EMBEDDING_MAGIC))
    expected = header + 4 * dim * count
    if len(blob) != expected:
        raise DataError(
            f"{path}: expected {expected} bytes for {count}x{dim} f32, got {len(blob)}"
        )
    data = np.frombuffer(blob, dtype="<f4", count=dim * count, offset=header)
    return EmbeddingStore(data=data.reshape(count, dim).copy())


def validate_embedding_coverage(
    records: Sequence[PartialLabelRecord], store: EmbeddingStore
) -> None:
    for r in records:
        if r.embedding_index >= store.count:
            raise DataError(
                f"record {r.id!r}: embedding_index {r.embedding_index} "
                f">= store count {store.count}"
            )


def _stack_views(
    records: Sequence[PartialLabelRecord], task: str, taxonomy: Taxonomy
) -> LabelView:
    views = [label_view(r, task, taxonomy) for r in records]
    return LabelView(
        targets=np.stack([v.targets for v in views]),
        weights=np.stack([v.weights for v in views]),
    )


def batch_iter(
    records: Sequence[PartialLabelRecord],
    store: EmbeddingStore,
    taxonomy: Taxonomy,
    batch_size: int,
    seed: int,
    epoch: int,
) -> Iterator[Batch]:
    """Yield shuffled batches; the permutation is a pure function of (seed, epoch)."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(epoch,)))
    perm = rng.permutation(len(records))
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in perm[start : start + batch_size]]
        rows = np.array([r.embedding_index for r in chunk], dtype=np.intp)
        yield Batch(
            embeddings=store.data[rows].astype(np.float64),
            incident=_stack_views(chunk, "incident", taxonomy),
            place=_stack_views(chunk, "place", taxonomy),
            records=tuple(chunk),
        )
