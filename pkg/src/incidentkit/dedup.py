"""Near-duplicate removal by radius clustering over embedding vectors.

Two records sharing an edge whenever their distance is within the radius,
clusters are the connected components of that graph (union-find), which
makes the partition independent of input order. Each cluster keeps its
lexicographically-smallest id as representative.

Strategies: ``brute_force`` scans all pairs; ``grid`` buckets vectors by a
coarse quantization of their leading coordinates and only verifies pairs in
neighboring cells. Both produce identical partitions; the grid is purely a
candidate filter (a pair within distance t differs by at most t in every
coordinate, so it lands in the same or an adjacent cell).
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from itertools import product
from typing import Sequence

import numpy as np

from .dataset import EmbeddingStore, PartialLabelRecord
from .errors import ConfigError, DataError

GRID_DIMS = 3  # leading coordinates used for bucketing


@dataclass(frozen=True)
class DedupConfig:
    radius: float = 0.1
    metric: str = "cosine_distance"
    strategy: str = "brute_force"

    def validate(self) -> None:
        if self.radius <= 0:
            raise ConfigError(f"dedup radius must be positive, got {self.radius}")
        if self.metric not in ("cosine_distance", "euclidean"):
            raise ConfigError(f"unknown dedup metric {self.metric!r}")
        if self.strategy not in ("brute_force", "grid"):
            raise ConfigError(f"unknown dedup strategy {self.strategy!r}")


@dataclass(frozen=True)
class ClusterAssignment:
    cluster_of: dict[str, int]      # record id -> dense cluster id in [0, k)
    representatives: tuple[str, ...]  # representative id per cluster

    @property
    def n_clusters(self) -> int:
        return len(self.representatives)


class _UnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(n)

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:  # path compression
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _prepare_vectors(store: EmbeddingStore, config: DedupConfig) -> tuple[np.ndarray, float]:
    """Returns (vectors, euclidean threshold) such that the radius predicate
    becomes a plain euclidean comparison on the returned vectors."""
    x = store.data.astype(np.float64)
    if config.metric == "cosine_distance":
        norms = np.linalg.norm(x, axis=1)
        if np.any(norms == 0.0):
            bad = int(np.flatnonzero(norms == 0.0)[0])
            raise DataError(f"zero vector at row {bad}: cosine distance undefined")
        x = x / norms[:, None]
        # 1 - cos(u, v) <= r  <=>  |u - v| <= sqrt(2 r) for unit vectors
        return x, float(np.sqrt(2.0 * config.radius))
    return x, float(config.radius)


def _edges_brute(x: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    n = x.shape[0]
    edges = []
    for i in range(n - 1):
        d = np.linalg.norm(x[i + 1 :] - x[i], axis=1)
        for j in np.flatnonzero(d <= threshold):
            edges.append((i, i + 1 + int(j)))
    return edges


def _edges_grid(x: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    g = min(GRID_DIMS, x.shape[1])
    cells: dict[tuple, list[int]] = defaultdict(list)
    coords = np.floor(x[:, :g] / threshold).astype(np.int64)
    for i, c in enumerate(coords):
        cells[tuple(int(v) for v in c)].append(i)

    def verify(i: int, js: list[int]) -> list[tuple[int, int]]:
        if not js:
            return []
        d = np.linalg.norm(x[js] - x[i], axis=1)
        return [(i, js[k]) for k in np.flatnonzero(d <= threshold)]

    offsets = [o for o in product((-1, 0, 1), repeat=g) if any(o)]
    edges = []
    for cell, members in cells.items():
        for a, i in enumerate(members):
            edges += verify(i, members[a + 1 :])
        # each unordered cell pair is visited from its smaller cell only
        for off in offsets:
            neighbor = tuple(c + o for c, o in zip(cell, off))
            if neighbor > cell:
                for i in members:
                    edges += verify(i, cells.get(neighbor, []))
    return edges


def dedup(store: EmbeddingStore, ids: Sequence[str], config: DedupConfig) -> ClusterAssignment:
    """Cluster rows of `store` (labeled by `ids`) into radius components."""
    config.validate()
    if len(ids) != store.count:
        raise DataError(f"{len(ids)} ids for {store.count} embedding rows")
    if len(set(ids)) != len(ids):
        raise DataError("duplicate ids passed to dedup")
    if store.count == 0:
        return ClusterAssignment(cluster_of={}, representatives=())

    x, threshold = _prepare_vectors(store, config)
    edge_fn = _edges_grid if config.strategy == "grid" else _edges_brute
    uf = _UnionFind(store.count)
    for i, j in edge_fn(x, threshold):
        uf.union(i, j)

    members: dict[int, list[str]] = defaultdict(list)
    for row, rec_id in enumerate(ids):
        members[uf.find(row)].append(rec_id)
    # canonical order: clusters sorted by their smallest member id
    clusters = sorted((min(ms), ms) for ms in members.values())
    cluster_of = {}
    reps = []
    for cid, (rep, ms) in enumerate(clusters):
        reps.append(rep)
        for rec_id in ms:
            cluster_of[rec_id] = cid
    return ClusterAssignment(cluster_of=cluster_of, representatives=tuple(reps))


def keep_representatives(
    records: Sequence[PartialLabelRecord], assignment: ClusterAssignment
) -> list[PartialLabelRecord]:
    """One record per cluster (its representative), ordered by id."""
    by_id = {r.id: r for r in records}
    missing = [rid for rid in assignment.cluster_of if rid not in by_id]
    if missing:
        raise DataError(f"assignment references unknown record ids: {missing[:5]}")
    survivors = []
    for rep in assignment.representatives:
        if rep not in by_id:
            raise DataError(f"dangling representative id {rep!r}")
        survivors.append(by_id[rep])
    return sorted(survivors, key=lambda r: r.id)
