"""Classification and detection metrics over partially labeled test sets.

The central idea: a class's evaluation pool contains only examples whose
label for that class is KNOWN. Positives of the class, its explicit
negatives, positives of other classes (known negatives under the
single-label assumption), and scene-augmentation images (universal incident
negatives) all qualify; everything else is excluded, mirroring the
training-time masking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import PartialLabelRecord, label_view
from .errors import DataError
from .taxonomy import Taxonomy


@dataclass(frozen=True)
class ScoredExample:
    """Model confidences plus the known-label mask for one task."""

    id: str
    confidences: np.ndarray  # per-class, in [0, 1]
    targets: np.ndarray      # per-class {0,1}, meaningful where known
    known: np.ndarray        # per-class {0,1} label-known mask
    source: str = "dataset"


@dataclass(frozen=True)
class ApResult:
    per_class_ap: dict[str, float | None]
    mean_ap: float
    pool_positives: dict[str, int]
    pool_negatives: dict[str, int]

    @property
    def defined_classes(self) -> list[str]:
        return [c for c, ap in self.per_class_ap.items() if ap is not None]


@dataclass(frozen=True)
class HardNegativeReport:
    accuracy: float
    histogram: np.ndarray  # confidence counts over uniform bins
    bin_edges: np.ndarray
    n: int


def scored_examples(
    records: Sequence[PartialLabelRecord],
    confidences: np.ndarray,
    task: str,
    taxonomy: Taxonomy,
) -> list[ScoredExample]:
    """Pair per-record confidence rows with their label views for one task."""
    conf = np.asarray(confidences, dtype=np.float64)
    if conf.shape[0] != len(records):
        raise DataError(f"{len(records)} records but {conf.shape[0]} confidence rows")
    out = []
    for row, rec in zip(conf, records):
        view = label_view(rec, task, taxonomy)
        out.append(
            ScoredExample(
                id=rec.id,
                confidences=row,
                targets=view.targets,
                known=view.weights,
                source=rec.source,
            )
        )
    return out


def topk_accuracy(examples: Sequence[ScoredExample], k: int) -> float:
    """Fraction of positive-labeled examples whose class ranks in the top k.

    Applies only to examples carrying a known positive; score ties are broken
    by ascending class index, so the ranking is deterministic.
    """
    if not examples:
        raise DataError("topk_accuracy needs at least one example")
    n_classes = examples[0].confidences.shape[0]
    if k < 1 or k > n_classes:
        raise DataError(f"k must be in [1, {n_classes}], got {k}")
    hits = 0
    for ex in examples:
        pos = np.flatnonzero(ex.targets == 1.0)
        if pos.size != 1:
            raise DataError(f"example {ex.id!r} has no single positive label")
        # stable sort on negated scores == descending score, ties by class index
        order = np.argsort(-ex.confidences, kind="stable")
        hits += int(pos[0] in order[:k])
    return hits / len(examples)


def average_precision(
    scores: Sequence[float],
    labels: Sequence[int],
    ids: Sequence | None = None,
) -> float | None:
    """Non-interpolated AP: mean precision at each positive's rank.

    Ranking is by descending score with ties broken by ascending example id.
    Returns None when there are no positives (undefined, never 0).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape:
        raise DataError(f"scores/labels shape mismatch: {s.shape} vs {y.shape}")
    if y.size == 0 or y.sum() == 0:
        return None
    key = np.arange(y.size) if ids is None else np.asarray(ids)
    order = np.lexsort((key, -s))
    ranked = y[order]
    cum_pos = np.cumsum(ranked)
    ranks = np.arange(1, y.size + 1)
    precisions = cum_pos[ranked == 1] / ranks[ranked == 1]
    return float(precisions.mean())


def detection_map(
    examples: Sequence[ScoredExample],
    task: str,
    taxonomy: Taxonomy,
    include_places_aug: bool = True,
) -> ApResult:
    """Per-class AP over each class's known-label pool, and their mean.

    Scene-augmentation examples count as known negatives for every incident
    class (they are assumed to contain no incidents) when included; dropping
    them reproduces the plain test-set protocol. Classes without any known
    positive have undefined AP and are excluded from the mean.
    """
    if not examples:
        raise DataError("detection_map needs a non-empty scored set")
    pool_src = examples
    if not include_places_aug:
        pool_src = [ex for ex in examples if ex.source != "places_aug"]
        if not pool_src:
            raise DataError("no examples left after dropping places_aug")

    classes = taxonomy.categories(task)
    per_class: dict[str, float | None] = {}
    n_pos: dict[str, int] = {}
    n_neg: dict[str, int] = {}
    for ci, cname in enumerate(classes):
        scores, labels, ids = [], [], []
        for ex in pool_src:
            if ex.known[ci] == 1.0:
                target = int(ex.targets[ci])
            elif task == "incident" and ex.source == "places_aug":
                target = 0  # universal incident negative in the augmented protocol
            else:
                continue  # label unknown: excluded from this class's pool
            scores.append(float(ex.confidences[ci]))
            labels.append(target)
            ids.append(ex.id)
        n_pos[cname] = int(sum(labels))
        n_neg[cname] = len(labels) - n_pos[cname]
        per_class[cname] = average_precision(scores, labels, ids)

    defined = [ap for ap in per_class.values() if ap is not None]
    mean_ap = float(np.mean(defined)) if defined else float("nan")
    return ApResult(
        per_class_ap=per_class,
        mean_ap=mean_ap,
        pool_positives=n_pos,
        pool_negatives=n_neg,
    )


def hard_negative_report(
    examples: Sequence[ScoredExample],
    probed_classes: Sequence[int],
    threshold: float = 0.5,
    bins: int = 20,
) -> HardNegativeReport:
    """Accuracy of a model on known negatives: probed confidence must stay low.

    accuracy = fraction of examples whose probed-class confidence is below
    the threshold, plus a histogram of those confidences.
    """
    if not examples:
        raise DataError("hard_negative_report needs at least one example")
    if len(probed_classes) != len(examples):
        raise DataError("probed_classes must parallel examples")
    confs = []
    for ex, ci in zip(examples, probed_classes):
        known_negative = ex.known[ci] == 1.0 and ex.targets[ci] == 0.0
        if not (known_negative or ex.source == "places_aug"):
            raise DataError(f"example {ex.id!r} is not a known negative for class {ci}")
        confs.append(float(ex.confidences[ci]))
    confs = np.asarray(confs)
    hist, edges = np.histogram(confs, bins=bins, range=(0.0, 1.0))
    return HardNegativeReport(
        accuracy=float(np.mean(confs < threshold)),
        histogram=hist,
        bin_edges=edges,
        n=confs.size,
    )
