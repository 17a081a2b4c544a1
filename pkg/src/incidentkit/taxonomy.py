"""Incident/place vocabularies, synonym lists, and search-query generation.

A taxonomy file is UTF-8 text with two sections, ``[incidents]`` and
``[places]``. Each line inside a section defines one category:

    canonical: synonym, synonym, ...

Synonyms are optional; the canonical name always heads its own synonym
list. Category ordering follows file order and is stable for the lifetime
of the loaded taxonomy, since label vectors index into it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import DataError

QUERY_TEMPLATE = "{incident} in {place}"


@dataclass(frozen=True)
class Taxonomy:
    """Ordered incident and place vocabularies plus per-category synonyms."""

    incidents: tuple[str, ...]
    places: tuple[str, ...]
    synonyms: dict[str, tuple[str, ...]]
    _incident_index: dict[str, int] = field(repr=False, default_factory=dict)
    _place_index: dict[str, int] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        object.__setattr__(
            self, "_incident_index", {c: i for i, c in enumerate(self.incidents)}
        )
        object.__setattr__(
            self, "_place_index", {c: i for i, c in enumerate(self.places)}
        )

    @property
    def n_incidents(self) -> int:
        return len(self.incidents)

    @property
    def n_places(self) -> int:
        return len(self.places)

    def incident_index(self, name: str) -> int:
        try:
            return self._incident_index[name]
        except KeyError:
            raise DataError(f"unknown incident category: {name!r}") from None

    def place_index(self, name: str) -> int:
        try:
            return self._place_index[name]
        except KeyError:
            raise DataError(f"unknown place category: {name!r}") from None

    def index_of(self, task: str, name: str) -> int:
        return self.incident_index(name) if task == "incident" else self.place_index(name)

    def categories(self, task: str) -> tuple[str, ...]:
        if task == "incident":
            return self.incidents
        if task == "place":
            return self.places
        raise ValueError(f"unknown task: {task!r}")

    def synonyms_of(self, name: str) -> tuple[str, ...]:
        return self.synonyms.get(name, (name,))

    def content_hash(self) -> str:
        """Stable hash of categories and synonyms, recorded in checkpoints."""
        h = hashlib.blake2b(digest_size=16)
        for section in (self.incidents, self.places):
            for name in section:
                h.update(name.encode("utf-8"))
                h.update(b"\x1f")
                h.update(",".join(self.synonyms_of(name)).encode("utf-8"))
                h.update(b"\x1e")
        return h.hexdigest()


@dataclass(frozen=True)
class QueryPair:
    """One (incident, place) combination and its synonym cross-product queries."""

    incident: str
    place: str
    queries: tuple[str, ...]


@dataclass(frozen=True)
class QcDecision:
    accepted: bool
    accuracy: float


def _parse_category_line(line: str, lineno: int) -> tuple[str, tuple[str, ...]]:
    canonical, _, rest = line.partition(":")
    canonical = canonical.strip().lower()
    if not canonical:
        raise DataError(f"taxonomy line {lineno}: empty category name")
    syns = [canonical]
    for raw in rest.split(","):
        s = raw.strip().lower()
        if s and s not in syns:
            syns.append(s)
    return canonical, tuple(syns)


def parse_taxonomy(text: str, origin: str = "<string>") -> Taxonomy:
    sections: dict[str, list[str]] = {"incidents": [], "places": []}
    synonyms: dict[str, tuple[str, ...]] = {}
    current: list[str] | None = None
    current_name = ""

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip().lower()
            if name not in sections:
                raise DataError(f"{origin} line {lineno}: unknown section [{name}]")
            current = sections[name]
            current_name = name
            continue
        if current is None:
            raise DataError(f"{origin} line {lineno}: category outside a section")
        canonical, syns = _parse_category_line(line, lineno)
        if canonical in current:
            raise DataError(
                f"{origin} line {lineno}: duplicate {current_name} category {canonical!r}"
            )
        current.append(canonical)
        if canonical in synonyms:
            # same name reused across sections keeps the union of synonyms
            merged = list(synonyms[canonical])
            merged += [s for s in syns if s not in merged]
            syns = tuple(merged)
        synonyms[canonical] = syns

    if not sections["incidents"] or not sections["places"]:
        raise DataError(f"{origin}: taxonomy needs non-empty [incidents] and [places]")
    return Taxonomy(
        incidents=tuple(sections["incidents"]),
        places=tuple(sections["places"]),
        synonyms=synonyms,
    )


def load_taxonomy(path: str | Path) -> Taxonomy:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read taxonomy file {path}: {exc}") from exc
    return parse_taxonomy(text, origin=str(path))


def default_taxonomy() -> Taxonomy:
    """The bundled vocabulary: 43 incident and 49 place categories."""
    text = resources.files("incidentkit.data").joinpath("default_taxonomy.txt").read_text(
        encoding="utf-8"
    )
    return parse_taxonomy(text, origin="<bundled default_taxonomy.txt>")


def generate_query_pairs(
    taxonomy: Taxonomy, template: str = QUERY_TEMPLATE
) -> list[QueryPair]:
    """Cross every incident with every place, expanding synonym combinations.

    Returns one QueryPair per (incident, place) combination; each pair carries
    the full cross-product of incident synonyms x place synonyms rendered
    through `template`.
    """
    pairs = []
    for incident in taxonomy.incidents:
        inc_syns = taxonomy.synonyms_of(incident)
        for place in taxonomy.places:
            queries = tuple(
                template.format(incident=i, place=p)
                for i in inc_syns
                for p in taxonomy.synonyms_of(place)
            )
            pairs.append(QueryPair(incident=incident, place=place, queries=queries))
    return pairs


def qc_accept_batch(
    worker_answers: list[bool], control_truth: list[bool], threshold: float = 0.85
) -> QcDecision:
    """Accept an annotation batch iff control accuracy is strictly above threshold.

    Exactly-at-threshold batches are rejected (a 12/15 batch at the default
    threshold scores 0.80 and is discarded; 13/15 scores ~0.867 and passes).
    """
    if len(worker_answers) != len(control_truth):
        raise DataError(
            f"control answer/truth length mismatch: "
            f"{len(worker_answers)} vs {len(control_truth)}"
        )
    if not control_truth:
        raise DataError("empty control set")
    correct = sum(a == t for a, t in zip(worker_answers, control_truth))
    accuracy = correct / len(control_truth)
    return QcDecision(accepted=accuracy > threshold, accuracy=accuracy)
