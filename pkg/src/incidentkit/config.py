"""Layered run configuration: TOML file, then INCIDENT_* environment
variables, then command-line overrides; last writer wins.

Every report the CLI emits embeds the fully resolved configuration so a run
can be reproduced from its own output.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .dedup import DedupConfig
from .errors import ConfigError
from .synth import SynthSpec
from .trainer import TrainConfig

# section -> key -> type marker; markers "ints"/"floats" are comma-separated
# lists when given as strings (env/flag), TOML arrays when given in the file
SCHEMA: dict[str, dict[str, Any]] = {
    "": {"seed": int, "out": str, "threads": int, "quiet": bool},
    "paths": {
        "taxonomy": str,
        "manifest": str,
        "test_manifest": str,
        "embeddings": str,
        "checkpoint": str,
        "events": str,
        "series": str,
        "compare_series": str,
        "detections": str,
    },
    "train": {
        "loss_variant": str,
        "use_class_negatives": bool,
        "use_places_aug": bool,
        "lr": float,
        "batch_size": int,
        "min_epochs": int,
        "max_epochs": int,
        "hidden": "ints",
        "patience": int,
        "min_improvement": float,
    },
    "dedup": {"radius": float, "metric": str, "strategy": str},
    "eval": {"augmented": bool, "confidence_threshold": float},
    "monitor": {"w": int, "rti_threshold": float, "smooth_window": int},
    "geo": {"x_values": "floats", "radius_km": float},
    "synth": {
        "n_incident_classes": int,
        "n_place_classes": int,
        "dim": int,
        "sigma": float,
        "separation": float,
        "hard_offset": float,
        "hard_noise": float,
        "train_per_class": int,
        "test_per_class": int,
        "hard_negative_fraction": float,
        "places_aug": int,
        "test_places_aug": int,
        "duplicate_pairs": int,
        "n_events": int,
        "near_per_event": int,
        "background_detections": int,
        "near_radius_km": float,
        "background_min_km": float,
        "n_days": int,
        "burst_window": int,
    },
}


@dataclass
class EvalConfig:
    augmented: bool = True
    confidence_threshold: float = 0.5


@dataclass
class MonitorConfig:
    w: int = 7
    rti_threshold: float = 2.0
    smooth_window: int = 7


@dataclass
class GeoConfig:
    x_values: tuple[float, ...] = (10.0, 25.0, 50.0, 100.0, 250.0, 500.0, 1000.0, 2000.0)
    radius_km: float = 250.0


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    threads: int = 0
    quiet: bool = False
    paths: dict[str, str] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    dedup: DedupConfig = field(default_factory=DedupConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    geo: GeoConfig = field(default_factory=GeoConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)

    def path(self, key: str, required: bool = False) -> Path | None:
        value = self.paths.get(key)
        if value is None:
            if required:
                raise ConfigError(f"missing required path {key!r} (file, env, or flag)")
            return None
        p = Path(value)
        if not p.exists():
            raise ConfigError(f"{key} path does not exist: {p}")
        return p

    def echo(self) -> dict:
        """JSON-safe dump of the resolved configuration."""
        return {
            "seed": self.seed,
            "out": self.out,
            "threads": self.threads,
            "quiet": self.quiet,
            "paths": dict(sorted(self.paths.items())),
            "train": _jsonify(asdict(self.train)),
            "dedup": _jsonify(asdict(self.dedup)),
            "eval": _jsonify(asdict(self.eval)),
            "monitor": _jsonify(asdict(self.monitor)),
            "geo": _jsonify(asdict(self.geo)),
            "synth": _jsonify(asdict(self.synth)),
        }


def _jsonify(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _jsonify(v) for k, v in value.items()}
    if isinstance(value, tuple):
        return [_jsonify(v) for v in value]
    return value


def _marker_name(marker: Any) -> str:
    return marker if isinstance(marker, str) else marker.__name__


def _coerce_string(raw: str, marker: Any, where: str) -> Any:
    """Parse an env/flag string to the schema type."""
    try:
        if marker is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if marker is int:
            return int(raw)
        if marker is float:
            return float(raw)
        if marker is str:
            return raw
        if marker == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if marker == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(f"{where}: unhandled type marker {marker!r}")


def _check_typed(value: Any, marker: Any, where: str) -> Any:
    """Validate an already-typed (TOML) value against the schema."""
    if marker is bool:
        if isinstance(value, bool):
            return value
    elif marker is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif marker is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif marker is str:
        if isinstance(value, str):
            return value
    elif marker in ("ints", "floats"):
        if isinstance(value, (list, tuple)):
            cast = int if marker == "ints" else float
            try:
                return tuple(cast(v) for v in value)
            except (TypeError, ValueError):
                pass
    raise ConfigError(f"{where}: expected {_marker_name(marker)}, got {value!r}")


def _schema_marker(section: str, key: str, where: str) -> Any:
    if section not in SCHEMA:
        raise ConfigError(f"{where}: unknown config section {section!r}")
    if key not in SCHEMA[section]:
        raise ConfigError(f"{where}: unknown key {key!r} in section {section or 'top level'!r}")
    return SCHEMA[section][key]


def load_config_file(path: str | Path) -> dict[str, dict[str, Any]]:
    """Parse and schema-check a TOML config file into {section: {key: value}}."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    layer: dict[str, dict[str, Any]] = {}
    for name, value in raw.items():
        if isinstance(value, dict):
            for key, inner in value.items():
                marker = _schema_marker(name, key, f"{path} [{name}] {key}")
                layer.setdefault(name, {})[key] = _check_typed(
                    inner, marker, f"{path} [{name}] {key}"
                )
        else:
            marker = _schema_marker("", name, f"{path} {name}")
            layer.setdefault("", {})[name] = _check_typed(value, marker, f"{path} {name}")
    return layer


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, dict[str, Any]]:
    """INCIDENT_KEY for top-level keys, INCIDENT_SECTION_KEY for sections."""
    environ = os.environ if environ is None else environ
    layer: dict[str, dict[str, Any]] = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith("INCIDENT_"):
            continue
        rest = name[len("INCIDENT_") :].lower()
        if rest in SCHEMA[""]:
            section, key = "", rest
        else:
            section, _, key = rest.partition("_")
            if section not in SCHEMA or key not in SCHEMA.get(section, {}):
                raise ConfigError(f"environment variable {name} matches no config key")
        marker = SCHEMA[section][key]
        layer.setdefault(section, {})[key] = _coerce_string(raw, marker, name)
    return layer


def parse_set_args(pairs: Sequence[str]) -> dict[str, dict[str, Any]]:
    """--set section.key=value overrides (top-level keys have no dot)."""
    layer: dict[str, dict[str, Any]] = {}
    for pair in pairs:
        head, sep, raw = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set needs key=value, got {pair!r}")
        section, dot, key = head.partition(".")
        if not dot:
            section, key = "", head
        marker = _schema_marker(section, key, f"--set {pair}")
        layer.setdefault(section, {})[key] = _coerce_string(raw, marker, f"--set {pair}")
    return layer


def merge_layers(*layers: dict[str, dict[str, Any]]) -> dict[str, dict[str, Any]]:
    merged: dict[str, dict[str, Any]] = {}
    for layer in layers:
        for section, entries in layer.items():
            merged.setdefault(section, {}).update(entries)
    return merged


def build_run_config(merged: dict[str, dict[str, Any]]) -> RunConfig:
    top = merged.get("", {})
    cfg = RunConfig(
        seed=top.get("seed", 0),
        out=top.get("out", "out"),
        threads=top.get("threads", 0),
        quiet=top.get("quiet", False),
        paths=dict(merged.get("paths", {})),
    )
    train_kw = dict(merged.get("train", {}))
    if "hidden" in train_kw:
        train_kw["hidden"] = tuple(train_kw["hidden"])
    cfg.train = TrainConfig(seed=cfg.seed, **train_kw)
    cfg.dedup = DedupConfig(**merged.get("dedup", {}))
    cfg.eval = EvalConfig(**merged.get("eval", {}))
    cfg.monitor = MonitorConfig(**merged.get("monitor", {}))
    geo_kw = dict(merged.get("geo", {}))
    if "x_values" in geo_kw:
        geo_kw["x_values"] = tuple(geo_kw["x_values"])
    cfg.geo = GeoConfig(**geo_kw)
    cfg.synth = SynthSpec(seed=cfg.seed, **merged.get("synth", {}))
    cfg.train.validate()
    cfg.dedup.validate()
    if not 0.0 <= cfg.eval.confidence_threshold <= 1.0:
        raise ConfigError("eval.confidence_threshold must be in [0,1]")
    if cfg.monitor.w < 1:
        raise ConfigError("monitor.w must be >= 1")
    if cfg.monitor.smooth_window < 1 or cfg.monitor.smooth_window % 2 == 0:
        raise ConfigError("monitor.smooth_window must be odd and >= 1")
    if not cfg.geo.x_values or any(x <= 0 for x in cfg.geo.x_values):
        raise ConfigError("geo.x_values must be positive distances")
    return cfg


def resolve_config(
    config_path: str | Path | None,
    set_args: Sequence[str] = (),
    direct: dict[str, dict[str, Any]] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """file < environment < flags (--set first, then dedicated flags)."""
    layers = []
    if config_path is not None:
        layers.append(load_config_file(config_path))
    layers.append(env_overrides(environ))
    layers.append(parse_set_args(set_args))
    if direct:
        layers.append(direct)
    return build_run_config(merge_layers(*layers))
