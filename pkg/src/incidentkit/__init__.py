"""Partial-label incident detection toolkit.

Submodules:

* ``taxonomy``: category vocabulary, query-pair generation, annotation QC
* ``dataset``: partial-label records, manifests, deterministic splits
* ``model``: two-head MLP, masked and softmax losses, checkpoints
* ``trainer``: Adam training loop with the ablation regime flags
* ``dedup``: radius-based near-duplicate clustering
* ``evaluation``: AP/mAP with known-label pools, top-k, hard-negative reports
* ``analytics``: geospatial and temporal field evaluation
* ``synth``: deterministic synthetic benchmark scenarios
* ``config`` / ``cli``: layered configuration and the command-line front end

Submodules import lazily so CLI startup can configure the numeric
environment before any array library loads.
"""

from importlib import import_module

from .errors import ConfigError, DataError, IncidentKitError, NumericError

__version__ = "0.1.0"

_SUBMODULES = (
    "analytics",
    "cli",
    "config",
    "dataset",
    "dedup",
    "evaluation",
    "model",
    "synth",
    "taxonomy",
    "trainer",
)

__all__ = [
    "ConfigError",
    "DataError",
    "IncidentKitError",
    "NumericError",
    "__version__",
    *_SUBMODULES,
]


def __getattr__(name: str):
    if name in _SUBMODULES:
        return import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__() -> list[str]:
    return sorted(__all__)
