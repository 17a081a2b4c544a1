"""Shared fixtures: taxonomies and one reusable synthetic dataset.

The synthetic dataset is session-scoped and treated as read-only by every
test that uses it; anything that mutates files writes to tmp_path instead.
"""

import numpy as np
import pytest

from incidentkit.dataset import EmbeddingStore, PartialLabelRecord
from incidentkit.synth import SynthSpec, generate
from incidentkit.taxonomy import default_taxonomy, parse_taxonomy

TINY_TAXONOMY_TEXT = """\
[incidents]
fire
flood: inundation
crash

[places]
street
bridge: overpass
"""


@pytest.fixture(scope="session")
def default_tax():
    return default_taxonomy()


@pytest.fixture(scope="session")
def tiny_tax():
    return parse_taxonomy(TINY_TAXONOMY_TEXT)


@pytest.fixture(scope="session")
def synth_data():
    return generate(SynthSpec(seed=0))


def make_store(rows):
    return EmbeddingStore(data=np.asarray(rows, dtype=np.float32))


def make_records(n, **kw):
    return [PartialLabelRecord(id=f"r{i:04d}", embedding_index=i, **kw) for i in range(n)]
