import numpy as np
import pytest

from memento.chunker import MementoDoc
from memento.core import SourceId, quantize_norm_int8

# The full retrieval configuration grid exercised by the experiments:
# (filter_rate, alpha, beta).
CONFIG_GRID = [
    (0.5, 0.0, 0.0),
    (0.5, 0.3, 0.0),
    (0.5, 0.7, 0.0),
    (0.5, 0.0, 0.4),
    (0.25, 0.0, 0.0),
    (0.25, 0.1, 0.5),
    (0.25, 0.05, 0.8),
    (0.25, 0.0, 0.95),
]


def make_doc(doc_id: int, vec, user: str = "u", source: SourceId | None = None) -> MementoDoc:
    vec = np.asarray(vec, dtype=np.float32)
    src = source or SourceId(id=0, name="s", dimension=vec.shape[0])
    return MementoDoc(
        doc_id=doc_id,
        user_id=user,
        source=src,
        epoch_start_day=0,
        epoch_len_days=7,
        embedding=quantize_norm_int8(vec),
        day_count=1,
    )


def random_docs(rng: np.random.Generator, n: int, d: int) -> list[MementoDoc]:
    vecs = rng.normal(size=(n, d)) * rng.uniform(0.5, 2.0, size=(n, 1))
    return [make_doc(doc_id=i + 1, vec=vecs[i]) for i in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
