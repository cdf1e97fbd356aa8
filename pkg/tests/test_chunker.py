import math

import numpy as np
import pytest

from memento.chunker import (
    Aggregation,
    DailyEmbedding,
    chunk,
    chunk_similarity_report,
    read_daily_jsonl,
    write_daily_jsonl,
)
from memento.core import SourceId, dequantize
from memento.errors import DimensionMismatch, InsufficientData
from memento.snapshot_io import save_docs


SRC = SourceId(id=0, name="s0", dimension=2)


def daily(user, day, vec, source=SRC):
    return DailyEmbedding(user_id=user, source=source, day=day, embedding=vec)


def test_identical_week_round_trips():
    v = np.array([0.6, 0.8], dtype=np.float32)
    docs = chunk([daily("u", d, v) for d in range(7)], epoch_len_days=7)
    assert len(docs) == 1
    doc = docs[0]
    assert doc.day_count == 7
    assert doc.epoch_start_day == 0
    back = dequantize(doc.embedding)
    assert np.abs(back - v).max() <= np.linalg.norm(v) / 127


def test_mean_of_present_days():
    docs = chunk([daily("u", 0, [2.0, 0.0]), daily("u", 3, [0.0, 2.0])], epoch_len_days=7)
    assert len(docs) == 1
    assert docs[0].day_count == 2
    back = dequantize(docs[0].embedding)
    assert back == pytest.approx([1.0, 1.0], abs=2 / 127)


def test_identity_chunking():
    dailies = [daily("u", d, [float(d + 1), 0.0]) for d in range(5)]
    docs = chunk(dailies, epoch_len_days=1)
    assert len(docs) == len(dailies)
    for d, doc in zip(dailies, docs):
        assert doc.epoch_start_day == d.day
        assert doc.day_count == 1
        assert dequantize(doc.embedding) == pytest.approx(d.embedding, abs=1e-2)


def test_empty_input():
    assert chunk([], epoch_len_days=7) == []


def test_window_alignment_to_day_zero():
    docs = chunk([daily("u", 6, [1.0, 0.0]), daily("u", 7, [1.0, 0.0])], epoch_len_days=7)
    assert [d.epoch_start_day for d in docs] == [0, 7]


def test_deterministic_under_permutation(rng, tmp_path):
    dailies = [
        daily(f"u{u}", int(day), rng.normal(size=2))
        for u in range(5)
        for day in rng.choice(30, size=12, replace=False)
    ]
    docs_a = chunk(list(dailies), epoch_len_days=7)
    shuffled = [dailies[i] for i in rng.permutation(len(dailies))]
    docs_b = chunk(shuffled, epoch_len_days=7)
    pa, pb = tmp_path / "a.bin", tmp_path / "b.bin"
    save_docs(docs_a, pa)
    save_docs(docs_b, pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_doc_count_matches_day_span(rng):
    for span in (1, 7, 13, 30, 65):
        dailies = [daily("u", d, rng.normal(size=2)) for d in range(span)]
        docs = chunk(dailies, epoch_len_days=7)
        assert len(docs) == math.ceil(span / 7)


def test_storage_compression_factor(rng):
    # 64-d source, 70 days: float-equivalent storage must drop >= 10x.
    src = SourceId(id=1, name="s1", dimension=64)
    days = 70
    dailies = [daily("u", d, rng.normal(size=64), source=src) for d in range(days)]
    docs = chunk(dailies, epoch_len_days=7)
    raw_floats = days * 64
    quantized_floats = len(docs) * (64 / 4 + 1)
    assert raw_floats / quantized_floats >= 10


def test_mean_aggregation_linearity(rng):
    vecs = rng.normal(size=(7, 8))
    base = chunk([daily("u", d, vecs[d], SourceId(2, "s2", 8)) for d in range(7)], 7)
    scaled = chunk([daily("u", d, 3.0 * vecs[d], SourceId(2, "s2", 8)) for d in range(7)], 7)
    a = dequantize(base[0].embedding)
    b = dequantize(scaled[0].embedding)
    assert b == pytest.approx(3.0 * a, abs=3 * np.linalg.norm(a) / 64)


def test_dimension_mismatch_within_group():
    src = SourceId(id=3, name="s3", dimension=2)
    bad = [
        DailyEmbedding(user_id="u", source=src, day=0, embedding=[1.0, 0.0]),
        DailyEmbedding(user_id="u", source=src, day=1, embedding=[1.0, 0.0, 0.0]),
    ]
    with pytest.raises(DimensionMismatch):
        chunk(bad, epoch_len_days=7)


def test_unknown_aggregation_rejected():
    with pytest.raises(ValueError):
        chunk([daily("u", 0, [1.0, 0.0])], epoch_len_days=7, aggregation="median")
    assert Aggregation.MEAN.value == "mean"


class TestSimilarityReport:
    def test_identical_days(self):
        dailies = [daily("u", d, [1.0, 1.0]) for d in range(10)]
        rep = chunk_similarity_report(dailies, epoch_len_days=7)
        assert rep[0].adjacent_day_mean == pytest.approx(1.0, abs=1e-9)
        assert rep[0].within_epoch_mean == pytest.approx(1.0, abs=1e-9)

    def test_alternating_orthogonal(self):
        dailies = [
            daily("u", d, [1.0, 0.0] if d % 2 == 0 else [0.0, 1.0]) for d in range(8)
        ]
        rep = chunk_similarity_report(dailies, epoch_len_days=7)
        assert rep[0].adjacent_day_mean == pytest.approx(0.0, abs=1e-9)

    def test_ar1_adjacent_beats_within_month(self, rng):
        # AR(1) drift with rho=0.9: one-day lag stays more similar than the
        # average pair inside a 30-day window.
        rho = 0.9
        dailies = []
        for u in range(20):
            z = rng.normal(size=8)
            z /= np.linalg.norm(z)
            for d in range(60):
                dailies.append(daily(f"u{u}", d, z, SourceId(0, "s", 8)))
                step = rho * z + math.sqrt(1 - rho**2) * rng.normal(size=8) * 0.8
                z = step / np.linalg.norm(step)
        rep = chunk_similarity_report(dailies, epoch_len_days=30)
        assert rep[0].adjacent_day_mean > rep[0].within_epoch_mean

    def test_insufficient_data(self):
        with pytest.raises(InsufficientData):
            chunk_similarity_report([daily("u", 0, [1.0, 0.0])], epoch_len_days=7)
        # two days that are not adjacent: no adjacent pairs
        with pytest.raises(InsufficientData):
            chunk_similarity_report(
                [daily("u", 0, [1.0, 0.0]), daily("u", 5, [1.0, 0.0])], epoch_len_days=3
            )


def test_jsonl_round_trip(tmp_path, rng):
    dailies = [daily(f"u{i}", i, rng.normal(size=2)) for i in range(10)]
    path = tmp_path / "d.jsonl"
    assert write_daily_jsonl(path, dailies) == 10
    loaded = read_daily_jsonl(path)
    assert len(loaded) == 10
    for a, b in zip(dailies, loaded):
        assert a.user_id == b.user_id
        assert a.day == b.day
        assert a.source.id == b.source.id
        assert np.allclose(a.embedding, b.embedding)
    docs_a = chunk(dailies, 7)
    docs_b = chunk(loaded, 7)
    assert [d.doc_id for d in docs_a] == [d.doc_id for d in docs_b]
