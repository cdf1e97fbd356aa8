"""Temporal chunking of daily per-source embeddings into retrievable docs.

Consecutive daily embeddings for one (user, source) are aggregated into
epoch-length windows aligned to absolute day 0, mean-pooled over the days
actually present, and NormInt8-quantized. Doc ids are stable 64-bit hashes of
(user, source, epoch start), so rebuilding from the same input reproduces the
same docs byte for byte.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import QuantizedEmbedding, SourceId, as_embedding, cosine_similarity, quantize_batch
from .errors import DimensionMismatch, InsufficientData


class Aggregation(enum.Enum):
    """How the days inside one epoch window are combined."""

    MEAN = "mean"


@dataclass(frozen=True)
class DailyEmbedding:
    """One day of one user's history from one source."""

    user_id: str
    source: SourceId
    day: int
    embedding: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.day < 0:
            raise ValueError(f"day must be >= 0, got {self.day}")
        emb = as_embedding(self.embedding, name="daily embedding")
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)


@dataclass(frozen=True)
class MementoDoc:
    """One retrievable unit of history: a quantized epoch aggregate."""

    doc_id: int
    user_id: str
    source: SourceId
    epoch_start_day: int
    epoch_len_days: int
    embedding: QuantizedEmbedding
    day_count: int

    def __post_init__(self) -> None:
        if not 1 <= self.day_count <= self.epoch_len_days:
            raise ValueError(
                f"day_count {self.day_count} outside [1, {self.epoch_len_days}]"
            )


def doc_identity(user_id: str, source_id: int, epoch_start_day: int) -> int:
    """Stable 64-bit doc id, reproducible across processes and rebuilds."""
    h = hashlib.blake2b(digest_size=8)
    h.update(user_id.encode("utf-8"))
    h.update(b"\x00")
    h.update(str(source_id).encode("ascii"))
    h.update(b"\x00")
    h.update(str(epoch_start_day).encode("ascii"))
    return int.from_bytes(h.digest(), "little")


def chunk(
    dailies: Sequence[DailyEmbedding],
    epoch_len_days: int,
    aggregation: Aggregation = Aggregation.MEAN,
) -> list[MementoDoc]:
    """Aggregate dailies into epoch docs; empty input yields an empty list.

    Windows are ``[k*L, (k+1)*L)`` aligned to day 0. Missing days are simply
    absent from the mean (divide by day_count), not zero-filled. Output is
    sorted by (user_id, source id, epoch_start_day) and is identical for any
    permutation of the input.
    """
    if epoch_len_days < 1:
        raise ValueError(f"epoch_len_days must be >= 1, got {epoch_len_days}")
    if aggregation is not Aggregation.MEAN:
        raise ValueError(f"unsupported aggregation {aggregation}")
    if not dailies:
        return []

    groups: dict[tuple[str, int, int], list[DailyEmbedding]] = {}
    sources: dict[int, SourceId] = {}
    for d in dailies:
        start = (d.day // epoch_len_days) * epoch_len_days
        groups.setdefault((d.user_id, d.source.id, start), []).append(d)
        sources.setdefault(d.source.id, d.source)

    docs: list[MementoDoc] = []
    seen_ids: set[int] = set()
    for key in sorted(groups):
        user_id, source_id, start = key
        members = sorted(groups[key], key=lambda d: d.day)
        dim = members[0].embedding.shape[0]
        for m in members:
            if m.embedding.shape[0] != dim:
                raise DimensionMismatch(
                    f"user {user_id} source {source_id}: dims "
                    f"{m.embedding.shape[0]} vs {dim}"
                )
        stacked = np.stack([m.embedding for m in members]).astype(np.float64)
        mean = stacked.sum(axis=0) / len(members)
        norms, codes = quantize_batch(mean[None, :])
        doc_id = doc_identity(user_id, source_id, start)
        if doc_id in seen_ids:
            raise RuntimeError(f"doc id collision for {key}")
        seen_ids.add(doc_id)
        docs.append(
            MementoDoc(
                doc_id=doc_id,
                user_id=user_id,
                source=sources[source_id],
                epoch_start_day=start,
                epoch_len_days=epoch_len_days,
                embedding=QuantizedEmbedding(norm=float(norms[0]), codes=codes[0]),
                day_count=len(members),
            )
        )
    return docs


@dataclass(frozen=True)
class SourceSimilarityReport:
    """Per-source day-to-day similarity statistics used to pick epoch length."""

    source_id: int
    n_days: int
    adjacent_day_mean: float
    within_epoch_mean: float


def chunk_similarity_report(
    dailies: Sequence[DailyEmbedding], epoch_len_days: int
) -> dict[int, SourceSimilarityReport]:
    """Mean adjacent-day and mean within-epoch cosine per source.

    Adjacent pairs are (day, day+1) with both days present for the same user.
    Within-epoch pairs are all distinct day pairs of one user falling in the
    same epoch window. Raises InsufficientData when a source has fewer than
    two distinct days or no adjacent pairs at all.
    """
    if epoch_len_days < 1:
        raise ValueError(f"epoch_len_days must be >= 1, got {epoch_len_days}")
    by_source: dict[int, dict[str, dict[int, np.ndarray]]] = {}
    for d in dailies:
        by_source.setdefault(d.source.id, {}).setdefault(d.user_id, {})[d.day] = d.embedding

    reports: dict[int, SourceSimilarityReport] = {}
    for source_id in sorted(by_source):
        users = by_source[source_id]
        all_days = {day for per_user in users.values() for day in per_user}
        if len(all_days) < 2:
            raise InsufficientData(f"source {source_id} has < 2 distinct days")
        adjacent: list[float] = []
        within: list[float] = []
        for user_id in sorted(users):
            per_day = users[user_id]
            days = sorted(per_day)
            for day in days:
                if day + 1 in per_day:
                    adjacent.append(cosine_similarity(per_day[day], per_day[day + 1]))
            by_epoch: dict[int, list[int]] = {}
            for day in days:
                by_epoch.setdefault(day // epoch_len_days, []).append(day)
            for epoch_days in by_epoch.values():
                for i in range(len(epoch_days)):
                    for j in range(i + 1, len(epoch_days)):
                        within.append(
                            cosine_similarity(per_day[epoch_days[i]], per_day[epoch_days[j]])
                        )
        if not adjacent:
            raise InsufficientData(f"source {source_id} has no adjacent-day pairs")
        reports[source_id] = SourceSimilarityReport(
            source_id=source_id,
            n_days=len(all_days),
            adjacent_day_mean=math.fsum(adjacent) / len(adjacent),
            within_epoch_mean=math.fsum(within) / len(within) if within else float("nan"),
        )
    return reports


def read_daily_jsonl(path: str | Path) -> list[DailyEmbedding]:
    """Load dailies from JSONL lines {"user", "source", "day", "emb"}.

    Source dimension is fixed by the first line seen for each source id.
    """
    sources: dict[int, SourceId] = {}
    out: list[DailyEmbedding] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            try:
                user = str(rec["user"])
                source_id = int(rec["source"])
                day = int(rec["day"])
                emb = rec["emb"]
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing key {exc}") from exc
            if source_id not in sources:
                sources[source_id] = SourceId(
                    id=source_id, name=f"source-{source_id}", dimension=len(emb)
                )
            src = sources[source_id]
            if len(emb) != src.dimension:
                raise DimensionMismatch(
                    f"{path}:{lineno}: source {source_id} dimension "
                    f"{len(emb)} != {src.dimension}"
                )
            out.append(DailyEmbedding(user_id=user, source=src, day=day, embedding=emb))
    return out


def write_daily_jsonl(path: str | Path, dailies: Iterable[DailyEmbedding]) -> int:
    """Write dailies as JSONL; returns the number of lines written."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for d in dailies:
            rec = {
                "user": d.user_id,
                "source": d.source.id,
                "day": d.day,
                "emb": [float(x) for x in d.embedding],
            }
            fh.write(json.dumps(rec) + "\n")
            n += 1
    return n
