"""Single-node vector index over quantized docs: flat scan plus k-means IVF.

Snapshots are immutable after construction; a :class:`SnapshotStore` swaps the
current snapshot atomically so readers never observe partial state and keep
working against whatever snapshot they already hold while a rebuild runs.

Scoring works on the int8 codes cast to float32: every product and partial sum
is an integer below 2**24, so matmul results are exact regardless of BLAS
blocking, and a given (doc, query) similarity has a single bit pattern on every
path (flat scan, probed scan, scalar quantized_cosine).
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import threading
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .chunker import MementoDoc
from .core import code_norm, dequantize_batch, quantize_norm_int8
from .errors import DimensionMismatch
from .mmr import MmrSelection, RetrievalQuery, select_from_embeddings, unit_rows

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class KnnResult:
    """Ordered (doc_id, similarity) pairs, descending similarity."""

    doc_ids: tuple[int, ...]
    sims: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.doc_ids)

    def pairs(self) -> list[tuple[int, float]]:
        return list(zip(self.doc_ids, self.sims))


@dataclass(frozen=True)
class IndexSnapshot:
    """Immutable searchable structure: centroids, postings, quantized vectors.

    Vector rows are ordered by ascending doc id; each doc appears in exactly
    one posting list. ``version`` is assigned by the store at publish time and
    is not part of the serialized form.
    """

    version: int
    seed: int
    dim: int
    centroids: np.ndarray = field(repr=False)          # (n_clusters, dim) f32
    posting_offsets: np.ndarray = field(repr=False)    # (n_clusters + 1,) u64
    posting_doc_ids: np.ndarray = field(repr=False)    # (n_docs,) u64
    norms: np.ndarray = field(repr=False)              # (n_docs,) f32
    codes: np.ndarray = field(repr=False)              # (n_docs, dim) i8
    user_ids: tuple[str, ...] = field(repr=False)
    source_ids: np.ndarray = field(repr=False)         # (n_docs,) u32
    epoch_start_days: np.ndarray = field(repr=False)   # (n_docs,) u32

    @property
    def n_docs(self) -> int:
        return int(self.codes.shape[0])

    @property
    def n_clusters(self) -> int:
        return int(self.centroids.shape[0])

    @cached_property
    def doc_ids(self) -> np.ndarray:
        """Vector-store order: posting ids sorted ascending."""
        ids = np.sort(self.posting_doc_ids)
        ids.setflags(write=False)
        return ids

    @cached_property
    def posting_rows(self) -> tuple[np.ndarray, ...]:
        """Per-cluster row indices into the vector arrays."""
        out = []
        offs = self.posting_offsets
        for c in range(self.n_clusters):
            ids = self.posting_doc_ids[int(offs[c]) : int(offs[c + 1])]
            rows = np.searchsorted(self.doc_ids, ids)
            rows.setflags(write=False)
            out.append(rows)
        return tuple(out)

    @cached_property
    def codes_f32(self) -> np.ndarray:
        m = self.codes.astype(np.float32)
        m.setflags(write=False)
        return m

    @cached_property
    def code_norms(self) -> np.ndarray:
        c = self.codes.astype(np.int64)
        sq = np.einsum("ij,ij->i", c, c)
        n = np.sqrt(sq.astype(np.float64))
        n.setflags(write=False)
        return n

    @cached_property
    def centroid_unit(self) -> np.ndarray:
        u = unit_rows(self.centroids)
        u.setflags(write=False)
        return u

    @cached_property
    def checksum(self) -> bytes:
        return content_checksum(self)

    def doc_meta(self, doc_id: int) -> tuple[str, int, int]:
        """(user_id, source_id, epoch_start_day) for one doc id."""
        row = int(np.searchsorted(self.doc_ids, np.uint64(doc_id)))
        if row >= self.n_docs or int(self.doc_ids[row]) != int(doc_id):
            raise KeyError(f"doc id {doc_id} not in snapshot")
        return (self.user_ids[row], int(self.source_ids[row]), int(self.epoch_start_days[row]))


def content_checksum(snapshot: IndexSnapshot) -> bytes:
    """Digest of the snapshot's content (version excluded)."""
    h = hashlib.blake2b(digest_size=16)
    h.update(np.uint64(snapshot.seed).tobytes())
    h.update(np.uint32(snapshot.dim).tobytes())
    for arr in (
        snapshot.centroids,
        snapshot.posting_offsets,
        snapshot.posting_doc_ids,
        snapshot.norms,
        snapshot.codes,
        snapshot.source_ids,
        snapshot.epoch_start_days,
    ):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update("\x00".join(snapshot.user_ids).encode("utf-8"))
    return h.digest()


def validate_checksum(snapshot: IndexSnapshot) -> bool:
    """Recompute the content digest and compare against the cached one."""
    return content_checksum(snapshot) == snapshot.checksum


def _kmeans(
    x: np.ndarray, k: int, iters: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded k-means++ init followed by fixed Lloyd iterations.

    Empty clusters are re-seeded from the point farthest from its assigned
    centroid (smallest index on ties), so every returned cluster is nonempty.
    """
    n = x.shape[0]
    xsq = np.einsum("ij,ij->i", x, x)

    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = xsq - 2.0 * (x @ centers[0]) + float(centers[0] @ centers[0])
    np.maximum(d2, 0.0, out=d2)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=d2 / total))
        centers[j] = x[pick]
        dj = xsq - 2.0 * (x @ centers[j]) + float(centers[j] @ centers[j])
        np.maximum(dj, 0.0, out=dj)
        np.minimum(d2, dj, out=d2)

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        dist = xsq[:, None] - 2.0 * (x @ centers.T) + np.einsum("ij,ij->i", centers, centers)
        labels = np.argmin(dist, axis=1)
        point_dist = dist[np.arange(n), labels]
        counts = np.bincount(labels, minlength=k)
        for c in np.flatnonzero(counts == 0):
            far = int(np.argmax(point_dist))
            counts[labels[far]] -= 1
            labels[far] = c
            counts[c] = 1
            point_dist[far] = -np.inf
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=k)
        centers = sums / counts[:, None]

    dist = xsq[:, None] - 2.0 * (x @ centers.T) + np.einsum("ij,ij->i", centers, centers)
    labels = np.argmin(dist, axis=1)
    return centers, labels


def build(
    docs: Sequence[MementoDoc],
    n_clusters: int,
    kmeans_iters: int = 10,
    seed: int = 0,
) -> IndexSnapshot:
    """Cluster docs and assemble an immutable snapshot (version 0, unpublished).

    Deterministic for a fixed seed: input docs are canonicalized to ascending
    doc id order before clustering, so any permutation of the same docs yields
    a byte-identical snapshot.
    """
    if not docs:
        raise ValueError("docs must be nonempty")
    if n_clusters < 1:
        raise ValueError(f"n_clusters must be >= 1, got {n_clusters}")
    dim = docs[0].embedding.dim
    for d in docs:
        if d.embedding.dim != dim:
            raise DimensionMismatch(
                f"doc {d.doc_id} dim {d.embedding.dim} != {dim}; build one index per dimension"
            )
    if n_clusters > len(docs):
        warnings.warn(
            f"n_clusters {n_clusters} exceeds doc count {len(docs)}; clamping",
            stacklevel=2,
        )
        n_clusters = len(docs)

    ids = np.asarray([d.doc_id for d in docs], dtype=np.uint64)
    order = np.argsort(ids, kind="stable")
    ids = ids[order]
    if np.any(ids[1:] == ids[:-1]):
        raise ValueError("duplicate doc ids")
    docs_sorted = [docs[int(i)] for i in order]

    norms = np.asarray([d.embedding.norm for d in docs_sorted], dtype=np.float32)
    codes = np.stack([d.embedding.codes for d in docs_sorted])
    x = dequantize_batch(norms, codes).astype(np.float64)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    centers, labels = _kmeans(x, n_clusters, kmeans_iters, rng)

    posting_parts = []
    offsets = np.zeros(n_clusters + 1, dtype=np.uint64)
    for c in range(n_clusters):
        rows = np.flatnonzero(labels == c)
        posting_parts.append(ids[rows])
        offsets[c + 1] = offsets[c] + np.uint64(rows.shape[0])
    posting_doc_ids = np.concatenate(posting_parts) if posting_parts else np.empty(0, np.uint64)

    for arr in (norms, codes, offsets, posting_doc_ids):
        arr.setflags(write=False)
    centroids = centers.astype(np.float32)
    centroids.setflags(write=False)
    source_ids = np.asarray([d.source.id for d in docs_sorted], dtype=np.uint32)
    starts = np.asarray([d.epoch_start_day for d in docs_sorted], dtype=np.uint32)
    source_ids.setflags(write=False)
    starts.setflags(write=False)

    snap = IndexSnapshot(
        version=0,
        seed=seed,
        dim=dim,
        centroids=centroids,
        posting_offsets=offsets,
        posting_doc_ids=posting_doc_ids,
        norms=norms,
        codes=codes,
        user_ids=tuple(d.user_id for d in docs_sorted),
        source_ids=source_ids,
        epoch_start_days=starts,
    )
    logger.info("built snapshot: %d docs, %d clusters, dim %d", snap.n_docs, n_clusters, dim)
    return snap


def _score_rows(
    snapshot: IndexSnapshot, rows: np.ndarray, qcodes_f32: np.ndarray, q_norm: float
) -> np.ndarray:
    """Quantized cosine of the query against the given vector rows."""
    if q_norm == 0.0:
        return np.zeros(rows.shape[0])
    ip = snapshot.codes_f32[rows] @ qcodes_f32
    denom = snapshot.code_norms[rows] * q_norm
    sims = np.where(denom > 0.0, ip.astype(np.float64) / np.where(denom > 0.0, denom, 1.0), 0.0)
    return np.clip(sims, -1.0, 1.0)


def _top_k_rows(sims: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best rows by (similarity desc, doc id asc)."""
    n = sims.shape[0]
    if k >= n:
        return np.lexsort((ids, -sims))
    cut = np.partition(-sims, k - 1)[k - 1]
    cand = np.flatnonzero(-sims <= cut)
    order = np.lexsort((ids[cand], -sims[cand]))
    return cand[order][:k]


def _prepare_query(snapshot: IndexSnapshot, query_emb) -> tuple[np.ndarray, float]:
    q = quantize_norm_int8(query_emb)
    if q.dim != snapshot.dim:
        raise DimensionMismatch(f"query dim {q.dim} != index dim {snapshot.dim}")
    return q.codes.astype(np.float32), code_norm(q.codes)


def flat_scan(snapshot: IndexSnapshot, query_emb, k: int) -> KnnResult:
    """Exact top-k by quantized cosine over every stored vector."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    qcodes, qn = _prepare_query(snapshot, query_emb)
    rows = np.arange(snapshot.n_docs)
    sims = _score_rows(snapshot, rows, qcodes, qn)
    top = _top_k_rows(sims, snapshot.doc_ids, k)
    return KnnResult(
        doc_ids=tuple(int(snapshot.doc_ids[r]) for r in top),
        sims=tuple(float(sims[r]) for r in top),
    )


def knn(snapshot: IndexSnapshot, query_emb, k: int, n_probe: int) -> KnnResult:
    """Approximate top-k scanning only the n_probe nearest centroids' postings.

    ``n_probe == n_clusters`` degenerates to exact search over all docs.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not 1 <= n_probe <= snapshot.n_clusters:
        raise ValueError(f"n_probe must be in [1, {snapshot.n_clusters}], got {n_probe}")
    qcodes, qn = _prepare_query(snapshot, query_emb)
    q64 = np.asarray(query_emb, dtype=np.float64)
    q_unit_norm = math.sqrt(float(np.einsum("j,j->", q64, q64)))
    q_unit = q64 / q_unit_norm if q_unit_norm > 0 else np.zeros_like(q64)
    centroid_sims = np.einsum("ij,j->i", snapshot.centroid_unit, q_unit)
    probe = np.lexsort((np.arange(snapshot.n_clusters), -centroid_sims))[:n_probe]
    rows = np.concatenate([snapshot.posting_rows[int(c)] for c in probe])
    sims = _score_rows(snapshot, rows, qcodes, qn)
    row_ids = snapshot.doc_ids[rows]
    top = _top_k_rows(sims, row_ids, k)
    return KnnResult(
        doc_ids=tuple(int(row_ids[r]) for r in top),
        sims=tuple(float(sims[r]) for r in top),
    )


def retrieve_with_mmr(
    snapshot: IndexSnapshot,
    query: RetrievalQuery,
    candidate_k: int,
    n_probe: int | None = None,
) -> MmrSelection:
    """Two-stage retrieval: relevance shortlist, then MMR over the shortlist.

    The shortlist ranks docs by ``alpha * sim_user + beta * sim_ad`` over the
    probed postings (all clusters by default, making the shortlist exact);
    the query's filter_rate then applies to the shortlist size.
    """
    if candidate_k < 1:
        raise ValueError(f"candidate_k must be >= 1, got {candidate_k}")
    probes = snapshot.n_clusters if n_probe is None else n_probe
    if not 1 <= probes <= snapshot.n_clusters:
        raise ValueError(f"n_probe must be in [1, {snapshot.n_clusters}], got {probes}")

    u_codes, u_norm = _prepare_query(snapshot, query.user_emb)
    use_ad = query.ad_emb is not None and query.beta > 0
    if probes == snapshot.n_clusters:
        rows = np.arange(snapshot.n_docs)
    else:
        clusters = []
        for emb in [query.user_emb] + ([query.ad_emb] if use_ad else []):
            q64 = np.asarray(emb, dtype=np.float64)
            nq = math.sqrt(float(np.einsum("j,j->", q64, q64)))
            qu = q64 / nq if nq > 0 else np.zeros_like(q64)
            csims = np.einsum("ij,j->i", snapshot.centroid_unit, qu)
            clusters.append(np.lexsort((np.arange(snapshot.n_clusters), -csims))[:probes])
        probe_set = np.unique(np.concatenate(clusters))
        rows = np.concatenate([snapshot.posting_rows[int(c)] for c in probe_set])

    sims_u = _score_rows(snapshot, rows, u_codes, u_norm)
    shortlist_evals = rows.shape[0]
    if use_ad:
        a_codes, a_norm = _prepare_query(snapshot, query.ad_emb)
        sims_a = _score_rows(snapshot, rows, a_codes, a_norm)
        shortlist_evals += rows.shape[0]
        composite = query.alpha * sims_u + query.beta * sims_a
    else:
        composite = query.alpha * sims_u

    row_ids = snapshot.doc_ids[rows]
    top = _top_k_rows(composite, row_ids, min(candidate_k, rows.shape[0]))
    chosen = rows[top]
    embs = dequantize_batch(snapshot.norms[chosen], snapshot.codes[chosen])
    selection = select_from_embeddings(query, snapshot.doc_ids[chosen], embs)
    return MmrSelection(
        selected=selection.selected,
        scores=selection.scores,
        sim_evals=selection.sim_evals + shortlist_evals,
    )


class SnapshotStore:
    """Atomic publish/current holder for immutable snapshots.

    Exactly one writer may build and publish at a time (external coordination
    assumed); readers never block: ``current()`` is a plain attribute read and
    snapshots held across a publish stay fully usable.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._current: IndexSnapshot | None = None

    def publish(self, snapshot: IndexSnapshot) -> IndexSnapshot:
        """Stamp the next version onto the snapshot and swap it in."""
        with self._lock:
            prev = self._current
            version = 1 if prev is None else prev.version + 1
            stamped = dataclasses.replace(snapshot, version=version)
            self._current = stamped
            return stamped

    def current(self) -> IndexSnapshot:
        snap = self._current
        if snap is None:
            raise LookupError("no snapshot has been published")
        return snap
