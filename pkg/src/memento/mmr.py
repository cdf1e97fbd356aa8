"""Greedy diversified selection with a three-way relevance/diversity trade-off.

Each step picks the candidate maximizing

    alpha * sim_user(doc, query) + beta * sim_ad(doc, query)
        - (1 - alpha - beta) * max over selected of sim_user(doc, selected)

where sims are cosines. The max-over-selected term is 0 while nothing is
selected, so the first pick is a pure relevance argmax. Ties break toward the
smallest doc id. ``k = ceil(filter_rate * n)`` documents are selected.

All similarities are evaluated through np.einsum on shared unit-normalized
matrices. einsum reduces each row independently in a fixed order, so a pair
similarity has one bit pattern no matter which path (incremental selector,
naive oracle, row subset) computes it; exact selector/oracle equivalence
depends on this and is asserted in tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .chunker import MementoDoc
from .core import as_embedding, dequantize_batch, quantize_norm_int8
from .errors import DimensionMismatch, InvalidWeights, MissingAdEmbedding

# Float dust tolerance for the alpha + beta <= 1 boundary (e.g. 0.1 + 0.9).
_WEIGHT_EPS = 1e-12


@dataclass(frozen=True)
class RetrievalQuery:
    """User-side and optional ad-side query embeddings plus MMR weights."""

    user_emb: np.ndarray = field(repr=False)
    ad_emb: np.ndarray | None = field(default=None, repr=False)
    alpha: float = 0.0
    beta: float = 0.0
    filter_rate: float = 0.5

    def __post_init__(self) -> None:
        user = as_embedding(self.user_emb, name="user_emb")
        user.setflags(write=False)
        object.__setattr__(self, "user_emb", user)
        if self.ad_emb is not None:
            ad = as_embedding(self.ad_emb, name="ad_emb")
            ad.setflags(write=False)
            object.__setattr__(self, "ad_emb", ad)
        if self.alpha < 0 or self.beta < 0:
            raise InvalidWeights(f"negative weight: alpha={self.alpha} beta={self.beta}")
        if self.alpha + self.beta > 1.0 + _WEIGHT_EPS:
            raise InvalidWeights(
                f"alpha + beta = {self.alpha + self.beta} > 1 would reward redundancy"
            )
        if not 0.0 < self.filter_rate <= 1.0:
            raise InvalidWeights(f"filter_rate must be in (0, 1], got {self.filter_rate}")
        if self.beta > 0 and self.ad_emb is None:
            raise MissingAdEmbedding("beta > 0 requires an ad-side query embedding")

    @property
    def diversity_weight(self) -> float:
        w = 1.0 - self.alpha - self.beta
        return w if w > _WEIGHT_EPS else 0.0


@dataclass(frozen=True)
class MmrSelection:
    """Ordered selection result: doc ids, per-step scores, evaluation count."""

    selected: tuple[int, ...]
    scores: tuple[float, ...]
    sim_evals: int


def selection_size(filter_rate: float, n_candidates: int) -> int:
    """``ceil(filter_rate * n)`` with protection against float dust (0.1 * 10)."""
    return max(1, int(math.ceil(filter_rate * n_candidates - 1e-9)))


def unit_rows(matrix: np.ndarray) -> np.ndarray:
    """Rows scaled to unit L2 norm (float64); zero rows stay zero."""
    m = np.asarray(matrix, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    safe = np.where(norms > 0.0, norms, 1.0)
    return m / safe[:, None]


def _unit_vector(v: np.ndarray) -> np.ndarray:
    v64 = np.asarray(v, dtype=np.float64)
    n = math.sqrt(float(np.einsum("j,j->", v64, v64)))
    return v64 / n if n > 0.0 else np.zeros_like(v64)


@dataclass(frozen=True)
class _Prepared:
    """Similarity inputs shared by the selector and the oracle."""

    ids: np.ndarray          # candidate doc ids, ascending
    relevance: np.ndarray    # alpha * sim_user + beta * sim_ad, per candidate
    div_unit: np.ndarray     # unit rows for the pairwise diversity term
    div_weight: float
    k: int
    rel_evals: int


def _prepare_arrays(
    query: RetrievalQuery,
    ids: np.ndarray,
    embs: np.ndarray,
    *,
    user_q: np.ndarray,
    ad_q: np.ndarray | None,
) -> _Prepared:
    order = np.argsort(ids, kind="stable")
    ids = ids[order]
    if ids.shape[0] == 0:
        raise ValueError("no candidates")
    if np.any(ids[1:] == ids[:-1]):
        raise ValueError("duplicate doc ids among candidates")
    embs = embs[order]
    if embs.shape[1] != user_q.shape[0]:
        raise DimensionMismatch(
            f"candidate dim {embs.shape[1]} vs query dim {user_q.shape[0]}"
        )
    unit = unit_rows(embs)
    rel_u = np.einsum("ij,j->i", unit, _unit_vector(user_q))
    evals = unit.shape[0]
    if query.beta > 0 and ad_q is not None:
        if ad_q.shape[0] != embs.shape[1]:
            raise DimensionMismatch(
                f"candidate dim {embs.shape[1]} vs ad query dim {ad_q.shape[0]}"
            )
        rel_a = np.einsum("ij,j->i", unit, _unit_vector(ad_q))
        evals += unit.shape[0]
        relevance = query.alpha * rel_u + query.beta * rel_a
    else:
        relevance = query.alpha * rel_u
    return _Prepared(
        ids=ids,
        relevance=relevance,
        div_unit=unit,
        div_weight=query.diversity_weight,
        k=selection_size(query.filter_rate, ids.shape[0]),
        rel_evals=evals,
    )


def _greedy(prep: _Prepared) -> MmrSelection:
    """Incremental selector: one running max per candidate, O(n*k) sims."""
    n = prep.ids.shape[0]
    taken = np.zeros(n, dtype=bool)
    max_div = np.zeros(n)  # stands in for the empty-set diversity term
    picks: list[int] = []
    scores: list[float] = []
    evals = prep.rel_evals
    for step in range(prep.k):
        candidate_scores = prep.relevance - prep.div_weight * max_div
        candidate_scores[taken] = -np.inf
        pick = int(np.argmax(candidate_scores))  # first max = smallest doc id
        picks.append(pick)
        scores.append(float(candidate_scores[pick]))
        taken[pick] = True
        if prep.div_weight != 0.0 and step + 1 < prep.k:
            remaining = np.flatnonzero(~taken)
            sims = np.einsum("ij,j->i", prep.div_unit[remaining], prep.div_unit[pick])
            evals += remaining.shape[0]
            if step == 0:
                max_div[remaining] = sims
            else:
                max_div[remaining] = np.maximum(max_div[remaining], sims)
    return MmrSelection(
        selected=tuple(int(prep.ids[i]) for i in picks),
        scores=tuple(scores),
        sim_evals=evals,
    )


def _greedy_oracle(prep: _Prepared) -> MmrSelection:
    """Naive re-evaluation: recomputes the full max-over-selected every step."""
    n = prep.ids.shape[0]
    taken = np.zeros(n, dtype=bool)
    picks: list[int] = []
    scores: list[float] = []
    evals = prep.rel_evals
    for _ in range(prep.k):
        remaining = np.flatnonzero(~taken)
        if picks and prep.div_weight != 0.0:
            pair = np.einsum(
                "ij,kj->ik", prep.div_unit[remaining], prep.div_unit[picks]
            )
            evals += remaining.shape[0] * len(picks)
            div = pair.max(axis=1)
        else:
            div = np.zeros(remaining.shape[0])
        candidate_scores = prep.relevance[remaining] - prep.div_weight * div
        best = int(np.argmax(candidate_scores))
        pick = int(remaining[best])
        picks.append(pick)
        scores.append(float(candidate_scores[best]))
        taken[pick] = True
    return MmrSelection(
        selected=tuple(int(prep.ids[i]) for i in picks),
        scores=tuple(scores),
        sim_evals=evals,
    )


def _prepare_docs(query: RetrievalQuery, candidates: Sequence[MementoDoc]) -> _Prepared:
    if not candidates:
        raise ValueError("candidates must be nonempty")
    ids = np.asarray([d.doc_id for d in candidates], dtype=np.uint64)
    norms = np.asarray([d.embedding.norm for d in candidates], dtype=np.float32)
    codes = np.stack([d.embedding.codes for d in candidates])
    embs = dequantize_batch(norms, codes)
    return _prepare_arrays(
        query,
        ids,
        embs,
        user_q=query.user_emb.astype(np.float64),
        ad_q=None if query.ad_emb is None else query.ad_emb.astype(np.float64),
    )


def mmr_select(query: RetrievalQuery, candidates: Sequence[MementoDoc]) -> MmrSelection:
    """Greedy MMR over dequantized candidate embeddings."""
    return _greedy(_prepare_docs(query, candidates))


def mmr_oracle(query: RetrievalQuery, candidates: Sequence[MementoDoc]) -> MmrSelection:
    """Same contract as :func:`mmr_select`, implemented without caching or
    incremental max tracking. The production path must match it exactly."""
    if len(candidates) > 10_000:
        raise ValueError("oracle capped at 10k candidates")
    return _greedy_oracle(_prepare_docs(query, candidates))


def _prepare_quantized(
    query: RetrievalQuery, candidates: Sequence[MementoDoc]
) -> _Prepared:
    if not candidates:
        raise ValueError("candidates must be nonempty")
    ids = np.asarray([d.doc_id for d in candidates], dtype=np.uint64)
    codes = np.stack([d.embedding.codes for d in candidates]).astype(np.float64)
    uq = quantize_norm_int8(query.user_emb).codes.astype(np.float64)
    aq = (
        quantize_norm_int8(query.ad_emb).codes.astype(np.float64)
        if query.ad_emb is not None
        else None
    )
    return _prepare_arrays(query, ids, codes, user_q=uq, ad_q=aq)


def mmr_select_quantized(
    query: RetrievalQuery, candidates: Sequence[MementoDoc]
) -> MmrSelection:
    """MMR computed on int8 codes without dequantization.

    Matches the exact-space selection whenever every per-step score gap
    exceeds 4/127 (two quantization steps per operand); near-ties may
    legitimately diverge.
    """
    return _greedy(_prepare_quantized(query, candidates))


def select_from_embeddings(
    query: RetrievalQuery, ids: np.ndarray, embs: np.ndarray
) -> MmrSelection:
    """MMR over a raw (ids, float embedding matrix) pair.

    This is the same code path as :func:`mmr_select`; it exists so callers
    that already hold dequantized matrices (the vector index, the replay
    selector) avoid materializing MementoDoc objects.
    """
    ids = np.asarray(ids, dtype=np.uint64)
    embs = np.asarray(embs)
    if ids.shape[0] == 0:
        raise ValueError("candidates must be nonempty")
    return _greedy(
        _prepare_arrays(
            query,
            ids,
            embs,
            user_q=query.user_emb.astype(np.float64),
            ad_q=None if query.ad_emb is None else query.ad_emb.astype(np.float64),
        )
    )


def two_sided_order(
    ids: np.ndarray,
    rel_user: np.ndarray,
    rel_ad: np.ndarray | None,
    div_unit: np.ndarray,
    alpha: float,
    beta: float,
    *,
    oracle: bool = False,
) -> MmrSelection:
    """Full greedy ordering when user-side and ad-side sims are precomputed.

    Used by replay selection, where a candidate carries separate user-side and
    ad-side centroids: relevance combines both, diversity runs on the
    user-side rows. ``oracle=True`` switches to the naive re-evaluation path.
    """
    if alpha < 0 or beta < 0 or alpha + beta > 1.0 + _WEIGHT_EPS:
        raise InvalidWeights(f"bad weights alpha={alpha} beta={beta}")
    ids = np.asarray(ids, dtype=np.uint64)
    order = np.argsort(ids, kind="stable")
    rel_user = np.asarray(rel_user, dtype=np.float64)[order]
    if rel_ad is None:
        relevance = alpha * rel_user
    else:
        relevance = alpha * rel_user + beta * np.asarray(rel_ad, dtype=np.float64)[order]
    w = 1.0 - alpha - beta
    prep = _Prepared(
        ids=ids[order],
        relevance=relevance,
        div_unit=unit_rows(np.asarray(div_unit)[order]),
        div_weight=w if w > _WEIGHT_EPS else 0.0,
        k=ids.shape[0],
        rel_evals=ids.shape[0] * (1 if rel_ad is None else 2),
    )
    return _greedy_oracle(prep) if oracle else _greedy(prep)
