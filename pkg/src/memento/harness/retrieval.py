"""Per-user history retrieval for the experiment harness.

Builds per-user doc corpora from the generated dailies (optionally 7-day
chunked and NormInt8 quantized, matching the chunker's aggregation exactly)
and turns retrieval selections into pooled context vectors for the ranker.

Contexts are cached per (user, week bucket, ad topic): rows inside one week
share the user-side query (the realtime user embedding of the bucket start
day) and ads are queried at category level via their topic vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..core import dequantize_batch, quantize_batch
from ..mmr import RetrievalQuery, select_from_embeddings
from .generator import Corpus


@dataclass(frozen=True)
class RetrievalVariant:
    """One context-construction policy evaluated by an experiment."""

    name: str
    mode: str                     # "none" | "lastn" | "rag"
    alpha: float = 0.3
    beta: float = 0.4
    filter_rate: float = 0.5
    candidate_k: int = 32
    budget: int | None = None     # fixed selection size; overrides filter_rate
    retention_days: int | None = None

    def label(self) -> str:
        if self.mode == "rag":
            return f"MMR@{self.filter_rate:g} {{{self.alpha:g}, {self.beta:g}}}"
        return self.name


class HistoryRetriever:
    """Doc corpora over one corpus: arrays per user, visibility by day."""

    def __init__(
        self,
        corpus: Corpus,
        source_ids: list[int] | None = None,
        epoch_days: int | None = 7,
        quantized: bool = True,
    ) -> None:
        self.corpus = corpus
        self.epoch_days = epoch_days
        self.quantized = quantized
        sources = sorted(source_ids if source_ids is not None else range(corpus.cfg.n_sources))
        self.source_ids = sources
        self._build(np.asarray(sources))

    def _build(self, sources: np.ndarray) -> None:
        c = self.corpus
        keep = np.isin(c.daily_source, sources)
        user = c.daily_user[keep]
        source = c.daily_source[keep]
        day = c.daily_day[keep]
        emb = c.daily_emb[keep]
        length = self.epoch_days or 1
        start = (day // length) * length

        order = np.lexsort((start, source, user))
        user, source, start, emb = user[order], source[order], start[order], emb[order]

        # group rows by (user, source, epoch start) and mean-pool each group,
        # summing in float64 exactly like the chunker does
        boundary = np.flatnonzero(
            (user[1:] != user[:-1]) | (source[1:] != source[:-1]) | (start[1:] != start[:-1])
        )
        group_starts = np.concatenate([[0], boundary + 1])
        counts = np.diff(np.concatenate([group_starts, [user.shape[0]]]))
        sums = np.add.reduceat(emb.astype(np.float64), group_starts, axis=0)
        means = sums / counts[:, None]
        if self.quantized:
            norms, codes = quantize_batch(means)
            doc_emb = dequantize_batch(norms, codes)
        else:
            doc_emb = means.astype(np.float32)

        g_user = user[group_starts]
        g_start = start[group_starts]
        self._per_user: list[dict] = []
        u_bounds = np.searchsorted(g_user, np.arange(c.cfg.n_users + 1))
        for u in range(c.cfg.n_users):
            lo, hi = int(u_bounds[u]), int(u_bounds[u + 1])
            embs = doc_emb[lo:hi]
            embs64 = embs.astype(np.float64)
            norms = np.sqrt(np.einsum("ij,ij->i", embs64, embs64))
            unit = embs64 / np.where(norms > 0, norms, 1.0)[:, None]
            self._per_user.append(
                {
                    "starts": g_start[lo:hi].astype(np.int64),
                    "ends": g_start[lo:hi].astype(np.int64) + length,
                    "embs": embs64,
                    "unit": unit,
                    "ids": np.arange(hi - lo, dtype=np.uint64),
                }
            )

    def docs_per_user(self) -> float:
        return float(np.mean([d["starts"].shape[0] for d in self._per_user]))

    def _visible(self, user: int, day: int, retention_days: int | None):
        docs = self._per_user[user]
        vis = docs["ends"] <= day
        if retention_days is not None:
            vis &= docs["starts"] >= day - retention_days
        return docs, np.flatnonzero(vis)

    def lastn_context(
        self, user: int, day: int, retention_days: int | None
    ) -> tuple[np.ndarray, int]:
        """Mean over every visible doc in the window (the linear-scaling path)."""
        docs, rows = self._visible(user, day, retention_days)
        if rows.shape[0] == 0:
            return np.zeros(self.corpus.cfg.dim), 0
        return docs["embs"][rows].mean(axis=0), rows.shape[0]

    def rag_context(
        self,
        user: int,
        day: int,
        ad_vec: np.ndarray | None,
        variant: RetrievalVariant,
    ) -> tuple[np.ndarray, int, int]:
        """Shortlist + greedy-MMR context; returns (ctx, sim evals, n selected).

        Pooling averages the selected docs in ascending id order, so the pooled
        vector does not depend on selection order.
        """
        docs, rows = self._visible(user, day, variant.retention_days)
        if rows.shape[0] == 0:
            return np.zeros(self.corpus.cfg.dim), 0, 0
        unit = docs["unit"][rows]
        q_user = np.asarray(self.corpus.interest[day, user], dtype=np.float64)
        q_unit = q_user / (np.linalg.norm(q_user) or 1.0)
        rel = variant.alpha * np.einsum("ij,j->i", unit, q_unit)
        evals = rows.shape[0]
        if ad_vec is not None and variant.beta > 0:
            a64 = np.asarray(ad_vec, dtype=np.float64)
            a_unit = a64 / (np.linalg.norm(a64) or 1.0)
            rel = rel + variant.beta * np.einsum("ij,j->i", unit, a_unit)
            evals += rows.shape[0]

        n_vis = rows.shape[0]
        candidate_k = min(variant.candidate_k, n_vis)
        if variant.budget is not None:
            candidate_k = min(max(4 * variant.budget, 1), n_vis)
        shortlist = np.lexsort((rows, -rel))[:candidate_k]
        chosen = rows[shortlist]

        if variant.budget is not None:
            rate = min(1.0, variant.budget / candidate_k)
        else:
            rate = variant.filter_rate
        query = RetrievalQuery(
            user_emb=q_user.astype(np.float32),
            ad_emb=None if ad_vec is None else np.asarray(ad_vec, dtype=np.float32),
            alpha=variant.alpha,
            beta=variant.beta,
            filter_rate=rate,
        )
        sel = select_from_embeddings(query, docs["ids"][chosen], docs["embs"][chosen])
        picked = np.sort(np.asarray(sel.selected, dtype=np.int64))
        ctx = docs["embs"][picked].mean(axis=0)
        return ctx, evals + sel.sim_evals, len(sel.selected)


class ContextBuilder:
    """Caches pooled contexts per (user, week bucket, ad topic)."""

    def __init__(self, corpus: Corpus, retriever: HistoryRetriever, variant: RetrievalVariant):
        self.corpus = corpus
        self.retriever = retriever
        self.variant = variant
        self._cache: dict[tuple[int, int, int], np.ndarray] = {}
        self.total_evals = 0
        self.n_queries = 0
        self.total_selected = 0

    def contexts(self, meta: np.ndarray) -> np.ndarray:
        """Context matrix aligned with ``meta`` rows (user_idx, day, ad_idx)."""
        dim = self.corpus.cfg.dim
        out = np.zeros((meta.shape[0], dim))
        if self.variant.mode == "none":
            return out
        topic_of = self.corpus.ad_topic
        for i in range(meta.shape[0]):
            user, day, ad = int(meta[i, 0]), int(meta[i, 1]), int(meta[i, 2])
            bucket = (day // 7) * 7
            topic = int(topic_of[ad]) if self.variant.mode == "rag" else -1
            key = (user, bucket, topic)
            ctx = self._cache.get(key)
            if ctx is None:
                ctx = self._compute(user, bucket, topic)
                self._cache[key] = ctx
            out[i] = ctx
        return out

    def _compute(self, user: int, day: int, topic: int) -> np.ndarray:
        v = self.variant
        if v.mode == "lastn":
            ctx, n = self.retriever.lastn_context(user, day, v.retention_days)
            self.n_queries += 1
            self.total_selected += n
            return ctx
        ad_vec = None if topic < 0 else self.corpus.topics[topic]
        ctx, evals, n_sel = self.retriever.rag_context(user, day, ad_vec, v)
        self.total_evals += evals
        self.n_queries += 1
        self.total_selected += n_sel
        return ctx

    def evals_per_query(self) -> float:
        return self.total_evals / self.n_queries if self.n_queries else 0.0
