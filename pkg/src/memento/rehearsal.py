"""Retrieval-guided rehearsal against catastrophic forgetting.

Training rows are embedded by a two-tower model, chunked by hour with
loss-prioritized retention, and indexed by their chunk centroids. At
second-pass time the selector retrieves historical chunks similar to the
recent data distribution (user side weighted by alpha, ad side by beta,
diversity on the user side) and replays their rows, interleaved with the
recent rows in global timestamp order, after resetting or shrinking the
ranker's sparse tables and enlarging the sparse learning rate.
"""

from __future__ import annotations

import copy
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BudgetExceedsCorpus,
    EmptyHoldout,
    InvalidPlan,
    UntrainedTower,
)
from .metrics import PredictionBatch, normalized_entropy
from .mmr import two_sided_order, unit_rows
from .ranker import ToyRanker, TwoTowerModel


@dataclass
class TrainingRow:
    """One (user, ad, label) example with raw features and tower embeddings."""

    user_id: str
    ad_id: str
    label: int
    ts_hour: int
    feat_u: np.ndarray = field(repr=False)
    feat_a: np.ndarray = field(repr=False)
    user_emb: np.ndarray | None = field(default=None, repr=False)
    ad_emb: np.ndarray | None = field(default=None, repr=False)
    loss: float = 0.0

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.ts_hour < 0:
            raise ValueError(f"ts_hour must be >= 0, got {self.ts_hour}")


@dataclass(frozen=True)
class RowChunk:
    """One hour of retained rows plus their user/ad centroid embeddings."""

    hour: int
    rows: tuple[TrainingRow, ...]
    user_centroid: np.ndarray = field(repr=False)
    ad_centroid: np.ndarray = field(repr=False)


class ReplayPolicy(enum.Enum):
    NONE = "none"
    RANDOM = "random"
    MMR = "mmr"


@dataclass(frozen=True)
class SecondPassPlan:
    """How the second training pass treats sparse parameters and replay."""

    strategy: str  # "reset" or "shrink"
    shrink_factor: float = 0.1
    lr_multiplier: float = 2.0
    replay_fraction: float = 0.25
    replay_policy: ReplayPolicy = ReplayPolicy.NONE

    def __post_init__(self) -> None:
        if self.strategy not in ("reset", "shrink"):
            raise InvalidPlan(f"unknown strategy {self.strategy!r}")
        if self.strategy == "shrink" and not 0.0 < self.shrink_factor <= 1.0:
            raise InvalidPlan(f"shrink factor must be in (0, 1], got {self.shrink_factor}")
        if self.lr_multiplier < 1.0:
            raise InvalidPlan(f"lr_multiplier must be >= 1, got {self.lr_multiplier}")
        if not 0.0 <= self.replay_fraction <= 1.0:
            raise InvalidPlan(f"replay_fraction must be in [0, 1], got {self.replay_fraction}")


def embed_rows(rows: Sequence[TrainingRow], model: TwoTowerModel) -> list[TrainingRow]:
    """Fill user_emb/ad_emb on every row from the trained towers (in place)."""
    if not model.trained:
        raise UntrainedTower("two-tower model must be trained before embedding rows")
    if not rows:
        return list(rows)
    fu = np.stack([r.feat_u for r in rows])
    fa = np.stack([r.feat_a for r in rows])
    u = model.embed_user(fu).astype(np.float32)
    a = model.embed_ad(fa).astype(np.float32)
    for i, row in enumerate(rows):
        row.user_emb = u[i]
        row.ad_emb = a[i]
    return list(rows)


def build_chunks(rows: Sequence[TrainingRow], retain_per_hour: int) -> list[RowChunk]:
    """Group rows by hour, keep the highest-loss rows per class, recompute centroids.

    Retention is split between positives and negatives proportionally to their
    presence in the hour; within each class the highest-loss rows win (ties
    keep arrival order). Empty hours are skipped.
    """
    if retain_per_hour < 1:
        raise ValueError(f"retain_per_hour must be >= 1, got {retain_per_hour}")
    by_hour: dict[int, list[TrainingRow]] = {}
    for row in rows:
        if row.user_emb is None or row.ad_emb is None:
            raise UntrainedTower("rows must carry tower embeddings; run embed_rows first")
        by_hour.setdefault(row.ts_hour, []).append(row)

    chunks: list[RowChunk] = []
    for hour in sorted(by_hour):
        group = by_hour[hour]
        keep = _retain_by_loss(group, retain_per_hour)
        user_c = np.stack([r.user_emb for r in keep]).mean(axis=0).astype(np.float32)
        ad_c = np.stack([r.ad_emb for r in keep]).mean(axis=0).astype(np.float32)
        chunks.append(
            RowChunk(hour=hour, rows=tuple(keep), user_centroid=user_c, ad_centroid=ad_c)
        )
    return chunks


def _retain_by_loss(group: list[TrainingRow], retain: int) -> list[TrainingRow]:
    if retain >= len(group):
        return list(group)
    pos = [i for i, r in enumerate(group) if r.label == 1]
    neg = [i for i, r in enumerate(group) if r.label == 0]
    n_pos_keep = int(round(retain * len(pos) / len(group)))
    n_pos_keep = min(max(n_pos_keep, retain - len(neg)), len(pos), retain)
    n_neg_keep = retain - n_pos_keep

    def top_loss(indices: list[int], n: int) -> list[int]:
        ranked = sorted(indices, key=lambda i: (-group[i].loss, i))
        return ranked[:n]

    kept = sorted(top_loss(pos, n_pos_keep) + top_loss(neg, n_neg_keep))
    return [group[i] for i in kept]


def select_replay(
    recent_chunks: Sequence[RowChunk],
    historical_chunks: Sequence[RowChunk],
    policy: ReplayPolicy,
    fraction: float,
    alpha: float = 0.5,
    beta: float = 0.3,
    seed: int = 0,
    n_recent_rows: int | None = None,
) -> list[TrainingRow]:
    """Pick historical rows for rehearsal under a row budget.

    Budget is ``ceil(fraction * recent row count)``. The MMR policy orders
    historical chunks greedily (user-side cosine to the mean recent user
    centroid weighted alpha, ad side weighted beta, diversity on user
    centroids) and emits whole chunks until the budget is met, so it may
    overshoot by at most one chunk. The random policy samples individual rows
    uniformly to exactly the same budget.
    """
    if fraction < 0:
        raise ValueError(f"fraction must be >= 0, got {fraction}")
    n_recent = (
        n_recent_rows
        if n_recent_rows is not None
        else sum(len(c.rows) for c in recent_chunks)
    )
    budget = int(math.ceil(fraction * n_recent - 1e-9))
    if budget <= 0 or policy is ReplayPolicy.NONE:
        return []
    total_hist = sum(len(c.rows) for c in historical_chunks)
    if budget > total_hist:
        raise BudgetExceedsCorpus(f"budget {budget} exceeds {total_hist} historical rows")

    if policy is ReplayPolicy.RANDOM:
        flat = [row for c in historical_chunks for row in c.rows]
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        picks = np.sort(rng.choice(len(flat), size=budget, replace=False))
        return [flat[int(i)] for i in picks]

    order = replay_chunk_order(recent_chunks, historical_chunks, alpha, beta)
    by_hour = {c.hour: c for c in historical_chunks}
    out: list[TrainingRow] = []
    for hour in order.selected:
        out.extend(by_hour[int(hour)].rows)
        if len(out) >= budget:
            break
    return out


def replay_chunk_order(
    recent_chunks: Sequence[RowChunk],
    historical_chunks: Sequence[RowChunk],
    alpha: float,
    beta: float,
    oracle: bool = False,
):
    """Greedy MMR ordering of historical chunks (ids are chunk hours).

    ``oracle=True`` uses the naive no-caching re-evaluation path; selections
    must match the production path exactly.
    """
    if not historical_chunks or not recent_chunks:
        raise ValueError("recent and historical chunks must be nonempty")
    q_user = np.stack([c.user_centroid for c in recent_chunks]).mean(axis=0)
    q_ad = np.stack([c.ad_centroid for c in recent_chunks]).mean(axis=0)
    user_cents = np.stack([c.user_centroid for c in historical_chunks])
    ad_cents = np.stack([c.ad_centroid for c in historical_chunks])
    uu = unit_rows(user_cents)
    ua = unit_rows(ad_cents)

    def unit(v: np.ndarray) -> np.ndarray:
        v64 = np.asarray(v, dtype=np.float64)
        n = math.sqrt(float(np.einsum("j,j->", v64, v64)))
        return v64 / n if n > 0 else np.zeros_like(v64)

    rel_u = np.einsum("ij,j->i", uu, unit(q_user))
    rel_a = np.einsum("ij,j->i", ua, unit(q_ad))
    ids = np.asarray([c.hour for c in historical_chunks], dtype=np.uint64)
    return two_sided_order(ids, rel_u, rel_a, user_cents, alpha, beta, oracle=oracle)


def apply_strategy(model: ToyRanker, plan: SecondPassPlan) -> None:
    """Reset or shrink the sparse tables per the plan."""
    if plan.strategy == "reset":
        model.reset_sparse()
    else:
        model.shrink_sparse(plan.shrink_factor)


def second_pass_train(
    model: ToyRanker,
    recent_rows: Sequence[TrainingRow],
    replay_rows: Sequence[TrainingRow],
    plan: SecondPassPlan,
) -> tuple[ToyRanker, dict]:
    """Clone the converged model and run the second pass per the plan.

    Recent and replay rows are merged in global timestamp order (replay rows
    sort before recent rows at equal timestamps, each side keeping its own
    relative order). Sparse parameters train at base_lr * lr_multiplier;
    dense parameters keep the base rate.
    """
    trained = copy.deepcopy(model)
    apply_strategy(trained, plan)
    tagged = [(row.ts_hour, 0, i, row) for i, row in enumerate(replay_rows)]
    tagged += [(row.ts_hour, 1, i, row) for i, row in enumerate(recent_rows)]
    tagged.sort(key=lambda t: t[:3])
    merged = [t[3] for t in tagged]
    mean_loss = trained.train_pass(merged, sparse_lr_multiplier=plan.lr_multiplier)
    info = {
        "n_recent": len(recent_rows),
        "n_replay": len(replay_rows),
        "mean_loss": mean_loss,
        "strategy": plan.strategy,
        "lr_multiplier": plan.lr_multiplier,
    }
    return trained, info


def eval_forgetting(
    model: ToyRanker,
    holdout_old: Sequence[TrainingRow],
    holdout_recent: Sequence[TrainingRow],
    contexts_old: np.ndarray | None = None,
    contexts_recent: np.ndarray | None = None,
) -> tuple[float, float]:
    """(NE on old-pattern holdout, NE on recent holdout)."""
    if not holdout_old or not holdout_recent:
        raise EmptyHoldout("both holdouts must be nonempty")
    ne = []
    for rows, ctx in ((holdout_old, contexts_old), (holdout_recent, contexts_recent)):
        p = model.predict_proba(rows, ctx)
        y = np.asarray([r.label for r in rows])
        ne.append(normalized_entropy(PredictionBatch(p=p, y=y)))
    return ne[0], ne[1]


def read_rows_jsonl(path: str | Path) -> list[TrainingRow]:
    """Load rows from JSONL {"user","ad","label","ts_hour","feat_u","feat_a"}."""
    rows: list[TrainingRow] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            rows.append(
                TrainingRow(
                    user_id=str(rec["user"]),
                    ad_id=str(rec["ad"]),
                    label=int(rec["label"]),
                    ts_hour=int(rec["ts_hour"]),
                    feat_u=np.asarray(rec["feat_u"], dtype=np.float32),
                    feat_a=np.asarray(rec["feat_a"], dtype=np.float32),
                )
            )
    return rows


def write_rows_jsonl(path: str | Path, rows: Sequence[TrainingRow]) -> int:
    """Write rows as JSONL; returns the number of lines."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            rec = {
                "user": r.user_id,
                "ad": r.ad_id,
                "label": int(r.label),
                "ts_hour": int(r.ts_hour),
                "feat_u": [float(x) for x in r.feat_u],
                "feat_a": [float(x) for x in r.feat_a],
            }
            fh.write(json.dumps(rec) + "\n")
            n += 1
    return n
