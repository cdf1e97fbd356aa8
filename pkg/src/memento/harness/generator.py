"""Synthetic non-stationary corpus generation.

Users carry a daily interest vector in a shared embedding space. A seasonal
cohort blends a stable per-user base direction with a topic that rotates every
``seasonal_period_days`` (topics recur cyclically, so patterns from the
earliest data reappear near the end of the corpus); the remaining users follow
an AR(1) drift. Ads sit near topic vectors in the same space, labels are
sampled from a logistic model on <interest, ad>, and the generator keeps every
true probability, so the Bayes-optimal NE of any holdout is known.

Everything is drawn from named seeded substreams: the same config reproduces
the same corpus byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from functools import cached_property

import numpy as np

from ..chunker import DailyEmbedding
from ..core import SourceId
from ..errors import InvalidConfig
from ..metrics import PredictionBatch, normalized_entropy
from ..rehearsal import TrainingRow


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs of the synthetic process; all randomness hangs off ``seed``."""

    n_users: int = 2000
    n_sources: int = 4
    n_days: int = 365
    dim: int = 32
    interest_drift: float = 0.98
    seasonal_period_days: int = 90
    cohort_mix: float = 0.5
    noise_scale: float = 0.1
    seed: int = 0
    n_topics: int = 6
    n_ads: int = 200
    rows_per_user_day: float = 0.7
    label_scale: float = 4.0
    label_bias: float = -1.0
    base_weight: float = 0.4
    source_tilt: float = 0.25
    daily_noise: float = 0.4
    holdout_rows: int = 4000

    def __post_init__(self) -> None:
        positive = (
            "n_users",
            "n_sources",
            "n_days",
            "dim",
            "seasonal_period_days",
            "n_topics",
            "n_ads",
            "holdout_rows",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise InvalidConfig(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.cohort_mix <= 1.0:
            raise InvalidConfig(f"cohort_mix must be in [0, 1], got {self.cohort_mix}")
        if not 0.0 <= self.interest_drift <= 1.0:
            raise InvalidConfig(f"interest_drift must be in [0, 1], got {self.interest_drift}")
        if self.noise_scale < 0 or self.daily_noise < 0:
            raise InvalidConfig("noise_scale and daily_noise must be >= 0")
        if not 0.0 < self.rows_per_user_day <= 1.0:
            raise InvalidConfig(
                f"rows_per_user_day must be in (0, 1], got {self.rows_per_user_day}"
            )
        if self.n_topics > self.dim:
            raise InvalidConfig("n_topics cannot exceed dim (topics are orthonormalized)")

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"unknown generator keys: {sorted(unknown)}")
        return cls(**data)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    return m / np.where(norms > 0, norms, 1.0)


@dataclass
class Corpus:
    """One generated world: history embeddings, training rows, holdouts."""

    cfg: GeneratorConfig
    sources: list[SourceId]
    topics: np.ndarray
    ad_vecs: np.ndarray
    ad_topic: np.ndarray
    interest: np.ndarray          # (n_days, n_users, dim) f32, the true process
    daily_user: np.ndarray        # (m,) i32 \
    daily_source: np.ndarray      # (m,) i32  > columnar daily embeddings
    daily_day: np.ndarray         # (m,) i32 /
    daily_emb: np.ndarray         # (m, dim) f32
    rows: list[TrainingRow]
    rows_meta: np.ndarray         # (n_rows, 3) i32: user_idx, day, ad_idx
    true_p_rows: np.ndarray
    holdout_old: list[TrainingRow]
    old_meta: np.ndarray
    true_p_old: np.ndarray
    holdout_recent: list[TrainingRow]
    recent_meta: np.ndarray
    true_p_recent: np.ndarray

    @property
    def old_window(self) -> tuple[int, int]:
        return (0, self.cfg.n_days // 3)

    @property
    def recent_window(self) -> tuple[int, int]:
        n = self.cfg.n_days
        return (n - math.ceil(n / 10), n)

    @cached_property
    def bayes_ne_old(self) -> float:
        return _bayes_ne(self.holdout_old, self.true_p_old)

    @cached_property
    def bayes_ne_recent(self) -> float:
        return _bayes_ne(self.holdout_recent, self.true_p_recent)

    def iter_dailies(self):
        """Yield DailyEmbedding objects (object view of the columnar table)."""
        for i in range(self.daily_user.shape[0]):
            yield DailyEmbedding(
                user_id=_user_name(int(self.daily_user[i])),
                source=self.sources[int(self.daily_source[i])],
                day=int(self.daily_day[i]),
                embedding=self.daily_emb[i],
            )


def _bayes_ne(rows: list[TrainingRow], true_p: np.ndarray) -> float:
    y = np.asarray([r.label for r in rows])
    return normalized_entropy(PredictionBatch(p=true_p, y=y))


def _user_name(idx: int) -> str:
    return f"u{idx:05d}"


def _ad_name(idx: int) -> str:
    return f"a{idx:04d}"


def generate_corpus(cfg: GeneratorConfig) -> Corpus:
    """Run the seeded process and materialize the corpus."""
    root = np.random.SeedSequence(cfg.seed)
    streams = {
        name: np.random.default_rng(child)
        for name, child in zip(
            ("topics", "users", "drift", "sources", "rows", "holdout"),
            root.spawn(6),
        )
    }

    topics = streams["topics"].normal(size=(cfg.dim, cfg.n_topics))
    q, _ = np.linalg.qr(topics)
    topics = np.ascontiguousarray(q.T[: cfg.n_topics])  # orthonormal rows

    base = _unit_rows(streams["users"].normal(size=(cfg.n_users, cfg.dim)))
    phase = streams["users"].integers(cfg.n_topics, size=cfg.n_users)
    n_seasonal = int(round(cfg.cohort_mix * cfg.n_users))
    seasonal = np.zeros(cfg.n_users, dtype=bool)
    seasonal[:n_seasonal] = True

    ad_topic = np.arange(cfg.n_ads, dtype=np.int32) % cfg.n_topics
    ad_vecs = _unit_rows(
        topics[ad_topic] + 0.25 * streams["users"].normal(size=(cfg.n_ads, cfg.dim))
    ).astype(np.float32)

    src_rng = streams["sources"]
    tilt = _unit_rows(src_rng.normal(size=(cfg.n_sources, cfg.dim)))
    sources = [
        SourceId(id=s, name=f"source-{s}", dimension=cfg.dim) for s in range(cfg.n_sources)
    ]

    drift_rng = streams["drift"]
    rho = cfg.interest_drift
    drift_noise = math.sqrt(max(0.0, 1.0 - rho * rho)) * cfg.noise_scale

    interest = np.empty((cfg.n_days, cfg.n_users, cfg.dim), dtype=np.float32)
    z = base.copy()
    n_dailies = cfg.n_days * cfg.n_users * cfg.n_sources
    daily_user = np.empty(n_dailies, dtype=np.int32)
    daily_source = np.empty(n_dailies, dtype=np.int32)
    daily_day = np.empty(n_dailies, dtype=np.int32)
    daily_emb = np.empty((n_dailies, cfg.dim), dtype=np.float32)

    pos = 0
    for day in range(cfg.n_days):
        seg = day // cfg.seasonal_period_days
        topic_idx = (phase + seg) % cfg.n_topics
        seasonal_interest = cfg.base_weight * base + (1.0 - cfg.base_weight) * topics[topic_idx]
        if cfg.noise_scale > 0:
            seasonal_interest = seasonal_interest + cfg.noise_scale * drift_rng.normal(
                size=(cfg.n_users, cfg.dim)
            )
        # one drift step for everyone, applied only to the drifting cohort
        step = rho * z
        if drift_noise > 0:
            step = step + drift_noise * drift_rng.normal(size=(cfg.n_users, cfg.dim))
        z = _unit_rows(step)
        day_interest = np.where(seasonal[:, None], _unit_rows(seasonal_interest), z)
        interest[day] = day_interest.astype(np.float32)

        for s in range(cfg.n_sources):
            emb = day_interest + cfg.source_tilt * tilt[s]
            if cfg.daily_noise > 0:
                emb = emb + cfg.daily_noise * drift_rng.normal(size=(cfg.n_users, cfg.dim))
            sl = slice(pos, pos + cfg.n_users)
            daily_user[sl] = np.arange(cfg.n_users)
            daily_source[sl] = s
            daily_day[sl] = day
            daily_emb[sl] = _unit_rows(emb).astype(np.float32)
            pos += cfg.n_users

    rows_rng = streams["rows"]
    rows: list[TrainingRow] = []
    meta: list[tuple[int, int, int]] = []
    true_p: list[float] = []
    for day in range(cfg.n_days):
        active = np.flatnonzero(rows_rng.random(cfg.n_users) < cfg.rows_per_user_day)
        if active.shape[0] == 0:
            continue
        ads = rows_rng.integers(cfg.n_ads, size=active.shape[0])
        hours = rows_rng.integers(24, size=active.shape[0])
        day_i = interest[day].astype(np.float64)
        logits = (
            cfg.label_scale * np.einsum("ij,ij->i", day_i[active], ad_vecs[ads].astype(np.float64))
            + cfg.label_bias
        )
        p = 1.0 / (1.0 + np.exp(-logits))
        labels = rows_rng.random(active.shape[0]) < p
        feat_noise = rows_rng.normal(size=(active.shape[0], cfg.dim))
        feat_u = _unit_rows(day_i[active] + cfg.noise_scale * feat_noise).astype(np.float32)
        for j, u in enumerate(active):
            rows.append(
                TrainingRow(
                    user_id=_user_name(int(u)),
                    ad_id=_ad_name(int(ads[j])),
                    label=int(labels[j]),
                    ts_hour=day * 24 + int(hours[j]),
                    feat_u=feat_u[j],
                    feat_a=ad_vecs[int(ads[j])],
                )
            )
            meta.append((int(u), day, int(ads[j])))
            true_p.append(float(p[j]))

    order = sorted(range(len(rows)), key=lambda i: (rows[i].ts_hour, i))
    rows = [rows[i] for i in order]
    rows_meta = np.asarray([meta[i] for i in order], dtype=np.int32)
    true_p_rows = np.asarray([true_p[i] for i in order])

    hold_rng = streams["holdout"]

    def sample_holdout(window: tuple[int, int]):
        lo, hi = window
        users = hold_rng.integers(cfg.n_users, size=cfg.holdout_rows)
        days = hold_rng.integers(lo, hi, size=cfg.holdout_rows)
        ads = hold_rng.integers(cfg.n_ads, size=cfg.holdout_rows)
        hours = hold_rng.integers(24, size=cfg.holdout_rows)
        out_rows: list[TrainingRow] = []
        out_meta = np.empty((cfg.holdout_rows, 3), dtype=np.int32)
        out_p = np.empty(cfg.holdout_rows)
        noise = hold_rng.normal(size=(cfg.holdout_rows, cfg.dim))
        for i in range(cfg.holdout_rows):
            u, day, a = int(users[i]), int(days[i]), int(ads[i])
            ivec = interest[day, u].astype(np.float64)
            logit = cfg.label_scale * float(ivec @ ad_vecs[a].astype(np.float64)) + cfg.label_bias
            p = 1.0 / (1.0 + math.exp(-logit))
            label = int(hold_rng.random() < p)
            fu = ivec + cfg.noise_scale * noise[i]
            out_rows.append(
                TrainingRow(
                    user_id=_user_name(u),
                    ad_id=_ad_name(a),
                    label=label,
                    ts_hour=day * 24 + int(hours[i]),
                    feat_u=(fu / np.linalg.norm(fu)).astype(np.float32),
                    feat_a=ad_vecs[a],
                )
            )
            out_meta[i] = (u, day, a)
            out_p[i] = p
        order = sorted(range(len(out_rows)), key=lambda i: (out_rows[i].ts_hour, i))
        return (
            [out_rows[i] for i in order],
            out_meta[order],
            out_p[order],
        )

    n = cfg.n_days
    holdout_old, old_meta, true_p_old = sample_holdout((0, n // 3))
    holdout_recent, recent_meta, true_p_recent = sample_holdout((n - math.ceil(n / 10), n))

    return Corpus(
        cfg=cfg,
        sources=sources,
        topics=topics,
        ad_vecs=ad_vecs,
        ad_topic=ad_topic,
        interest=interest,
        daily_user=daily_user,
        daily_source=daily_source,
        daily_day=daily_day,
        daily_emb=daily_emb,
        rows=rows,
        rows_meta=rows_meta,
        true_p_rows=true_p_rows,
        holdout_old=holdout_old,
        old_meta=old_meta,
        true_p_old=true_p_old,
        holdout_recent=holdout_recent,
        recent_meta=recent_meta,
        true_p_recent=true_p_recent,
    )
