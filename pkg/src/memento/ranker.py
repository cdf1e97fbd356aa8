"""Toy ranking models: a two-tower row embedder and a sparse+dense ranker.

Both are small numpy MLPs with hand-derived gradients (no autodiff). The
two-tower model turns raw row features into user/ad embeddings used for
retrieval; the ranker predicts click probability from learned id-embedding
tables plus dense features, optionally modulated by the context layers.

Sparse table entries are lazily initialized from a per-key seeded stream, so
values do not depend on access order, and a table reset bumps the stream epoch:
post-reset values share no information with pre-reset ones.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ember import AffineHead, QnnLayer, affine_backward, affine_forward, qnn_backward, qnn_forward


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -30.0, 30.0)))


class TwoTowerModel:
    """Separate user/ad MLP encoders scored by dot product."""

    def __init__(self, feat_dim: int, emb_dim: int = 32, hidden: int = 32, seed: int = 0) -> None:
        self.feat_dim = feat_dim
        self.emb_dim = emb_dim
        self.hidden = hidden
        rng = np.random.default_rng(np.random.SeedSequence(seed))

        def mat(rows: int, cols: int) -> np.ndarray:
            return rng.normal(0.0, 1.0 / math.sqrt(cols), (rows, cols))

        self.params = {
            "u_w1": mat(hidden, feat_dim),
            "u_b1": np.zeros(hidden),
            "u_w2": mat(emb_dim, hidden),
            "u_b2": np.zeros(emb_dim),
            "a_w1": mat(hidden, feat_dim),
            "a_b1": np.zeros(hidden),
            "a_w2": mat(emb_dim, hidden),
            "a_b2": np.zeros(emb_dim),
        }
        self.bias = 0.0
        self.trained = False

    def _tower(self, feats: np.ndarray, side: str) -> tuple[np.ndarray, np.ndarray]:
        p = self.params
        pre = feats @ p[f"{side}_w1"].T + p[f"{side}_b1"]
        h = np.maximum(pre, 0.0)
        return h @ p[f"{side}_w2"].T + p[f"{side}_b2"], pre

    def embed_user(self, feats: np.ndarray) -> np.ndarray:
        return self._tower(np.atleast_2d(np.asarray(feats, dtype=np.float64)), "u")[0]

    def embed_ad(self, feats: np.ndarray) -> np.ndarray:
        return self._tower(np.atleast_2d(np.asarray(feats, dtype=np.float64)), "a")[0]

    def fit(
        self,
        feat_u: np.ndarray,
        feat_a: np.ndarray,
        labels: np.ndarray,
        epochs: int = 3,
        lr: float = 0.1,
        batch_size: int = 256,
        seed: int = 0,
    ) -> list[float]:
        """Minibatch SGD on logistic loss of the dot-product score."""
        fu = np.asarray(feat_u, dtype=np.float64)
        fa = np.asarray(feat_a, dtype=np.float64)
        y = np.asarray(labels, dtype=np.float64)
        n = fu.shape[0]
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        p = self.params
        losses = []
        for _ in range(epochs):
            order = rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                bu, ba, by = fu[idx], fa[idx], y[idx]
                m = idx.shape[0]
                u, u_pre = self._tower(bu, "u")
                a, a_pre = self._tower(ba, "a")
                logits = np.einsum("ij,ij->i", u, a) + self.bias
                prob = _sigmoid(logits)
                eps = 1e-12
                epoch_loss += float(
                    -np.sum(by * np.log(prob + eps) + (1 - by) * np.log(1 - prob + eps))
                )
                dlogit = (prob - by) / m
                du = dlogit[:, None] * a
                da = dlogit[:, None] * u
                for side, feats, pre, dout in (("u", bu, u_pre, du), ("a", ba, a_pre, da)):
                    h = np.maximum(pre, 0.0)
                    p[f"{side}_w2"] -= lr * (dout.T @ h)
                    p[f"{side}_b2"] -= lr * dout.sum(axis=0)
                    dh = (dout @ p[f"{side}_w2"]) * (pre > 0.0)
                    p[f"{side}_w1"] -= lr * (dh.T @ feats)
                    p[f"{side}_b1"] -= lr * dh.sum(axis=0)
                self.bias -= lr * float(dlogit.sum())
            losses.append(epoch_loss / n)
        self.trained = True
        return losses

    def predict_proba(self, feat_u: np.ndarray, feat_a: np.ndarray) -> np.ndarray:
        u = self.embed_user(feat_u)
        a = self.embed_ad(feat_a)
        return _sigmoid(np.einsum("ij,ij->i", u, a) + self.bias)


@dataclass(frozen=True)
class RankerConfig:
    """Shape and learning-rate configuration of the toy ranker."""

    feat_dim: int
    d_sparse: int = 16
    hidden: int = 24
    use_context: bool = False
    use_affine: bool = False
    use_qnn: bool = False
    qnn_heads: int = 4
    affine_hidden: int = 32
    affine_blocks: int = 2
    lr_dense: float = 0.05
    lr_sparse: float = 0.1
    init_scale: float = 0.05
    seed: int = 0

    @property
    def interaction_width(self) -> int:
        # [user emb, ad emb, context, raw ad features]
        return 2 * self.d_sparse + 2 * self.feat_dim


class ToyRanker:
    """Sparse id-embedding tables plus a small dense MLP over a fixed layout.

    The dense input is ``[X, dot(ctx, feat_a)]`` where
    ``X = [user_emb, ad_emb, ctx, feat_a]``, optionally passed through the
    quadratic layer; the user embedding is optionally affine-modulated by the
    context before entering X. Without context both ctx and the dot feature
    are zero, keeping one layout for every experiment variant.
    """

    def __init__(self, config: RankerConfig) -> None:
        self.config = config
        self.table_epoch = 0
        self._sparse_lr_mult = 1.0
        self.user_table: dict[str, np.ndarray] = {}
        self.ad_table: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x0DE)))
        k = config.interaction_width
        d_in = k + 1
        self.w1 = rng.normal(0.0, 1.0 / math.sqrt(d_in), (config.hidden, d_in))
        self.b1 = np.zeros(config.hidden)
        self.w2 = rng.normal(0.0, 1.0 / math.sqrt(config.hidden), config.hidden)
        self.b2 = 0.0
        self.affine = (
            AffineHead(
                context_dim=config.feat_dim,
                feature_dim=config.d_sparse,
                hidden=config.affine_hidden,
                blocks=config.affine_blocks,
                seed=config.seed + 1,
            )
            if config.use_affine
            else None
        )
        self.qnn = (
            QnnLayer(width=k, heads=config.qnn_heads, seed=config.seed + 2, scale=0.3)
            if config.use_qnn
            else None
        )

    def _fresh_entry(self, table: str, key: str) -> np.ndarray:
        h = hashlib.blake2b(
            f"{table}\x00{key}\x00{self.table_epoch}\x00{self.config.seed}".encode(),
            digest_size=8,
        )
        rng = np.random.default_rng(int.from_bytes(h.digest(), "little"))
        return rng.normal(0.0, self.config.init_scale, self.config.d_sparse)

    def _lookup(self, table: dict[str, np.ndarray], name: str, key: str) -> np.ndarray:
        vec = table.get(key)
        if vec is None:
            vec = self._fresh_entry(name, key)
            table[key] = vec
        return vec

    def reset_sparse(self) -> None:
        """Redraw every table entry from a fresh seeded stream."""
        self.table_epoch += 1
        for table, name in ((self.user_table, "user"), (self.ad_table, "ad")):
            for key in sorted(table):
                table[key] = self._fresh_entry(name, key)

    def shrink_sparse(self, factor: float) -> None:
        """Multiply every table entry by ``factor`` (1.0 is a bitwise no-op)."""
        for table in (self.user_table, self.ad_table):
            for key in table:
                table[key] = table[key] * factor

    def sparse_values(self) -> np.ndarray:
        """All table entries flattened, in sorted key order."""
        parts = [self.user_table[k] for k in sorted(self.user_table)]
        parts += [self.ad_table[k] for k in sorted(self.ad_table)]
        return np.concatenate(parts) if parts else np.empty(0)

    def _forward(self, row, ctx: np.ndarray | None) -> dict:
        cfg = self.config
        u_emb = self._lookup(self.user_table, "user", row.user_id)
        a_emb = self._lookup(self.ad_table, "ad", row.ad_id)
        ctx_vec = (
            np.zeros(cfg.feat_dim)
            if (ctx is None or not cfg.use_context)
            else np.asarray(ctx, dtype=np.float64)
        )
        feat_a = np.asarray(row.feat_a, dtype=np.float64)
        u_in = affine_forward(self.affine, ctx_vec, u_emb) if self.affine is not None else u_emb
        x = np.concatenate([u_in, a_emb, ctx_vec, feat_a])
        xq = qnn_forward(self.qnn, x) if self.qnn is not None else x
        dot_feat = float(np.dot(ctx_vec, feat_a))
        dense_in = np.concatenate([xq, [dot_feat]])
        pre = self.w1 @ dense_in + self.b1
        h = np.maximum(pre, 0.0)
        logit = float(self.w2 @ h + self.b2)
        return {
            "u_emb": u_emb,
            "a_emb": a_emb,
            "ctx": ctx_vec,
            "x": x,
            "dense_in": dense_in,
            "pre": pre,
            "h": h,
            "p": float(_sigmoid(logit)),
        }

    def _step(self, row, ctx: np.ndarray | None, label: int) -> float:
        cfg = self.config
        fwd = self._forward(row, ctx)
        p = fwd["p"]
        eps = 1e-12
        loss = -(label * math.log(p + eps) + (1 - label) * math.log(1 - p + eps))
        dlogit = p - label

        dw2 = dlogit * fwd["h"]
        db2 = dlogit
        dh = dlogit * self.w2
        dpre = dh * (fwd["pre"] > 0.0)
        dw1 = np.outer(dpre, fwd["dense_in"])
        db1 = dpre
        d_dense = self.w1.T @ dpre

        k = cfg.interaction_width
        dxq = d_dense[:k]
        if self.qnn is not None:
            dw_qnn, dx = qnn_backward(self.qnn, fwd["x"], dxq)
            self.qnn.w -= cfg.lr_dense * dw_qnn
        else:
            dx = dxq
        ds = cfg.d_sparse
        d_u_in = dx[:ds]
        d_a_emb = dx[ds : 2 * ds]
        if self.affine is not None:
            grads = affine_backward(self.affine, fwd["ctx"], fwd["u_emb"], d_u_in)
            for name, g in grads.params.items():
                self.affine.params[name] = self.affine.params[name] - cfg.lr_dense * g
            d_u_emb = grads.d_feature
        else:
            d_u_emb = d_u_in

        self.w1 -= cfg.lr_dense * dw1
        self.b1 -= cfg.lr_dense * db1
        self.w2 -= cfg.lr_dense * dw2
        self.b2 -= cfg.lr_dense * db2
        lr_sparse = cfg.lr_sparse * self._sparse_lr_mult
        self.user_table[row.user_id] = fwd["u_emb"] - lr_sparse * d_u_emb
        self.ad_table[row.ad_id] = fwd["a_emb"] - lr_sparse * d_a_emb
        return loss

    def train_pass(
        self,
        rows: Sequence,
        contexts: np.ndarray | None = None,
        sparse_lr_multiplier: float = 1.0,
        record_loss: bool = False,
    ) -> float:
        """One SGD pass in the given order; rows must be time-ordered.

        With ``record_loss`` each row's observed log-loss is written back to
        ``row.loss`` (the forgetting signal used by chunk sampling).
        """
        last_ts = None
        for row in rows:
            if last_ts is not None and row.ts_hour < last_ts:
                raise ValueError("rows must be sorted by ts_hour")
            last_ts = row.ts_hour
        self._sparse_lr_mult = sparse_lr_multiplier
        total = 0.0
        try:
            for i, row in enumerate(rows):
                ctx = None if contexts is None else contexts[i]
                loss = self._step(row, ctx, row.label)
                if record_loss:
                    row.loss = loss
                total += loss
        finally:
            self._sparse_lr_mult = 1.0
        return total / max(1, len(rows))

    def predict_proba(self, rows: Sequence, contexts: np.ndarray | None = None) -> np.ndarray:
        out = np.empty(len(rows))
        for i, row in enumerate(rows):
            ctx = None if contexts is None else contexts[i]
            out[i] = self._forward(row, ctx)["p"]
        return out
