"""Context-conditioned modulation layers and their analytic gradients.

Two layers operate on a retrieved-history context vector c:

* Affine: a small MLP trunk (RMS-normalized residual blocks) maps c to
  per-dimension scale gamma and shift beta, applied elementwise to a feature
  embedding e. The final projection starts at zero with bias (1, 0), so the
  layer is an exact identity pass-through at initialization and the model
  learns when to deviate.
* Quadratic: a ReLU-gated Hadamard layer with per-head weight slicing,
  ``out_h = X_h * relu(W_h X) + X_h`` where each head's gate consumes the full
  input but produces only its own slice, cutting gate multiplies by the head
  count relative to full-width heads.

Math is float64 throughout so finite-difference checks at h = 1e-4 are clean.
No autodiff: backward passes are hand-derived and verified against central
differences in the tests. ReLU subgradient at exactly 0 is 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch

RMS_EPS = 1e-8


@dataclass(frozen=True)
class EmberContext:
    """The pooled lifelong-context vector driving modulation."""

    c: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        c = np.asarray(self.c, dtype=np.float64)
        if c.ndim != 1 or not np.all(np.isfinite(c)):
            raise DimensionMismatch("context must be a finite 1-D vector")
        c.setflags(write=False)
        object.__setattr__(self, "c", c)


def pool_context(embs: np.ndarray) -> EmberContext:
    """Mean-pool retrieved doc embeddings (rows) into one context vector."""
    m = np.asarray(embs, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0:
        raise DimensionMismatch(f"expected a nonempty 2-D matrix, got shape {m.shape}")
    return EmberContext(c=m.sum(axis=0) / m.shape[0])


def _ctx_array(c) -> np.ndarray:
    if isinstance(c, EmberContext):
        return c.c
    return np.asarray(c, dtype=np.float64)


class AffineHead:
    """MLP head mapping context -> (gamma, beta) for one modulated feature.

    Trunk: input projection, then ``blocks`` residual units of
    ``z += W2 relu(W1 (rmsnorm(z) * g) + b1) + b2``. Output projection is
    zero-initialized with bias (1, 0) so gamma(c) = 1 and beta(c) = 0 exactly
    for every c until training moves the weights.
    """

    def __init__(
        self,
        context_dim: int,
        feature_dim: int,
        hidden: int = 64,
        blocks: int = 2,
        seed: int = 0,
    ) -> None:
        if context_dim < 1 or feature_dim < 1 or hidden < 1 or blocks < 0:
            raise ValueError("context_dim, feature_dim, hidden must be >= 1")
        self.context_dim = context_dim
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.blocks = blocks
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        p: dict[str, np.ndarray] = {}
        p["w_in"] = rng.normal(0.0, 1.0 / math.sqrt(context_dim), (hidden, context_dim))
        p["b_in"] = np.zeros(hidden)
        for i in range(blocks):
            p[f"g{i}"] = np.ones(hidden)
            p[f"w1_{i}"] = rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, hidden))
            p[f"b1_{i}"] = np.zeros(hidden)
            p[f"w2_{i}"] = rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, hidden))
            p[f"b2_{i}"] = np.zeros(hidden)
        p["w_out"] = np.zeros((2 * feature_dim, hidden))
        p["b_out"] = np.concatenate([np.ones(feature_dim), np.zeros(feature_dim)])
        self.params = p

    def modulation(self, c) -> tuple[np.ndarray, np.ndarray]:
        """(gamma, beta) for a context vector."""
        gamma, beta, _ = self._forward_trunk(_ctx_array(c))
        return gamma, beta

    def _forward_trunk(self, c: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict]:
        if c.shape[0] != self.context_dim:
            raise DimensionMismatch(f"context dim {c.shape[0]} != {self.context_dim}")
        p = self.params
        z = p["w_in"] @ c + p["b_in"]
        cache: dict = {"c": c, "z0": z, "blocks": []}
        for i in range(self.blocks):
            m = float(np.mean(z * z))
            s = 1.0 / math.sqrt(m + RMS_EPS)
            nz = z * s
            u = nz * p[f"g{i}"]
            a = p[f"w1_{i}"] @ u + p[f"b1_{i}"]
            r = np.maximum(a, 0.0)
            z_next = z + p[f"w2_{i}"] @ r + p[f"b2_{i}"]
            cache["blocks"].append({"z": z, "s": s, "nz": nz, "u": u, "a": a, "r": r})
            z = z_next
        cache["z_final"] = z
        out = p["w_out"] @ z + p["b_out"]
        gamma = out[: self.feature_dim]
        beta = out[self.feature_dim :]
        return gamma, beta, cache

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        return dict(self.params)

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, value in arrays.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name}")
            if value.shape != self.params[name].shape:
                raise DimensionMismatch(f"{name}: shape {value.shape} != {self.params[name].shape}")
            self.params[name] = np.asarray(value, dtype=np.float64)


@dataclass
class AffineGrads:
    """Gradients from one affine backward pass."""

    params: dict[str, np.ndarray]
    d_context: np.ndarray
    d_feature: np.ndarray


def affine_forward(head: AffineHead, c, e) -> np.ndarray:
    """``gamma(c) * e + beta(c)``, elementwise; O(d) per feature."""
    ev = np.asarray(e, dtype=np.float64)
    if ev.shape[0] != head.feature_dim:
        raise DimensionMismatch(f"feature dim {ev.shape[0]} != {head.feature_dim}")
    gamma, beta, _ = head._forward_trunk(_ctx_array(c))
    return gamma * ev + beta


def affine_backward(head: AffineHead, c, e, upstream) -> AffineGrads:
    """Analytic gradients of ``dot(upstream, affine_forward(head, c, e))``."""
    cv = _ctx_array(c)
    ev = np.asarray(e, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    if ev.shape != up.shape or ev.shape[0] != head.feature_dim:
        raise DimensionMismatch("feature/upstream shape mismatch")
    gamma, _, cache = head._forward_trunk(cv)
    p = head.params
    grads: dict[str, np.ndarray] = {}

    d_gamma = up * ev
    d_beta = up
    d_feature = up * gamma
    dp = np.concatenate([d_gamma, d_beta])
    grads["w_out"] = np.outer(dp, cache["z_final"])
    grads["b_out"] = dp
    dz = p["w_out"].T @ dp

    for i in reversed(range(head.blocks)):
        blk = cache["blocks"][i]
        grads[f"w2_{i}"] = np.outer(dz, blk["r"])
        grads[f"b2_{i}"] = dz.copy()
        dr = p[f"w2_{i}"].T @ dz
        da = dr * (blk["a"] > 0.0)
        grads[f"w1_{i}"] = np.outer(da, blk["u"])
        grads[f"b1_{i}"] = da
        du = p[f"w1_{i}"].T @ da
        grads[f"g{i}"] = du * blk["nz"]
        dnz = du * p[f"g{i}"]
        z, s = blk["z"], blk["s"]
        h = z.shape[0]
        dz_norm = s * dnz - (s**3 / h) * z * float(np.dot(z, dnz))
        dz = dz + dz_norm

    grads["w_in"] = np.outer(dz, cache["c"])
    grads["b_in"] = dz
    d_context = p["w_in"].T @ dz
    return AffineGrads(params=grads, d_context=d_context, d_feature=d_feature)


class QnnLayer:
    """Per-head ReLU-gated quadratic layer over a width-K input.

    Head h owns slice ``X_h`` of width K/H and a weight matrix of shape
    (K/H, K); the gate consumes the full input, so heads interact across
    slices while the gate multiply count stays at K*K total.
    """

    def __init__(self, width: int, heads: int = 1, seed: int = 0, scale: float = 0.0) -> None:
        if heads < 1 or width < 1 or width % heads != 0:
            raise DimensionMismatch(f"width {width} must be divisible by heads {heads}")
        self.width = width
        self.heads = heads
        self.slice_width = width // heads
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        if scale == 0.0:
            self.w = np.zeros((heads, self.slice_width, width))
        else:
            self.w = rng.normal(0.0, scale / math.sqrt(width), (heads, self.slice_width, width))

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        return {"w": self.w}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        w = np.asarray(arrays["w"], dtype=np.float64)
        if w.shape != self.w.shape:
            raise DimensionMismatch(f"w: shape {w.shape} != {self.w.shape}")
        self.w = w


def qnn_forward(layer: QnnLayer, x) -> np.ndarray:
    """Per head: ``X_h * relu(W_h X) + X_h``. Zero weights give the identity."""
    xv = np.asarray(x, dtype=np.float64)
    if xv.shape[0] != layer.width:
        raise DimensionMismatch(f"input width {xv.shape[0]} != {layer.width}")
    out = np.empty_like(xv)
    sw = layer.slice_width
    for h in range(layer.heads):
        xh = xv[h * sw : (h + 1) * sw]
        gate = np.maximum(layer.w[h] @ xv, 0.0)
        out[h * sw : (h + 1) * sw] = xh * gate + xh
    return out


def qnn_backward(layer: QnnLayer, x, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (d_weights, d_input) of ``dot(upstream, qnn_forward(x))``."""
    xv = np.asarray(x, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    if xv.shape != up.shape or xv.shape[0] != layer.width:
        raise DimensionMismatch("input/upstream shape mismatch")
    dw = np.zeros_like(layer.w)
    dx = np.zeros_like(xv)
    sw = layer.slice_width
    for h in range(layer.heads):
        sl = slice(h * sw, (h + 1) * sw)
        xh = xv[sl]
        pre = layer.w[h] @ xv
        gate = np.maximum(pre, 0.0)
        g_h = up[sl]
        dx[sl] += g_h * (gate + 1.0)
        d_pre = (g_h * xh) * (pre > 0.0)
        dw[h] = np.outer(d_pre, xv)
        dx += layer.w[h].T @ d_pre
    return dw, dx


def head_cost(layer: QnnLayer) -> int:
    """Exact gate multiply count per forward: H * (K/H) * K = K**2.

    A full-width head would cost K*K, so H of them cost H*K*K; per-head
    slicing keeps the total at K**2, a 1/H reduction.
    """
    return layer.heads * layer.slice_width * layer.width


def save_checkpoint(arrays: dict[str, np.ndarray], path: str | Path) -> None:
    """Write a flat float32 LE tensor file plus a JSON manifest.

    ``path`` is the manifest; the tensor blob lands next to it with a ``.bin``
    suffix. Offsets are in bytes into the blob.
    """
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    manifest: dict[str, dict] = {}
    offset = 0
    with open(bin_path, "wb") as fh:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            manifest[name] = {"shape": list(arr.shape), "offset": offset}
            fh.write(arr.tobytes())
            offset += arr.nbytes
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"tensors": manifest, "dtype": "<f4"}, fh, sort_keys=True, indent=2)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Inverse of :func:`save_checkpoint`; returns float64 arrays."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    blob = Path(path).with_suffix(".bin").read_bytes()
    out: dict[str, np.ndarray] = {}
    for name, spec in manifest["tensors"].items():
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=spec["offset"])
        out[name] = arr.reshape(shape).astype(np.float64)
    return out
